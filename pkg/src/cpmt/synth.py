"""Synthetic dyadic datasets with planted structure.

Three tasks share one generator:

``contingency``
    Labels encode who, if anyone, follows whom.  Class 0: independent
    streams.  Class 1: the other person (B) follows self (A), i.e.
    ``B[t+L] = ρ·W A[t] + √(1-ρ²)·ε``.  Class 2: the mirror image
    ``A[t+L] = ρ·W B[t] + √(1-ρ²)·ε``.  ``W`` is a fixed orthogonal map per
    modality, so marginals stay standard normal and only the lagged
    cross-person coupling carries the label.
``longrange``
    An early motif (segment 1) and a late motif (segment ``1 + horizon``)
    each carry one bit; the class is their sum (0, 1 or 2).  Class 1 is
    split evenly between the two bit orders.  The default balance is that of
    two fair bits, (1/4, 1/2, 1/4), under which either bit alone predicts
    the class with accuracy at most 1/2.
``verbal``
    Features carry a weak class-dependent offset; the prompt context of
    every fragment gets a canned LLM response that names the class in the
    "informative" fixture and is constant in the "uninformative" one.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Manifest
from .errors import ConfigError, DataError
from .tensorio import write_tensor
from .verbal import PromptContext, build_prompt, prompt_hash

TASKS = ("contingency", "longrange", "verbal")
CLASS_NAMES = {
    "contingency": ["none", "other-follows-self", "self-follows-other"],
    "longrange": ["both-absent", "one-present", "both-present"],
    "verbal": ["low", "medium", "high"],
}
BALANCE_PRESETS = {"dami-like": (0.03, 0.27, 0.70), "uniform": (1 / 3, 1 / 3, 1 / 3)}
DEFAULT_BALANCE = {"longrange": (0.25, 0.5, 0.25)}
VERBAL_CUES = {
    0: ["the child looks away and ignores the book", "the child seems distracted and disengaged"],
    1: ["the child glances at the book now and then", "the child is partly attentive to the story"],
    2: ["the child points at the pictures and answers eagerly", "both are absorbed in the story together"],
}
FILLER = ["the parent turns the page", "the parent reads aloud", "they sit side by side", "the room is quiet"]
NEUTRAL_TEXT = "the parent and the child are reading a book together"


@dataclass
class SynthSpec:
    n_fragments: int = 200
    T: int = 32
    d_a: int = 8
    d_v: int = 8
    contingency_strength: float = 0.8
    lag: int = 3
    longrange_horizon: int | None = None
    segments: int = 4
    class_balance: tuple | str | None = None  # None: task default
    seed: int = 0
    task: str = "contingency"
    noise: float = 0.0
    n_groups: int = 10
    motif_strength: float = 1.0
    feature_signal: float = 0.15
    frame_rate: float = 3.2
    name: str = ""

    def __post_init__(self):
        if self.class_balance is None:
            self.class_balance = DEFAULT_BALANCE.get(self.task, BALANCE_PRESETS["uniform"])
        if isinstance(self.class_balance, str):
            if self.class_balance not in BALANCE_PRESETS:
                raise ConfigError(f"unknown balance preset {self.class_balance!r}")
            self.class_balance = BALANCE_PRESETS[self.class_balance]
        self.class_balance = tuple(float(b) for b in self.class_balance)
        if self.longrange_horizon is None:
            self.longrange_horizon = self.segments - 1
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.n_fragments < 1 or self.T < 1 or self.d_a < 1 or self.d_v < 1:
            raise ConfigError("n_fragments, T, d_a and d_v must be positive")
        if not 0.0 <= self.contingency_strength <= 1.0:
            raise ConfigError(f"contingency strength must lie in [0, 1], got {self.contingency_strength}")
        if not 0 < self.lag < self.T:
            raise ConfigError(f"lag must satisfy 0 < L < T, got L={self.lag}, T={self.T}")
        if self.segments < 1 or self.segments > self.T:
            raise ConfigError(f"segments must lie in [1, T], got {self.segments}")
        if not 1 <= self.longrange_horizon < self.segments and self.task == "longrange":
            raise ConfigError(f"longrange_horizon must lie in [1, segments-1], got {self.longrange_horizon}")
        if self.n_groups < 1 or self.n_groups > self.n_fragments:
            raise ConfigError(f"n_groups must lie in [1, n_fragments], got {self.n_groups}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES[self.task])


def class_counts(n: int, balance) -> np.ndarray:
    """Exact per-class counts by largest remainder."""
    b = np.asarray(balance, dtype=np.float64)
    if b.ndim != 1 or np.any(b < 0) or not np.isclose(b.sum(), 1.0, atol=1e-6):
        raise DataError(f"impossible class balance {tuple(balance)}: entries must be >= 0 and sum to 1")
    raw = b * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def contingency_maps(spec: SynthSpec) -> dict[str, np.ndarray]:
    """The fixed linear images ``W`` per modality (row-vector convention ``x @ W``)."""
    rng = np.random.default_rng([spec.seed, 1])
    return {"audio": orthogonal(rng, spec.d_a), "video": orthogonal(rng, spec.d_v)}


def _segment_edges(T: int, K: int) -> list[tuple[int, int]]:
    from .model import segment_bounds

    return segment_bounds(T, K)


def _couple(leader: np.ndarray, follower: np.ndarray, W: np.ndarray, rho: float, lag: int,
            rng: np.random.Generator) -> np.ndarray:
    out = follower.copy()
    eps = rng.normal(size=follower[lag:].shape)
    out[lag:] = rho * (leader[:-lag] @ W) + np.sqrt(max(0.0, 1.0 - rho * rho)) * eps
    return out


def _fragment_features(spec, label, maps, motifs, rng):
    dims = {"audio": spec.d_a, "video": spec.d_v}
    feats = {p: {m: rng.normal(size=(spec.T, d)) for m, d in dims.items()} for p in ("A", "B")}
    if spec.task == "contingency":
        for m in dims:
            if label == 1:
                feats["B"][m] = _couple(feats["A"][m], feats["B"][m], maps[m], spec.contingency_strength,
                                        spec.lag, rng)
            elif label == 2:
                feats["A"][m] = _couple(feats["B"][m], feats["A"][m], maps[m], spec.contingency_strength,
                                        spec.lag, rng)
    elif spec.task == "longrange":
        bits = {0: (0, 0), 2: (1, 1)}.get(label) or ((0, 1) if rng.random() < 0.5 else (1, 0))
        edges = _segment_edges(spec.T, spec.segments)
        for (s, e), key in ((edges[0], ("early", bits[0])), (edges[spec.longrange_horizon], ("late", bits[1]))):
            for p in feats:
                for m in dims:
                    feats[p][m][s:e] += spec.motif_strength * motifs[m][key]
    else:
        for m in dims:
            feats["A"][m] += spec.feature_signal * motifs[m][("class", label)]
    if spec.noise > 0:
        for p in feats:
            for m in dims:
                feats[p][m] += spec.noise * rng.normal(size=feats[p][m].shape)
    return feats


def _motifs(spec: SynthSpec) -> dict:
    rng = np.random.default_rng([spec.seed, 2])
    out = {}
    for m, d in (("audio", spec.d_a), ("video", spec.d_v)):
        table = {}
        for key in [("early", 0), ("early", 1), ("late", 0), ("late", 1)] + [("class", c) for c in range(3)]:
            v = rng.normal(size=d)
            table[key] = v / np.linalg.norm(v) * np.sqrt(d) / 2
        out[m] = table
    return out


def _context(fid: str, rng: np.random.Generator) -> PromptContext:
    turns = int(rng.integers(1, 5))
    history = [("parent" if t % 2 == 0 else "child", f"utterance {t} of {fid}") for t in range(turns)]
    return PromptContext.windowed("parent-child", "story reading", history, "joint engagement",
                                  ["parent", "child", "both"])


def _reasoning(label: int, rng: np.random.Generator) -> str:
    cue = VERBAL_CUES[label][int(rng.integers(len(VERBAL_CUES[label])))]
    filler = FILLER[int(rng.integers(len(FILLER)))]
    return f"{filler} and {cue}"


def synth_generate(spec: SynthSpec, out_dir: str | os.PathLike, force: bool = False) -> Manifest:
    """Write tensor files and ``manifest.json`` under ``out_dir``; deterministic in ``spec.seed``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DataError(f"output directory {out} is not empty (use force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    if len(spec.class_balance) != spec.num_classes:
        raise DataError(f"class balance has {len(spec.class_balance)} entries, task has {spec.num_classes} classes")
    counts = class_counts(spec.n_fragments, spec.class_balance)

    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.num_classes), counts)
    rng.shuffle(labels)
    groups = rng.permutation(np.arange(spec.n_fragments) % spec.n_groups)
    maps = contingency_maps(spec)
    motifs = _motifs(spec)
    fixtures: dict[str, dict[str, str]] = {"informative": {}, "uninformative": {}}
    fragments = []
    for i, label in enumerate(labels):
        fid = f"f{i:05d}"
        frag_rng = np.random.default_rng([spec.seed, 3, i])
        feats = _fragment_features(spec, int(label), maps, motifs, frag_rng)
        fdir = out / fid
        fdir.mkdir()
        persons = []
        for pid, role in (("A", "self"), ("B", "other")):
            streams = {}
            for m in ("audio", "video"):
                rel = f"{fid}/{pid}_{m}.cpmt"
                write_tensor(out / rel, feats[pid][m].astype(np.float32))
                streams[m] = {"path": rel, "frame_rate": spec.frame_rate}
            persons.append({"person_id": pid, "role": role, "streams": streams})
        rec = {"id": fid, "label": int(label), "group_id": f"g{int(groups[i]):02d}",
               "duration_s": spec.T / spec.frame_rate, "persons": persons}
        if spec.task == "verbal":
            ctx = _context(fid, frag_rng)
            rec["context"] = ctx.to_dict()
            for entity in ctx.entities:
                key = prompt_hash(build_prompt(ctx, entity))
                fixtures["informative"][key] = _reasoning(int(label), frag_rng)
                fixtures["uninformative"][key] = NEUTRAL_TEXT
        fragments.append(rec)

    llm = {}
    if spec.task == "verbal":
        (out / "fixtures").mkdir()
        for name, table in fixtures.items():
            rel = f"fixtures/{name}.json"
            (out / rel).write_text(json.dumps(table, indent=0, sort_keys=True), encoding="utf-8")
            llm[name] = rel
    meta = {"synth_spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}}
    manifest = Manifest(spec.name or f"synth-{spec.task}", CLASS_NAMES[spec.task], fragments,
                        {"audio": spec.d_a, "video": spec.d_v}, out, llm, meta)
    manifest.save(out / "manifest.json")
    return manifest
