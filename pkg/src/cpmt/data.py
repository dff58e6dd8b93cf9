"""Dataset manifests, fragment loading, BOSS labelling and group-wise splits.

Manifest (``manifest.json``, paths relative to its directory)::

    {
      "format": "cpmt-manifest/1",
      "dataset_name": "synth-contingency",
      "class_names": ["none", "self-leads", "other-leads"],
      "modality_dims": {"audio": 8, "video": 8},
      "llm_fixtures": {"informative": "fixtures/informative.json"},   # optional
      "fragments": [
        {"id": "f00000", "label": 2, "group_id": "g03", "duration_s": 10.0,
         "persons": [
           {"person_id": "A", "role": "self",
            "streams": {"audio": {"path": "f00000/A_audio.cpmt", "frame_rate": 3.2}, ...}},
           {"person_id": "B", "role": "other", "streams": {...}}],
         "context": {...}}                                            # optional prompt context
      ]
    }
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .crossmodal import ModalityStream
from .errors import ConfigError, DataError
from .model import Batch
from .tensorio import read_header, read_tensor

MANIFEST_FORMAT = "cpmt-manifest/1"
ROLES = ("self", "other")


@dataclass
class PersonStream:
    person_id: str
    role: str
    streams: list[ModalityStream]
    group_id: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"person role must be one of {ROLES}, got {self.role!r}")
        mods = [s.modality for s in self.streams]
        if len(set(mods)) != len(mods):
            raise DataError(f"person {self.person_id!r} has duplicate modalities {mods}")
        if not self.group_id:
            raise DataError(f"person {self.person_id!r} has an empty group_id")

    def stream(self, modality: str) -> ModalityStream:
        for s in self.streams:
            if s.modality == modality:
                return s
        raise DataError(f"person {self.person_id!r} has no {modality} stream")


@dataclass
class Fragment:
    persons: list[PersonStream]
    label: int
    duration_s: float = 10.0
    id: str = ""
    context: dict | None = None

    def validate(self, num_classes: int) -> None:
        if len(self.persons) != 2:
            raise DataError(f"fragment {self.id}: expected 2 persons, got {len(self.persons)}")
        if self.persons[0].group_id != self.persons[1].group_id:
            raise DataError(f"fragment {self.id}: persons belong to different groups")
        if not 0 <= self.label < num_classes:
            raise DataError(f"fragment {self.id}: label {self.label} outside [0, {num_classes})")


@dataclass
class Manifest:
    dataset_name: str
    class_names: list[str]
    fragments: list[dict]
    modality_dims: dict[str, int] = field(default_factory=dict)
    root: Path = field(default_factory=Path)
    llm_fixtures: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def group_ids(self) -> list[str]:
        return [f["group_id"] for f in self.fragments]

    @property
    def labels(self) -> np.ndarray:
        return np.array([f["label"] for f in self.fragments], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [f["id"] for f in self.fragments]

    def index_of(self, fragment_id: str) -> int:
        for i, f in enumerate(self.fragments):
            if f["id"] == fragment_id:
                return i
        raise DataError(f"fragment {fragment_id!r} not in manifest {self.dataset_name!r}")

    def fixture_path(self, name: str) -> Path:
        if name not in self.llm_fixtures:
            raise DataError(f"manifest has no LLM fixture {name!r}; available: {sorted(self.llm_fixtures)}")
        return self.root / self.llm_fixtures[name]

    # -- persistence ---------------------------------------------------------
    def to_json(self) -> dict:
        out = {
            "format": MANIFEST_FORMAT,
            "dataset_name": self.dataset_name,
            "class_names": list(self.class_names),
            "modality_dims": dict(self.modality_dims),
            "fragments": self.fragments,
        }
        if self.llm_fixtures:
            out["llm_fixtures"] = dict(self.llm_fixtures)
        if self.meta:
            out["meta"] = self.meta
        return out

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=False) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike, validate: bool = True) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        if raw.get("format") != MANIFEST_FORMAT:
            raise DataError(f"{path}: unsupported manifest format {raw.get('format')!r}")
        for key in ("dataset_name", "class_names", "fragments"):
            if key not in raw:
                raise DataError(f"{path}: missing key {key!r}")
        m = cls(raw["dataset_name"], list(raw["class_names"]), list(raw["fragments"]),
                {k: int(v) for k, v in raw.get("modality_dims", {}).items()}, path.parent,
                dict(raw.get("llm_fixtures", {})), dict(raw.get("meta", {})))
        if validate:
            m.validate()
        return m

    def validate(self) -> None:
        """Every referenced file exists and declares the manifest's feature width."""
        seen = set()
        for f in self.fragments:
            if f["id"] in seen:
                raise DataError(f"duplicate fragment id {f['id']!r}")
            seen.add(f["id"])
            if not 0 <= int(f["label"]) < self.num_classes:
                raise DataError(f"fragment {f['id']}: label {f['label']} outside [0, {self.num_classes})")
            if not f.get("group_id"):
                raise DataError(f"fragment {f['id']}: empty group_id")
            if len(f["persons"]) != 2:
                raise DataError(f"fragment {f['id']}: expected 2 persons")
            for p in f["persons"]:
                for mod, s in p["streams"].items():
                    fp = self.root / s["path"]
                    if not fp.exists():
                        raise DataError(f"fragment {f['id']}: missing tensor file {fp}")
                    shape = read_header(fp)
                    want = self.modality_dims.get(mod)
                    if len(shape) != 2 or (want is not None and shape[-1] != want):
                        raise DataError(f"{fp}: shape {shape} inconsistent with {mod} width {want}")

    def subset(self, indices) -> "Manifest":
        return Manifest(self.dataset_name, self.class_names, [self.fragments[i] for i in indices],
                        self.modality_dims, self.root, self.llm_fixtures, self.meta)

    def load_fragment(self, i: int) -> Fragment:
        rec = self.fragments[i]
        persons = []
        for p in rec["persons"]:
            streams = [ModalityStream(mod, read_tensor(self.root / s["path"]).data, float(s.get("frame_rate", 1.0)))
                       for mod, s in p["streams"].items()]
            persons.append(PersonStream(p["person_id"], p["role"], streams, rec["group_id"]))
        persons.sort(key=lambda ps: ROLES.index(ps.role))
        frag = Fragment(persons, int(rec["label"]), float(rec.get("duration_s", 10.0)), rec["id"], rec.get("context"))
        frag.validate(self.num_classes)
        return frag


class FragmentStore:
    """All fragments of a manifest held in memory, collated on demand into batches."""

    def __init__(self, manifest: Manifest, modalities=None):
        self.manifest = manifest
        self.fragments = [manifest.load_fragment(i) for i in range(len(manifest.fragments))]
        self.modalities = tuple(modalities) if modalities else None
        self.token_ids: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.fragments)

    @property
    def labels(self) -> np.ndarray:
        return np.array([f.label for f in self.fragments], dtype=np.int64)

    def attach_tokens(self, token_ids: list[np.ndarray]) -> None:
        if len(token_ids) != len(self.fragments):
            raise DataError("token id list does not match fragment count")
        self.token_ids = token_ids

    def batch(self, indices) -> Batch:
        indices = list(indices)
        frags = [self.fragments[i] for i in indices]
        persons, rates = [], []
        for p in range(2):
            mods = {}
            fr = {}
            for s in frags[0].persons[p].streams:
                if self.modalities and s.modality not in self.modalities:
                    continue
                arrs = [f.persons[p].stream(s.modality).features for f in frags]
                shapes = {a.shape for a in arrs}
                if len(shapes) != 1:
                    raise DataError(f"cannot batch {s.modality} streams of differing shapes {sorted(shapes)}")
                mods[s.modality] = np.stack(arrs)
                fr[s.modality] = s.frame_rate
            persons.append(mods)
            rates.append(fr)
        tokens = [self.token_ids[i] for i in indices] if self.token_ids is not None else None
        return Batch(persons, rates, np.array([f.label for f in frags], dtype=np.int64), tokens,
                     [f.id for f in frags])


# -- BOSS labelling ---------------------------------------------------------------

class BossLabel(IntEnum):
    NoCommunication = 0
    AttentionFollowing = 1
    JointAttention = 2


BOSS_THRESHOLD = 30


def boss_labels(matched_count: int) -> BossLabel:
    """More than 30 matched objects: joint attention; 1..30: attention following; 0: none."""
    if isinstance(matched_count, bool) or int(matched_count) != matched_count:
        raise DataError(f"matched object count must be an integer, got {matched_count!r}")
    if matched_count < 0:
        raise DataError(f"matched object count must be >= 0, got {matched_count}")
    if matched_count > BOSS_THRESHOLD:
        return BossLabel.JointAttention
    if matched_count > 0:
        return BossLabel.AttentionFollowing
    return BossLabel.NoCommunication


# -- group-wise splits ---------------------------------------------------------------

def _round_count(frac: float, n: int) -> int:
    return max(1, int(math.floor(frac * n + 0.5)))


@dataclass(frozen=True)
class Split:
    train: list[int]
    valid: list[int]
    test: list[int]
    test_groups: tuple[str, ...] = ()
    valid_groups: tuple[str, ...] = ()
    train_groups: tuple[str, ...] = ()


def split_counts(n_groups: int, test_frac: float = 0.1, valid_frac: float = 0.2) -> tuple[int, int, int]:
    """(test, valid, train) group counts; valid is a fraction of the non-test groups."""
    if n_groups < 3:
        raise DataError(f"group-wise splitting needs >= 3 groups, got {n_groups}")
    n_test = _round_count(test_frac, n_groups)
    n_valid = _round_count(valid_frac, n_groups - n_test)
    n_train = n_groups - n_test - n_valid
    if n_train < 1:
        raise ConfigError(f"fractions test={test_frac}, valid={valid_frac} leave no training group")
    return n_test, n_valid, n_train


def n_folds(n_groups: int, test_frac: float = 0.1) -> int:
    n_test = split_counts(n_groups, test_frac)[0]
    return math.ceil(n_groups / n_test)


def group_split(groups, test_frac: float = 0.1, valid_frac: float = 0.2, seed: int = 0, fold: int = 0) -> Split:
    """Partition fragment indices by group so no group straddles splits.

    ``groups`` is a Manifest or a per-fragment list of group ids.  Test groups
    for fold ``f`` are the f-th block of a seeded permutation, so iterating
    ``fold`` over ``range(n_folds(...))`` puts every group in test exactly once.
    """
    gids = groups.group_ids if isinstance(groups, Manifest) else list(groups)
    uniq = sorted(set(gids))
    n_test, n_valid, _ = split_counts(len(uniq), test_frac, valid_frac)
    folds = math.ceil(len(uniq) / n_test)
    if not 0 <= fold < folds:
        raise ConfigError(f"fold {fold} out of range; {folds} folds available")
    rng = np.random.default_rng(seed)
    perm = [uniq[i] for i in rng.permutation(len(uniq))]
    test_g = perm[fold * n_test:(fold + 1) * n_test]
    rest = [g for g in perm if g not in set(test_g)]
    order = np.random.default_rng([seed, fold]).permutation(len(rest))
    n_valid = min(n_valid, len(rest) - 1)
    valid_g = [rest[i] for i in order[:n_valid]]
    train_g = [rest[i] for i in order[n_valid:]]
    where = {g: "test" for g in test_g} | {g: "valid" for g in valid_g} | {g: "train" for g in train_g}
    out = {"train": [], "valid": [], "test": []}
    for i, g in enumerate(gids):
        out[where[g]].append(i)
    return Split(out["train"], out["valid"], out["test"], tuple(sorted(test_g)), tuple(sorted(valid_g)),
                 tuple(sorted(train_g)))
