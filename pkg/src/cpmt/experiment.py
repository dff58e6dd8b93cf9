"""Run configuration and the per-seed, per-fold experiment runner behind ``cpmt train``."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FragmentStore, Manifest, group_split, n_folds
from .errors import ConfigError, DataError
from .metrics import EvalReport, metrics, summary_rows, write_csv
from .model import CPMT, Ablations, CPMTConfig
from .train import TrainConfig, evaluate, predict, train
from .verbal import PromptContext, client_from_env, collect_reasoning

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    manifest: str = ""
    test_frac: float = 0.1
    valid_frac: float = 0.2
    split_seed: int = 0
    folds: list[int] | None = None  # None: fold 0 only; [] is invalid

    def __post_init__(self):
        if self.folds is not None and len(self.folds) == 0:
            raise ConfigError("data.folds must be null or a nonempty list")


@dataclass
class VerbalConfig:
    fixture: str | None = None  # fixture name from the manifest, or a path
    llm_model: str = "gpt-3.5-turbo"


SECTIONS = {"model": CPMTConfig, "train": TrainConfig, "data": DataConfig, "verbal": VerbalConfig}


@dataclass
class RunConfig:
    model: CPMTConfig = field(default_factory=CPMTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    verbal: VerbalConfig = field(default_factory=VerbalConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = section.to_dict() if hasattr(section, "to_dict") else dataclasses.asdict(section)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}; expected {sorted(SECTIONS)}")
        parts = {}
        for name, kind in SECTIONS.items():
            body = dict(d.get(name) or {})
            known = {f.name for f in dataclasses.fields(kind)}
            bad = sorted(set(body) - known)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {bad}")
            try:
                parts[name] = kind(**body)
            except TypeError as exc:
                raise ConfigError(f"bad [{name}] section: {exc}") from None
        return cls(**parts)

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for item in overrides or []:
            apply_override(raw, item)
        rc = cls.from_dict(raw)
        if rc.data.manifest and not os.path.isabs(rc.data.manifest):
            rc.data.manifest = str((Path(path).parent / rc.data.manifest).resolve())
        return rc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")


def apply_override(raw: dict, item: str) -> None:
    """Apply ``section.key=value`` to a raw config dict; the value is parsed as JSON when it can be."""
    key, sep, value = item.partition("=")
    parts = key.strip().split(".")
    if not sep or len(parts) < 2 or not all(parts):
        raise ConfigError(f"override {item!r} must look like section.key=value")
    if parts[0] not in SECTIONS:
        raise ConfigError(f"override {item!r}: unknown section {parts[0]!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = parsed


# -- verbal tokens ---------------------------------------------------------------------

def verbal_token_ids(manifest: Manifest, model: CPMT, fixture: str | None, llm_model: str) -> list[np.ndarray]:
    """Token ids of each fragment's reasoning text, queried once per entity prompt."""
    if model.verbal is None:
        return [np.zeros(0, dtype=np.int64) for _ in manifest.fragments]
    path = None
    if fixture is not None:
        path = manifest.fixture_path(fixture) if fixture in manifest.llm_fixtures else Path(fixture)
    client = client_from_env(path, llm_model)
    out = []
    for rec in manifest.fragments:
        ctx = rec.get("context")
        if ctx is None:
            out.append(np.zeros(0, dtype=np.int64))
            continue
        pc = PromptContext.from_dict(ctx)
        out.append(model.verbal.token_ids(collect_reasoning(pc, client).text(pc.entities)))
    return out


# -- runner -----------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    fold: int
    test: EvalReport
    train_report: EvalReport | None
    loss_curve: list[float]
    final_loss: float
    run_dir: str | None = None

    @property
    def name(self) -> str:
        return f"seed{self.seed}-fold{self.fold}"


def _store_for(manifest: Manifest, cfg: CPMTConfig, rc: RunConfig, model: CPMT) -> FragmentStore:
    store = FragmentStore(manifest, cfg.modalities)
    if model.verbal is not None:
        store.attach_tokens(verbal_token_ids(manifest, model, rc.verbal.fixture, rc.verbal.llm_model))
    return store


def run_one(rc: RunConfig, seed: int, fold: int, run_dir=None, resume: bool = False,
            manifest: Manifest | None = None) -> RunResult:
    """Train and test one (seed, fold) cell; artifacts go to ``run_dir`` when given."""
    manifest = manifest or Manifest.load(rc.data.manifest)
    cfg = dataclasses.replace(rc.model, seed=seed, num_classes=manifest.num_classes)
    tcfg = dataclasses.replace(rc.train, seed=seed)
    split = group_split(manifest, rc.data.test_frac, rc.data.valid_frac, rc.data.split_seed, fold)
    model = CPMT(cfg)
    store = _store_for(manifest, cfg, rc, model)
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    res = train(model, store, split, tcfg, out, resume=resume)
    test = evaluate(model, store, split.test, tcfg.eval_batch_size)
    if out is not None:
        preds, _ = predict(model, store, split.test, tcfg.eval_batch_size)
        ids = manifest.ids
        write_predictions(out / "test_predictions.json", [ids[i] for i in split.test],
                          store.labels[split.test], preds)
        (out / "loss_curve.json").write_text(json.dumps(res.to_dict(), indent=1), encoding="utf-8")
        test.to_json(out / "test_report.json")
        if res.train_report is not None:
            res.train_report.to_json(out / "train_report.json")
        (out / "split.json").write_text(json.dumps(dataclasses.asdict(split)), encoding="utf-8")
    return RunResult(seed, fold, test, res.train_report, res.loss_curve, res.final_loss,
                     str(out) if out is not None else None)


def write_predictions(path, fragment_ids, y_true, y_pred) -> None:
    body = {"fragment_ids": list(fragment_ids), "y_true": [int(v) for v in y_true],
            "y_pred": [int(v) for v in y_pred]}
    Path(path).write_text(json.dumps(body), encoding="utf-8")


def read_predictions(path) -> dict:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"prediction file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"prediction file {path} is not valid JSON: {exc}") from None
    for key in ("fragment_ids", "y_pred"):
        if key not in body:
            raise DataError(f"prediction file {path} lacks {key!r}")
    return body


def _run_cell(args):
    rc_dict, seed, fold, run_dir, resume = args
    return run_one(RunConfig.from_dict(rc_dict), seed, fold, run_dir, resume)


def run_experiment(rc: RunConfig, seeds, run_dir, ablation: str | None = None, jobs: int = 1,
                   resume: bool = False) -> list[RunResult]:
    """Every (seed, fold) cell of ``rc`` with ``ablation`` applied; writes ``summary.csv``."""
    rc = copy.deepcopy(rc)
    if ablation is not None:
        rc.model.ablations = Ablations.named(ablation)
    manifest = Manifest.load(rc.data.manifest)
    total = n_folds(len(set(manifest.group_ids)), rc.data.test_frac)
    folds = rc.data.folds if rc.data.folds is not None else [0]
    for f in folds:
        if not 0 <= f < total:
            raise ConfigError(f"fold {f} out of range; {total} folds available")
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc.save(out / "config.json")
    cells = [(rc.to_dict(), int(s), int(f), str(out / f"seed{s}" / f"fold{f}"), resume)
             for s in seeds for f in folds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = []
    for s in seeds:
        mine = [r for r in results if r.seed == s]
        rep = mine[0].test if len(mine) == 1 else _pool_folds([r.test for r in mine])
        rows.append((f"seed{s}", rep))
    write_csv(out / "summary.csv", summary_rows(rows, manifest.class_names))
    return results


def _pool_folds(reports: list[EvalReport]) -> EvalReport:
    """Metrics of the concatenated fold test sets, rebuilt from the summed confusion matrix."""
    cm = np.sum([np.asarray(r.confusion) for r in reports], axis=0)
    C = cm.shape[0]
    yt = np.repeat(np.repeat(np.arange(C), C), cm.ravel())
    yp = np.repeat(np.tile(np.arange(C), C), cm.ravel())
    return metrics(yt, yp, C)
