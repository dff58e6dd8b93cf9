"""``cpmt`` command line: generate, train, eval, inspect, plot.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import CPMTError, ConfigError, DataError
from .synth import BALANCE_PRESETS, TASKS, SynthSpec, synth_generate

log = logging.getLogger("cpmt")

SELF_FOCUSED, TOKEN_FOCUSED = 0.9, 0.1


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _balance(text: str):
    if text in BALANCE_PRESETS:
        return text
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"balance must be a preset {sorted(BALANCE_PRESETS)} or comma-separated fractions") from None


def _fresh_dir(path: Path, force: bool, what: str) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{what} {path} already exists and is not empty (pass --force or choose a new one)")


# -- generate -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = SynthSpec(
        n_fragments=args.n_fragments, T=args.T, d_a=args.d_a, d_v=args.d_v, contingency_strength=args.rho,
        lag=args.lag, longrange_horizon=args.horizon, segments=args.segments, class_balance=args.balance,
        seed=args.seed, task=args.task, noise=args.noise, n_groups=args.groups, feature_signal=args.feature_signal,
        name=args.name or "",
    )
    manifest = synth_generate(spec, args.out, force=args.force)
    counts = np.bincount(manifest.labels, minlength=manifest.num_classes)
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    for name, c in zip(manifest.class_names, counts):
        print(f"  {name}: {int(c)}")
    return 0


# -- train --------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .experiment import RunConfig, run_experiment

    rc = RunConfig.load(args.config, args.set)
    if args.manifest:
        rc.data.manifest = str(Path(args.manifest).resolve())
    if args.folds is not None:
        rc.data.folds = _folds(args.folds, rc)
    if not rc.data.manifest:
        raise ConfigError("no manifest given (set data.manifest or pass --manifest)")
    out = Path(args.out)
    if not args.resume:
        _fresh_dir(out, args.force, "run directory")
    results = run_experiment(rc, args.seeds, out, args.ablation, jobs=args.jobs, resume=args.resume)
    for r in results:
        print(f"{r.name}: test accuracy {r.test.accuracy:.4f} macro-F1 {r.test.macro_f1:.4f}")
    print(f"summary: {out / 'summary.csv'}")
    return 0


def _folds(text: str, rc) -> list[int]:
    if text != "all":
        return _int_list(text)
    from .data import Manifest, n_folds

    m = Manifest.load(rc.data.manifest, validate=False)
    return list(range(n_folds(len(set(m.group_ids)), rc.data.test_frac)))


# -- eval ---------------------------------------------------------------------------

def _run_config_near(ckpt: Path):
    """The echoed run config of the run that wrote ``ckpt``, if one is found above it."""
    from .experiment import RunConfig

    for parent in list(ckpt.resolve().parents)[:4]:
        if (parent / "config.json").exists():
            try:
                return RunConfig.load(parent / "config.json")
            except ConfigError:
                return None
    return None


def _load_for_eval(args):
    from .data import FragmentStore, Manifest
    from .experiment import verbal_token_ids
    from .train import load_checkpoint

    ckpt_path = Path(args.checkpoint)
    ck = load_checkpoint(ckpt_path)
    model = ck.model()
    model.eval()
    manifest = Manifest.load(args.manifest)
    if manifest.num_classes != model.cfg.num_classes:
        raise DataError(f"manifest has {manifest.num_classes} classes, checkpoint expects {model.cfg.num_classes}")
    store = FragmentStore(manifest, model.cfg.modalities)
    if model.verbal is not None:
        fixture = args.fixture
        if fixture is None:
            rc = _run_config_near(ckpt_path)
            fixture = rc.verbal.fixture if rc else None
        store.attach_tokens(verbal_token_ids(manifest, model, fixture, "gpt-3.5-turbo"))
    return ckpt_path, model, manifest, store


def _split_indices(args, manifest, ckpt_path: Path) -> list[int]:
    from .data import group_split

    if args.split == "all":
        return list(range(len(manifest.fragments)))
    saved = ckpt_path.parent / "split.json"
    if args.fold is None and saved.exists():
        return list(json.loads(saved.read_text(encoding="utf-8"))[args.split])
    split = group_split(manifest, args.test_frac, args.valid_frac, args.split_seed, args.fold or 0)
    return list(getattr(split, args.split))


def cmd_eval(args) -> int:
    from .experiment import read_predictions, write_predictions
    from .metrics import metrics, paired_bootstrap
    from .train import predict

    ckpt_path, model, manifest, store = _load_for_eval(args)
    idx = _split_indices(args, manifest, ckpt_path)
    if not idx:
        raise DataError(f"split {args.split!r} is empty")
    preds, _ = predict(model, store, idx)
    y_true = store.labels[idx]
    report = metrics(y_true, preds, manifest.num_classes)
    ids = [manifest.ids[i] for i in idx]
    out = report.to_dict()
    if args.bootstrap:
        other = read_predictions(args.bootstrap)
        theirs = dict(zip(other["fragment_ids"], other["y_pred"]))
        missing = [f for f in ids if f not in theirs]
        if missing:
            raise DataError(f"{args.bootstrap} lacks predictions for {len(missing)} fragments, e.g. {missing[0]}")
        res = paired_bootstrap(y_true, preds, [theirs[f] for f in ids], args.metric, args.B, args.alpha,
                               args.comparisons, manifest.num_classes, args.seed)
        out["bootstrap"] = {"p_value": res.p_value, "significant": res.significant, "threshold": res.threshold,
                            "observed_delta": res.observed_delta, "B": res.B, "metric": args.metric,
                            "other": str(args.bootstrap)}
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.predictions:
        write_predictions(args.predictions, ids, y_true, preds)
    print(text)
    return 0


# -- inspect --------------------------------------------------------------------------

def slot_type(self_weight: float) -> str:
    if self_weight > SELF_FOCUSED:
        return "type-1 (self-focused)"
    if self_weight < TOKEN_FOCUSED:
        return "type-3 (token-focused)"
    return "type-2 (partial)"


def _write_matrix(path: Path, m: np.ndarray, header: list[str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows([[f"{v:.8g}" for v in row] for row in np.atleast_2d(m)])


def _pick_layer(layer: int | None, n: int, what: str) -> int:
    if n == 0:
        raise ConfigError(f"the model has no {what} layers")
    if layer is None:
        return n
    if not 1 <= layer <= n:
        raise ConfigError(f"{what} layer {layer} out of range; valid layers: {list(range(1, n + 1))}")
    return layer


def cmd_inspect(args) -> int:
    from .plotting import heatmap
    from .tensor import no_grad

    ckpt_path, model, manifest, store = _load_for_eval(args)
    i = manifest.index_of(args.fragment)
    names = model.fusion.direction_names()
    direction = args.direction or names[0]
    if direction not in names:
        raise ConfigError(f"direction {direction!r} not available; valid directions: {names}")
    layer = _pick_layer(args.layer, model.cfg.crossmodal_layers, "cross-modal")
    cpa_layer = _pick_layer(args.cpa_layer, model.cfg.cpa_layers, "cross-person")

    trace: dict = {}
    with no_grad():
        logits = model.forward_batch(store.batch([i]), trace=trace).data[0]
    out = Path(args.dump)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(stem: str, m: np.ndarray, title: str, xlabel: str, ylabel: str, header=None):
        _write_matrix(out / f"{stem}.csv", m, header)
        heatmap(out / f"{stem}.svg", m, title, xlabel, ylabel)
        written.append(stem)

    for person, dirs in trace["crossmodal"].items():
        w = dirs[direction][layer - 1][0]
        emit(f"crossmodal_{person}_{direction.replace('->', 'to')}_layer{layer}", w,
             f"{person} {direction} layer {layer}", "source frame", "target frame")
    for stream, layers in trace["cpa"].items():
        w = layers[cpa_layer - 1][0]
        emit(f"cpa_{stream.replace('->', 'to')}_layer{cpa_layer}", w, f"{stream} layer {cpa_layer}",
             "key frame", "query frame")

    slots = []
    for step, w in enumerate(trace["memory_write"]):
        m = w[0]
        header = ["self"] + [f"tok{j}" for j in range(m.shape[1] - 1)]
        emit(f"memory_write_step{step + 1}", m, f"memory write, segment {step + 1}", "self | tokens", "slot",
             header)
        for s, row in enumerate(m):
            slots.append({"step": step + 1, "slot": s, "self_weight": float(row[0]), "type": slot_type(float(row[0]))})
    sidecar = {
        "fragment": args.fragment, "checkpoint": str(ckpt_path), "logits": [float(v) for v in logits],
        "predicted": int(np.argmax(logits)), "label": int(store.labels[i]), "segments": trace["segments"],
        "crossmodal_direction": direction, "crossmodal_layer": layer, "cpa_layer": cpa_layer,
        "thresholds": {"self_focused": SELF_FOCUSED, "token_focused": TOKEN_FOCUSED},
        "memory_enabled": not model.cfg.ablations.no_memory, "slots": slots, "files": written,
    }
    (out / "slots.json").write_text(json.dumps(sidecar, indent=1), encoding="utf-8")
    print(f"wrote {len(written)} matrices to {out}")
    return 0


# -- plot -----------------------------------------------------------------------------

def cmd_plot(args) -> int:
    from .metrics import write_csv
    from .plotting import loss_curves, per_class_bars

    run = Path(args.run_dir)
    curves_files = sorted(run.rglob("loss_curve.json")) if run.is_dir() else []
    if not curves_files:
        raise DataError(f"no training results under {run}")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    curves = {str(p.parent.relative_to(run)): json.loads(p.read_text())["loss_curve"] for p in curves_files}
    loss_curves(out / "loss_curve.svg", curves)

    reports = [json.loads(p.read_text()) for p in sorted(run.rglob("test_report.json"))]
    if reports:
        f1 = np.array([r["per_class_f1"] for r in reports])
        names = _class_names(run, f1.shape[1])
        mean, std = f1.mean(axis=0), f1.std(axis=0)
        table = [["class", "f1_mean", "f1_std", "runs"]]
        table += [[n, f"{m:.4f}", f"{s:.4f}", str(len(reports))] for n, m, s in zip(names, mean, std)]
        write_csv(out / "per_class_f1.csv", table)
        per_class_bars(out / "per_class_f1.svg", names, [float(f"{m:.4f}") for m in mean],
                       std if len(reports) > 1 else None)
    print(f"figures written to {out}")
    return 0


def _class_names(run: Path, n: int) -> list[str]:
    from .data import Manifest

    cfg = run / "config.json"
    try:
        manifest = json.loads(cfg.read_text())["data"]["manifest"]
        names = Manifest.load(manifest, validate=False).class_names
        if len(names) == n:
            return names
    except (OSError, KeyError, ValueError, CPMTError):
        pass
    return [f"class{c}" for c in range(n)]


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpmt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dyadic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--task", choices=TASKS, default="contingency")
    g.add_argument("--n-fragments", type=int, default=200)
    g.add_argument("--T", type=int, default=32)
    g.add_argument("--d-a", type=int, default=8)
    g.add_argument("--d-v", type=int, default=8)
    g.add_argument("--rho", type=float, default=0.8, help="contingency strength")
    g.add_argument("--lag", type=int, default=3)
    g.add_argument("--horizon", type=int, default=None, help="long-range horizon in segments")
    g.add_argument("--segments", type=int, default=4)
    g.add_argument("--balance", type=_balance, default=None, help="preset name or fractions like 0.03,0.27,0.70")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--groups", type=int, default=10)
    g.add_argument("--feature-signal", type=float, default=0.15)
    g.add_argument("--name", default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train over seeds and folds")
    t.add_argument("config", help="run config JSON with model/train/data/verbal sections")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--manifest", default=None)
    t.add_argument("--ablation", choices=["none", "no_llm", "no_memory", "no_individuals"], default=None)
    t.add_argument("--seeds", type=_int_list, default=[0])
    t.add_argument("--folds", default=None, help="comma-separated fold indices or 'all'")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    def eval_common(q):
        q.add_argument("checkpoint")
        q.add_argument("--manifest", required=True)
        q.add_argument("--fixture", default=None, help="LLM fixture name or path for verbal models")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    eval_common(e)
    e.add_argument("--split", choices=["train", "valid", "test", "all"], default="test")
    e.add_argument("--fold", type=int, default=None)
    e.add_argument("--test-frac", type=float, default=0.1)
    e.add_argument("--valid-frac", type=float, default=0.2)
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--bootstrap", default=None, help="prediction JSON of the system to compare against")
    e.add_argument("--metric", default="macro_f1", choices=["macro_f1", "weighted_f1", "accuracy"])
    e.add_argument("--B", type=int, default=1000)
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--comparisons", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.add_argument("--predictions", default=None, help="also write this checkpoint's predictions here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump attention and memory-write matrices for one fragment")
    eval_common(i)
    i.add_argument("--fragment", required=True)
    i.add_argument("--dump", required=True)
    i.add_argument("--layer", type=int, default=None, help="cross-modal layer (1-based, default last)")
    i.add_argument("--direction", default=None, help="cross-modal direction such as V->A")
    i.add_argument("--cpa-layer", type=int, default=None, help="cross-person layer (1-based, default last)")
    i.set_defaults(func=cmd_inspect)

    pl = sub.add_parser("plot", help="loss curve and per-class F1 figures for a run directory")
    pl.add_argument("run_dir")
    pl.add_argument("--out", default=None)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CPMTError as exc:
        print(f"cpmt {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"cpmt {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
