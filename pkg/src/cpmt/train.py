"""Focal-loss training with AdamW, checkpoints, and evaluation helpers."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import FragmentStore, Split
from .errors import ConfigError, FormatError, NumericError
from .metrics import EvalReport, metrics
from .model import CPMT, CPMTConfig
from .tensor import Tensor, no_grad
from .tensorio import decode_tensor, encode_tensor

log = logging.getLogger(__name__)

LOG_CLAMP = math.log(1e-12)


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 3e-3
    epochs: int = 20
    gamma: float = 10.0
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    seed: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_batch_size < 1:
            raise ConfigError("batch_size and eval_batch_size must be positive, epochs >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def focal_loss(logits: Tensor, labels, gamma: float) -> Tensor:
    """Mean of ``-(1 - p_t)^γ · log p_t`` with ``log p_t`` clamped at log(1e-12).

    ``logits`` is ``[C]`` with an int label, or ``[B, C]`` with a label vector.
    """
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    single = logits.ndim == 1
    if single:
        logits = T.reshape(logits, (1, logits.shape[0]))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = logits.shape[-1]
    if y.shape != (logits.shape[0],) or y.min() < 0 or y.max() >= C:
        raise ConfigError(f"labels {y} do not fit logits of shape {logits.shape}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(y.size), y] = 1.0
    logp_t = T.clamp_min(T.sum(T.log_softmax(logits, axis=-1) * onehot, axis=-1), LOG_CLAMP)
    if gamma == 0:
        per = -logp_t
    else:
        weight = T.power(1.0 - T.exp(logp_t), gamma)
        per = -(weight * logp_t)
    return T.mean(per)


class AdamW:
    """Adam with decoupled weight decay: ``θ ← θ - lr·(m̂/(√v̂ + ε) + λθ)``."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype, copy=False)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.asarray(state["m"][k], dtype=self.params[k].dtype).copy()
            self.v[k] = np.asarray(state["v"][k], dtype=self.params[k].dtype).copy()


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- checkpoints -----------------------------------------------------------------------
#
# A checkpoint is an uncompressed zip holding
#   config.json            model config (CPMTConfig.to_dict())
#   meta.json              free-form training metadata
#   params/<name>.cpmt     model tensors in the binary tensor format
#   <group>/<name>.cpmt    further named tensor groups (optimizer moments, best weights)

_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def _as3(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(1) if arr.ndim == 0 else arr


def save_checkpoint(path, cfg: CPMTConfig, params: dict[str, np.ndarray], meta: dict | None = None,
                    groups: dict[str, dict[str, np.ndarray]] | None = None) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _put(zf, "config.json", json.dumps(cfg.to_dict(), sort_keys=True).encode())
        _put(zf, "meta.json", json.dumps(meta or {}, sort_keys=True).encode())
        for name in sorted(params):
            _put(zf, f"params/{name}.cpmt", encode_tensor(_as3(params[name])))
        for gname, tensors in sorted((groups or {}).items()):
            for name in sorted(tensors):
                _put(zf, f"{gname}/{name}.cpmt", encode_tensor(_as3(tensors[name])))
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    cfg: CPMTConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    groups: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def model(self) -> CPMT:
        m = CPMT(self.cfg)
        shapes = {k: p.shape for k, p in m.named_parameters()}
        m.load_state_dict({k: v.reshape(shapes[k]) if k in shapes else v for k, v in self.params.items()})
        return m


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise FormatError(f"{path}: not a checkpoint container ({exc})") from exc
    with zf:
        names = zf.namelist()
        if "config.json" not in names:
            raise FormatError(f"{path}: checkpoint lacks config.json")
        cfg = CPMTConfig.from_dict(json.loads(zf.read("config.json")))
        meta = json.loads(zf.read("meta.json")) if "meta.json" in names else {}
        groups: dict[str, dict[str, np.ndarray]] = {}
        for n in names:
            if not n.endswith(".cpmt"):
                continue
            g, _, rest = n.partition("/")
            groups.setdefault(g, {})[rest[: -len(".cpmt")]] = decode_tensor(zf.read(n), f"{path}:{n}")
    params = groups.pop("params", {})
    return Checkpoint(cfg, params, meta, groups)


def _reshape_like(arrs: dict[str, np.ndarray], model: CPMT) -> dict[str, np.ndarray]:
    shapes = {k: p.shape for k, p in model.named_parameters()}
    return {k: v.reshape(shapes[k]) for k, v in arrs.items()}


# -- evaluation ----------------------------------------------------------------------

def predict(model: CPMT, store: FragmentStore, indices, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(predicted labels, logits) for ``indices`` in order, without dropout or tape."""
    indices = list(indices)
    was = model.training
    model.eval()
    outs = []
    with no_grad():
        for s in range(0, len(indices), batch_size):
            outs.append(model.forward_batch(store.batch(indices[s:s + batch_size])).data)
    model.train(was)
    logits = np.concatenate(outs) if outs else np.zeros((0, model.cfg.num_classes))
    return logits.argmax(axis=-1), logits


def evaluate(model: CPMT, store: FragmentStore, indices, batch_size: int = 256) -> EvalReport:
    preds, _ = predict(model, store, indices, batch_size)
    return metrics(store.labels[list(indices)], preds, model.cfg.num_classes)


# -- training --------------------------------------------------------------------------

@dataclass
class TrainResult:
    loss_curve: list[float]
    valid_macro_f1: list[float]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    train_report: EvalReport | None
    final_loss: float
    epochs_run: int

    def to_dict(self) -> dict:
        return {
            "loss_curve": self.loss_curve, "valid_macro_f1": self.valid_macro_f1, "best_epoch": self.best_epoch,
            "final_loss": self.final_loss, "epochs_run": self.epochs_run,
            "train_report": self.train_report.to_dict() if self.train_report else None,
        }


def _loss_on(model, store, idx, gamma, rng):
    batch = store.batch(idx)
    logits = model.forward_batch(batch, rng=rng)
    return focal_loss(logits, batch.labels, gamma)


def train(model: CPMT, store: FragmentStore, split: Split, tcfg: TrainConfig, run_dir=None,
          resume: bool = False) -> TrainResult:
    """Epoch loop with per-epoch validation macro-F1; the best-on-valid weights are kept.

    With ``run_dir`` set, ``last.ckpt`` is written after each epoch (enough to
    resume) and ``best.ckpt`` whenever validation improves.  A non-finite loss
    aborts with ``NumericError`` after saving ``last_finite.ckpt``.
    """
    params = dict(model.named_parameters())
    opt = AdamW(params, tcfg.learning_rate, tcfg.weight_decay)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    losses: list[float] = []
    valid_f1: list[float] = []
    best = (-1.0, -1, model.state_dict())
    start = 0
    if resume and run_dir is not None and (run_dir / "last.ckpt").exists():
        ck = load_checkpoint(run_dir / "last.ckpt")
        model.load_state_dict(_reshape_like(ck.params, model))
        opt.load({"t": ck.meta["opt_t"], "m": _reshape_like(ck.groups["adam_m"], model),
                  "v": _reshape_like(ck.groups["adam_v"], model)})
        losses, valid_f1 = list(ck.meta["loss_curve"]), list(ck.meta["valid_macro_f1"])
        best = (ck.meta["best_f1"], ck.meta["best_epoch"], _reshape_like(ck.groups["best"], model))
        start = int(ck.meta["epoch"]) + 1
        log.info("resuming at epoch %d from %s", start, run_dir / "last.ckpt")

    train_idx = np.asarray(split.train)
    model.train()
    for epoch in range(start, tcfg.epochs):
        order = train_idx[np.random.default_rng([tcfg.seed, epoch]).permutation(train_idx.size)]
        drop_rng = np.random.default_rng([tcfg.seed, epoch, 7])
        total, count = 0.0, 0
        snapshot = model.state_dict()
        for s in range(0, order.size, tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            model.zero_grad()
            loss = _loss_on(model, store, idx, tcfg.gamma, drop_rng)
            value = loss.item()
            if not math.isfinite(value):
                model.load_state_dict(snapshot)
                if run_dir is not None:
                    save_checkpoint(run_dir / "last_finite.ckpt", model.cfg, model.state_dict(),
                                    {"epoch": epoch - 1, "loss_curve": losses})
                raise NumericError(f"non-finite training loss at epoch {epoch}; last finite state saved")
            loss.backward()
            if tcfg.grad_clip is not None:
                clip_grad_norm(params.values(), tcfg.grad_clip)
            opt.step()
            total += value * idx.size
            count += idx.size
        losses.append(total / max(count, 1))
        f1 = evaluate(model, store, split.valid, tcfg.eval_batch_size).macro_f1 if split.valid else 0.0
        model.train()
        valid_f1.append(f1)
        if f1 > best[0] or not split.valid:  # no validation data: the latest epoch is the best
            best = (f1, epoch, model.state_dict())
            if run_dir is not None:
                save_checkpoint(run_dir / "best.ckpt", model.cfg, best[2], {"epoch": epoch, "valid_macro_f1": f1})
        log.info("epoch %d loss %.5f valid macro-F1 %.4f", epoch, losses[-1], f1)
        if run_dir is not None:
            save_checkpoint(
                run_dir / "last.ckpt", model.cfg, model.state_dict(),
                {"epoch": epoch, "loss_curve": losses, "valid_macro_f1": valid_f1, "best_f1": best[0],
                 "best_epoch": best[1], "opt_t": opt.t, "train_config": tcfg.to_dict()},
                {"adam_m": opt.m, "adam_v": opt.v, "best": best[2]},
            )

    final_loss = losses[-1] if losses else float("nan")
    if tcfg.epochs > 0 and best[1] >= 0:
        model.load_state_dict(best[2])
    report = evaluate(model, store, split.train, tcfg.eval_batch_size) if split.train else None
    return TrainResult(losses, valid_f1, best[1], model.state_dict(), report, final_loss, len(losses))
