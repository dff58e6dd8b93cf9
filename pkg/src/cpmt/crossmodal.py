"""Per-person fusion of nonverbal modality streams into ``Z ∈ R^{T×2d}``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import CrossTransformer
from .errors import ConfigError, DataError, DimensionError
from .nn import Linear, Module
from .tensor import Tensor

MODALITIES = ("audio", "video", "pose", "text")
NONVERBAL = ("audio", "video", "pose")
DEFAULT_DIMS = {"audio": 128, "video": 512, "pose": 128}


@dataclass
class ModalityStream:
    """Feature sequence ``[T_m, d_m]`` (or a batch ``[B, T_m, d_m]``) for one modality."""

    modality: str
    features: np.ndarray
    frame_rate: float = 1.0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        feats = self.features.data if isinstance(self.features, Tensor) else np.asarray(self.features)
        if feats.ndim not in (2, 3) or feats.shape[-2] < 1:
            raise DataError(f"{self.modality} stream must be [T, d] with T >= 1, got {feats.shape}")
        self.features = feats

    @property
    def length(self) -> int:
        return self.features.shape[-2]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]


@dataclass
class FusedPersonRep:
    Z: Tensor
    person_id: str = ""
    weights: dict = field(default_factory=dict)


def nearest_indices(t_in: int, t_out: int) -> np.ndarray:
    """Index ``floor(i · t_in / t_out)`` for each output step ``i``."""
    if t_in < 1 or t_out < 1:
        raise DataError(f"cannot resample {t_in} steps to {t_out}")
    return (np.arange(t_out) * t_in) // t_out


def aligned_length(streams: list[ModalityStream], common_rate: float | None = None) -> int:
    """Shortest stream length, after optional conversion of every stream to ``common_rate`` fps."""
    if not streams:
        raise DataError("no streams to align")
    if common_rate is None:
        return min(s.length for s in streams)
    return max(1, min(int(np.floor(s.length * common_rate / s.frame_rate)) for s in streams))


class TemporalProjection(Module):
    """Linear feature projection ``d_m → d_model`` preceded by nearest-index resampling."""

    def __init__(self, d_in: int, d_model: int, rng: np.random.Generator, dtype=np.float64):
        self.d_in = d_in
        self.linear = Linear(d_in, d_model, rng, dtype)

    def __call__(self, stream: ModalityStream, t_target: int) -> Tensor:
        if t_target < 1:
            raise DataError(f"T_target must be >= 1, got {t_target}")
        if stream.dim != self.d_in:
            raise DimensionError(f"{stream.modality} features have width {stream.dim}, expected {self.d_in}")
        feats = stream.features
        if stream.length != t_target:
            feats = np.take(feats, nearest_indices(stream.length, t_target), axis=-2)
        x = Tensor(np.ascontiguousarray(feats, dtype=self.linear.weight.dtype))
        return self.linear(x)


def temporal_project(stream: ModalityStream, proj: TemporalProjection, t_target: int) -> Tensor:
    return proj(stream, t_target)


def crossmodal_block(src: Tensor, tgt: Tensor, block: CrossTransformer, mask=None) -> Tensor:
    return block(src, tgt, mask)


def canonical_modalities(mods) -> tuple[str, ...]:
    """Validate a modality combination and put it in canonical order."""
    mods = tuple(mods)
    if "text" in mods:
        raise ConfigError("text never enters fusion; it is routed through the verbal memory")
    if len(set(mods)) != len(mods) or any(m not in NONVERBAL for m in mods):
        raise ConfigError(f"unsupported modality combination {mods}")
    if len(mods) == 1 and mods[0] == "video":
        return mods
    if len(mods) != 2:
        raise ConfigError(f"fusion needs exactly two nonverbal modalities or video alone, got {mods}")
    return tuple(sorted(mods, key=NONVERBAL.index))


class PersonFusion(Module):
    """Paired directional cross-modal transformers.

    For modalities (x, y) in canonical order the output is
    ``concat(block_{x→y}(src=x, tgt=y), block_{y→x}(src=y, tgt=x))``; for the
    default audio+video pair that is ``[A→V ; V→A]``.  In video-only mode a
    single self block output is duplicated so the width stays ``2·d_model``.
    """

    def __init__(self, modalities, dims: dict, d_model: int, num_heads: int, layers: int,
                 rng: np.random.Generator, dtype=np.float64, ff_mult: int = 2, dropout: float = 0.0):
        self.modalities = canonical_modalities(modalities)
        self.d_model = d_model
        self.proj = [TemporalProjection(int(dims[m]), d_model, rng, dtype) for m in self.modalities]
        if len(self.modalities) == 2:
            self.blocks = [
                CrossTransformer(d_model, num_heads, layers, rng, dtype, ff_mult, dropout),
                CrossTransformer(d_model, num_heads, layers, rng, dtype, ff_mult, dropout),
            ]
        else:
            self.blocks = [CrossTransformer(d_model, num_heads, layers, rng, dtype, ff_mult, dropout)]

    def direction_names(self) -> list[str]:
        ab = [m[0].upper() for m in self.modalities]
        if len(ab) == 1:
            return [f"{ab[0]}->{ab[0]}"]
        return [f"{ab[0]}->{ab[1]}", f"{ab[1]}->{ab[0]}"]

    def __call__(self, streams: list[ModalityStream], t_target: int, mask=None, rng=None,
                 trace: dict | None = None, person_id: str = "") -> FusedPersonRep:
        by_mod = {}
        for s in streams:
            if s.modality in by_mod:
                raise ConfigError(f"duplicate {s.modality} stream for person {person_id!r}")
            by_mod[s.modality] = s
        missing = [m for m in self.modalities if m not in by_mod]
        if missing:
            raise ConfigError(f"person {person_id!r} lacks streams {missing} required by fusion mode {self.modalities}")
        xs = [p(by_mod[m], t_target) for p, m in zip(self.proj, self.modalities)]
        names = self.direction_names()
        traces = {n: [] for n in names} if trace is not None else None
        if len(xs) == 1:
            h = self.blocks[0](xs[0], xs[0], mask, rng, traces[names[0]] if traces else None)
            Z = T.concat([h, h], axis=-1)
        else:
            x, y = xs
            xy = self.blocks[0](x, y, mask, rng, traces[names[0]] if traces else None)
            yx = self.blocks[1](y, x, mask, rng, traces[names[1]] if traces else None)
            Z = T.concat([xy, yx], axis=-1)
        if trace is not None:
            trace.update(traces)
        return FusedPersonRep(Z=Z, person_id=person_id, weights=traces or {})


def fuse_person(streams: list[ModalityStream], fusion: PersonFusion, t_target: int | None = None,
                mask=None) -> FusedPersonRep:
    if t_target is None:
        t_target = aligned_length([s for s in streams if s.modality in fusion.modalities])
    return fusion(streams, t_target, mask)
