"""Cross-person attention (CPA) and the per-task stream concatenation policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import CrossTransformer
from .crossmodal import FusedPersonRep
from .errors import ConfigError, DimensionError
from .nn import Module
from .tensor import Tensor

POLICIES = {
    "child_coordinated": ("other->self", "self"),
    "symmetric": ("other->self", "self->other", "self"),
}


@dataclass(frozen=True)
class ConcatPolicy:
    mode: str = "symmetric"

    def __post_init__(self):
        if self.mode not in POLICIES:
            raise ConfigError(f"unknown concat policy {self.mode!r}; expected one of {sorted(POLICIES)}")

    @property
    def streams(self) -> tuple[str, ...]:
        return POLICIES[self.mode]

    @property
    def n_streams(self) -> int:
        return len(self.streams)


def cpa(z_other: Tensor, z_self: Tensor, block: CrossTransformer, mask=None, rng=None, trace=None) -> Tensor:
    """CPA_{other→self}: queries from ``z_other``, keys and values from ``z_self``.

    Output rows follow the query sequence.  Layers refine the query stream
    while ``z_self`` stays the fixed source.
    """
    if z_other.shape != z_self.shape:
        raise DimensionError(f"CPA needs equal shapes, got {z_other.shape} and {z_self.shape}")
    return block(z_self, z_other, mask, rng, trace)


def self_stream(z: Tensor, block: CrossTransformer, mask=None, rng=None, trace=None) -> Tensor:
    return block(z, z, mask, rng, trace)


class CrossPersonEncoder(Module):
    """One CPA stack shared by both cross directions, plus one self stack."""

    def __init__(self, d: int, num_heads: int, layers: int, policy: ConcatPolicy, rng: np.random.Generator,
                 dtype=np.float64, ff_mult: int = 2, dropout: float = 0.0):
        self.policy = policy
        self.cross = CrossTransformer(d, num_heads, layers, rng, dtype, ff_mult, dropout)
        self.own = CrossTransformer(d, num_heads, layers, rng, dtype, ff_mult, dropout)

    @property
    def out_width_factor(self) -> int:
        return self.policy.n_streams

    def encode_pair(self, rep_self: FusedPersonRep, rep_other: FusedPersonRep, mask=None, rng=None,
                    trace: dict | None = None) -> Tensor:
        zs, zo = rep_self.Z, rep_other.Z
        if zs.shape != zo.shape:
            raise DimensionError(f"fused reps differ in shape: {zs.shape} vs {zo.shape}")
        parts = []
        for name in self.policy.streams:
            tr = [] if trace is not None else None
            if name == "other->self":
                parts.append(cpa(zo, zs, self.cross, mask, rng, tr))
            elif name == "self->other":
                parts.append(cpa(zs, zo, self.cross, mask, rng, tr))
            else:
                parts.append(self_stream(zs, self.own, mask, rng, tr))
            if trace is not None:
                trace[name] = tr
        return T.concat(parts, axis=-1)

    def merged(self, rep: FusedPersonRep, mask=None, rng=None, trace: dict | None = None) -> Tensor:
        tr = [] if trace is not None else None
        out = self_stream(rep.Z, self.own, mask, rng, tr)
        if trace is not None:
            trace["merged"] = tr
        return out


def encode_pair(rep_a: FusedPersonRep, rep_b: FusedPersonRep, encoder: CrossPersonEncoder, mask=None) -> Tensor:
    """``rep_a`` is the self (coordinated) person, ``rep_b`` the other."""
    return encoder.encode_pair(rep_a, rep_b, mask)
