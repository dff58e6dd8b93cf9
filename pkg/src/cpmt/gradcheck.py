"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor, no_grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and ``(f(θ+h) - f(θ-h)) / 2h``.

    ``f`` must rebuild its graph on every call and return a single-element
    tensor.  With ``max_entries`` set, at most that many coordinates per
    parameter are probed (chosen by ``rng``); otherwise every coordinate is.
    The relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    _finite(out.data, "loss")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for k, (p, ga) in enumerate(zip(params, analytic)):
        label = p.name or f"param[{k}]"
        _finite(ga, label)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {label} at index {int(i)}")
            num = (fp - fm) / (2.0 * h)
            den = max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(gflat[i] - num) / den)
    return worst


def _finite(arr: np.ndarray, label: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {label}")
