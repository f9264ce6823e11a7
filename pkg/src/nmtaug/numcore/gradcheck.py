"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    f: Callable[..., Tensor],
    point: np.ndarray | Sequence[np.ndarray],
    h: float = 1e-6,
    floor: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest coordinatewise relative error between autodiff and central differences.

    ``f`` receives one ``Tensor`` per array in ``point`` and returns a scalar.
    The relative error at a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps coordinates whose true gradient is zero from turning
    finite-difference round-off into huge ratios.  ``max_coords`` limits the
    check to a random subset of coordinates per input.
    """
    arrays = [np.asarray(point, dtype=np.float64)] if isinstance(point, np.ndarray) else [
        np.asarray(p, dtype=np.float64) for p in point
    ]
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*inputs)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def evaluate(values: list[np.ndarray]) -> float:
        return float(f(*[Tensor(v) for v in values]).data)

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for k, base in enumerate(arrays):
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = rng.choice(base.size, size=max_coords, replace=False)
        for c in coords:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].flat[c] += h
            minus[k].flat[c] -= h
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
            a = float(analytic[k].flat[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
