"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .tensor import Graph, Tensor, backward, precision


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic scalar-valued function of ``x``.  All
    evaluation happens in 64-bit precision regardless of the global default.
    When ``max_coords`` is given, a seeded subset of coordinates is probed
    (full-model checks would otherwise need two evaluations per parameter).
    A NaN from ``f`` is reported as an infinite error.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ValueError(f"step size {h} outside [1e-6, 1e-3]")
    with precision("float64"):
        probe = Tensor(np.asarray(x.values, dtype=np.float64).copy(), requires_grad=True)
        graph = Graph()
        with graph:
            out = f(probe)
        if np.isnan(out.values).any():
            return math.inf
        backward(graph, out)
        analytic = probe.grad.copy()

        flat = probe.values.reshape(-1)
        n = flat.size
        if max_coords is not None and max_coords < n:
            coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)

        worst = 0.0
        a_flat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(probe).values)
            flat[i] = orig - h
            dn = float(f(probe).values)
            flat[i] = orig
            if math.isnan(up) or math.isnan(dn):
                return math.inf
            fd = (up - dn) / (2.0 * h)
            err = abs(a_flat[i] - fd) / (abs(a_flat[i]) + abs(fd) + 1e-8)
            worst = max(worst, err)
        return worst
