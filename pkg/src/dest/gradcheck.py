"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
               n_coords: Optional[int] = None, seed: int = 0, floor: float = 1e-8,
               scale_floor: float = 1e-3) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``f`` is re-evaluated with each probed coordinate nudged by ``+-eps``; it
    must be deterministic.  With ``n_coords`` set, that many coordinates are
    drawn at random (uniformly over all entries of all ``params``); otherwise
    every coordinate is checked.

    Coordinates whose gradient is tiny next to the largest one probed are
    below what a finite difference can resolve, so the denominator is never
    smaller than ``scale_floor`` times that largest magnitude.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = [p.size for p in params]
    total = int(np.sum(sizes))
    if n_coords is None or n_coords >= total:
        flat = np.arange(total)
    else:
        flat = np.random.default_rng(seed).choice(total, size=n_coords, replace=False)
    offsets = np.cumsum([0] + sizes)

    pairs = []
    for k in flat:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        p = params[which]
        idx = np.unravel_index(int(k - offsets[which]), p.shape)
        orig = p.data[idx].copy()
        p.data[idx] = orig + eps
        fp = f().data.item()
        p.data[idx] = orig - eps
        fm = f().data.item()
        p.data[idx] = orig
        pairs.append((float(analytic[which][idx]), (fp - fm) / (2.0 * eps)))
    for p in params:
        p.grad = None
    if not pairs:
        return 0.0
    scale = max(max(abs(a), abs(n)) for a, n in pairs)
    floor = max(floor, scale_floor * scale)
    return max(relative_error(a, n, floor) for a, n in pairs)
