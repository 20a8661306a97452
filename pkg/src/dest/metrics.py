"""Eigen-style depth error statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import stats

MIN_DEPTH = 1e-3


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float

    def record(self) -> str:
        return " ".join(f"{k}={v:.6f}" for k, v in asdict(self).items())

    @classmethod
    def parse(cls, line: str) -> "DepthMetrics":
        fields = dict(tok.split("=", 1) for tok in line.split())
        return cls(**{k: float(fields[k]) for k in ("abs_rel", "sq_rel", "rmse", "rmse_log")})

    @classmethod
    def average(cls, items: Iterable["DepthMetrics"]) -> "DepthMetrics":
        rows = np.array([[m.abs_rel, m.sq_rel, m.rmse, m.rmse_log] for m in items])
        if rows.size == 0:
            raise ValueError("no metrics to average")
        return cls(*(float(v) for v in rows.mean(axis=0)))


def eigen_metrics(pred, gt, cap: Optional[float] = 80.0, median_scale: bool = True) -> DepthMetrics:
    """Compare predicted and ground-truth depth of the same shape.

    With ``median_scale`` the prediction is first rescaled so its median
    matches the ground truth's.  Both maps are then clamped to
    [1e-3, cap]; ``cap=None`` disables the upper clamp.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"prediction has {p.size} values, ground truth {g.size}")
    if p.size == 0:
        raise ValueError("empty depth maps")
    if not (np.all(p > 0) and np.all(g > 0)):
        raise ValueError("depth values must be strictly positive")
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    hi = np.inf if cap is None else cap
    p, g = np.clip(p, MIN_DEPTH, hi), np.clip(g, MIN_DEPTH, hi)
    diff = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
    )


def spearman(pred, gt) -> float:
    rho = stats.spearmanr(np.ravel(pred), np.ravel(gt)).statistic
    return float(rho)
