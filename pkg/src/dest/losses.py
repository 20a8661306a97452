"""Photometric reconstruction and smoothness losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import ops
from .geometry import CameraIntrinsics, SE3Transform, warp
from .networks import disp_to_depth
from .tensor import Tensor

C1 = 0.01 ** 2
C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossConfig:
    ssim_weight: float = 0.85
    smoothness_weight: float = 1e-3
    reprojection: str = "min"  # or "mean"
    min_depth: float = 0.1
    max_depth: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError(f"ssim_weight must lie in [0, 1], got {self.ssim_weight}")
        if self.smoothness_weight < 0:
            raise ValueError("smoothness_weight must be non-negative")
        if self.reprojection not in ("min", "mean"):
            raise ValueError(f"reprojection must be 'min' or 'mean', got {self.reprojection!r}")


@dataclass
class LossTerms:
    total: Tensor
    photo: Tensor
    smooth: Tensor

    def floats(self) -> dict:
        return {"loss": self.total.item(), "photo": self.photo.item(),
                "smooth": self.smooth.item()}


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM over 3x3 windows with reflection padding, [B, C, H, W]."""
    pa, pb = ops.reflect_pad2d(a, 1), ops.reflect_pad2d(b, 1)
    mu_a, mu_b = ops.avg_pool2d(pa, 3), ops.avg_pool2d(pb, 3)
    mu_aa, mu_bb, mu_ab = ops.mul(mu_a, mu_a), ops.mul(mu_b, mu_b), ops.mul(mu_a, mu_b)
    var_a = ops.sub(ops.avg_pool2d(ops.mul(pa, pa), 3), mu_aa)
    var_b = ops.sub(ops.avg_pool2d(ops.mul(pb, pb), 3), mu_bb)
    cov = ops.sub(ops.avg_pool2d(ops.mul(pa, pb), 3), mu_ab)
    num = ops.mul(ops.add(ops.mul(mu_ab, 2.0), C1), ops.add(ops.mul(cov, 2.0), C2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), C1), ops.add(ops.add(var_a, var_b), C2))
    return ops.div(num, den)


def photometric_error(pred: Tensor, target: Tensor, alpha: float = 0.85) -> Tensor:
    """alpha * (1 - SSIM) / 2 + (1 - alpha) * L1, averaged over channels, [B, 1, H, W]."""
    l1 = ops.reduce_mean(ops.abs(ops.sub(pred, target)), 1)
    if alpha == 0:
        return l1
    dssim = ops.reduce_mean(ops.mul(ops.sub(1.0, ssim(pred, target)), 0.5), 1)
    return ops.add(ops.mul(dssim, alpha), ops.mul(l1, 1.0 - alpha))


def smoothness(disp: Tensor, img: Tensor) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalized disparity."""
    mean_disp = ops.reduce_mean(ops.reduce_mean(disp, 2), 3)
    d = ops.div(disp, ops.add(mean_disp, 1e-7))
    dx = ops.abs(ops.sub(d[..., :-1], d[..., 1:]))
    dy = ops.abs(ops.sub(d[..., :-1, :], d[..., 1:, :]))
    ix = ops.reduce_mean(ops.abs(ops.sub(img[..., :-1], img[..., 1:])), 1)
    iy = ops.reduce_mean(ops.abs(ops.sub(img[..., :-1, :], img[..., 1:, :])), 1)
    return ops.add(ops.mean(ops.mul(dx, ops.exp(ops.neg(ix)))),
                   ops.mean(ops.mul(dy, ops.exp(ops.neg(iy)))))


def photometric_loss(target: Tensor, sources: Sequence[Tensor], disp: Tensor,
                     poses: Sequence[SE3Transform], K: CameraIntrinsics,
                     cfg: LossConfig = LossConfig()) -> LossTerms:
    """Self-supervised view-synthesis objective for one target frame.

    ``poses[i]`` maps target-frame points into the frame of ``sources[i]``.
    Per-pixel errors of the warped sources are combined by minimum (or mean)
    then averaged over the image; edge-aware smoothness is added on top.
    """
    if len(sources) != len(poses) or not sources:
        raise ValueError("need one pose per source frame")
    if disp.shape[2:] != target.shape[2:]:
        raise ValueError(f"disparity {disp.shape} does not match image {target.shape}")
    depth = disp_to_depth(disp, cfg.min_depth, cfg.max_depth)
    errors = [photometric_error(warp(src, depth, T, K), target, cfg.ssim_weight)
              for src, T in zip(sources, poses)]
    combined = errors[0]
    for e in errors[1:]:
        combined = ops.minimum(combined, e) if cfg.reprojection == "min" else ops.add(combined, e)
    if cfg.reprojection == "mean":
        combined = ops.mul(combined, 1.0 / len(errors))
    photo = ops.mean(combined)
    smooth = smoothness(disp, target)
    total = ops.add(photo, ops.mul(smooth, cfg.smoothness_weight))
    return LossTerms(total, photo, smooth)
