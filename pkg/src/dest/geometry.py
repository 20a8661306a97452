"""Pinhole camera, rigid motions and differentiable view synthesis.

Pixel (u, v) addresses the center of column u, row v; normalized sampling
coordinates follow the half-pixel convention of :func:`dest.ops.grid_sample`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .networks import PoseVector
from .tensor import Tensor, apply_op

Z_MIN = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def kitti_like(cls, h: int, w: int) -> "CameraIntrinsics":
        """Normalized KITTI-style intrinsics scaled to an ``h`` x ``w`` image."""
        return cls(0.58 * w, 1.92 * h, 0.5 * w - 0.5, 0.5 * h - 0.5)

    def scaled(self, sx: float, sy: float) -> "CameraIntrinsics":
        """Intrinsics after resizing the image by ``sx`` horizontally, ``sy`` vertically."""
        return CameraIntrinsics(self.fx * sx, self.fy * sy,
                                (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self, h: int, w: int) -> np.ndarray:
        """Back-projected pixel rays with unit z, [3, h, w]."""
        v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                           indexing="ij")
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)])


# -- rotations ----------------------------------------------------------------

_SMALL = 1e-2  # squared angle below which the series branch is used


def _sinc_coeff(theta2: Tensor) -> Tensor:
    """sin(t)/t as a function of t**2."""
    s = theta2.data
    small = s < _SMALL
    t = np.sqrt(np.where(small, 1.0, s))
    val = np.where(small, 1 - s / 6 + s ** 2 / 120 - s ** 3 / 5040, np.sin(t) / t)
    der = np.where(small, -1 / 6 + s / 60 - s ** 2 / 1680,
                   (t * np.cos(t) - np.sin(t)) / (2 * t ** 3))
    return apply_op(val.astype(theta2.dtype), (theta2,), lambda g: (g * der,), "sinc")


def _cosc_coeff(theta2: Tensor) -> Tensor:
    """(1 - cos t)/t**2 as a function of t**2."""
    s = theta2.data
    small = s < _SMALL
    sv = np.where(small, 1.0, s)
    t = np.sqrt(sv)
    val = np.where(small, 0.5 - s / 24 + s ** 2 / 720 - s ** 3 / 40320, (1 - np.cos(t)) / sv)
    der = np.where(small, -1 / 24 + s / 360 - s ** 2 / 13440,
                   (t * np.sin(t) - 2 * (1 - np.cos(t))) / (2 * sv ** 2))
    return apply_op(val.astype(theta2.dtype), (theta2,), lambda g: (g * der,), "cosc")


# Maps r = (rx, ry, rz) to the row-major entries of its cross-product matrix.
_SKEW = np.zeros((3, 9))
_SKEW[2, 1], _SKEW[1, 2] = -1.0, 1.0
_SKEW[2, 3], _SKEW[0, 5] = 1.0, -1.0
_SKEW[1, 6], _SKEW[0, 7] = -1.0, 1.0


def rodrigues(r: Tensor) -> Tensor:
    """Rotation matrices [B, 3, 3] from axis-angle vectors [B, 3]."""
    b = r.shape[0]
    theta2 = ops.sum(ops.mul(r, r), axis=1)
    a = ops.reshape(_sinc_coeff(theta2), (b, 1, 1))
    c = ops.reshape(_cosc_coeff(theta2), (b, 1, 1))
    k = ops.reshape(ops.matmul(r, Tensor(_SKEW, dtype=r.dtype)), (b, 3, 3))
    eye = Tensor(np.eye(3), dtype=r.dtype)
    return ops.add(ops.add(eye, ops.mul(a, k)), ops.mul(c, ops.matmul(k, k)))


@dataclass
class SE3Transform:
    """Batched rigid motion x -> R x + t; rotation [B,3,3], translation [B,3]."""

    rotation: Tensor
    translation: Tensor

    @classmethod
    def identity(cls, batch: int = 1, dtype=np.float32) -> "SE3Transform":
        return cls(Tensor(np.broadcast_to(np.eye(3), (batch, 3, 3)), dtype=dtype),
                   Tensor(np.zeros((batch, 3)), dtype=dtype))

    @classmethod
    def from_numpy(cls, rotation: np.ndarray, translation: np.ndarray,
                   dtype=np.float32) -> "SE3Transform":
        rot = np.asarray(rotation, dtype=np.float64).reshape(-1, 3, 3)
        return cls(Tensor(rot, dtype=dtype),
                   Tensor(np.asarray(translation, dtype=np.float64).reshape(-1, 3), dtype=dtype))

    @property
    def batch(self) -> int:
        return self.rotation.shape[0]

    def matrix(self) -> np.ndarray:
        """Homogeneous [B, 4, 4] matrices (data only)."""
        m = np.zeros((self.batch, 4, 4))
        m[:, :3, :3] = self.rotation.data
        m[:, :3, 3] = self.translation.data
        m[:, 3, 3] = 1.0
        return m

    def apply(self, points: Tensor) -> Tensor:
        """Transform points [B, 3, N]."""
        moved = ops.matmul(self.rotation, points)
        return ops.add(moved, ops.reshape(self.translation, (self.batch, 3, 1)))

    def compose(self, other: "SE3Transform") -> "SE3Transform":
        """``self o other``: apply ``other`` first."""
        rot = ops.matmul(self.rotation, other.rotation)
        t = ops.reshape(ops.matmul(self.rotation, ops.reshape(other.translation,
                                                              (other.batch, 3, 1))),
                        (other.batch, 3))
        return SE3Transform(rot, ops.add(t, self.translation))

    def inverse(self) -> "SE3Transform":
        rt = ops.transpose(self.rotation, (0, 2, 1))
        t = ops.matmul(rt, ops.reshape(self.translation, (self.batch, 3, 1)))
        return SE3Transform(rt, ops.neg(ops.reshape(t, (self.batch, 3))))


def axis_angle_to_se3(pose: PoseVector) -> SE3Transform:
    return SE3Transform(rodrigues(pose.axis_angle), pose.translation)


# -- view synthesis -----------------------------------------------------------

def backproject(depth: Tensor, K: CameraIntrinsics, check: bool = False) -> Tensor:
    """3-D points [B, 3, H, W] seen at each pixel: depth * K^-1 [u, v, 1]."""
    b, _, h, w = depth.shape
    if check and np.any(depth.data <= 0):
        raise ValueError("backproject needs strictly positive depth")
    rays = Tensor(K.rays(h, w)[None], dtype=depth.dtype)
    return ops.mul(depth, rays)


def project(points: Tensor, K: CameraIntrinsics, T: SE3Transform) -> Tensor:
    """Sampling grid [B, H, W, 2] in [-1, 1] for ``points`` moved by ``T``.

    Depths are clamped to ``Z_MIN`` so points behind the camera land far
    outside the image instead of producing NaN/Inf.
    """
    b, _, h, w = points.shape
    moved = T.apply(ops.reshape(points, (b, 3, h * w)))
    z = ops.clamp_min(moved[:, 2:3], Z_MIN)
    gx = ops.add(ops.mul(ops.div(moved[:, 0:1], z), 2.0 * K.fx / w), (2.0 * K.cx + 1.0) / w - 1.0)
    gy = ops.add(ops.mul(ops.div(moved[:, 1:2], z), 2.0 * K.fy / h), (2.0 * K.cy + 1.0) / h - 1.0)
    return ops.reshape(ops.stack_last([gx, gy]), (b, h, w, 2))


def warp(src: Tensor, depth: Tensor, T: SE3Transform, K: CameraIntrinsics) -> Tensor:
    """Render the target view from ``src`` given target depth and T (target -> source)."""
    return ops.grid_sample(src, project(backproject(depth, K), K, T))


def in_view_mask(grid: np.ndarray) -> np.ndarray:
    """Samples whose bilinear footprint lies fully inside the source image."""
    _, h, w, _ = grid.shape
    ix = ((grid[..., 0] + 1.0) * w - 1.0) / 2.0
    iy = ((grid[..., 1] + 1.0) * h - 1.0) / 2.0
    return (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
