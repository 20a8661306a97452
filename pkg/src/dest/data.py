"""Synthetic driving-like triplets: a textured slanted plane seen by a moving camera.

The plane is tilted like a road surface (farther toward the top of the
image) and carries continuous multi-octave value noise in its own 2-D
coordinates, so every frame is an exact rendering of the same surface and
the ground-truth depth and motions are known in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, SE3Transform

_LATTICE = 64  # texture lattice period, in cells
_SUPERSAMPLE = 2  # sub-pixel samples per side when rendering


@dataclass
class SceneTriplet:
    """Frames t-1, t, t+1 as float32 [3, H, W] in [0, 1].

    ``gt_poses`` are (t -> t-1, t -> t+1): each maps frame-t camera points
    into the source camera.
    """

    prev: np.ndarray
    cur: np.ndarray
    nxt: np.ndarray
    gt_depth: np.ndarray  # [1, H, W]
    gt_poses: tuple
    K: CameraIntrinsics
    seed: int
    plane: tuple  # (unit normal n, offset d) with n . X = d in frame t

    def frames(self) -> tuple:
        return self.prev, self.cur, self.nxt


class ValueNoise:
    """Smooth periodic RGB noise: octaves of smoothstep-interpolated lattices."""

    def __init__(self, rng: np.random.Generator, octaves: int, cell: float):
        if octaves < 1:
            raise ValueError("texture_octaves must be >= 1")
        self.cell = cell
        self.lattices = rng.uniform(size=(octaves, 3, _LATTICE, _LATTICE))
        self.weights = 0.5 ** np.arange(octaves)
        self.weights /= self.weights.sum()

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        out = np.zeros((3,) + s.shape)
        for o, (lat, wgt) in enumerate(zip(self.lattices, self.weights)):
            x, y = s * (2 ** o) / self.cell, t * (2 ** o) / self.cell
            x0, y0 = np.floor(x), np.floor(y)
            fx, fy = x - x0, y - y0
            fx, fy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
            i0, j0 = x0.astype(np.int64) % _LATTICE, y0.astype(np.int64) % _LATTICE
            i1, j1 = (i0 + 1) % _LATTICE, (j0 + 1) % _LATTICE
            top = lat[:, j0, i0] * (1 - fx) + lat[:, j0, i1] * fx
            bot = lat[:, j1, i0] * (1 - fx) + lat[:, j1, i1] * fx
            out += wgt * (top * (1 - fy) + bot * fy)
        return out


def _rotation(axis_angle: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(axis_angle)
    if theta == 0:
        return np.eye(3)
    k = axis_angle / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def _subpixel_rays(K: CameraIntrinsics, h: int, w: int, ss: int) -> np.ndarray:
    """Rays through an ss x ss grid inside every pixel, [ss*ss, 3, h, w]."""
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    base = K.rays(h, w)
    return np.stack([base + np.array([dx / K.fx, dy / K.fy, 0.0])[:, None, None]
                     for dy in offs for dx in offs])


def _render(rot, trans, n, d, rays, noise, basis):
    """Box-filtered image of plane n.X = d from a camera with X_cam = rot X + trans.

    ``rays`` holds one ray bundle per sub-pixel sample; returns None when the
    plane is behind or grazing the camera anywhere in view.
    """
    n_s = rot @ n
    d_s = d + n_s @ trans
    denom = np.tensordot(n_s, rays, axes=([0], [1]))
    if d_s <= 0 or np.any(denom < 1e-3):
        return None
    pts_cam = (d_s / denom)[:, None] * rays
    pts = np.einsum("ji,sjhw->sihw", rot, pts_cam - trans[:, None, None])
    img = noise(np.tensordot(basis[0], pts, axes=([0], [1])),
                np.tensordot(basis[1], pts, axes=([0], [1])))
    return img.mean(axis=1).astype(np.float32)


def _sample_motion(rng, magnitude, direction):
    """Camera displacement mostly along the optical axis, plus a little drift and yaw."""
    center = direction * magnitude * np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.05, 0.05),
                                   rng.uniform(0.6, 1.0)])
    rot = _rotation(magnitude * np.array([rng.uniform(-0.01, 0.01), rng.uniform(-0.03, 0.03),
                                          rng.uniform(-0.01, 0.01)]))
    # camera pose (rot, center) in frame t -> map X_t to source camera coordinates
    return rot.T, -rot.T @ center


def synth_scene(seed: int, H: int = 64, W: int = 192, plane_depth_range=(2.0, 50.0),
                texture_octaves: int = 3, motion_magnitude: float = 0.3,
                max_tries: int = 100) -> SceneTriplet:
    """Deterministic triplet for ``seed``.

    Depths over the frame-t image lie in ``plane_depth_range``.  The t-1 and
    t+1 cameras move by about ``motion_magnitude`` backward and forward.
    Degenerate draws (plane behind or grazing any camera, depth out of range)
    are re-sampled up to ``max_tries`` times.
    """
    lo, hi = plane_depth_range
    if not 0 < lo < hi:
        raise ValueError(f"bad plane_depth_range {plane_depth_range}")
    if motion_magnitude < 0:
        raise ValueError("motion_magnitude must be non-negative")
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics.kitti_like(H, W)
    rays = _subpixel_rays(K, H, W, _SUPERSAMPLE)
    centers = K.rays(H, W)
    noise = ValueNoise(rng, texture_octaves, cell=1.5)
    for _ in range(max_tries):
        pitch = rng.uniform(0.9, 1.2)  # tilt toward the camera's down axis, road-like
        roll = rng.uniform(-0.1, 0.1)
        n = _rotation(np.array([-pitch, 0.0, roll])) @ np.array([0.0, 0.0, 1.0])
        z0 = np.exp(rng.uniform(np.log(lo), np.log(hi)))
        d = z0 * n[2]  # depth z0 on the optical axis
        depth = d / np.tensordot(n, centers, axes=1)
        if d <= 0 or depth.min() < lo or depth.max() > hi or np.any(depth <= 0):
            continue
        basis = np.stack([np.cross([0.0, 1.0, 0.0], n), np.cross(n, np.cross([0.0, 1.0, 0.0], n))])
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
        fwd = _sample_motion(rng, motion_magnitude, 1.0)
        back = _sample_motion(rng, motion_magnitude, -1.0)
        frames = [_render(*pose, n, d, rays, noise, basis)
                  for pose in (back, (np.eye(3), np.zeros(3)), fwd)]
        if any(f is None for f in frames):
            continue
        poses = (SE3Transform.from_numpy(*back), SE3Transform.from_numpy(*fwd))
        return SceneTriplet(*frames, depth[None].astype(np.float32), poses, K, seed, (n, d))
    raise RuntimeError(f"could not sample a valid scene for seed {seed} in {max_tries} tries")
