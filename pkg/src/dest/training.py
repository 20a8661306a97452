"""Optimizer, single training step and the seeded training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import sys
from dataclasses import dataclass
from typing import Callable, Optional, TextIO

import numpy as np

from . import serialize
from .data import SceneTriplet, synth_scene
from .geometry import axis_angle_to_se3
from .losses import LossConfig, photometric_loss
from .networks import DepthNet, PoseNet, disp_to_depth, variant
from .tensor import Tensor, no_grad


class NumericalError(RuntimeError):
    pass


class Adam:
    def __init__(self, params, lr: float = 4e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class RunConfig:
    """Everything a training or evaluation run depends on; all fields default."""

    variant: str = "B0"
    pose_variant: str = "B3"
    input_h: int = 192
    input_w: int = 640
    lr: float = 4e-5
    steps: int = 200
    seed: int = 0
    connectivity: bool = True
    # synthetic data
    scene_seed: int = 0
    fixed_scene: bool = True
    plane_depth_range: tuple = (2.0, 50.0)
    texture_octaves: int = 3
    motion_magnitude: float = 0.3
    # loss
    ssim_weight: float = 0.85
    smoothness_weight: float = 1e-3
    reprojection: str = "min"
    min_depth: float = 0.1
    max_depth: float = 100.0
    # outputs
    checkpoint: Optional[str] = None
    log: Optional[str] = None

    def __post_init__(self):
        if self.variant == "B0-micro":
            self.variant, self.input_h, self.input_w = "B0", 64, 192
        self.plane_depth_range = tuple(self.plane_depth_range)
        variant(self.variant)
        variant(self.pose_variant)
        if self.input_h % 16 or self.input_w % 16 or self.input_h <= 0 or self.input_w <= 0:
            raise ValueError(f"input {self.input_h}x{self.input_w} must be positive multiples of 16")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.loss_config()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["plane_depth_range"] = list(self.plane_depth_range)
        return d

    def loss_config(self) -> LossConfig:
        return LossConfig(self.ssim_weight, self.smoothness_weight, self.reprojection,
                          self.min_depth, self.max_depth)

    def scene(self, seed: int) -> SceneTriplet:
        return synth_scene(seed, self.input_h, self.input_w, self.plane_depth_range,
                           self.texture_octaves, self.motion_magnitude)


def build_networks(cfg: RunConfig) -> tuple:
    depth_cfg = variant(cfg.variant)
    depth_cfg.check_input(cfg.input_h, cfg.input_w)
    depth_net = DepthNet(depth_cfg, seed=cfg.seed)
    pose_net = PoseNet(variant(cfg.pose_variant), depth_cfg.widths,
                       connectivity=cfg.connectivity, seed=cfg.seed + 1)
    return depth_net, pose_net


def frames_as_tensors(triplet: SceneTriplet) -> tuple:
    return tuple(Tensor(f[None]) for f in triplet.frames())


def forward_loss(depth_net: DepthNet, pose_net: PoseNet, triplet: SceneTriplet,
                 loss_cfg: LossConfig):
    prev, cur, nxt = frames_as_tensors(triplet)
    disp, feats = depth_net(cur)
    to_prev, to_next = pose_net(prev, cur, nxt, feats)
    poses = [axis_angle_to_se3(to_prev), axis_angle_to_se3(to_next)]
    return photometric_loss(cur, [prev, nxt], disp, poses, triplet.K, loss_cfg)


def train_step(depth_net: DepthNet, pose_net: PoseNet, triplet: SceneTriplet, opt: Adam,
               loss_cfg: LossConfig) -> dict:
    """One forward/backward/Adam update; returns the pre-update loss terms."""
    depth_net.train()
    pose_net.train()
    terms = forward_loss(depth_net, pose_net, triplet, loss_cfg)
    values = terms.floats()
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericalError(f"non-finite loss on scene seed {triplet.seed}: {values}")
    opt.zero_grad()
    terms.total.backward()
    for p in opt.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient on scene seed {triplet.seed}")
    opt.step()
    return values


def checkpoint_tensors(depth_net: DepthNet, pose_net: PoseNet) -> dict:
    tensors = {f"depth.{k}": v for k, v in depth_net.state_dict().items()}
    tensors.update({f"pose.{k}": v for k, v in pose_net.state_dict().items()})
    return tensors


def save_run(path: str, depth_net: DepthNet, pose_net: PoseNet, cfg: RunConfig,
             step: int) -> None:
    # output locations are not part of the run, so identical runs written to
    # different directories produce identical checkpoints
    config = {k: v for k, v in cfg.to_dict().items() if k not in ("checkpoint", "log")}
    serialize.save_checkpoint(path, checkpoint_tensors(depth_net, pose_net),
                              {"config": config, "step": step})


def load_run(path: str) -> tuple:
    """Rebuild (config, depth_net, pose_net) from a checkpoint directory."""
    tensors, meta = serialize.load_checkpoint(path)
    cfg = RunConfig.from_dict({k: v for k, v in meta["config"].items()})
    depth_net, pose_net = build_networks(cfg)
    depth_net.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("depth.")})
    pose_net.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("pose.")})
    return cfg, depth_net, pose_net


LOG_FIELDS = ("step", "loss", "photo", "smooth")
STDOUT = object()  # resolved at call time so redirected stdout is honoured


def log_line(row: dict) -> str:
    return f"step={row['step']} loss={row['loss']:.6f} photo={row['photo']:.6f} " \
           f"smooth={row['smooth']:.6f}"


def train(cfg: RunConfig, stream: Optional[TextIO] = STDOUT,
          on_step: Optional[Callable] = None) -> tuple:
    """Run ``cfg.steps`` updates; returns (depth_net, pose_net, log rows).

    Log lines go to ``stream`` (standard output by default, None for quiet).
    Writes the checkpoint and CSV log when the config names them.  A
    zero-step run still writes the initial checkpoint and a header-only log.
    """
    if stream is STDOUT:
        stream = sys.stdout
    depth_net, pose_net = build_networks(cfg)
    opt = Adam(depth_net.parameters() + pose_net.parameters(), lr=cfg.lr)
    loss_cfg = cfg.loss_config()
    rows = []
    fixed = cfg.scene(cfg.scene_seed) if cfg.fixed_scene else None
    log_fh = open(cfg.log, "w", newline="") if cfg.log else None
    try:
        writer = None
        if log_fh:
            writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
        for step in range(1, cfg.steps + 1):
            triplet = fixed if fixed is not None else cfg.scene(cfg.scene_seed + step - 1)
            row = {"step": step, **train_step(depth_net, pose_net, triplet, opt, loss_cfg)}
            rows.append(row)
            if stream is not None:
                print(log_line(row), file=stream, flush=True)
            if writer:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in row.items()})
            if on_step:
                on_step(row)
    finally:
        if log_fh:
            log_fh.close()
    if cfg.checkpoint:
        save_run(cfg.checkpoint, depth_net, pose_net, cfg, cfg.steps)
    return depth_net, pose_net, rows


def predict_depth(depth_net: DepthNet, img: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Inference-mode depth [H, W] for one image [3, H, W]."""
    depth_net.eval()
    with no_grad():
        disp, _ = depth_net(Tensor(img[None]))
    return disp_to_depth(disp.data[0, 0].astype(np.float64), cfg.min_depth, cfg.max_depth)
