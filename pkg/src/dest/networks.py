"""Depth-Net, Pose-Net, the B0-B5 variant table and model accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .blocks import AttentionConfig, BlockConfig, PatchEmbedConfig, TransformerBlock
from .nn import BatchNorm, Conv2d, Linear, Module
from .tensor import Tensor

POSE_SCALE = 0.01


@dataclass(frozen=True)
class VariantConfig:
    name: str
    depths: tuple
    widths: tuple
    heads: tuple = (1, 2, 5, 8)
    # Stage k runs at 1/2**k resolution, twice as fine as the usual 1/4..1/32
    # pyramid, so early ratios are doubled to keep the key count comparable.
    reduction_ratios: tuple = (16, 8, 2, 2)
    decoder_width: int = 48
    ffn_expansion: int = 2
    embed_kernel: int = 3

    def __post_init__(self):
        for fld in ("depths", "widths", "heads", "reduction_ratios"):
            if len(getattr(self, fld)) != 4:
                raise ValueError(f"{fld} needs 4 entries")

    def block_configs(self, in_channels: int = 3) -> list:
        cfgs, cin = [], in_channels
        for d, c, h, r in zip(self.depths, self.widths, self.heads, self.reduction_ratios):
            cfgs.append(BlockConfig(PatchEmbedConfig(cin, c, self.embed_kernel),
                                    AttentionConfig(c, h, r), self.ffn_expansion, d))
            cin = c
        return cfgs

    def input_multiple(self) -> tuple:
        """Smallest (H, W) multiple every stage grid and reduction ratio accept."""
        m = max(16, *(2 ** (k + 1) * r for k, r in enumerate(self.reduction_ratios)))
        return m, m

    def check_input(self, h: int, w: int) -> None:
        if h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} must be divisible by 16")
        if h < 16 or w < 16:
            raise ValueError(f"input {h}x{w} too small for four halvings")
        for k, r in enumerate(self.reduction_ratios):
            sh, sw = h >> (k + 1), w >> (k + 1)
            if sh % r or sw % r:
                raise ValueError(f"stage {k + 1} grid {sh}x{sw} is not divisible by its "
                                 f"reduction ratio {r} ({self.name} needs H, W divisible by "
                                 f"{self.input_multiple()[0]})")


_WIDE = (64, 128, 250, 320)

VARIANTS = {
    "B0": VariantConfig("B0", (2, 2, 2, 2), (32, 64, 160, 256), decoder_width=64),
    "B1": VariantConfig("B1", (2, 2, 2, 2), _WIDE),
    "B2": VariantConfig("B2", (3, 3, 6, 3), _WIDE),
    "B3": VariantConfig("B3", (3, 6, 8, 3), _WIDE),
    "B4": VariantConfig("B4", (3, 8, 12, 5), _WIDE),
    "B5": VariantConfig("B5", (3, 10, 16, 5), _WIDE),
}


def variant(name: str) -> VariantConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None


class FuseBlock(Module):
    def __init__(self, cin: int, cout: int):
        self.conv = Conv2d(cin, cout, 3, pad=1, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))

    def macs(self, h: int, w: int) -> int:
        return self.conv.macs(h, w)[0]


class ProgressiveDecoder(Module):
    """Deepest-first fusion of the four encoder stages.

    Each stage is projected to ``width`` channels by a 1x1 conv.  Starting
    from stage 4, the running map is upsampled x2, concatenated with the
    next shallower projection and fused by conv3x3 + BN + ReLU.  A final x2
    upsample restores the input resolution before the 3x3 disparity head.
    """

    def __init__(self, stage_widths: Sequence[int], width: int):
        self.width = width
        self.proj = [Conv2d(c, width, 1) for c in stage_widths]
        self.fuse = [FuseBlock(2 * width, width) for _ in stage_widths[:-1]]
        self.head = Conv2d(width, 1, 3, pad=1)

    def forward(self, feats: Sequence[Tensor], final_upsample: bool = True) -> Tensor:
        if len(feats) != len(self.proj):
            raise ValueError(f"decoder expects {len(self.proj)} stage maps, got {len(feats)}")
        for k in range(1, len(feats)):
            prev, cur = feats[k - 1].shape, feats[k].shape
            if cur[0] != prev[0] or cur[2] * 2 != prev[2] or cur[3] * 2 != prev[3]:
                raise ValueError(f"inconsistent stage shapes {prev} -> {cur}")
        x = self.proj[-1](feats[-1])
        for k in range(len(feats) - 2, -1, -1):
            _, _, h, w = feats[k].shape
            x = ops.bilinear_resize(x, h, w)
            x = ops.concat([x, self.proj[k](feats[k])], axis=1)
            x = self.fuse[k](x)
        if final_upsample:
            _, _, h, w = x.shape
            x = ops.bilinear_resize(x, 2 * h, 2 * w)
        return ops.sigmoid(self.head(x))

    def macs(self, stage_sizes: Sequence[tuple], final_upsample: bool = True) -> int:
        total = sum(p.macs(h, w)[0] for p, (h, w) in zip(self.proj, stage_sizes))
        total += sum(f.macs(h, w) for f, (h, w) in zip(self.fuse, stage_sizes[:-1]))
        h, w = stage_sizes[0]
        if final_upsample:
            h, w = 2 * h, 2 * w
        return total + self.head.macs(h, w)[0]


class DepthNet(Module):
    def __init__(self, cfg: VariantConfig, in_channels: int = 3, seed: int = 0):
        self.cfg = cfg
        self.stage = [TransformerBlock(bc, "self") for bc in cfg.block_configs(in_channels)]
        self.decoder = ProgressiveDecoder(cfg.widths, cfg.decoder_width)
        self.init_parameters(seed)

    def encode(self, img: Tensor) -> list:
        _, _, h, w = img.shape
        self.cfg.check_input(h, w)
        feats, x = [], img
        for block in self.stage:
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, img: Tensor, final_upsample: bool = True) -> tuple:
        """Returns ``(disparity [B,1,H,W] in (0, 1), [four stage maps])``."""
        feats = self.encode(img)
        return self.decoder(feats, final_upsample), feats

    def stage_shapes(self, h: int, w: int, batch: int = 1) -> list:
        return [(batch, c, h >> (k + 1), w >> (k + 1)) for k, c in enumerate(self.cfg.widths)]

    def macs(self, h: int, w: int, final_upsample: bool = True) -> int:
        total, sizes = 0, []
        for block in self.stage:
            m, (h, w) = block.macs(h, w)
            total += m
            sizes.append((h, w))
        return total + self.decoder.macs(sizes, final_upsample)

    def stage_report(self, h: int, w: int) -> list:
        rows = []
        for k, block in enumerate(self.stage):
            m, (h, w) = block.macs(h, w)
            rows.append({"stage": k + 1, "shape": [self.cfg.widths[k], h, w],
                         "params": block.num_parameters(), "macs": m})
        return rows


@dataclass
class PoseVector:
    """Batched 6-DoF motion: axis-angle rotation [B,3] (radians) and translation [B,3]."""

    axis_angle: Tensor
    translation: Tensor


class PoseNet(Module):
    """Joint-attention encoder over the stacked frames plus a pooled linear head.

    With ``connectivity`` on, each block takes its queries and keys from the
    Depth-Net stage map of matching resolution.  The head pools ReLU'd
    features globally and regresses 12 numbers: (axis-angle, translation)
    for t->t-1 then t->t+1, scaled by ``POSE_SCALE``.
    """

    def __init__(self, cfg: VariantConfig, depth_widths: Sequence[int], in_channels: int = 9,
                 connectivity: bool = True, seed: int = 1):
        self.cfg = cfg
        self.connectivity = connectivity
        partners = list(depth_widths) if connectivity else [None] * 4
        self.stage = [TransformerBlock(bc, "joint", p)
                      for bc, p in zip(cfg.block_configs(in_channels), partners)]
        self.head = Linear(cfg.widths[-1], 12, init="fan_in")
        self.init_parameters(seed)

    def forward(self, prev: Tensor, cur: Tensor, nxt: Tensor,
                depth_feats: Optional[Sequence[Tensor]] = None) -> tuple:
        if self.connectivity:
            if depth_feats is None or len(depth_feats) != len(self.stage):
                raise ValueError("Pose-Net with connectivity needs the four Depth-Net stage maps")
        x = ops.concat([prev, cur, nxt], axis=1)
        _, _, h, w = x.shape
        self.cfg.check_input(h, w)
        for k, block in enumerate(self.stage):
            x = block(x, depth_feats[k] if self.connectivity else None)
        pooled = ops.mean(ops.relu(x), axis=(2, 3))
        out = ops.mul(self.head(pooled), POSE_SCALE)
        return (PoseVector(out[:, 0:3], out[:, 3:6]), PoseVector(out[:, 6:9], out[:, 9:12]))

    def macs(self, h: int, w: int) -> int:
        total = 0
        for block in self.stage:
            m, (h, w) = block.macs(h, w)
            total += m
        return total + self.head.macs(1)


def disp_to_depth(disp, min_depth: float = 0.1, max_depth: float = 100.0):
    """Map disparity in [0, 1] to depth in [min_depth, max_depth] (monotone decreasing)."""
    if not 0 < min_depth < max_depth:
        raise ValueError(f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    if isinstance(disp, Tensor):
        return ops.div(1.0, ops.add(ops.mul(disp, hi - lo), lo))
    return 1.0 / (lo + (hi - lo) * np.asarray(disp))


def count_params_macs(net: Module, input_shape: Sequence[int]) -> tuple:
    """Exact learnable-parameter count and analytic MACs for one forward pass.

    ``input_shape`` is (B, C, H, W).  Only convolutions and matmuls carry
    MACs; norms, activations, pooling, resampling and adds count zero.
    """
    b, _, h, w = input_shape
    return net.num_parameters(), b * net.macs(h, w)
