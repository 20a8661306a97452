"""DEST building blocks: overlapping patch embedding, sequence reduction,
simplified (self / joint) attention, Mix-FFN and the transformer block.

Token tensors are [B, N, C] with N = H*W in row-major order; feature maps
are [B, C, H, W].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .nn import BatchNorm, Conv2d, Linear, Module, map_to_tokens, tokens_to_map
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int = 1
    reduction_ratio: int = 1
    qk_scale: Optional[float] = None

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def scale(self) -> float:
        return self.qk_scale if self.qk_scale is not None else self.head_dim ** -0.5

    def check_spatial(self, h: int, w: int) -> None:
        r = self.reduction_ratio
        if h % r or w % r:
            raise ValueError(f"{h}x{w} token grid not divisible by reduction ratio {r}")


@dataclass(frozen=True)
class PatchEmbedConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("patch-embed kernel must be odd")

    stride = 2

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


@dataclass(frozen=True)
class BlockConfig:
    embed: PatchEmbedConfig
    attn: AttentionConfig
    ffn_expansion: int = 4
    depth: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("block depth must be >= 1")
        if self.attn.channels != self.embed.out_channels:
            raise ValueError("attention width must equal the patch-embed output width")


class OverlapPatchEmbed(Module):
    """Stride-2 convolution with an overlapping kernel, then batch norm."""

    def __init__(self, cfg: PatchEmbedConfig):
        self.cfg = cfg
        self.conv = Conv2d(cfg.in_channels, cfg.out_channels, cfg.kernel, stride=cfg.stride,
                           pad=cfg.padding, bias=False)
        self.bn = BatchNorm(cfg.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch embedding needs even spatial dims, got {h}x{w}")
        return self.bn(self.conv(x))

    def macs(self, h: int, w: int) -> tuple:
        return self.conv.macs(h, w)


def sequence_reduce(x: Tensor, ratio: int, h: int, w: int, weight: Optional[Tensor] = None,
                    bias: Optional[Tensor] = None) -> Tensor:
    """Shrink a token grid by ``ratio`` per side with a stride-``ratio`` conv.

    Returns [B, N / ratio**2, C'].  No normalization is applied afterwards.
    With ``weight`` omitted the tokens pass through unchanged (only valid for
    ``ratio == 1``).
    """
    b, n, _ = x.shape
    if n != h * w:
        raise ValueError(f"token count {n} != {h}x{w}")
    if h % ratio or w % ratio:
        raise ValueError(f"{h}x{w} grid not divisible by reduction ratio {ratio}")
    if weight is None:
        if ratio != 1:
            raise ValueError("a reduction conv is required for ratio > 1")
        return x
    m = ops.conv2d(tokens_to_map(x, h, w), weight, bias, stride=ratio)
    return map_to_tokens(m)


class SequenceReduction(Module):
    def __init__(self, channels: int, ratio: int):
        self.ratio = ratio
        self.conv = Conv2d(channels, channels, ratio, stride=ratio) if ratio > 1 else None

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        if self.conv is None:
            return sequence_reduce(x, 1, h, w)
        return sequence_reduce(x, self.ratio, h, w, self.conv.weight, self.conv.bias)

    def macs(self, h: int, w: int) -> int:
        return 0 if self.conv is None else self.conv.macs(h, w)[0]


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return ops.transpose(ops.reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, heads, n, d = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1, 3)), (b, n, heads * d))


class SimplifiedAttention(Module):
    """Attention with a max over keys instead of softmax and a pooled value.

    Per head, every query row keeps only its largest scaled q.k score; the
    value is the per-channel mean over all tokens of the value source, so
    the head output is the outer product of the [N, 1] row maxima and the
    [1, C/h] mean.  Queries and keys come from ``qk_channels``-wide
    features: the block's own tokens in self mode, the Depth-Net tokens of
    the matching stage in joint mode.
    """

    def __init__(self, cfg: AttentionConfig, qk_channels: Optional[int] = None):
        self.cfg = cfg
        c = cfg.channels
        cq = qk_channels or c
        self.qk_channels = cq
        self.q = Linear(cq, c)
        self.sr = SequenceReduction(cq, cfg.reduction_ratio)
        self.k = Linear(cq, c)
        self.proj = Linear(c, c)

    def scores(self, qk_src: Tensor, h: int, w: int) -> Tensor:
        """Scaled q.k scores, [B, heads, N, N / R**2]."""
        self.cfg.check_spatial(h, w)
        q = _split_heads(self.q(qk_src), self.cfg.heads)
        k = _split_heads(self.k(self.sr(qk_src, h, w)), self.cfg.heads)
        return ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)), alpha=self.cfg.scale)

    def forward(self, x: Tensor, h: int, w: int, qk_src: Optional[Tensor] = None) -> Tensor:
        """``x`` supplies the pooled value; ``qk_src`` (default ``x``) the queries and keys."""
        if qk_src is None:
            qk_src = x
        elif qk_src.shape[:2] != x.shape[:2]:
            raise ValueError(f"joint attention streams disagree: q/k {qk_src.shape} "
                             f"vs value {x.shape}")
        if qk_src.shape[2] != self.qk_channels:
            raise ValueError(f"q/k source has {qk_src.shape[2]} channels, "
                             f"expected {self.qk_channels}")
        rowmax = ops.reduce_max(self.scores(qk_src, h, w), axis=-1)        # [B,h,N,1]
        vbar = _split_heads(ops.reduce_mean(x, axis=1), self.cfg.heads)    # [B,h,1,d]
        return self.proj(_merge_heads(ops.matmul(rowmax, vbar)))

    def macs(self, h: int, w: int) -> int:
        n = h * w
        nk = n // self.cfg.reduction_ratio ** 2
        c = self.cfg.channels
        return (self.q.macs(n) + self.sr.macs(h, w) + self.k.macs(nk)
                + n * nk * c          # scores, summed over heads
                + n * c               # rank-1 outer product per head
                + self.proj.macs(n))


class SoftmaxAttention(Module):
    """Baseline efficient self-attention with softmax and a learnable value
    projection over the reduced tokens.  Used only for comparisons."""

    def __init__(self, cfg: AttentionConfig):
        self.cfg = cfg
        c = cfg.channels
        self.q = Linear(c, c)
        self.sr = SequenceReduction(c, cfg.reduction_ratio)
        self.k = Linear(c, c)
        self.v = Linear(c, c)
        self.proj = Linear(c, c)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        self.cfg.check_spatial(h, w)
        heads = self.cfg.heads
        q = _split_heads(self.q(x), heads)
        kv = self.sr(x, h, w)
        k = _split_heads(self.k(kv), heads)
        v = _split_heads(self.v(kv), heads)
        attn = ops.softmax(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)), alpha=self.cfg.scale),
                           axis=-1)
        return self.proj(_merge_heads(ops.matmul(attn, v)))

    def macs(self, h: int, w: int) -> int:
        n = h * w
        nk = n // self.cfg.reduction_ratio ** 2
        c = self.cfg.channels
        return (self.q.macs(n) + self.sr.macs(h, w) + self.k.macs(nk) + self.v.macs(nk)
                + 2 * n * nk * c + self.proj.macs(n))


class MixFFN(Module):
    """1x1 conv -> BN -> 3x3 depth-wise conv -> BN -> ReLU -> 1x1 conv."""

    def __init__(self, channels: int, expansion: int = 4):
        hidden = channels * expansion
        self.fc1 = Conv2d(channels, hidden, 1, bias=False)
        self.bn1 = BatchNorm(hidden)
        self.dw = Conv2d(hidden, hidden, 3, pad=1, groups=hidden, bias=False)
        self.bn2 = BatchNorm(hidden)
        self.fc2 = Conv2d(hidden, channels, 1)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        m = tokens_to_map(x, h, w)
        m = ops.relu(self.bn2(self.dw(self.bn1(self.fc1(m)))))
        return map_to_tokens(self.fc2(m))

    def macs(self, h: int, w: int) -> int:
        return sum(layer.macs(h, w)[0] for layer in (self.fc1, self.dw, self.fc2))


class SubBlock(Module):
    def __init__(self, cfg: BlockConfig, qk_channels: Optional[int] = None):
        self.attn = SimplifiedAttention(cfg.attn, qk_channels)
        self.ffn = MixFFN(cfg.attn.channels, cfg.ffn_expansion)

    def forward(self, x: Tensor, h: int, w: int, qk_src: Optional[Tensor] = None) -> Tensor:
        x = ops.add(x, self.attn(x, h, w, qk_src))
        return ops.add(x, self.ffn(x, h, w))

    def macs(self, h: int, w: int) -> int:
        return self.attn.macs(h, w) + self.ffn.macs(h, w)


class TransformerBlock(Module):
    """Patch embedding followed by ``depth`` attention + Mix-FFN pairs.

    ``mode="self"`` (Depth-Net) ends without any normalization.
    ``mode="joint"`` (Pose-Net) takes queries and keys from partner features
    of ``partner_channels`` width and ends in one batch norm.  A joint block
    built with ``partner_channels=None`` attends over its own tokens (the
    no-connectivity ablation) but keeps the trailing batch norm.
    """

    def __init__(self, cfg: BlockConfig, mode: str = "self",
                 partner_channels: Optional[int] = None):
        if mode not in ("self", "joint"):
            raise ValueError(f"unknown block mode {mode!r}")
        if mode == "self" and partner_channels is not None:
            raise ValueError("self-mode blocks take no partner features")
        self.cfg, self.mode = cfg, mode
        self.partner_channels = partner_channels
        self.embed = OverlapPatchEmbed(cfg.embed)
        self.sub = [SubBlock(cfg, partner_channels) for _ in range(cfg.depth)]
        self.norm = BatchNorm(cfg.attn.channels) if mode == "joint" else None

    def forward(self, x: Tensor, partner: Optional[Tensor] = None) -> Tensor:
        if self.partner_channels is not None and partner is None:
            raise ValueError("joint block needs Depth-Net partner features")
        m = self.embed(x)
        _, _, h, w = m.shape
        qk_src = None
        if partner is not None:
            if self.partner_channels is None:
                raise ValueError("this block was built without partner features")
            if partner.shape[0] != m.shape[0] or partner.shape[2:] != (h, w):
                raise ValueError(f"partner features {partner.shape} do not match block grid "
                                 f"{m.shape[0]}x{h}x{w}")
            qk_src = map_to_tokens(partner)
        t = map_to_tokens(m)
        for sub in self.sub:
            t = sub(t, h, w, qk_src)
        out = tokens_to_map(t, h, w)
        return self.norm(out) if self.norm is not None else out

    def macs(self, h: int, w: int) -> tuple:
        total, (ho, wo) = self.embed.macs(h, w)
        total += sum(sub.macs(ho, wo) for sub in self.sub)
        return total, (ho, wo)


def argmax_columns(scores: Tensor) -> np.ndarray:
    """Key index selected by the row max for every query, [B, heads, N]."""
    return np.argmax(scores.data, axis=-1)
