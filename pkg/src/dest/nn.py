"""Parameter containers and the three primitive layers the networks use."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype, initialize


class Parameter(Tensor):
    """A learnable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal module tree.

    Children are discovered from instance attributes in assignment order.
    A list attribute ``stage = [a, b]`` yields children named ``stage1`` and
    ``stage2`` (1-based), which gives checkpoint names like
    ``stage2.sub3.attn.q.weight``.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield f"{name}{i + 1}", child

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for mod_name, mod in self.named_modules(prefix):
            for name in getattr(mod, "_buffers", ()):
                yield f"{mod_name}.{name}" if mod_name else name, getattr(mod, name)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def init_parameters(self, seed: int) -> "Module":
        """Re-draw every parameter from a stream keyed by ``seed`` and its full name."""
        for name, mod in self.named_modules():
            reset = getattr(mod, "reset_parameters", None)
            if reset is not None:
                reset(seed, name)
        return self

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {src.shape} != model {arr.shape}")
            arr[...] = src


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, pad: int = 0,
                 groups: int = 1, bias: bool = True):
        self.stride, self.pad, self.groups = stride, pad, groups
        self.in_channels, self.out_channels, self.kernel = cin, cout, kernel
        self.weight = Parameter(initialize((cout, cin // groups, kernel, kernel), "zeros"))
        self.bias = Parameter(initialize((cout,), "zeros")) if bias else None
        self.reset_parameters(0, "")

    def reset_parameters(self, seed: int, name: str) -> None:
        fan_in = (self.in_channels // self.groups) * self.kernel * self.kernel
        self.weight.data[...] = initialize(self.weight.shape, "fan_in", seed,
                                           name=name + ".weight", fan_in=fan_in)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)

    def macs(self, h: int, w: int, batch: int = 1) -> tuple:
        """MACs and output size for an ``h`` x ``w`` input."""
        ho, wo = ops.conv2d_output_size(h, w, self.kernel, self.kernel, self.stride, self.pad)
        per = (self.in_channels // self.groups) * self.kernel * self.kernel
        return batch * self.out_channels * ho * wo * per, (ho, wo)


class Linear(Module):
    def __init__(self, cin: int, cout: int, bias: bool = True, init: str = "truncated_normal"):
        self.in_features, self.out_features, self.init = cin, cout, init
        self.weight = Parameter(initialize((cin, cout), "zeros"))
        self.bias = Parameter(initialize((cout,), "zeros")) if bias else None
        self.reset_parameters(0, "")

    def reset_parameters(self, seed: int, name: str) -> None:
        # fan_in here is the Linear's input width (weight is [cin, cout]).
        self.weight.data[...] = initialize(self.weight.shape, self.init, seed,
                                           name=name + ".weight", std=0.02,
                                           fan_in=self.in_features)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def macs(self, tokens: int, batch: int = 1) -> int:
        return batch * tokens * self.in_features * self.out_features


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        dtype = get_default_dtype()
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def reset_parameters(self, seed: int, name: str) -> None:
        self.weight.data[...] = 1.0
        self.bias.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    """[B, N, C] -> [B, C, H, W]."""
    b, n, c = x.shape
    if n != h * w:
        raise ValueError(f"token count {n} != {h}x{w}")
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (b, c, h, w))


def map_to_tokens(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, H*W, C]."""
    b, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (b, c, h * w)), (0, 2, 1))


def optional_macs(layer: Optional[Module], *args) -> int:
    if layer is None:
        return 0
    res = layer.macs(*args)
    return res[0] if isinstance(res, tuple) else res
