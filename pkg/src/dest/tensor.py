"""Dense tensor with a define-by-run gradient tape.

Every op result keeps references to its inputs and the op name, whether or
not gradients are tracked, so finished graphs can be audited (see
:mod:`dest.audit`).  Backward closures are only attached when some input
requires a gradient and grad mode is on.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = {"dtype": np.dtype(np.float32), "grad": True, "debug": False}
_tracers: list = []


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    _state["dtype"] = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Check every op output for NaN/Inf while active."""
    prev = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = prev


class BackwardError(RuntimeError):
    pass


class Tensor:
    """n-dimensional real array, optionally taking part in reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "op", "attrs", "_parents",
                 "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.attrs: dict = {}
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar; implementations live in dest.ops -----------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    # -- reverse mode -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad.

        The graph is released afterwards; calling backward on the same loss
        twice raises :class:`BackwardError`.
        """
        if self.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise BackwardError("backward already ran on this loss; rebuild the graph")
        if not self.requires_grad:
            raise BackwardError("loss is detached from the tape (requires_grad=False)")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node._consumed:
                    raise BackwardError("graph segment was released by an earlier backward")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise BackwardError(
                        f"op {node.op!r} produced grad {pg.shape} for input {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._consumed = True
        self._consumed = True


def _topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` through grad-carrying edges, parents first."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._backward is not None:
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    return order


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward: Optional[Callable],
             op: str, **attrs) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.attrs = attrs
    # graph links are kept for audits and tracing; plain inference drops them
    # so intermediates can be freed as soon as they are consumed
    out._parents = tuple(parents) if (_state["grad"] or _tracers) else ()
    out._consumed = False
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._backward = backward if track else None
    if _state["debug"] and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"op {op!r} produced non-finite values from finite inputs")
    for tracer in _tracers:
        tracer.record(out)
    return out


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or _state["dtype"]))


# -- initialization ---------------------------------------------------------

def _seed_for(seed: int, name: str = "") -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def initialize(shape: Sequence[int], kind: str = "zeros", seed: int = 0, *, name: str = "",
               a: float = -0.05, b: float = 0.05, std: float = 0.02,
               fan_in: Optional[int] = None, dtype=None) -> np.ndarray:
    """Deterministic initial values for a parameter.

    ``kind`` is one of ``zeros``, ``ones``, ``uniform`` (over ``[a, b)``),
    ``truncated_normal`` (``std``, cut at two standard deviations) or
    ``fan_in`` (He-normal with std ``sqrt(2 / fan_in)``, also truncated).
    Identical ``(kind, seed, name, shape)`` gives bit-identical arrays.
    """
    shape = tuple(int(s) for s in shape)
    dtype = np.dtype(dtype or _state["dtype"])
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "ones":
        return np.ones(shape, dtype=dtype)
    rng = _seed_for(seed, name)
    if kind == "uniform":
        return rng.uniform(a, b, size=shape).astype(dtype)
    if kind in ("truncated_normal", "fan_in"):
        if kind == "fan_in":
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            std = float(np.sqrt(2.0 / max(fan_in, 1)))
        vals = rng.standard_normal(size=shape)
        bad = np.abs(vals) > 2.0
        while bad.any():
            vals[bad] = rng.standard_normal(size=int(bad.sum()))
            bad = np.abs(vals) > 2.0
        return (vals * std).astype(dtype)
    raise ValueError(f"unknown initializer kind {kind!r}")
