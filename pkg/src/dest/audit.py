"""Op tracing and graph audits.

``trace()`` records every op executed while active, in execution order.
``graph_ops(out)`` walks the finished graph backwards from an output.
Both feed the structural checks: whitelist of primitive ops, no layer
normalization anywhere, batch norm only in inference mode.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from . import tensor as _tensor
from .tensor import Tensor

# Plumbing ops that move data without arithmetic.
LAYOUT_OPS = frozenset({"reshape", "transpose"})

# Ops a DEST transformer block may contain: convolution, depth-wise
# convolution, batch norm, ReLU, max / mean reduction, plus the matmul,
# layout and add plumbing attention needs.  Bilinear resize is admitted for
# the decoder.
BLOCK_WHITELIST = frozenset({"conv2d", "dwconv2d", "batch_norm", "relu", "reduce_max",
                             "reduce_mean", "matmul", "reshape", "transpose", "add",
                             "bilinear_resize"})
# The full Depth-Net additionally concatenates decoder features and squashes
# the head output to a disparity.
DEPTHNET_WHITELIST = BLOCK_WHITELIST | {"concat", "sigmoid"}

NORM_OPS = frozenset({"batch_norm", "layer_norm", "group_norm", "instance_norm"})


def op_kind(t: Tensor) -> str:
    """Op name with depth-wise convolutions told apart from dense ones."""
    if t.op == "conv2d" and t.attrs.get("depthwise"):
        return "dwconv2d"
    return t.op


@dataclass
class Trace:
    nodes: list = field(default_factory=list)

    def record(self, out: Tensor) -> None:
        self.nodes.append(out)

    @property
    def ops(self) -> list:
        return [op_kind(t) for t in self.nodes]

    def compute_ops(self) -> list:
        """Op kinds with pure layout ops dropped."""
        return [k for k in self.ops if k not in LAYOUT_OPS]

    def macs(self) -> int:
        return int(sum(t.attrs.get("macs", 0) for t in self.nodes))


@contextlib.contextmanager
def trace() -> Iterator[Trace]:
    tr = Trace()
    _tensor._tracers.append(tr)
    try:
        yield tr
    finally:
        _tensor._tracers.remove(tr)


def graph_nodes(out: Tensor) -> list:
    """All op outputs reachable from ``out`` (leaves excluded)."""
    seen, stack, nodes = set(), [out], []
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.op != "leaf":
            nodes.append(t)
        stack.extend(t._parents)
    return nodes


def graph_ops(out: Tensor) -> Counter:
    return Counter(op_kind(t) for t in graph_nodes(out))


def non_whitelisted(ops: Iterable[str], whitelist: frozenset = BLOCK_WHITELIST) -> set:
    return {op for op in ops if op not in whitelist}


def batch_statistic_ops(nodes: Iterable[Tensor]) -> list:
    """Normalization ops whose statistics come from the current batch."""
    bad = []
    for t in nodes:
        if t.op in NORM_OPS and not (t.op == "batch_norm" and t.attrs.get("mode") == "infer"):
            bad.append(t)
    return bad


def trailing_ops(tr: Trace, skip_layout: bool = True) -> list:
    """Op kinds from the end of the trace back to the last residual add."""
    tail = []
    for kind in reversed(tr.ops):
        if skip_layout and kind in LAYOUT_OPS:
            continue
        if kind == "add":
            break
        tail.append(kind)
    return tail[::-1]
