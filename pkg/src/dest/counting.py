"""Instrumented multiply counting by naive re-execution.

The analytic ``macs`` methods are checked against this counter: every
convolution and matmul recorded during a traced forward pass is executed
again with explicit loops that tally each product they form.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .audit import trace


class MacCounter:
    def __init__(self):
        self.count = 0

    def conv2d(self, x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0,
               groups: int = 1) -> np.ndarray:
        b, cin, h, wd = x.shape
        cout, cin_g, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        per_group = cout // groups
        out = np.zeros((b, cout, ho, wo))
        for n in range(b):
            for oc in range(cout):
                g = oc // per_group
                for oy in range(ho):
                    for ox in range(wo):
                        patch = xp[n, g * cin_g:(g + 1) * cin_g,
                                   oy * stride:oy * stride + kh, ox * stride:ox * stride + kw]
                        out[n, oc, oy, ox] = np.sum(patch * w[oc])
                        self.count += patch.size
        return out

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Row-by-row product of [..., M, K] and [..., K, P] with numpy broadcasting."""
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        a = np.broadcast_to(a, batch + a.shape[-2:])
        b = np.broadcast_to(b, batch + b.shape[-2:])
        out = np.zeros(batch + (a.shape[-2], b.shape[-1]))
        for idx in np.ndindex(*batch):
            for i in range(a.shape[-2]):
                row = a[idx + (i,)]
                out[idx + (i,)] = row @ b[idx]
                self.count += row.size * b.shape[-1]
        return out


def instrumented_macs(fn: Callable[[], object], check: bool = True) -> int:
    """Run ``fn`` under a trace and count the products its conv/matmul ops form.

    With ``check`` each naive result is compared against the op's output,
    so the counter cannot drift from what the engine actually computed.
    """
    with trace() as tr:
        fn()
    counter = MacCounter()
    for node in tr.nodes:
        if node.op == "conv2d":
            x, w = (p.data.astype(np.float64) for p in node._parents[:2])
            out = counter.conv2d(x, w, node.attrs["stride"], node.attrs["pad"],
                                 node.attrs["groups"])
            if len(node._parents) > 2:
                out = out + node._parents[2].data.reshape(1, -1, 1, 1)
        elif node.op == "matmul":
            a, b = (p.data.astype(np.float64) for p in node._parents)
            out = counter.matmul(a, b) * node.attrs.get("alpha", 1.0)
        else:
            continue
        if check and not np.allclose(out, node.data, rtol=1e-4, atol=1e-5):
            raise AssertionError(f"naive {node.op} disagrees with the engine output")
    return counter.count
