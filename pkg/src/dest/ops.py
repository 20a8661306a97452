"""Differentiable operations over :class:`~dest.tensor.Tensor`.

The set is deliberately closed: what the DEST networks, the view-synthesis
loss and the softmax baseline need, and nothing else.  There is no layer
normalization here on purpose.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, apply_op, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return a, b


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return apply_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return apply_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return apply_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return apply_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(x: Tensor) -> Tensor:
    return apply_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x: Tensor) -> Tensor:
    return apply_op(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return apply_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)``; gradient passes only where ``x > lo``."""
    mask = x.data > lo
    out = np.where(mask, x.data, np.asarray(lo, dtype=x.dtype))
    return apply_op(out, (x,), lambda g: (g * mask,), "clamp_min", lo=lo)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        return (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))

    return apply_op(out, (a, b), backward, "minimum")


# -- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return apply_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op(out, (x,), backward, "softmax", axis=axis)


# -- reductions -------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op(out, (x,), backward, "sum", axis=axis)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(np.mean(x.data, axis=axis, keepdims=keepdims), dtype=x.dtype)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return apply_op(out, (x,), backward, "mean", axis=axis)


def reduce_mean(x: Tensor, axis: int) -> Tensor:
    """Mean along ``axis``, kept as a length-1 axis."""
    axis = _norm_axis(axis, x.ndim)
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=True)
    return apply_op(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
                    "reduce_mean", axis=axis)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis`` (kept as length 1).  The first argmax gets the gradient."""
    axis = _norm_axis(axis, x.ndim)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return apply_op(out, (x,), backward, "reduce_max", axis=axis)


# -- linear algebra and layout ----------------------------------------------

def matmul(a: Tensor, b: Tensor, alpha: float = 1.0) -> Tensor:
    """``alpha * a @ b`` over trailing two axes.

    Leading batch axes must match; a 2-d ``b`` is shared across the batch of
    ``a`` (the linear-layer case).
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    out = np.matmul(a.data, b.data)
    if alpha != 1.0:
        out *= alpha

    def backward(g):
        ga = gb = None
        if alpha != 1.0:
            g = g * alpha
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = np.tensordot(a.data.reshape(-1, a.shape[-1]), g.reshape(-1, g.shape[-1]),
                                  axes=(0, 0))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    batch = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    macs = batch * a.shape[-2] * a.shape[-1] * b.shape[-1]
    return apply_op(out, (a, b), backward, "matmul", alpha=alpha, macs=macs)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return apply_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return apply_op(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),),
                    "transpose", axes=axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = _norm_axis(axis, tensors[0].ndim)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(out, tensors, backward, "concat", axis=axis)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing only."""
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if not (isinstance(it, (int, slice)) or it is Ellipsis or it is None):
            raise TypeError("only basic indexing is differentiable here")
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return apply_op(out, (x,), backward, "slice")


# -- convolution ------------------------------------------------------------

def conv2d_output_size(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple:
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(b, c, kh, kw, ho, wo),
                      strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)


def _tap(arr: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int):
    return (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride))


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [B, Cin, H, W], ``w`` is [Cout, Cin/groups, kh, kw].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ValueError(f"conv2d: Cin={cin} and Cout={cout} must be divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(f"conv2d: weight expects Cin/groups={cin_g}, input has Cin={cin} "
                         f"with groups={groups}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError(f"conv2d: padded input {h + 2 * pad}x{wd + 2 * pad} smaller than "
                         f"kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho, wo = conv2d_output_size(h, wd, kh, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # One input channel per group: accumulate tap by tap.  Single-channel
    # convs share this path so they agree bitwise with depth-wise ones.
    tapwise = groups == cin and cin_g == 1
    depthwise = tapwise and groups > 1
    cout_g = cout // groups

    if tapwise:
        mult = cout // cin
        xr = np.repeat(xp, mult, axis=1) if mult > 1 else xp
        out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += w.data[None, :, 0, i, j, None, None] * xr[_tap(xr, i, j, stride, ho, wo)]
        cols = None
    elif kh == kw == 1 and stride == 1 and groups == 1:
        cols = xp.reshape(b, cin, ho * wo)
        out = np.matmul(w.data.reshape(cout, cin), cols).reshape(b, cout, ho, wo)
    else:
        win = _windows(xp, kh, kw, stride, ho, wo)
        cols = win.reshape(b, groups, cin_g * kh * kw, ho * wo)
        wg = w.data.reshape(groups, cout_g, cin_g * kh * kw)
        out = np.matmul(wg[None], cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if tapwise:
            mult = cout // cin
            gxr = np.zeros_like(xr) if x.requires_grad else None
            gw = np.zeros_like(w.data) if w.requires_grad else None
            for i in range(kh):
                for j in range(kw):
                    sl = _tap(xr, i, j, stride, ho, wo)
                    if gw is not None:
                        gw[:, 0, i, j] = (g * xr[sl]).sum(axis=(0, 2, 3))
                    if gxr is not None:
                        gxr[sl] += g * w.data[None, :, 0, i, j, None, None]
            if gxr is not None:
                gxp = gxr.reshape(b, cin, mult, *gxr.shape[2:]).sum(axis=2) if mult > 1 else gxr
                gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            return gx, gw, gb
        if kh == kw == 1 and stride == 1 and groups == 1:
            g2 = g.reshape(b, cout, ho * wo)
            if w.requires_grad:
                gw = np.einsum("bop,bip->oi", g2, cols).reshape(w.shape)
            if x.requires_grad:
                gx = np.matmul(w.data.reshape(cout, cin).T, g2).reshape(x.shape)
            return gx, gw, gb
        g2 = g.reshape(b, groups, cout_g, ho * wo)
        if w.requires_grad:
            gw = np.matmul(g2, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            wg = w.data.reshape(groups, cout_g, cin_g * kh * kw)
            dcols = np.matmul(np.swapaxes(wg, -1, -2)[None], g2)
            dcols = dcols.reshape(b, cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[_tap(gxp, i, j, stride, ho, wo)] += dcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)

    def backward_wrapped(g):
        res = backward(g)
        return res if bias is not None else res[:2]

    macs = b * cout * ho * wo * cin_g * kh * kw
    return apply_op(out, parents, backward_wrapped, "conv2d", kernel=(kh, kw), stride=stride,
                    pad=pad, groups=groups, depthwise=depthwise, in_channels=cin,
                    out_channels=cout, macs=macs)


# -- normalization ----------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except channels.

    Channels are axis 1 for [B, C, H, W] and the last axis for [B, N, C].
    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    if x.ndim == 4:
        caxis = 1
    elif x.ndim == 3:
        caxis = 2
    else:
        raise ValueError(f"batch_norm expects [B,C,H,W] or [B,N,C], got {x.shape}")
    c = x.shape[caxis]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if arr.shape != (c,):
            raise ValueError(f"batch_norm: {name} has shape {arr.shape}, input has C={c}")
    red = tuple(a for a in range(x.ndim) if a != caxis)
    bshape = [1] * x.ndim
    bshape[caxis] = c
    bshape = tuple(bshape)
    m = x.size // c

    if training:
        mu = x.data.mean(axis=red, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * inv_std
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = inv_std / m * (m * dxhat - dxhat.sum(axis=red, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=red, keepdims=True))
            else:
                gx = dxhat * inv_std
        return gx, gg, gbeta

    return apply_op(out, (x, gamma, beta), backward, "batch_norm",
                    mode="train" if training else "infer")


# -- pooling and resampling -------------------------------------------------

def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Stride-1 ``kernel``x``kernel`` mean pool without padding."""
    b, c, h, w = x.shape
    ho, wo = h - kernel + 1, w - kernel + 1
    out = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += x.data[:, :, i:i + ho, j:j + wo]
    out /= kernel * kernel

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + ho, j:j + wo] += gk
        return (gx,)

    return apply_op(out, (x,), backward, "avg_pool", kernel=kernel)


def _separable(x: Tensor, ay: np.ndarray, ax: np.ndarray, op: str, **attrs) -> Tensor:
    """out[b,c] = ay @ x[b,c] @ ax.T, for fixed resampling matrices."""
    ay = ay.astype(x.dtype)
    ax = ax.astype(x.dtype)
    out = np.matmul(np.matmul(ay, x.data), ax.T)

    def backward(g):
        return (np.matmul(np.matmul(ay.T, g), ax),)

    return apply_op(np.ascontiguousarray(out), (x,), backward, op, **attrs)


def _reflect_matrix(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    mat = np.zeros((n + 2 * pad, n))
    mat[np.arange(n + 2 * pad), idx] = 1.0
    return mat


def reflect_pad2d(x: Tensor, pad: int) -> Tensor:
    _, _, h, w = x.shape
    if pad >= h or pad >= w:
        raise ValueError("reflect pad must be smaller than the spatial size")
    return _separable(x, _reflect_matrix(h, pad), _reflect_matrix(w, pad), "pad", mode="reflect")


def _linear_interp_matrix(n_in: int, n_out: int, align_corners: bool) -> np.ndarray:
    dst = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = dst * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(n_out)
    else:
        src = np.maximum((dst + 0.5) * (n_in / n_out) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear resampling of a [B, C, H, W] map; half-pixel centers by default."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    _, _, h, w = x.shape
    return _separable(x, _linear_interp_matrix(h, out_h, align_corners),
                      _linear_interp_matrix(w, out_w, align_corners), "bilinear_resize",
                      size=(out_h, out_w))


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` [B,C,H,W] at ``grid`` [B,Ho,Wo,2] (x, y in [-1, 1]).

    Half-pixel convention (the identity grid hits pixel centers); samples
    outside the image read zeros.  Differentiable in both ``x`` and ``grid``.
    """
    b, c, h, w = x.shape
    if grid.ndim != 4 or grid.shape[0] != b or grid.shape[3] != 2:
        raise ValueError(f"grid must be [B,Ho,Wo,2] with B={b}, got {grid.shape}")
    _, ho, wo, _ = grid.shape
    gx = grid.data[..., 0]
    gy = grid.data[..., 1]
    ix = ((gx + 1.0) * w - 1.0) * 0.5
    iy = ((gy + 1.0) * h - 1.0) * 0.5
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    tx = (ix - x0).astype(x.dtype)
    ty = (iy - y0).astype(x.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = x.data.reshape(b, c, h * w)

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xx = x0 + dx
            yy = y0 + dy
            valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            lin = np.where(valid, yy * w + xx, 0)
            vals = np.take_along_axis(flat, lin.reshape(b, 1, ho * wo), axis=2)
            vals = vals.reshape(b, c, ho, wo) * valid[:, None].astype(x.dtype)
            corners.append((lin, valid, vals))
    (l00, m00, v00), (l01, m01, v01), (l10, m10, v10), (l11, m11, v11) = corners
    wx1, wy1 = tx[:, None], ty[:, None]
    wx0, wy0 = 1.0 - wx1, 1.0 - wy1
    out = (v00 * wx0 * wy0 + v01 * wx1 * wy0 + v10 * wx0 * wy1 + v11 * wx1 * wy1)

    def backward(g):
        gx_ = ggrid = None
        if x.requires_grad:
            acc = np.zeros((b, c, h * w), dtype=np.float64)
            for (lin, valid, _), wgt in zip(corners, (wx0 * wy0, wx1 * wy0, wx0 * wy1, wx1 * wy1)):
                contrib = (g * wgt * valid[:, None]).reshape(b, c, ho * wo)
                offs = (np.arange(b)[:, None] * c + np.arange(c)[None, :])[:, :, None] * (h * w)
                idx = (offs + lin.reshape(b, 1, ho * wo)).reshape(-1)
                acc += np.bincount(idx, weights=contrib.reshape(-1),
                                   minlength=b * c * h * w).reshape(b, c, h * w)
            gx_ = acc.reshape(x.shape).astype(x.dtype)
        if grid.requires_grad:
            dix = ((v01 - v00) * wy0 + (v11 - v10) * wy1)
            diy = ((v10 - v00) * wx0 + (v11 - v01) * wx1)
            dgx = (g * dix).sum(axis=1) * (0.5 * w)
            dgy = (g * diy).sum(axis=1) * (0.5 * h)
            ggrid = np.stack([dgx, dgy], axis=-1).astype(grid.dtype)
        return gx_, ggrid

    return apply_op(out, (x, grid), backward, "grid_sample")


# -- convenience ------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Token-wise affine map: x [..., Cin] @ weight [Cin, Cout] (+ bias)."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def stack_last(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new trailing axis."""
    expanded = [reshape(t, t.shape + (1,)) for t in tensors]
    return concat(expanded, axis=-1)

