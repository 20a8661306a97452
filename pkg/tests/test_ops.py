import numpy as np
import pytest

from dest import ops
from dest.gradcheck import grad_check
from dest.tensor import Tensor

from conftest import TRIALS, leaf


def naive_conv(x, w, b, stride, pad, groups):
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    per = cout // groups
    for bi in range(n):
        for oc in range(cout):
            g = oc // per
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, g * cg + ic, oy * stride + i, ox * stride + j] * w[oc, ic, i, j]
                    out[bi, oc, oy, ox] = acc
    return out


# -- forward oracles -----------------------------------------------------------

def test_conv_sum_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), pad=1).data, x)


@pytest.mark.parametrize("groups,cout,k,stride,pad", [(1, 4, 3, 2, 1), (2, 4, 3, 1, 1),
                                                      (1, 3, 1, 1, 0), (4, 4, 3, 2, 1)])
def test_conv_matches_naive_loops(groups, cout, k, stride, pad):
    rng = np.random.default_rng(1)
    cin = 2 if groups < 4 else 4
    x = rng.normal(size=(1, cin, 5, 5))
    w = rng.normal(size=(cout, cin // groups, k, k))
    b = rng.normal(size=cout)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups).data
    ref = naive_conv(x, w, b, stride, pad, groups)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-12)


def test_depthwise_is_per_channel_conv():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(3, 1, 3, 3))
    dw = ops.conv2d(Tensor(x), Tensor(w), pad=1, groups=3).data
    for c in range(3):
        single = ops.conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1]), pad=1).data
        np.testing.assert_array_equal(dw[:, c:c + 1], single)


def test_conv_shape_errors_name_dimensions():
    with pytest.raises(ValueError, match="channel|Cin|groups"):
        ops.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_matmul_examples():
    a = np.random.default_rng(3).normal(size=(3, 4))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    got = ops.matmul(Tensor(np.array([[1.0, 2], [3, 4]])), Tensor(np.array([[1.0], [1]]))).data
    np.testing.assert_array_equal(got, [[3], [7]])


def test_matmul_matches_triple_loop_exactly():
    rng = np.random.default_rng(4)
    a, b = rng.integers(-9, 9, (4, 5)).astype(np.float64), rng.integers(-9, 9, (5, 6)).astype(np.float64)
    ref = np.zeros((4, 6))
    for i in range(4):
        for j in range(6):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_array_equal(ops.matmul(Tensor(a), Tensor(b)).data, ref)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
    ref = np.array([[sum(a[i, k] * b[k, j] for k in range(5)) for j in range(6)] for i in range(4)])
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-14)


def test_matmul_dim_mismatch():
    with pytest.raises(ValueError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_reductions():
    x = Tensor(np.array([[1.0, 5, 3], [2, 2, 2]]))
    np.testing.assert_array_equal(ops.reduce_max(x, -1).data, [[5], [2]])
    y = Tensor(np.array([[1.0, 5, 3], [3, 1, 1]]))
    np.testing.assert_array_equal(ops.reduce_mean(y, 0).data, [[2, 3, 2]])
    np.testing.assert_array_equal(ops.reduce_mean(Tensor(np.full((3, 4), 7.0)), 1).data, 7.0)


def test_reduce_max_tie_goes_to_first():
    x = Tensor(np.array([[2.0, 2.0]]), requires_grad=True)
    ops.sum(ops.reduce_max(x, -1)).backward()
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0]])


def test_activations():
    np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0, 2]))).data, [0, 0, 2])
    assert ops.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    big = ops.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0


def test_softmax_properties():
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros((1, 4))), -1).data, 0.25)
    x = np.random.default_rng(5).normal(size=(3, 7))
    s = ops.softmax(Tensor(x), -1).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ops.softmax(Tensor(x + 123.4), -1).data, s, atol=1e-6)


def test_batch_norm_infer_identity_stats():
    x = np.random.default_rng(6).normal(size=(2, 3, 4, 4))
    eps = 1e-5
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3),
                         np.ones(3), training=False, eps=eps).data
    np.testing.assert_allclose(out, x, rtol=eps / 2 + 1e-12, atol=0)


def test_batch_norm_train_statistics_and_running_update():
    rng = np.random.default_rng(7)
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    gamma, beta = rng.uniform(0.5, 2, 3), rng.normal(size=3)
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training=True,
                         momentum=0.1).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), gamma ** 2, rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batch_norm_infer_is_per_sample():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 2, 4, 4))
    args = (Tensor(rng.uniform(0.5, 2, 2)), Tensor(rng.normal(size=2)), rng.normal(size=2),
            rng.uniform(0.5, 2, 2))
    full = ops.batch_norm(Tensor(x), *args, training=False).data
    perm = ops.batch_norm(Tensor(x[[2, 0, 1, 1]]), *args, training=False).data
    np.testing.assert_array_equal(perm, full[[2, 0, 1, 1]])


def test_batch_norm_channel_mismatch():
    with pytest.raises(ValueError):
        ops.batch_norm(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       np.zeros(2), np.ones(2), training=False)


def test_bilinear_resize_examples():
    x = np.random.default_rng(9).normal(size=(1, 2, 3, 5))
    np.testing.assert_allclose(ops.bilinear_resize(Tensor(x), 3, 5).data, x, atol=1e-15)
    np.testing.assert_allclose(ops.bilinear_resize(Tensor(np.full((1, 1, 1, 1), 4.2)), 4, 4).data,
                               4.2)


def test_bilinear_2x2_to_4x4_closed_form():
    a, b, c, d = 1.0, 3.0, -2.0, 5.0
    x = np.array([[[[a, b], [c, d]]]])
    got = ops.bilinear_resize(Tensor(x), 4, 4).data[0, 0]
    for oy in range(4):
        for ox in range(4):
            # half-pixel centers, clamped to the input's edge samples
            sy = min(max((oy + 0.5) / 2 - 0.5, 0.0), 1.0)
            sx = min(max((ox + 0.5) / 2 - 0.5, 0.0), 1.0)
            ref = (1 - sy) * ((1 - sx) * a + sx * b) + sy * ((1 - sx) * c + sx * d)
            assert got[oy, ox] == pytest.approx(ref, abs=1e-14)


def identity_grid(h, w):
    ys, xs = np.meshgrid((2 * np.arange(h) + 1) / h - 1, (2 * np.arange(w) + 1) / w - 1,
                         indexing="ij")
    return np.stack([xs, ys], -1)[None]


def test_grid_sample_identity_and_padding():
    x = np.random.default_rng(10).normal(size=(1, 3, 4, 6))
    np.testing.assert_allclose(ops.grid_sample(Tensor(x), Tensor(identity_grid(4, 6))).data, x,
                               atol=1e-14)
    far = np.full((1, 4, 6, 2), -3.0)
    np.testing.assert_array_equal(ops.grid_sample(Tensor(x), Tensor(far)).data, 0.0)


def test_reflect_pad_and_avg_pool():
    x = np.arange(12.0).reshape(1, 1, 3, 4)
    np.testing.assert_array_equal(ops.reflect_pad2d(Tensor(x), 1).data[0, 0],
                                  np.pad(x[0, 0], 1, mode="reflect"))
    pooled = ops.avg_pool2d(Tensor(x), 3).data[0, 0]
    np.testing.assert_allclose(pooled, [[5.0, 6.0]])


def test_no_layer_norm_op_exposed():
    assert not any("layer_norm" in name or "layernorm" in name.lower() for name in dir(ops))


# -- gradient checks (float64, >= 20 random trials per op) ---------------------

def _worst(build, shapes, trials=TRIALS, lo=-1.0, hi=1.0, **kw):
    worst = 0.0
    for t in range(trials):
        params = [leaf(s, 1000 * t + i, lo, hi) for i, s in enumerate(shapes)]
        worst = max(worst, grad_check(lambda: build(*params, seed=t), params, **kw))
    return worst


def _away_from_zero(x, margin=1e-2):
    x.data[np.abs(x.data) < margin] += 2 * margin
    return x


ELEMENTWISE = {
    "add": (lambda a, b, seed: ops.sum(ops.mul(ops.add(a, b), ops.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b, seed: ops.sum(ops.mul(ops.sub(a, b), a)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b, seed: ops.sum(ops.mul(a, b)), [(2, 3, 4), (3, 4)]),
    "div": (lambda a, b, seed: ops.sum(ops.div(a, ops.add(ops.mul(b, b), 0.5))), [(3, 4), (3, 4)]),
    "neg": (lambda a, seed: ops.sum(ops.mul(ops.neg(a), a)), [(5,)]),
    "exp": (lambda a, seed: ops.sum(ops.exp(a)), [(3, 4)]),
    "log": (lambda a, seed: ops.sum(ops.log(ops.add(ops.mul(a, a), 0.1))), [(3, 4)]),
    "sqrt": (lambda a, seed: ops.sum(ops.sqrt(ops.add(ops.mul(a, a), 0.1))), [(3, 4)]),
    "sin": (lambda a, seed: ops.sum(ops.sin(a)), [(6,)]),
    "cos": (lambda a, seed: ops.sum(ops.cos(a)), [(6,)]),
    "sigmoid": (lambda a, seed: ops.sum(ops.mul(ops.sigmoid(a), a)), [(3, 4)]),
    "softmax": (lambda a, seed: ops.sum(ops.mul(ops.softmax(a, -1),
                                                Tensor(np.arange(20.0).reshape(4, 5)))), [(4, 5)]),
    "sum": (lambda a, seed: ops.sum(ops.mul(ops.sum(a, axis=1), ops.sum(a, axis=1))), [(3, 4, 2)]),
    "mean": (lambda a, seed: ops.sum(ops.mul(ops.mean(a, axis=(0, 2)), ops.mean(a, axis=(0, 2)))),
             [(3, 4, 2)]),
    "reduce_mean": (lambda a, seed: ops.sum(ops.mul(ops.reduce_mean(a, 1), ops.reduce_mean(a, 1))),
                    [(3, 5)]),
    "matmul": (lambda a, b, seed: ops.sum(ops.mul(ops.matmul(a, b, alpha=0.7), ops.matmul(a, b))),
               [(2, 3, 4), (2, 4, 5)]),
    "matmul_shared_rhs": (lambda a, b, seed: ops.sum(ops.exp(ops.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "reshape_transpose": (lambda a, seed: ops.sum(ops.mul(ops.transpose(ops.reshape(a, (3, 2, 4)), (2, 0, 1)),
                                                          Tensor(np.arange(24.0).reshape(4, 3, 2)))),
                          [(6, 4)]),
    "concat": (lambda a, b, seed: ops.sum(ops.exp(ops.concat([a, b], axis=1))), [(2, 3), (2, 2)]),
    "slice": (lambda a, seed: ops.sum(ops.exp(a[:, 1:3])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_gradcheck_smooth_ops(name, f64):
    build, shapes = ELEMENTWISE[name]
    assert _worst(build, shapes) < 1e-4


def test_gradcheck_relu_abs_clamp_minimum_away_from_kinks(f64):
    def relu_f(a, seed):
        _away_from_zero(a)
        return ops.sum(ops.mul(ops.relu(a), a))

    def abs_f(a, seed):
        _away_from_zero(a)
        return ops.sum(ops.mul(ops.abs(a), a))

    def clamp_f(a, seed):
        _away_from_zero(a)
        return ops.sum(ops.mul(ops.clamp_min(a, 0.0), a))

    def min_f(a, b, seed):
        diff = a.data - b.data
        a.data[np.abs(diff) < 1e-2] += 5e-2
        return ops.sum(ops.mul(ops.minimum(a, b), ops.add(a, b)))

    assert _worst(relu_f, [(4, 5)]) < 1e-4
    assert _worst(abs_f, [(4, 5)]) < 1e-4
    assert _worst(clamp_f, [(4, 5)]) < 1e-4
    assert _worst(min_f, [(4, 5), (4, 5)]) < 1e-4


def test_gradcheck_reduce_max_distinct(f64):
    worst = 0.0
    for t in range(TRIALS):
        rng = np.random.default_rng(t)
        # distinct entries at least 0.1 apart, so no probe flips the argmax
        a = Tensor(rng.permutation(18).reshape(3, 6) * 0.1 + rng.uniform(0, 0.01, (3, 6)),
                   requires_grad=True)
        worst = max(worst, grad_check(
            lambda: ops.sum(ops.mul(ops.reduce_max(a, -1), ops.reduce_max(a, -1))), [a]))
        worst = max(worst, grad_check(lambda: ops.sum(ops.exp(ops.reduce_max(a, 0))), [a]))
    assert worst < 1e-4


@pytest.mark.parametrize("groups,k,stride,pad,bias", [(1, 3, 1, 1, True), (1, 3, 2, 1, False),
                                                     (4, 3, 1, 1, False), (2, 3, 2, 0, True),
                                                     (1, 1, 1, 0, True), (1, 2, 2, 0, True)])
def test_gradcheck_conv2d(groups, k, stride, pad, bias, f64):
    cin, cout = 4, 4

    def f(x, w, b, seed):
        out = ops.conv2d(x, w, b if bias else None, stride, pad, groups)
        return ops.sum(ops.mul(out, out))
    assert _worst(f, [(2, cin, 5, 6), (cout, cin // groups, k, k), (cout,)]) < 1e-4


@pytest.mark.parametrize("training", [True, False])
def test_gradcheck_batch_norm(training, f64):
    def f(x, g, b, seed):
        rng = np.random.default_rng(seed)
        out = ops.batch_norm(x, g, b, rng.normal(size=3), rng.uniform(0.5, 2, 3), training)
        return ops.sum(ops.mul(out, Tensor(np.random.default_rng(99).normal(size=x.shape))))
    assert _worst(f, [(2, 3, 4, 4), (3,), (3,)]) < 1e-4


def test_gradcheck_batch_norm_tokens(f64):
    def f(x, g, b, seed):
        out = ops.batch_norm(x, g, b, np.zeros(5), np.ones(5), True)
        return ops.sum(ops.mul(out, ops.exp(out)))
    assert _worst(f, [(2, 6, 5), (5,), (5,)]) < 1e-4


def test_gradcheck_pool_pad_resize(f64):
    w = Tensor(np.random.default_rng(98).normal(size=(2, 3, 8, 10)))

    def f(x, seed):
        p = ops.reflect_pad2d(x, 1)
        return ops.sum(ops.mul(ops.avg_pool2d(ops.mul(p, p), 3), x))

    def g(x, seed):
        return ops.sum(ops.mul(ops.bilinear_resize(x, 8, 10), w))

    def h(x, seed):
        return ops.sum(ops.exp(ops.bilinear_resize(x, 3, 2, align_corners=True)))

    assert _worst(f, [(2, 3, 4, 5)]) < 1e-4
    assert _worst(g, [(2, 3, 4, 5)]) < 1e-4
    assert _worst(h, [(2, 3, 4, 5)]) < 1e-4


def _nudge_off_pixel_boundaries(grid, h, w):
    """Keep sample positions at least 0.05 px away from integer coordinates."""
    ix = ((grid[..., 0] + 1) * w - 1) / 2
    iy = ((grid[..., 1] + 1) * h - 1) / 2
    for arr in (ix, iy):
        frac = arr - np.floor(arr)
        arr[frac < 0.05] += 0.1
        arr[frac > 0.95] -= 0.1
    grid[..., 0] = (2 * ix + 1) / w - 1
    grid[..., 1] = (2 * iy + 1) / h - 1


def test_gradcheck_grid_sample(f64):
    def f(x, grid, seed):
        _nudge_off_pixel_boundaries(grid.data, 4, 4)
        out = ops.grid_sample(x, grid)
        return ops.sum(ops.mul(out, out))
    worst_grid = 0.0
    for t in range(TRIALS):
        x, grid = leaf((1, 1, 4, 4), 3 * t), leaf((1, 4, 4, 2), 3 * t + 1, -1.2, 1.2)
        _nudge_off_pixel_boundaries(grid.data, 4, 4)
        worst_grid = max(worst_grid, grad_check(lambda: f(x, grid, t), [grid], eps=1e-7))
        assert grad_check(lambda: f(x, grid, t), [x]) < 1e-4
    assert worst_grid < 1e-3


def test_grad_check_negative_control(f64, monkeypatch):
    def broken_exp(x):
        from dest.tensor import apply_op
        out = np.exp(x.data)
        return apply_op(out, (x,), lambda g: (g * out * 1.1,), "exp")
    x = leaf((4,), 0)
    assert grad_check(lambda: ops.sum(broken_exp(x)), [x]) > 1e-2


def test_grad_check_quadratic_exact(f64):
    x = leaf((5,), 1)
    assert grad_check(lambda: ops.sum(ops.mul(x, x)), [x], eps=1e-4) < 1e-8
