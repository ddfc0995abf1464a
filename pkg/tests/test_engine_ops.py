"""Gradient checks (float64 central differences) and op semantics."""

import numpy as np
import pytest

from fd import numeric_grad, rel_error
from gradcamo.engine import Tape, ops
from gradcamo.errors import ValidationError

TOL = 1e-5
SEEDS = (0, 1, 2)


def _check_grad(build, x0, tol=TOL):
    """build(tape, tensor) must return a scalar tensor. Checks d/dx against FD."""

    def f(xv):
        t = Tape()
        return build(t, t.var(xv)).data

    t = Tape()
    xt = t.var(np.asarray(x0, dtype=np.float64))
    loss = build(t, xt)
    t.backward(loss)
    err = rel_error(xt.grad, numeric_grad(f, x0))
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"


def _proj(rng, shape):
    return rng.standard_normal(shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d_input_grad(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 4, 4, 2))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.4
    b = rng.standard_normal(3) * 0.1
    r = _proj(rng, (2, 3, 4, 4, 2))
    _check_grad(lambda t, xt: ops.weighted_sum(ops.conv3d(xt, w, b), r), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d_weight_grad(seed):
    rng = np.random.default_rng(seed + 10)
    x = rng.standard_normal((2, 2, 4, 4, 2))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.4
    b = rng.standard_normal(3) * 0.1
    r = _proj(rng, (2, 3, 4, 4, 2))
    _check_grad(lambda t, wt: ops.weighted_sum(ops.conv3d(x, wt, b), r), w)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d_bias_grad(seed):
    rng = np.random.default_rng(seed + 20)
    x = rng.standard_normal((1, 2, 4, 4, 2))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.4
    b = rng.standard_normal(3) * 0.1
    r = _proj(rng, (1, 3, 4, 4, 2))
    _check_grad(lambda t, bt: ops.weighted_sum(ops.conv3d(x, w, bt), r), b)


def test_conv3d_single_sample_matches_batched():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 5, 5, 4)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    t = Tape()
    y4 = ops.conv3d(x, t.var(w), t.var(b))
    t2 = Tape()
    y5 = ops.conv3d(x[None], t2.var(w), t2.var(b))
    assert y4.shape == (3, 5, 5, 4)
    np.testing.assert_array_equal(y4.data, y5.data[0])


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_grad(seed):
    rng = np.random.default_rng(seed + 30)
    # keep entries away from the kink at 0, where FD is meaningless
    x = rng.standard_normal((3, 5))
    x[np.abs(x) < 1e-3] = 0.5
    r = _proj(rng, x.shape)
    _check_grad(lambda t, xt: ops.weighted_sum(ops.relu(xt), r), x)


def test_relu_subgradient_at_zero_is_zero():
    t = Tape()
    x = t.var(np.array([0.0, -1.0, 2.0]))
    y = ops.relu(x)
    t.backward(ops.weighted_sum(y, np.ones(3)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool3d_grad(seed):
    rng = np.random.default_rng(seed + 40)
    # well-separated values so eps perturbations never flip an argmax
    vals = np.arange(2 * 2 * 4 * 4 * 2, dtype=np.float64) * 0.01
    x = rng.permutation(vals).reshape(2, 2, 4, 4, 2)
    r = _proj(rng, (2, 2, 2, 2, 1))
    _check_grad(lambda t, xt: ops.weighted_sum(ops.maxpool3d(xt), r), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_global_avg_pool_grad(seed):
    rng = np.random.default_rng(seed + 50)
    x = rng.standard_normal((2, 3, 4, 2, 2))
    r = _proj(rng, (2, 3))
    _check_grad(lambda t, xt: ops.weighted_sum(ops.global_avg_pool(xt), r), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_grads(seed):
    rng = np.random.default_rng(seed + 60)
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((3, 6)) * 0.5
    b = rng.standard_normal(3)
    r = _proj(rng, (4, 3))
    _check_grad(lambda t, xt: ops.weighted_sum(ops.linear(xt, w, b), r), x)
    _check_grad(lambda t, wt: ops.weighted_sum(ops.linear(x, wt, b), r), w)
    _check_grad(lambda t, bt: ops.weighted_sum(ops.linear(x, w, bt), r), b)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_grad_batched(seed):
    rng = np.random.default_rng(seed + 70)
    logits = rng.standard_normal((5, 4)) * 2
    labels = rng.integers(0, 4, size=5)
    _check_grad(lambda t, lt: ops.softmax_cross_entropy(lt, labels), logits)


def test_softmax_cross_entropy_grad_single():
    rng = np.random.default_rng(71)
    logits = rng.standard_normal(6)
    _check_grad(lambda t, lt: ops.softmax_cross_entropy(lt, 2), logits)


def test_softmax_cross_entropy_is_stable_at_huge_logits():
    t = Tape()
    logits = t.var(np.array([1e4, -1e4, 0.0]))
    loss = ops.softmax_cross_entropy(logits, 0)
    t.backward(loss)
    assert np.isfinite(loss.data)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(logits.grad).all()


def test_softmax_cross_entropy_rejects_bad_labels():
    t = Tape()
    logits = t.var(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        ops.softmax_cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(ValidationError):
        ops.softmax_cross_entropy(logits, np.array([-1, 0]))
    with pytest.raises(ValidationError):
        ops.softmax_cross_entropy(logits, np.array([0.5, 1.0]))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("target", [(6, 6, 4), (2, 3, 2), (4, 4, 2)])
def test_trilinear_resize_grad(seed, target):
    rng = np.random.default_rng(seed + 80)
    x = rng.standard_normal((2, 4, 4, 2))
    r = _proj(rng, (2,) + target)
    _check_grad(lambda t, xt: ops.weighted_sum(ops.trilinear_resize(xt, target), r), x)


def test_trilinear_resize_identity_is_bitwise():
    rng = np.random.default_rng(81)
    x = rng.standard_normal((3, 5, 4, 3)).astype(np.float32)
    t = Tape()
    y = ops.trilinear_resize(t.var(x), (5, 4, 3))
    assert np.array_equal(y.data, x)


@pytest.mark.parametrize("seed", SEEDS)
def test_channel_combine_grad(seed):
    rng = np.random.default_rng(seed + 90)
    a = rng.standard_normal((4, 3, 3, 2))
    w = rng.standard_normal(4)
    r = _proj(rng, (3, 3, 2))
    _check_grad(lambda t, at: ops.weighted_sum(ops.channel_combine(at, w), r), a)


@pytest.mark.parametrize("seed", SEEDS)
def test_channel_combine_grad_batched(seed):
    rng = np.random.default_rng(seed + 100)
    a = rng.standard_normal((2, 4, 3, 3, 2))
    w = rng.standard_normal((2, 4))
    r = _proj(rng, (2, 3, 3, 2))
    _check_grad(lambda t, at: ops.weighted_sum(ops.channel_combine(at, w), r), a)


def test_channel_combine_value():
    a = np.stack([np.full((2, 2, 2), 1.0), np.full((2, 2, 2), 3.0)])
    t = Tape()
    y = ops.channel_combine(t.var(a), np.array([2.0, 4.0]))
    np.testing.assert_allclose(y.data, np.full((2, 2, 2), (2.0 * 1 + 4.0 * 3) / 2))


@pytest.mark.parametrize("seed", SEEDS)
def test_overlap_ratio_grad_smooth_region(seed):
    rng = np.random.default_rng(seed + 110)
    g = rng.uniform(0.5, 1.5, size=(4, 4, 2))
    m = (rng.uniform(size=g.shape) < 0.4).astype(np.float64)
    _check_grad(lambda t, gt: ops.overlap_ratio(gt, m), g)


@pytest.mark.parametrize("seed", SEEDS)
def test_overlap_ratio_grad_batched(seed):
    rng = np.random.default_rng(seed + 120)
    g = rng.uniform(0.5, 1.5, size=(3, 4, 4, 2))
    m = (rng.uniform(size=g.shape) < 0.4).astype(np.float64)
    r = _proj(rng, (3,))
    _check_grad(lambda t, gt: ops.weighted_sum(ops.overlap_ratio(gt, m), r), g)


def test_overlap_ratio_floored_branch_gradient():
    # Below the floor the denominator is the constant delta, so the gradient
    # reduces to m / delta exactly.
    delta = 1e-8
    t = Tape()
    g = t.var(np.zeros((2, 2, 2)))
    m = np.zeros((2, 2, 2))
    m[0, 0, 0] = 1.0
    s = ops.overlap_ratio(g, m, delta)
    t.backward(s)
    assert float(s.data) == 0.0
    np.testing.assert_array_equal(g.grad, m / delta)


def test_overlap_ratio_rejects_nonbinary_mask():
    t = Tape()
    g = t.var(np.ones((2, 2, 2)))
    with pytest.raises(ValidationError):
        ops.overlap_ratio(g, np.full((2, 2, 2), 0.5))


@pytest.mark.parametrize("seed", SEEDS)
def test_gather_sum_grad(seed):
    rng = np.random.default_rng(seed + 130)
    x = rng.standard_normal((5, 3))
    idx = rng.integers(0, 3, size=5)
    _check_grad(lambda t, xt: ops.gather_sum(xt, idx), x)


def test_gather_sum_values_and_onehot_grad():
    t = Tape()
    x = t.var(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    s = ops.gather_sum(x, np.array([2, 0]))
    t.backward(s)
    assert float(s.data) == 7.0
    np.testing.assert_array_equal(x.grad, [[0, 0, 1], [1, 0, 0]])


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_graph_grad(seed):
    rng = np.random.default_rng(seed + 140)
    x = rng.standard_normal((1, 2, 4, 4, 2))
    w = rng.standard_normal((2, 2, 3, 3, 3)) * 0.4
    b = rng.standard_normal(2) * 0.1
    m = (rng.uniform(size=(8, 8, 4)) < 0.5).astype(np.float64)

    def build(t, xt):
        h = ops.relu(ops.conv3d(xt, w, b))
        g = ops.relu(ops.channel_combine(h, np.ones((1, 2))))
        up = ops.trilinear_resize(g, (8, 8, 4))
        s = ops.overlap_ratio(up, m[None])
        return ops.mean_all(s)

    _check_grad(build, x)


def test_weighted_sum_and_mean_all_and_scale_grads():
    rng = np.random.default_rng(150)
    x = rng.standard_normal((3, 4))
    r = rng.standard_normal((3, 4))
    _check_grad(lambda t, xt: ops.weighted_sum(xt, r), x)
    _check_grad(lambda t, xt: ops.mean_all(xt), x)
    _check_grad(lambda t, xt: ops.scale(ops.mean_all(xt), -2.5), x)
    _check_grad(lambda t, xt: ops.add(ops.mean_all(xt), ops.scale(ops.mean_all(xt), 3.0)), x)


def test_shape_validation_errors():
    t = Tape()
    x = t.var(np.zeros((2, 3, 4, 4, 2)))
    with pytest.raises(ValidationError):
        ops.conv3d(x, np.zeros((3, 2, 3, 3, 3)), np.zeros(3))  # channel mismatch
    with pytest.raises(ValidationError):
        ops.conv3d(x, np.zeros((3, 3, 5, 5, 5)), np.zeros(3))  # kernel extent
    with pytest.raises(ValidationError):
        ops.maxpool3d(t.var(np.zeros((1, 3, 3, 4, 2))))  # odd extent
    with pytest.raises(ValidationError):
        ops.linear(t.var(np.zeros((2, 5))), np.zeros((3, 6)), np.zeros(3))
    with pytest.raises(ValidationError):
        ops.trilinear_resize(t.var(np.zeros((1, 2, 2, 2))), (0, 2, 2))
    with pytest.raises(ValidationError):
        ops.add(t.var(np.zeros(3)), np.zeros(4))
    with pytest.raises(ValidationError):
        ops.weighted_sum(t.var(np.zeros(3)), np.zeros(4))


def test_mixed_dtype_rejected():
    t = Tape()
    x = t.var(np.zeros((2, 3, 4, 4, 2), np.float32))
    with pytest.raises(ValidationError):
        ops.conv3d(x, np.zeros((3, 3, 3, 3, 3), np.float64), np.zeros(3, np.float32))
