import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kilnseg import ops
from kilnseg.errors import GradientError, ShapeError, StateError
from kilnseg.gradcheck import grad_check
from kilnseg.optim import Adam, adam_step, init_params
from kilnseg.tensor import Tape, Tensor, backward, log


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def brute_conv(x, w, stride=1, pad=0, dil=1):
    """Direct loop over output positions and taps."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ic, i * stride + u * dil, j * stride + v * dil] * w[oc, ic, u, v]
                    out[b, oc, i, j] = acc
    return out


# init_params ---------------------------------------------------------------


def test_init_zeros():
    assert np.array_equal(init_params([4], "zeros", seed=0).data, np.zeros(4))


def test_init_deterministic():
    a = init_params([3, 2, 3, 3], "he", seed=11)
    b = init_params([3, 2, 3, 3], "he", seed=11)
    assert a.data.tobytes() == b.data.tobytes()


def test_init_he_variance():
    w = init_params([64, 16, 3, 3], "he", seed=7)
    target = 2 / (16 * 3 * 3)
    assert abs(w.data.var() - target) / target < 0.2


def test_init_glorot_bounds_and_constant():
    w = init_params([8, 4], "glorot", seed=1)
    assert np.abs(w.data).max() <= np.sqrt(6 / 12) + 1e-6
    assert np.all(init_params([2, 2], ("constant", 3.5)).data == 3.5)


def test_init_rejects_zero_extent():
    with pytest.raises(ShapeError):
        init_params([3, 0], "he")


def test_init_accepts_negative_64bit_seed():
    init_params([2], "he", seed=-(2**63))


# conv2d --------------------------------------------------------------------


def test_conv_hand_example():
    x = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
    k = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    out = ops.conv2d(x, k)
    assert np.array_equal(out.data[0, 0], [[12, 16], [24, 28]])


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 5, 4)))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x.data)


def test_dilated_receptive_field():
    x = np.zeros((1, 1, 5, 5))
    k = Tensor(np.ones((1, 1, 3, 3)))
    touched = set()
    for i in range(5):
        for j in range(5):
            x[...] = 0
            x[0, 0, i, j] = 1
            out = ops.conv2d(Tensor(x.copy()), k, dilation=2)
            assert out.shape == (1, 1, 1, 1)
            if out.data[0, 0, 0, 0] != 0:
                touched.add((i, j))
    assert touched == {(r, c) for r in (0, 2, 4) for c in (0, 2, 4)}


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(3, 9), w=st.integers(3, 9), k=st.integers(1, 3),
    stride=st.integers(1, 3), pad=st.integers(0, 2), dil=st.integers(1, 2),
    seed=st.integers(0, 1000),
)
def test_conv_matches_brute_force(h, w, k, stride, pad, dil, seed):
    if dil * (k - 1) + 1 > min(h, w) + 2 * pad:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, h, w))
    kern = rng.normal(size=(3, 2, k, k))
    out = ops.conv2d(Tensor(x), Tensor(kern), stride=stride, padding=pad, dilation=dil)
    ref = brute_conv(x, kern, stride, pad, dil)
    assert out.shape == ref.shape
    assert out.shape[2] == (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    np.testing.assert_allclose(out.data, ref, atol=1e-10)


def test_conv_errors():
    x = Tensor(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((1, 3, 1, 1))))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))


def test_conv_bias_broadcast():
    x = Tensor(np.zeros((1, 1, 3, 3)))
    out = ops.conv2d(x, Tensor(np.ones((2, 1, 1, 1))), Tensor(np.array([1.0, -2.0])))
    assert np.all(out.data[0, 0] == 1) and np.all(out.data[0, 1] == -2)


# transposed conv -------------------------------------------------------------


def test_transposed_scatter():
    out = ops.transposed_conv2d(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert np.array_equal(out.data[0, 0], np.full((2, 2), 3.0))


def test_transposed_zero_input():
    out = ops.transposed_conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.ones((2, 1, 3, 3))), stride=2)
    assert out.shape == (1, 1, 7, 7)
    assert not out.data.any()


@pytest.mark.parametrize("stride,k,h", [(1, 3, 6), (2, 2, 8), (2, 3, 7), (3, 3, 9)])
def test_transposed_is_conv_adjoint(stride, k, h):
    rng = np.random.default_rng(stride * 10 + k)
    x = t64(rng.normal(size=(2, 3, h, h)))
    w = t64(rng.normal(size=(4, 3, k, k)), grad=False)
    ho = (h - k) // stride + 1
    probe = rng.normal(size=(2, 4, ho, ho))
    with Tape() as tape:
        out = ops.conv2d(x, w, stride=stride)
        loss = (out * Tensor(probe)).sum()
    tape.backward(loss)
    adj = ops.transposed_conv2d(Tensor(probe), w, stride=stride)
    # transposed output may be shorter when (h - k) is not a stride multiple
    hh = adj.shape[2]
    np.testing.assert_allclose(adj.data, x.grad[:, :, :hh, :hh], atol=1e-12)
    assert not x.grad[:, :, hh:, :].any()


def test_transposed_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.transposed_conv2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((3, 1, 2, 2))))


# pooling ---------------------------------------------------------------------


def test_max_pool_block():
    out = ops.pool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]])), "max", window=2)
    assert out.data.item() == 4


def test_max_pool_tie_break_first_index():
    x = t64(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        loss = ops.max_pool2d(x, 2).sum()
    tape.backward(loss)
    assert np.array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_adaptive_avg_quadrants():
    x = Tensor(np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4))
    out = ops.pool2d(x, "adaptive_avg", bins=2)
    np.testing.assert_allclose(out.data[0, 0], [[3.5, 5.5], [11.5, 13.5]])


def test_adaptive_avg_single_bin_is_mean():
    x = np.random.default_rng(2).normal(size=(2, 3, 5, 7))
    out = ops.adaptive_avg_pool2d(Tensor(x), 1)
    np.testing.assert_allclose(out.data[..., 0, 0], x.mean(axis=(2, 3)))


def test_adaptive_avg_partitions_exactly():
    # 8 rows into 3 bins: every row belongs to exactly one bin
    x = np.random.default_rng(3).normal(size=(1, 1, 8, 8))
    out = ops.adaptive_avg_pool2d(Tensor(x), 3)
    np.testing.assert_allclose(out.data[0, 0, 0, 0], x[0, 0, 0:2, 0:2].mean())
    np.testing.assert_allclose(out.data[0, 0, 1, 2], x[0, 0, 2:5, 5:8].mean())


def test_adaptive_avg_too_many_bins():
    with pytest.raises(ShapeError):
        ops.adaptive_avg_pool2d(Tensor(np.zeros((1, 1, 4, 4))), 5)


# batch norm ------------------------------------------------------------------


def _bn_params(c, g=1.0, b=0.0):
    return Tensor(np.full(c, g)), Tensor(np.full(c, b))


def test_bn_train_normalises():
    x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(4, 3, 5, 5)))
    out = ops.batch_norm(x, *_bn_params(3), mode="train")
    assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.data.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_bn_constant_channel_is_zero():
    out = ops.batch_norm(Tensor(np.full((2, 2, 3, 3), 7.0)), *_bn_params(2))
    assert not out.data.any()


def test_bn_affine_collapse():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 2, 3, 3)))
    out = ops.batch_norm(x, *_bn_params(2, g=0.0, b=5.0))
    assert np.all(out.data == 5)


def test_bn_infer_requires_stats():
    with pytest.raises(StateError):
        ops.batch_norm(Tensor(np.ones((1, 2, 2, 2))), *_bn_params(2), mode="infer",
                       running_stats=ops.RunningStats())


def test_bn_running_stats_update():
    stats = ops.RunningStats.initialized(1, np.float64)
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    ops.batch_norm(x, *_bn_params(1), mode="train", running_stats=stats)
    np.testing.assert_allclose(stats.mean, [0.1 * 2.0])
    np.testing.assert_allclose(stats.var, [0.9 + 0.1 * 2.0])
    out = ops.batch_norm(x, *_bn_params(1), mode="infer", running_stats=stats)
    np.testing.assert_allclose(out.data.ravel(), (np.array([1.0, 3.0]) - 0.2) / np.sqrt(1.1 + 1e-5))


# activations -----------------------------------------------------------------


def test_activation_values():
    assert np.array_equal(ops.activation(Tensor(np.array([-1.0, 2.0])), "relu").data, [0, 2])
    assert ops.activation(Tensor(np.array([0.0])), "sigmoid").data[0] == 0.5
    p = ops.activation(Tensor(np.zeros((1, 4, 2, 2))), "softmax_over_classes")
    np.testing.assert_allclose(p.data, 0.25)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
def test_softmax_is_distribution(seed, scale):
    x = np.random.default_rng(seed).normal(scale=scale, size=(2, 4, 3, 3))
    p = ops.softmax(Tensor(x)).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_bounds_moderate_logits():
    p = ops.softmax(Tensor(np.random.default_rng(0).normal(size=(1, 4, 8, 8)))).data
    assert np.all(p > 0) and np.all(p < 1)


# concat / upsample ---------------------------------------------------------------


def test_concat_extent_and_order():
    a = Tensor(np.random.default_rng(0).normal(size=(1, 4, 3, 3)))
    b = Tensor(np.random.default_rng(1).normal(size=(1, 12, 3, 3)))
    out = ops.concat_channels(a, b)
    assert out.shape[1] == 16
    assert np.array_equal(out.data[:, :4], a.data) and np.array_equal(out.data[:, 4:], b.data)


def test_concat_disjoint_gradient():
    a = t64(np.ones((1, 2, 2, 2)))
    b = t64(np.ones((1, 3, 2, 2)))
    with Tape() as tape:
        loss = ops.concat_channels(a, b)[:, :2].sum()
    tape.backward(loss)
    assert np.all(a.grad == 1)
    assert b.grad is None or not b.grad.any()


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2))))


def test_upsample_constant():
    out = ops.upsample_bilinear(Tensor(np.full((1, 1, 1, 1), 2.5)), 4, 4)
    assert np.all(out.data == 2.5)


def test_upsample_corner_aligned_row():
    out = ops.upsample_bilinear(Tensor(np.array([[[[0.0, 1.0]]]])), 1, 4)
    np.testing.assert_allclose(out.data[0, 0, 0], [0, 1 / 3, 2 / 3, 1])


def test_upsample_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 5)))
    assert np.array_equal(ops.upsample_bilinear(x, 3, 5).data, x.data)


# backward --------------------------------------------------------------------


def test_linear_backward():
    x = t64(np.arange(5.0))
    with Tape() as tape:
        loss = (x * 2.0).sum()
    backward(tape, loss)
    assert np.all(x.grad == 2)


def test_unused_parameter_gets_no_grad():
    x, y = t64(np.ones(3)), t64(np.ones(3))
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    assert y.grad is None


def test_frozen_tensor_gets_no_grad():
    x, w = t64(np.ones(3)), t64(np.ones(3), grad=False)
    with Tape() as tape:
        loss = (x * w).sum()
    tape.backward(loss)
    assert w.grad is None and np.all(x.grad == 1)


def test_backward_errors():
    x = t64(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(GradientError):
        tape.backward(y)
    with pytest.raises(GradientError):
        tape.backward(t64(np.ones(1)))


def test_no_tape_records_nothing():
    x = t64(np.ones(3))
    y = x * 2.0
    assert not y.requires_grad


def test_grad_accumulates_over_reuse():
    x = t64(np.array([3.0]))
    with Tape() as tape:
        loss = (x * x + x).sum()
    tape.backward(loss)
    assert x.grad[0] == 7.0


def test_conv_relu_chain_matches_fd():
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(2, 2, 6, 6)))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    b = t64(rng.normal(size=3))
    err = grad_check(lambda: ops.relu(ops.conv2d(x, w, b, padding=1)).sum(), [x, w, b])
    assert err < 1e-4


# per-op adjointness against finite differences ----------------------------------------

def _probe(shape):
    return Tensor(np.random.default_rng(len(shape) * 7 + sum(shape)).normal(size=shape))


def _weighted(out):
    return (out * _probe(out.shape)).sum()


OP_CASES = {
    "conv2d_strided_dilated": (
        lambda a, b, c: ops.conv2d(a, b, c, stride=2, padding=2, dilation=2),
        [(2, 2, 7, 7), (3, 2, 3, 3), (3,)],
    ),
    "transposed_conv2d": (
        lambda a, b, c: ops.transposed_conv2d(a, b, stride=2, bias=c),
        [(1, 2, 3, 3), (2, 3, 2, 2), (3,)],
    ),
    "max_pool": (lambda a: ops.max_pool2d(a, 2), [(2, 2, 4, 6)]),
    "adaptive_avg": (lambda a: ops.adaptive_avg_pool2d(a, 3), [(1, 2, 8, 7)]),
    "batch_norm_train": (
        lambda a, g, b: ops.batch_norm(a, g, b, mode="train"),
        [(3, 2, 3, 3), (2,), (2,)],
    ),
    "batch_norm_infer": (
        lambda a, g, b: ops.batch_norm(
            a, g, b, mode="infer",
            running_stats=ops.RunningStats(np.array([0.3, -0.2]), np.array([1.5, 0.7]))),
        [(2, 2, 3, 3), (2,), (2,)],
    ),
    "sigmoid": (ops.sigmoid, [(2, 3, 2, 2)]),
    "tanh": (ops.tanh, [(2, 3, 2, 2)]),
    "softmax": (ops.softmax, [(2, 4, 2, 3)]),
    "concat": (lambda a, b: ops.concat_channels(a, b), [(1, 2, 3, 3), (1, 3, 3, 3)]),
    "upsample": (lambda a: ops.upsample_bilinear(a, 7, 5), [(1, 2, 3, 2)]),
    "linear": (lambda a, w, b: ops.linear(a, w, b), [(3, 5), (2, 5), (2,)]),
    "split": (lambda a: ops.split_channels(a, 2)[1], [(1, 4, 2, 2)]),
    "log_exp_div": (lambda a: log(ops.sigmoid(a)) / (ops.tanh(a) * ops.tanh(a) + 1.0), [(2, 3)]),
    "dropout": (lambda a: ops.dropout(a, 0.5, np.random.default_rng(3)), [(2, 8)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_adjoint_fd(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    # bounded away from relu/max kinks: distinct values with spread
    inputs = [t64(rng.normal(size=s) + 0.1 * rng.permutation(np.prod(s)).reshape(s)) for s in shapes]
    err = grad_check(lambda: _weighted(fn(*inputs)), inputs)
    assert err < 1e-4, (name, err)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 8), k=st.integers(1, 3), s=st.integers(1, 2), p=st.integers(0, 1),
       d=st.integers(1, 2))
def test_transposed_shape_algebra(h, k, s, p, d):
    out = ops.transposed_conv2d(Tensor(np.ones((1, 1, h, h))), Tensor(np.ones((1, 2, k, k))), stride=s)
    assert out.shape == (1, 2, (h - 1) * s + k, (h - 1) * s + k)
    if d * (k - 1) + 1 <= h + 2 * p:
        c = ops.conv2d(Tensor(np.ones((1, 1, h, h))), Tensor(np.ones((1, 1, k, k))), stride=s,
                       padding=p, dilation=d)
        assert c.shape[2] == (h + 2 * p - d * (k - 1) - 1) // s + 1


# grad_check itself -------------------------------------------------------------


def test_gradcheck_relu_chain_exact():
    rng = np.random.default_rng(0)
    x = t64(rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)))
    err = grad_check(lambda: ops.relu(ops.relu(x) * 3.0 - 0.1).sum(), [x])
    assert err < 1e-7


def test_softmax_ce_gradient_is_p_minus_y():
    from kilnseg.losses import cross_entropy_loss

    rng = np.random.default_rng(4)
    z = t64(rng.normal(size=(1, 4, 2, 2)))
    target = rng.integers(0, 4, size=(1, 2, 2))
    with Tape() as tape:
        loss = cross_entropy_loss(ops.softmax(z), target, np.ones(4))
    tape.backward(loss)
    p = ops.softmax(Tensor(z.data)).data
    y = np.moveaxis(np.eye(4)[target], -1, 1)
    np.testing.assert_allclose(z.grad, (p - y) / 4, atol=1e-12)
    assert grad_check(lambda: cross_entropy_loss(ops.softmax(z), target, np.ones(4)), [z]) < 1e-6


def test_gradcheck_rejects_float32_and_nonfinite():
    with pytest.raises(TypeError):
        grad_check(lambda: None, [Tensor(np.ones(2, np.float32), requires_grad=True)])
    from kilnseg.errors import NonFiniteError

    x = t64(np.array([1.0]))
    with pytest.raises(NonFiniteError):
        grad_check(lambda: log(x * 0.0).sum(), [x])


# adam ----------------------------------------------------------------------------


def test_adam_first_step_magnitude():
    p = Tensor(np.zeros(3, np.float64), requires_grad=True)
    p.grad = np.array([0.5, -2.0, 10.0])
    state = Adam(lr=1e-3)
    adam_step(state, {"p": p})
    np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-6)
    assert np.all(np.sign(p.data) == -np.sign([0.5, -2.0, 10.0]))


def test_adam_zero_gradient_fixed_point():
    p = Tensor(np.ones(3), requires_grad=True)
    p.grad = np.zeros(3)
    adam_step(Adam(), {"p": p})
    assert np.all(p.data == 1)


def test_adam_skips_frozen():
    p = Tensor(np.ones(3), requires_grad=False)
    p.grad = np.ones(3)
    adam_step(Adam(), {"p": p})
    assert np.all(p.data == 1)


def test_adam_shape_mismatch():
    p = Tensor(np.ones(3), requires_grad=True)
    p.grad = np.ones(4)
    with pytest.raises(ShapeError):
        adam_step(Adam(), {"p": p})


def test_adam_step_counter_increases():
    p = Tensor(np.ones(2), requires_grad=True)
    state = Adam()
    for k in range(1, 4):
        p.grad = np.ones(2)
        state.step({"p": p})
        assert state.step_count == k
    assert state.m["p"].shape == p.shape


def test_determinism_of_forward_and_grad():
    def run():
        x = t64(np.random.default_rng(9).normal(size=(2, 2, 5, 5)))
        w = t64(np.random.default_rng(10).normal(size=(2, 2, 3, 3)))
        with Tape() as tape:
            loss = ops.softmax(ops.conv2d(x, w, padding=1)).sum() + ops.conv2d(x, w).sum()
        tape.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()
