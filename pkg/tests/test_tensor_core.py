import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from desknas.tensor import functional as F
from desknas.tensor.checkpoint import load_state_dict, load_weights, save_weights, state_dict
from desknas.tensor.core import (
    ShapeError,
    Tensor,
    add,
    concat,
    div,
    exp,
    log,
    log_softmax,
    mean,
    mul,
    no_grad,
    precision,
    relu,
    reshape,
    softmax,
    stack,
    sub,
    take,
    tsum,
    weighted_sum,
)
from desknas.tensor.gradcheck import check_gradients
from desknas.tensor.layers import OPS, Conv2d, build_op
from desknas.tensor.optim import TrainState, cosine_lr, sgd_momentum_step


def leaf(rng, *shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True, dtype=np.float64)


# -- forward contracts ---------------------------------------------------------

def test_cut_gives_zeros_and_skip_is_identity(rng):
    x = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32))
    z = build_op("cut", 3, 1, rng)(x)
    assert z.shape == x.shape and not z.data.any()
    assert build_op("skip", 3, 1, rng)(x) is x


def test_zero_kernel_conv_is_zero(rng):
    x = Tensor(rng.normal(size=(1, 2, 7, 7)))
    w = Tensor(np.zeros((4, 2, 3, 3)))
    b = Tensor(np.zeros(4))
    assert not F.conv2d(x, w, b, padding=1).data.any()


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2)])
def test_conv_matches_direct_correlation(rng, stride, dilation):
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    pad = dilation
    out = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad, dilation=dilation).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (9 + 2 * pad - dilation * 2 - 1) // stride + 1
    ref = np.zeros((2, 4, ho, ho))
    for i in range(ho):
        for j in range(ho):
            patch = xp[:, :, i * stride : i * stride + 2 * dilation + 1 : dilation,
                       j * stride : j * stride + 2 * dilation + 1 : dilation]
            ref[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)


def test_depthwise_conv_matches_per_channel_conv(rng):
    x = rng.normal(size=(1, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), padding=1, groups=3).data
    for c in range(3):
        single = F.conv2d(Tensor(x[:, c : c + 1]), Tensor(w[c : c + 1]), padding=1).data
        np.testing.assert_allclose(out[:, c : c + 1], single, rtol=1e-12)


def test_avg_pool_excludes_padding_from_divisor():
    x = Tensor(np.ones((1, 1, 4, 4)))
    out = F.avg_pool2d(x, 3, 1, 1).data
    np.testing.assert_allclose(out, np.ones((1, 1, 4, 4)))


def test_max_pool_picks_window_max():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    out = F.max_pool2d(x, 3, 2, 1).data
    np.testing.assert_array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])


def test_bilinear_resize_preserves_constants():
    x = Tensor(np.full((1, 2, 4, 4), 3.5))
    np.testing.assert_allclose(F.resize_bilinear(x, (16, 12)).data, 3.5)


def test_instance_norm_standardizes(rng):
    x = Tensor(rng.normal(3, 2, size=(2, 3, 8, 8)))
    y = F.instance_norm(x).data
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1, atol=1e-3)


def test_conv_shape_error_names_node(rng):
    x = Tensor(rng.normal(size=(1, 3, 5, 5)))
    w = Tensor(rng.normal(size=(2, 4, 3, 3)))
    with pytest.raises(ShapeError) as err:
        F.conv2d(x, w, padding=1, name="probe")
    assert err.value.node == "probe"


# -- gradients -----------------------------------------------------------------

def test_skip_and_cut_gradients(rng):
    x = leaf(rng, 1, 2, 4, 4)
    tsum(build_op("skip", 2, 1, rng)(x)).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))
    x.grad = None
    tsum(build_op("cut", 2, 1, rng)(x)).backward()
    np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))


def test_backward_twice_without_forward_raises(rng):
    x = leaf(rng, 3)
    y = tsum(mul(x, x))
    y.backward()
    with pytest.raises(RuntimeError, match="called before forward"):
        y.backward()


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with no_grad():
        y = mul(x, 2.0)
    assert not y.requires_grad and y.is_leaf


ELEMENTWISE = {
    "add": lambda a, b: add(a, b),
    "sub": lambda a, b: sub(a, b),
    "mul": lambda a, b: mul(a, b),
    "div": lambda a, b: div(a, b),
    "exp": lambda a, b: exp(a),
    "log": lambda a, b: log(b),
    "relu": lambda a, b: relu(a),
    "mean": lambda a, b: mean(a, axis=1),
    "reshape": lambda a, b: reshape(a, (6, 2)),
    "getitem": lambda a, b: a[1:, ::2],
    "take": lambda a, b: take(a, np.array([2, 0, 2]), 1),
    "concat": lambda a, b: concat([a, b], axis=0),
    "stack": lambda a, b: stack([a, b], axis=1),
    "softmax": lambda a, b: softmax(a, axis=1),
    "log_softmax": lambda a, b: log_softmax(a, axis=0),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_core_op_gradients(rng, name):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4, positive=True)
    weights = rng.normal(size=ELEMENTWISE[name](a, b).shape)
    err = check_gradients(lambda: tsum(mul(ELEMENTWISE[name](a, b), weights)), [a, b])
    assert err < 1e-6


def test_broadcast_gradients_reduce_to_input_shape(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 1, 3, 1)
    assert check_gradients(lambda: tsum(mul(mul(a, b), a)), [a, b]) < 1e-6
    assert b.grad.shape == (1, 3, 1)


def test_weighted_sum_gradient(rng):
    w = leaf(rng, 3)
    xs = [leaf(rng, 2, 2) for _ in range(3)]
    assert check_gradients(lambda: tsum(mul(weighted_sum(softmax(w), xs), xs[0])), [w, *xs]) < 1e-6


@pytest.mark.parametrize("kind", sorted(OPS))
@pytest.mark.parametrize("stride", [1, 2])
def test_every_op_kind_matches_finite_differences(kind, stride):
    rng = np.random.default_rng(7)
    with precision(np.float64):
        op = build_op(kind, 2, stride, rng)
        x = leaf(rng, 1, 2, 5, 5)
        probe = None

        def loss():
            nonlocal probe
            out = op(x)
            if probe is None:
                probe = np.random.default_rng(8).normal(size=out.shape)
            return tsum(mul(out, probe))

        err = check_gradients(loss, [x, *op.parameters()])
    assert err < 1e-4


def test_resample_ops_gradients(rng):
    x = leaf(rng, 1, 2, 4, 4)
    for fn in (lambda: F.upsample_nearest(x, 2), lambda: F.downsample_avg(x, 2),
               lambda: F.resize_bilinear(x, (7, 9)), lambda: F.instance_norm(x)):
        probe = rng.normal(size=fn().shape)
        assert check_gradients(lambda: tsum(mul(fn(), probe)), [x]) < 1e-5


# -- optimizer and schedule ----------------------------------------------------

def _one_step(w, g, lr, momentum=0.0, wd=0.0):
    t = Tensor(np.array([w]), dtype=np.float64)
    state = TrainState([t])
    sgd_momentum_step(state, lr, momentum, wd, grads=[np.array([g])])
    return float(t.data[0]), state


def test_plain_sgd_step():
    assert _one_step(1.0, 2.0, 0.1)[0] == pytest.approx(0.8, abs=1e-15)


def test_weight_decay_only_step():
    assert _one_step(1.0, 0.0, 0.1, wd=1e-3)[0] == pytest.approx(0.9999, abs=1e-15)


def test_momentum_unrolls_to_1_9_g():
    t = Tensor(np.array([0.0]), dtype=np.float64)
    state = TrainState([t])
    for _ in range(2):
        sgd_momentum_step(state, 0.0, 0.9, 0.0, grads=[np.array([3.0])])
    assert state.momentum[0][0] == pytest.approx(1.9 * 3.0, rel=1e-15)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 0.01) == 0.01
    assert cosine_lr(100, 100, 0.01) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.01) == pytest.approx(0.005, abs=1e-15)
    assert cosine_lr(250, 100, 0.01) == cosine_lr(100, 100, 0.01)


@given(st.integers(1, 500), st.floats(1e-4, 1.0))
def test_cosine_is_nonincreasing(total, lr0):
    vals = [cosine_lr(s, total, lr0) for s in range(total + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_momentum_buffer_shape_is_checked():
    with pytest.raises(ValueError):
        TrainState([Tensor(np.zeros(3))], momentum=[np.zeros(4)])


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    conv = Conv2d(2, 3, 3, rng, bias=True)
    save_weights(tmp_path / "w.ckpt", state_dict(conv))
    other = Conv2d(2, 3, 3, np.random.default_rng(99), bias=True)
    load_state_dict(other, load_weights(tmp_path / "w.ckpt"))
    for (_, a), (_, b) in zip(conv.named_parameters(), other.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_weights(tmp_path / "bad")


def test_float64_mode_creates_double_leaves():
    with precision(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
