import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dartkit.tensorcore import (NonFiniteGradientError, OptimizerState, Parameter, Tensor, adamw_step,
                                clip_grad_norm, finite_diff_check, no_grad, ops, read_dtsr, write_dtsr)
from dartkit.tensorcore.dtsr import DtsrFormatError, load_checkpoint, save_checkpoint
from dartkit.tensorcore.nn import BatchNorm2d, Conv2d, ConvTranspose2d

from gradcases import ALL_CASES, H, MAX_ENTRIES, TOL


def naive_conv2d(x, w, b, stride, pad):
    c, hh, ww = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (hh + 2 * pad - k) // stride + 1
    wo = (ww + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for q in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[q, i, j] = np.sum(patch * w[q]) + (b[q] if b is not None else 0.0)
    return out


# -- conv2d --------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
    np.testing.assert_array_equal(y.data, x)


def test_conv2d_ones_padded():
    y = ops.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0]
    np.testing.assert_array_equal(y, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 3), o=st.integers(1, 3), hw=st.integers(3, 7), k=st.sampled_from([1, 2, 3]),
       stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**31))
def test_conv2d_matches_loop_reference(c, o, hw, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(c, hw, hw)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
    y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    ref = naive_conv2d(x, w, b, stride, pad)
    assert y.shape == ref.shape
    np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-10)


def test_conv2d_gradient_random_case():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 5, 5)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    r = finite_diff_check(lambda a, b: (ops.conv2d(a, b, padding=1) * ops.conv2d(a, b, padding=1)).sum(), [x, w])
    assert r.max_rel_error < 1e-4


def test_conv2d_channel_mismatch_names_dimension():
    with pytest.raises(ops.ShapeError, match="C_in"):
        ops.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_kernel_larger_than_input_rejected():
    with pytest.raises(ops.ShapeError):
        ops.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# -- conv_transpose2d ----------------------------------------------------------

def test_conv_transpose_single_contribution():
    y = ops.conv_transpose2d(Tensor(np.ones((1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(y.data, np.ones((1, 2, 2)))


def test_conv_transpose_zero_input():
    y = ops.conv_transpose2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.ones((2, 4, 2, 2))))
    assert y.shape == (4, 6, 6) and not y.data.any()


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 3), o=st.integers(1, 3), hw=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_conv_transpose_is_adjoint_of_conv(c, o, hw, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(o, c, 2, 2))
    x = rng.normal(size=(c, 2 * hw, 2 * hw))
    y = rng.normal(size=(o, hw, hw))
    lhs = np.sum(ops.conv2d(Tensor(x), Tensor(w), stride=2).data * y)
    rhs = np.sum(x * ops.conv_transpose2d(Tensor(y), Tensor(w), stride=2).data)
    assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-9)


# -- pooling, normalisation, activations ----------------------------------------

def test_maxpool_basic_and_odd_rejected():
    assert ops.maxpool2x2(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).data.item() == 4.0
    with pytest.raises(ops.ShapeError):
        ops.maxpool2x2(Tensor(np.ones((1, 3, 4))))


def test_maxpool_tie_routes_to_first_element():
    x = Tensor(np.full((1, 2, 2), 7.0), requires_grad=True)
    y = ops.maxpool2x2(x)
    assert y.data.item() == 7.0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_batch_norm_standardised_input_unchanged():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)
    # eps shrinks by 1/sqrt(1 + eps), so the deviation scales with |x|
    assert np.all(np.abs(y.data - x) < 1e-5 * np.maximum(1.0, np.abs(x)))
    np.testing.assert_allclose(y.data, x / np.sqrt(1.0 + 1e-5), rtol=1e-9, atol=1e-12)


def test_batch_norm_constant_channel_gives_beta():
    y = ops.batch_norm(Tensor(np.full((2, 1, 3, 3), 5.0)), Tensor(np.ones(1)), Tensor(np.array([0.3])),
                       np.zeros(1), np.ones(1), True)
    np.testing.assert_allclose(y.data, 0.3, atol=1e-6)


def test_batch_norm_running_stats_only_in_train_mode():
    bn = BatchNorm2d(2)
    x = Tensor(np.random.default_rng(1).normal(3.0, 2.0, size=(4, 2, 3, 3)).astype(np.float32))
    bn.eval()
    bn(x)
    np.testing.assert_array_equal(bn.running_mean, 0.0)
    bn.train()
    bn(x)
    assert np.all(bn.running_mean != 0.0)


def test_batch_norm_channel_mismatch():
    with pytest.raises(ops.ShapeError):
        ops.batch_norm(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       np.zeros(2), np.ones(2), True)


def test_small_activations():
    np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    assert ops.sigmoid(Tensor(np.zeros(1))).data.item() == 0.5
    assert ops.global_avg_pool(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).data.item() == 2.5


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    ops.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_concat_and_add_shape_checks():
    with pytest.raises(ops.ShapeError):
        ops.concat_channels(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 3, 3))))
    with pytest.raises(ops.ShapeError):
        ops.add(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((2, 2, 2))))


# -- gradients ------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(name=st.sampled_from(sorted(ALL_CASES)), seed=st.integers(0, 2**31))
def test_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    fn, inputs = ALL_CASES[name](rng)
    report = finite_diff_check(fn, inputs, h=H, tol=TOL, max_entries=MAX_ENTRIES, rng=rng)
    assert report.passed, (name, report)


def test_gradcheck_linear_is_exact():
    w = np.array([0.5, -2.0, 3.0])
    r = finite_diff_check(lambda x: (x * w).sum(), [Tensor(np.array([1.0, 2.0, 3.0]))])
    assert r.max_rel_error < 1e-9


def test_gradcheck_flags_wrong_backward():
    def doubled(x):
        def backward(g):
            return ((x, 4.0 * x.data * g),)  # true derivative of x^2 is 2x
        return Tensor._make(x.data ** 2, (x,), "bad_square", backward).sum()

    r = finite_diff_check(doubled, [Tensor(np.array([1.0, -2.0, 0.5]))])
    assert not r.passed and r.max_rel_error > 0.4


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(5)
    conv = Conv2d(2, 3, 3, rng, padding=1)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)).astype(np.float32))
    assert np.array_equal(conv(x).data, conv(x).data)


def test_parameter_names_unique():
    from dartkit.dartnet import DartConfig, Dart
    from fractions import Fraction
    model = Dart(DartConfig(width_scale=Fraction(1, 8)), np.random.default_rng(0))
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))


# -- optimiser ------------------------------------------------------------------

def _param(v, g):
    p = Parameter(np.asarray(v, dtype=np.float64))
    p.grad = np.asarray(g, dtype=np.float64)
    return p


def test_adamw_first_step_closed_form():
    p = _param([0.0], [1.0])
    state = adamw_step([p], OptimizerState(learning_rate=0.1, weight_decay=0.0))
    assert state.step == 1
    assert p.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-12)


def test_adamw_decoupled_decay_frozen_value():
    # p=1, g=0.5, lr=0.1, wd=0.01: p*(1-1e-3) - 0.1*0.5/(0.5+1e-8)
    p = _param([1.0], [0.5])
    adamw_step([p], OptimizerState(learning_rate=0.1, weight_decay=0.01))
    assert p.data[0] == pytest.approx(0.899000002, abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(1, 5))
def test_adamw_zero_grad_zero_decay_is_identity(vals, steps):
    p = _param(vals, np.zeros(len(vals)))
    st_ = OptimizerState(learning_rate=0.1, weight_decay=0.0)
    for _ in range(steps):
        adamw_step([p], st_)
    np.testing.assert_array_equal(p.data, vals)
    assert st_.step == steps


def test_adamw_zero_grad_shrinks_by_decay_factor():
    p = _param([2.0], [0.0])
    s = OptimizerState(learning_rate=0.1, weight_decay=0.5)
    for _ in range(3):
        adamw_step([p], s)
    assert p.data[0] == pytest.approx(2.0 * 0.95 ** 3, rel=1e-12)


def test_adamw_rejects_nan_gradient_without_update():
    p = _param([1.0, 2.0], [np.nan, 0.0])
    s = OptimizerState()
    with pytest.raises(NonFiniteGradientError):
        adamw_step([p], s)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert s.step == 0 and not s.exp_avg


def test_clip_grad_norm_examples():
    p = _param([0.0, 0.0], [3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8])
    q = _param([0.0], [0.5])
    assert clip_grad_norm([q], 1.0) == pytest.approx(0.5) and q.grad[0] == 0.5
    z = _param([0.0], [0.0])
    assert clip_grad_norm([z], 1.0) == 0.0


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.floats(0.1, 10))
def test_clip_grad_norm_idempotent(g, max_norm):
    p = _param(np.zeros(len(g)), g)
    clip_grad_norm([p], max_norm)
    once = p.grad.copy()
    clip_grad_norm([p], max_norm)
    np.testing.assert_allclose(p.grad, once, rtol=1e-12, atol=1e-300)
    assert np.linalg.norm(p.grad) <= max_norm * (1 + 1e-12)


# -- DTSR -------------------------------------------------------------------------

def test_dtsr_byte_layout(tmp_path):
    f = tmp_path / "one.dtsr"
    write_dtsr(f, np.array([1.0]))
    assert f.read_bytes() == b"DTSR1\ndims=1\ndtype=f32\n\x00\x00\x80?"


@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_dtsr_roundtrip(tmp_path_factory, a):
    f = tmp_path_factory.mktemp("dtsr") / "a.dtsr"
    write_dtsr(f, a)
    b = read_dtsr(f)
    assert b.dtype == np.float32 and b.shape == a.shape
    np.testing.assert_array_equal(a, b)


def test_dtsr_rejects_bad_files(tmp_path):
    f = tmp_path / "bad.dtsr"
    f.write_bytes(b"NOPE\n")
    with pytest.raises(DtsrFormatError, match="magic"):
        read_dtsr(f)
    f.write_bytes(b"DTSR1\ndims=2,2\ndtype=f32\n" + b"\x00" * 12)
    with pytest.raises(DtsrFormatError, match="payload"):
        read_dtsr(f)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    conv = ConvTranspose2d(2, 3, 2, rng)
    save_checkpoint(tmp_path / "ck", conv.state_dict())
    back = load_checkpoint(tmp_path / "ck")
    assert list(back) == list(conv.state_dict())
    for k, v in conv.state_dict().items():
        np.testing.assert_array_equal(back[k], v)
