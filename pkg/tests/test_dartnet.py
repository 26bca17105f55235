from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dartkit.dartnet import (DESK_CONFIG, FULL_CONFIG, DartConfig, build_dart, build_decoder_block,
                             build_resblock, build_simplified_attention, build_single_decoder_unet,
                             parameter_breakdown, resblock_param_count)
from dartkit.losses import mse
from dartkit.tensorcore import Tensor, finite_diff_check, no_grad, ops
from dartkit.tensorcore.optim import OptimizerState, adamw_step

TINY = DartConfig(in_channels=2, width_scale=Fraction(1, 16))


@pytest.fixture(scope="module")
def full_dart():
    return build_dart(FULL_CONFIG, seed=0)


def test_full_size_parameter_counts(full_dart):
    b = parameter_breakdown(full_dart)
    assert abs(b["total"] - 11.35e6) / 11.35e6 < 0.01
    assert b["total"] == 11_342_674
    assert abs(b["bottleneck"] - 3.67e6) / 3.67e6 < 0.002
    assert b["bottleneck"] == 3_673_088 == resblock_param_count(256, 512)
    assert b["extreme.attention"] == 4240
    assert abs(b["continuity.decoder"] + b["continuity.head"] - 3.23e6) / 3.23e6 < 0.01


def test_breakdown_components_sum_to_total(full_dart):
    b = parameter_breakdown(full_dart)
    assert sum(v for k, v in b.items() if k != "total") == b["total"] == full_dart.num_parameters()


def test_config_invariants():
    with pytest.raises(ValueError):
        DartConfig(encoder_widths=(32, 32, 128, 256))
    with pytest.raises(ValueError):
        DartConfig(bottleneck_width=256)
    assert DESK_CONFIG.widths == (8, 16, 32, 64) and DESK_CONFIG.bottleneck == 128


@pytest.mark.parametrize("c_in,c_out", [(4, 32), (32, 64), (64, 64), (256, 512)])
def test_resblock_closed_form(c_in, c_out):
    assert build_resblock(c_in, c_out).num_parameters() == resblock_param_count(c_in, c_out)


def test_resblock_zero_weights_is_relu_identity():
    blk = build_resblock(3, 3)
    for conv in (blk.conv1, blk.conv2):
        conv.weight.data[:] = 0.0
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    y = blk(x)
    np.testing.assert_allclose(y.data, np.maximum(x.data, 0.0), atol=1e-6)
    assert y.shape == x.shape


def test_attention_count_and_divisibility():
    assert build_simplified_attention(128).num_parameters() == 4240
    with pytest.raises(ValueError):
        build_simplified_attention(100, reduction=8)


def test_attention_saturated_gate_passes_input():
    att = build_simplified_attention(16, reduction=8)
    att.fc2.weight.data[:] = 0.0
    att.fc2.bias.data[:] = 30.0
    x = Tensor(np.random.default_rng(1).normal(size=(1, 16, 4, 4)))
    np.testing.assert_allclose(att(x).data, x.data, rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_attention_gate_bounds(seed):
    att = build_simplified_attention(16, reduction=8, seed=seed % 1000)
    x = Tensor(np.random.default_rng(seed).normal(0, 3, size=(2, 16, 3, 3)))
    g = att.gate(x).data
    assert np.all((g > 0) & (g < 1))
    assert np.all(np.abs(att(x).data) <= np.abs(x.data))


def test_decoder_block_doubles_resolution_and_checks_skip():
    blk = build_decoder_block(8, 4, 4)
    y = blk(Tensor(np.zeros((1, 8, 3, 3))), Tensor(np.zeros((1, 4, 6, 6))))
    assert y.shape == (1, 4, 6, 6)
    with pytest.raises(ops.ShapeError):
        blk(Tensor(np.zeros((1, 8, 3, 3))), Tensor(np.zeros((1, 4, 5, 5))))


def test_decoder_block_zero_inputs_give_zero_upsample():
    blk = build_decoder_block(8, 4, 4)
    blk.up.bias.data[:] = 0.0
    assert not blk.up(Tensor(np.zeros((1, 8, 2, 2)))).data.any()


def test_dart_forward_shapes_and_fusion():
    m = build_dart(TINY, seed=3)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 2, 16, 16)).astype(np.float32))
    out = m(x)
    assert out.final.shape == out.continuity.shape == out.extreme.shape == (2, 16, 16)
    assert np.array_equal(out.final.data, out.continuity.data + out.extreme.data)
    single = m(Tensor(x.data[0]))
    assert single.final.shape == (16, 16)


def test_zeroed_extreme_head_gives_continuity():
    m = build_dart(TINY, seed=3)
    m.extreme.head.weight.data[:] = 0.0
    m.extreme.head.bias.data[:] = 0.0
    out = m(Tensor(np.random.default_rng(0).normal(size=(1, 2, 16, 16)).astype(np.float32)))
    assert np.array_equal(out.final.data, out.continuity.data)


def test_dart_rejects_indivisible_spatial_dims():
    with pytest.raises(ops.ShapeError, match="divisible"):
        build_dart(TINY)(Tensor(np.zeros((1, 2, 12, 16), np.float32)))


def test_builds_are_seed_deterministic():
    a, b = build_dart(TINY, seed=7).state_dict(), build_dart(TINY, seed=7).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_eval_batch_equals_per_sample():
    # float64 so BLAS reassociation across batch sizes stays below the tolerance
    m = build_dart(TINY, seed=2).astype(np.float64).eval()
    x = np.random.default_rng(4).normal(size=(3, 2, 16, 16))
    with no_grad():
        batch = m(Tensor(x)).final.data
        per = np.stack([m(Tensor(x[i:i + 1])).final.data[0] for i in range(3)])
    np.testing.assert_allclose(batch, per, rtol=1e-10, atol=1e-10)


def test_unet_single_output_and_smaller():
    u = build_single_decoder_unet(TINY)
    out = u(Tensor(np.zeros((1, 2, 16, 16), np.float32)))
    assert isinstance(out, Tensor) and out.shape == (1, 16, 16)
    assert build_single_decoder_unet(FULL_CONFIG).num_parameters() < build_dart(FULL_CONFIG).num_parameters()


def test_desk_dart_gradient_spot_check():
    m = build_dart(DartConfig(in_channels=4, width_scale=Fraction(1, 4)), seed=0).astype(np.float64)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 4, 64, 64)))
    target = rng.normal(size=(2, 64, 64))
    named = list(m.named_parameters())
    picks = [named[i] for i in rng.choice(len(named), size=5, replace=False)]

    def f():
        return float(mse(m(x).final, target).data)

    m.zero_grad()
    loss = mse(m(x).final, target)
    loss.backward()
    f0, h = float(loss.data), 1e-6
    for name, p in picks:
        # largest entries only: tiny gradients drown in round-off at this step
        for flat in np.argsort(-np.abs(p.grad.ravel()))[:2]:
            idx = np.unravel_index(flat, p.shape)
            a, orig = p.grad[idx], p.data[idx]
            p.data[idx] = orig + h
            fp = f()
            p.data[idx] = orig - h
            fm = f()
            p.data[idx] = orig
            # ~3e5 pre-ReLU activations, some within 1e-8 of the kink, so a
            # one-sided difference may straddle it; agreeing with any is enough
            fds = ((fp - fm) / (2 * h), (fp - f0) / h, (f0 - fm) / h)
            err = min(abs(a - d) / max(abs(a), abs(d)) for d in fds)
            assert err < 1e-3, (name, idx, a, fds)


def test_unet_trains_below_initial_loss():
    rng = np.random.default_rng(0)
    u = build_single_decoder_unet(TINY, seed=1)
    x = Tensor(rng.normal(size=(4, 2, 16, 16)).astype(np.float32))
    y = np.tanh(x.data[:, 0]) - 0.5 * x.data[:, 1]
    state = OptimizerState(learning_rate=3e-3, weight_decay=0.0)
    params = u.parameters()
    first = None
    for _ in range(25):
        u.zero_grad()
        loss = mse(u(x), y)
        first = float(loss.data) if first is None else first
        loss.backward()
        adamw_step(params, state)
    assert float(mse(u(x), y).data) < 0.5 * first
