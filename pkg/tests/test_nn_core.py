import numpy as np
import pytest
from hypothesis import given, strategies as st

from flavorbench import nn_core as nn
from flavorbench.nn_core import CONV, FC, LayerSpec, NetworkArchitecture, RegularizationConfig

PROFILE_CASES = [
    ("micro_fc", nn.micro_fc_architecture()),
    ("micro_conv", nn.micro_conv_architecture()),
    ("default", nn.default_architecture((6, 7, 9), 3)),
]


def _setup(arch, seed, batch=4):
    rng = np.random.default_rng(seed)
    params = nn.xavier_init(arch, rng)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    x = rng.random((batch, *arch.input_shape))
    target = rng.normal(size=(batch, arch.action_count))
    return rng, params, x, target


# architecture ------------------------------------------------------------------

def test_default_profile_is_three_conv_two_fc_with_four_dropout_sites():
    arch = nn.default_architecture((6, 7, 9), 3)
    assert [l.kind for l in arch.layers] == [CONV] * 3 + [FC] * 2
    assert [l.dropout_site for l in arch.layers] == [True] * 4 + [False]
    assert arch.layers[-1].size == 3
    assert arch.unit_shapes() == [(8, 5, 7), (16, 3, 5), (16, 1, 3), (64,), (3,)]


def test_architecture_rejects_wrong_output_width_and_fc_before_conv():
    with pytest.raises(ValueError):
        NetworkArchitecture((1, 3, 3), 2, (LayerSpec("fc1", FC, 3),))
    with pytest.raises(ValueError):
        NetworkArchitecture((1, 3, 3), 2, (LayerSpec("fc1", FC, 4), LayerSpec("conv1", CONV, 2, kernel=1),
                                           LayerSpec("fc2", FC, 2, activation="linear")))


def test_architecture_dict_round_trip():
    arch = nn.micro_conv_architecture()
    assert NetworkArchitecture.from_dict(arch.to_dict()) == arch


# initialization -----------------------------------------------------------------

def _fc_arch(fan_in, fan_out):
    return NetworkArchitecture((1, 1, fan_in), fan_out, (LayerSpec("fc1", FC, fan_out, activation="linear"),))


def test_xavier_fan_3_3_within_unit_bound():
    params = nn.xavier_init(_fc_arch(3, 3), np.random.default_rng(0))
    assert np.all(np.abs(params["fc1.w"]) <= 1.0)
    assert np.all(params["fc1.b"] == 0)


def test_xavier_same_seed_bit_identical():
    arch = nn.default_architecture((6, 7, 9), 3)
    a = nn.xavier_init(arch, np.random.default_rng(7))
    b = nn.xavier_init(arch, np.random.default_rng(7))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_xavier_100_by_50_mean_near_zero():
    w = nn.xavier_init(_fc_arch(100, 50), np.random.default_rng(1))["fc1.w"]
    assert w.size == 5000
    assert abs(w.mean()) <= 0.02
    limit = np.sqrt(6 / 150)
    assert np.all(np.abs(w) <= limit)
    # uniform on [-L, L] has variance L^2 / 3
    assert abs(w.var() - limit ** 2 / 3) < 0.1 * limit ** 2 / 3


def test_xavier_conv_fans_use_receptive_field():
    arch = nn.micro_conv_architecture()
    params = nn.xavier_init(arch, np.random.default_rng(2))
    # conv1: 3 filters, 2 channels, 3x3 -> fan_in 18, fan_out 27
    limit = np.sqrt(6 / (18 + 27))
    assert np.abs(params["conv1.w"]).max() <= limit
    assert np.abs(params["conv1.w"]).max() > 0.8 * limit


# forward ------------------------------------------------------------------------

def test_forward_all_zero_params_gives_zero_q():
    arch = nn.default_architecture((6, 7, 9), 3)
    params = nn.zeros_like_params(nn.xavier_init(arch, np.random.default_rng(0)))
    q, _ = nn.forward(params, arch, np.random.default_rng(1).random((6, 7, 9)))
    assert q.shape == (3,) and np.all(q == 0)


def test_identity_1x1_conv_returns_relu_of_input():
    arch = NetworkArchitecture((1, 1, 3), 3, (
        LayerSpec("conv1", CONV, 1, kernel=1),
        LayerSpec("fc1", FC, 3, activation="linear"),
    ))
    params = {"conv1.w": np.ones((1, 1, 1, 1)), "conv1.b": np.zeros(1),
              "fc1.w": np.eye(3), "fc1.b": np.zeros(3)}
    x = np.array([[[-1.5, 0.0, 2.25]]])
    q, _ = nn.forward(params, arch, x)
    assert np.array_equal(q, np.maximum(x.reshape(-1), 0))


def test_forward_matches_hand_computation_on_3x3_input():
    # conv 2x2 (1 filter) -> relu -> fc 2 linear; values worked out by hand:
    # conv map [[1, -4], [-1.5, 2]] + relu -> [1, 0, 0, 2]; q = [1 + 4 + 0.1, -1 - 0.2]
    arch = NetworkArchitecture((1, 3, 3), 2, (
        LayerSpec("conv1", CONV, 1, kernel=2),
        LayerSpec("fc1", FC, 2, activation="linear"),
    ))
    params = {
        "conv1.w": np.array([[[[1.0, 0.5], [-1.0, 2.0]]]]),
        "conv1.b": np.array([-0.5]),
        "fc1.w": np.array([[1.0, -1.0], [0.5, 2.0], [-0.25, 1.0], [2.0, 0.0]]),
        "fc1.b": np.array([0.1, -0.2]),
    }
    x = np.array([[[1.0, -2.0, 3.0], [0.5, 1.0, -1.0], [2.0, 0.0, 1.0]]])
    q, _ = nn.forward(params, arch, x)
    np.testing.assert_allclose(q, [5.1, -1.2], rtol=0, atol=1e-14)


def test_forward_flattens_in_channel_height_width_order():
    arch = NetworkArchitecture((2, 2, 2), 8, (
        LayerSpec("conv1", CONV, 2, kernel=1),
        LayerSpec("fc1", FC, 8, activation="linear"),
    ))
    params = {"conv1.w": np.eye(2).reshape(2, 2, 1, 1), "conv1.b": np.zeros(2),
              "fc1.w": np.eye(8), "fc1.b": np.zeros(8)}
    x = np.arange(1.0, 9.0).reshape(2, 2, 2)
    q, _ = nn.forward(params, arch, x)
    assert np.array_equal(q, x.reshape(-1))


def test_forward_shape_error_names_layer():
    arch = nn.micro_conv_architecture()
    params = nn.xavier_init(arch, np.random.default_rng(0))
    with pytest.raises(nn.ShapeError, match="conv1"):
        nn.forward(params, arch, np.zeros((3, 6, 6)))
    bad = dict(params, **{"fc1.w": np.zeros((5, 6))})
    with pytest.raises(nn.ShapeError, match="fc1"):
        nn.forward(bad, arch, np.zeros((2, 6, 6)))


def test_batched_forward_equals_per_sample():
    arch = nn.default_architecture((6, 7, 9), 3)
    _, params, x, _ = _setup(arch, 3, batch=5)
    q, _ = nn.forward(params, arch, x)
    for i in range(5):
        np.testing.assert_allclose(q[i], nn.forward(params, arch, x[i])[0], rtol=1e-13, atol=1e-15)


def test_float32_forward_is_close_to_float64():
    arch = nn.default_architecture((6, 7, 9), 3)
    _, params, x, _ = _setup(arch, 4)
    p32 = {k: v.astype(np.float32) for k, v in params.items()}
    q32, _ = nn.forward(p32, arch, x)
    assert q32.dtype == np.float32
    np.testing.assert_allclose(q32, nn.forward(params, arch, x)[0], rtol=1e-4, atol=1e-5)


# backward -----------------------------------------------------------------------

def test_backward_zero_upstream_gives_zero_grads():
    arch = nn.micro_conv_architecture()
    _, params, x, _ = _setup(arch, 0)
    _, cache = nn.forward(params, arch, x)
    grads = nn.backward(cache, arch, params, np.zeros((4, 3)))
    assert set(grads) == set(params)
    assert all(grads[k].shape == params[k].shape and not grads[k].any() for k in grads)


def test_linear_fc_squared_error_gradient_closed_form():
    arch = _fc_arch(4, 3)
    rng = np.random.default_rng(5)
    params = {"fc1.w": rng.normal(size=(4, 3)), "fc1.b": rng.normal(size=3)}
    x = rng.normal(size=(1, 1, 4))
    target = rng.normal(size=3)
    q, cache = nn.forward(params, arch, x)
    grads = nn.backward(cache, arch, params, 2 * (q - target))
    expected = np.outer(x.reshape(-1), 2 * (q - target))  # dL/dw_ji = 2 (q_i - t_i) x_j
    np.testing.assert_allclose(grads["fc1.w"], expected, rtol=1e-14)
    np.testing.assert_allclose(grads["fc1.b"], 2 * (q - target), rtol=1e-14)


def test_backward_rejects_stale_cache():
    arch = nn.micro_conv_architecture()
    _, params, x, _ = _setup(arch, 0)
    _, cache = nn.forward(params, arch, x)
    with pytest.raises(nn.StaleCacheError):
        nn.backward(cache, nn.micro_fc_architecture(), params, np.zeros((4, 3)))
    with pytest.raises(nn.StaleCacheError):
        nn.backward(cache, arch, params, np.zeros((2, 3)))
    other = nn.xavier_init(nn.micro_fc_architecture(), np.random.default_rng(0))
    with pytest.raises(nn.StaleCacheError):
        nn.backward(cache, arch, other, np.zeros((4, 3)))


# dropout ------------------------------------------------------------------------

def test_zero_rate_masks_are_ones_and_forward_bit_identical():
    arch = nn.default_architecture((6, 7, 9), 3)
    _, params, x, _ = _setup(arch, 1)
    masks = nn.make_dropout_masks(arch, RegularizationConfig(), np.random.default_rng(0), batch_size=4)
    assert set(masks.keep) == {"conv1", "conv2", "conv3", "fc1"}
    assert all(np.all(m == 1) for m in masks.keep.values())
    assert np.array_equal(nn.forward(params, arch, x, masks)[0], nn.forward(params, arch, x)[0])


def test_half_rate_zero_fraction_over_10000_units():
    arch = NetworkArchitecture((1, 1, 10), 3, (LayerSpec("fc1", FC, 10_000, dropout_site=True),
                                               LayerSpec("fc2", FC, 3, activation="linear")))
    masks = nn.make_dropout_masks(arch, RegularizationConfig(0.0, 0.0, 0.5), np.random.default_rng(11))
    frac = 1 - masks.keep["fc1"].mean()
    assert abs(frac - 0.5) <= 0.02


def test_masks_deterministic_per_seed():
    arch = nn.micro_conv_architecture()
    reg = RegularizationConfig(0.0, 0.2, 0.4)
    a = nn.make_dropout_masks(arch, reg, np.random.default_rng(3), batch_size=2)
    b = nn.make_dropout_masks(arch, reg, np.random.default_rng(3), batch_size=2)
    assert all(np.array_equal(a.keep[k], b.keep[k]) for k in a.keep)


def test_inverted_dropout_preserves_expectation():
    arch = nn.micro_fc_architecture()
    _, params, x, _ = _setup(arch, 2, batch=1)
    _, clean = nn.forward(params, arch, x)
    unmasked = clean.inputs[1][0]  # fc1 activation as seen by fc2
    live = unmasked > 0
    assert live.sum() >= 4
    n = 10_000
    masks = nn.make_dropout_masks(arch, RegularizationConfig(0.0, 0.0, 0.4), np.random.default_rng(9), batch_size=n)
    _, cache = nn.forward(params, arch, np.repeat(x, n, axis=0), masks)
    masked_mean = cache.inputs[1].mean(axis=0)
    np.testing.assert_allclose(masked_mean[live], unmasked[live], rtol=0.03)
    assert np.all(masked_mean[~live] == 0)


def test_rate_out_of_range_rejected():
    with pytest.raises(ValueError):
        RegularizationConfig(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        RegularizationConfig(-1e-3)


# l2 -----------------------------------------------------------------------------

def test_l2_zero_lambda():
    params = nn.xavier_init(nn.micro_fc_architecture(), np.random.default_rng(0))
    penalty, grads = nn.l2_term(params, 0.0)
    assert penalty == 0 and not any(g.any() for g in grads.values())


def test_l2_single_weight():
    penalty, grads = nn.l2_term({"fc1.w": np.array([[1.0]]), "fc1.b": np.array([5.0])}, 1e-4)
    assert penalty == pytest.approx(1e-4, rel=1e-15)
    assert grads["fc1.w"][0, 0] == pytest.approx(2e-4, rel=1e-15)
    assert grads["fc1.b"][0] == 0


def test_l2_two_weights():
    penalty, grads = nn.l2_term({"fc1.w": np.array([[3.0, -4.0]]), "fc1.b": np.zeros(2)}, 0.5)
    assert penalty == 12.5
    assert np.array_equal(grads["fc1.w"], [[3.0, -4.0]])


def test_l2_gradient_matches_central_difference_to_1e10():
    params = nn.xavier_init(nn.micro_conv_architecture(), np.random.default_rng(4))
    lam, h = 1e-3, 1e-5
    _, grads = nn.l2_term(params, lam)
    for key, value in params.items():
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + h
            up, _ = nn.l2_term(params, lam)
            value[idx] = old - h
            down, _ = nn.l2_term(params, lam)
            value[idx] = old
            assert abs((up - down) / (2 * h) - grads[key][idx]) <= 1e-10


# optimizer ----------------------------------------------------------------------

def test_zero_gradient_step_leaves_params():
    params = nn.xavier_init(nn.micro_fc_architecture(), np.random.default_rng(0))
    before = nn.copy_params(params)
    state = nn.init_optimizer(params)
    nn.optimizer_step(params, nn.zeros_like_params(params), state)
    assert all(np.array_equal(before[k], params[k]) for k in params)


def test_rmsprop_single_step_closed_form():
    params = {"fc1.w": np.array([[1.0]])}
    state = nn.init_optimizer(params, 0.00025, 0.95, 1e-8)
    nn.optimizer_step(params, {"fc1.w": np.array([[1.0]])}, state)
    assert state.accumulators["fc1.w"][0, 0] == pytest.approx(0.05, rel=1e-15)
    assert 1.0 - params["fc1.w"][0, 0] == pytest.approx(0.00025 / np.sqrt(0.05 + 1e-8), rel=1e-12)
    assert 1.0 - params["fc1.w"][0, 0] == pytest.approx(0.00025 / np.sqrt(0.05), rel=1e-6)


def test_rmsprop_delta_approaches_step_size_under_constant_gradient():
    params = {"fc1.w": np.array([[0.0]])}
    state = nn.init_optimizer(params)
    deltas = []
    for _ in range(400):
        before = params["fc1.w"][0, 0]
        nn.optimizer_step(params, {"fc1.w": np.array([[1.0]])}, state)
        deltas.append(before - params["fc1.w"][0, 0])
    assert deltas[0] > deltas[10] > deltas[-1]
    assert deltas[-1] == pytest.approx(0.00025, rel=1e-6)


def test_non_finite_gradient_rejected_naming_layer_without_mutation():
    params = nn.xavier_init(nn.micro_conv_architecture(), np.random.default_rng(0))
    grads = nn.zeros_like_params(params)
    grads["conv1.w"] += 1.0
    grads["fc2.w"][0, 0] = np.nan
    before = nn.copy_params(params)
    state = nn.init_optimizer(params)
    with pytest.raises(nn.NonFiniteError, match="fc2"):
        nn.optimizer_step(params, grads, state)
    assert all(np.array_equal(before[k], params[k]) for k in params)
    assert not any(a.any() for a in state.accumulators.values())


# gradient check -----------------------------------------------------------------

@pytest.mark.parametrize("name,arch", PROFILE_CASES)
@pytest.mark.parametrize("lam", [0.0, 1e-3])
@pytest.mark.parametrize("dropout", [False, True])
def test_gradient_check_profiles(name, arch, lam, dropout):
    rng, params, x, target = _setup(arch, 21)
    reg = RegularizationConfig(lam, 0.2 if dropout else 0.0, 0.4 if dropout else 0.0)
    masks = nn.make_dropout_masks(arch, reg, rng, batch_size=4) if dropout else None
    report = nn.gradient_check(arch, params, x, target, reg, tolerance=1e-6, masks=masks, rng=rng)
    assert report.passed, str(report)
    assert report.checked >= min(200, sum(v.size for v in params.values()))


def test_gradient_check_detects_sign_flip():
    arch = nn.micro_conv_architecture()
    rng, params, x, target = _setup(arch, 0)

    def flipped(cache, arch, params, dq):
        return {k: -g for k, g in nn.backward(cache, arch, params, dq).items()}

    report = nn.gradient_check(arch, params, x, target, backward_fn=flipped, rng=rng)
    assert not report.passed
    assert report.max_relative_error > 1.0


@given(st.integers(0, 10_000), st.sampled_from([0.0, 1e-3, 1e-2]))
def test_property_gradient_check_micro_profiles(seed, lam):
    for arch in (nn.micro_fc_architecture(), nn.micro_conv_architecture()):
        rng, params, x, target = _setup(arch, seed, batch=2)
        report = nn.gradient_check(arch, params, x, target, RegularizationConfig(lam), rng=rng, n_samples=60)
        assert report.passed, str(report)


@given(st.integers(0, 10_000))
def test_property_zero_rate_dropout_is_bit_identical(seed):
    arch = nn.micro_conv_architecture()
    rng, params, x, _ = _setup(arch, seed, batch=3)
    masks = nn.make_dropout_masks(arch, RegularizationConfig(0.5, 0.0, 0.0), rng, batch_size=3)
    assert np.array_equal(nn.forward(params, arch, x, masks)[0], nn.forward(params, arch, x)[0])


@given(st.integers(0, 10_000))
def test_property_forward_deterministic_without_masks(seed):
    arch = nn.micro_conv_architecture()
    _, params, x, _ = _setup(arch, seed)
    a = nn.forward(params, arch, x)[0]
    b = nn.forward(params, arch, x)[0]
    assert np.array_equal(a, b)


@given(st.integers(0, 10_000), st.floats(0, 1.0))
def test_property_l2_penalty_is_lambda_times_sum_of_squares(seed, lam):
    params = nn.xavier_init(nn.micro_conv_architecture(), np.random.default_rng(seed))
    penalty, grads = nn.l2_term(params, lam)
    expected = lam * sum(float(np.sum(v * v)) for k, v in params.items() if k.endswith(".w"))
    assert float(penalty) == pytest.approx(expected, rel=1e-12, abs=1e-300)
    for k, v in params.items():
        np.testing.assert_array_equal(grads[k], 2 * lam * v if k.endswith(".w") else 0 * v)
