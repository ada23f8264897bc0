import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from agfv.errors import DimensionError
from agfv.layers import KINDS, LayerSpec, layer_backward, layer_forward, output_shape

from helpers import GRAD_TOL_64, layer_gradcheck, random_layer_case


@pytest.mark.parametrize("kind", KINDS)
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(sum(map(ord, kind)))
    for _ in range(20):
        spec, x, p, inject = random_layer_case(kind, rng)
        assert layer_gradcheck(spec, x, p, inject, rng) <= GRAD_TOL_64


@pytest.mark.parametrize("kind", KINDS)
def test_zero_upstream_gives_zero_param_grads(kind):
    rng = np.random.default_rng(5)
    spec, x, p, inject = random_layer_case(kind, rng)
    y, cache = layer_forward(spec, p, x, False, None, inject)
    dx, dp = layer_backward(spec, p, cache, np.zeros_like(y))
    assert not np.any(dx)
    assert all(not np.any(g) for g in dp.values())


def test_zero_conv_then_relu_is_zero(rng):
    spec = LayerSpec("conv", "c", out_channels=1, kernel=3)
    p = {"W": np.zeros((1, 1, 3, 3)), "b": np.zeros(1)}
    y, _ = layer_forward(spec, p, rng.normal(size=(2, 1, 6, 6)), False, None)
    y, _ = layer_forward(LayerSpec("relu", "r"), {}, y, False, None)
    assert not np.any(y)


def test_relu_definition():
    y, _ = layer_forward(LayerSpec("relu", "r"), {}, np.array([[-1.0, 2.0, 0.0]]), False, None)
    assert np.array_equal(y, [[0.0, 2.0, 0.0]])


def test_conv_matches_direct_sum(rng):
    spec = LayerSpec("conv", "c", out_channels=2, kernel=3, stride=2, pad=1)
    x = rng.normal(size=(1, 2, 5, 5))
    p = {"W": rng.normal(size=(2, 2, 3, 3)), "b": rng.normal(size=2)}
    y, _ = layer_forward(spec, p, x, False, None)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for f in range(2):
        for i in range(3):
            for j in range(3):
                ref = np.sum(xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * p["W"][f]) + p["b"][f]
                assert abs(y[0, f, i, j] - ref) < 1e-12


def test_lrn_without_alpha_is_pure_scaling(rng):
    # alpha = 0 leaves b = a / k**beta
    spec = LayerSpec("lrn", "l", lrn_alpha=0.0, lrn_k=2.0, lrn_beta=0.75)
    x = rng.normal(size=(2, 6, 3, 3))
    y, _ = layer_forward(spec, {}, x, False, None)
    assert np.allclose(y, x * 2.0 ** -0.75, rtol=1e-15, atol=0)


def test_lrn_matches_windowed_formula(rng):
    spec = LayerSpec("lrn", "l", lrn_alpha=0.3)
    x = rng.normal(size=(1, 7, 2, 2))
    y, _ = layer_forward(spec, {}, x, False, None)
    for c in range(7):
        lo, hi = max(0, c - 2), min(7, c + 3)
        s = 2.0 + 0.3 * np.sum(x[0, lo:hi] ** 2, axis=0)
        assert np.allclose(y[0, c], x[0, c] / s ** 0.75, rtol=1e-13)


@given(arrays(np.float64, (1, 5, 2, 2), elements=st.floats(-1e150, 1e150)))
def test_lrn_output_finite(x):
    y, _ = layer_forward(LayerSpec("lrn", "l"), {}, x, False, None)
    assert np.all(np.isfinite(y))


def test_maxpool_picks_window_max():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y, _ = layer_forward(LayerSpec("maxpool", "p", window=2, stride=2), {}, x, False, None)
    assert np.array_equal(y[0, 0], [[5, 7], [13, 15]])


def test_dropout_eval_is_identity(rng):
    x = rng.normal(size=(3, 4))
    y, _ = layer_forward(LayerSpec("dropout", "d", rate=0.5), {}, x, False, None)
    assert np.array_equal(y, x)


def test_dropout_train_mean_matches_eval():
    spec = LayerSpec("dropout", "d", rate=0.3)
    x = np.linspace(0.5, 2.0, 8)[None]
    rng = np.random.default_rng(0)
    total = np.zeros_like(x)
    for _ in range(10_000):
        y, _ = layer_forward(spec, {}, x, True, rng)
        total += y
    assert np.all(np.abs(total / 10_000 - x) <= 0.02 * np.abs(x))


def test_dropout_train_needs_rng():
    with pytest.raises(ValueError):
        layer_forward(LayerSpec("dropout", "d", rate=0.5), {}, np.ones((1, 2)), True, None)


def test_l2norm_rows_unit(rng):
    y, _ = layer_forward(LayerSpec("l2norm", "e"), {}, rng.normal(size=(4, 6)), False, None)
    assert np.allclose(np.linalg.norm(y, axis=1), 1.0)
    z, _ = layer_forward(LayerSpec("l2norm", "e"), {}, np.zeros((1, 3)), False, None)
    assert np.array_equal(z, np.zeros((1, 3)))


def test_concat_inject_layout_and_constant_input():
    spec = LayerSpec("concat_inject", "inject", width=1)
    y, cache = layer_forward(spec, {}, np.array([[1.0, 2.0]]), False, None, np.array([[0.0]]))
    assert np.array_equal(y, [[1.0, 2.0, 0.0]])
    dx, dp = layer_backward(spec, {}, cache, np.array([[1.0, 1.0, 9.0]]))
    assert np.array_equal(dx, [[1.0, 1.0]]) and dp == {}


def test_concat_inject_width_mismatch():
    spec = LayerSpec("concat_inject", "inject", width=2)
    with pytest.raises(DimensionError):
        layer_forward(spec, {}, np.ones((1, 3)), False, None, np.ones((1, 1)))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="conv", name="c", out_channels=0, kernel=3),
        dict(kind="maxpool", name="p", window=0, stride=1),
        dict(kind="dropout", name="d", rate=1.0),
        dict(kind="fully_connected", name="f", width=0),
        dict(kind="lrn", name="l", lrn_k=0.0),
        dict(kind="softmax", name="s"),
    ],
)
def test_invalid_layer_specs(kwargs):
    with pytest.raises(ValueError):
        LayerSpec(**kwargs)


def test_output_shape_errors():
    with pytest.raises(DimensionError):
        output_shape(LayerSpec("conv", "c", out_channels=1, kernel=5), (1, 3, 3))
    with pytest.raises(DimensionError):
        output_shape(LayerSpec("maxpool", "p", window=4, stride=1), (1, 3, 3))


def test_layer_spec_dict_round_trip():
    spec = LayerSpec("lrn", "lrn1", lrn_n=3, lrn_alpha=0.01)
    assert LayerSpec.from_dict(spec.to_dict()) == spec
    assert spec.to_dict() == {"kind": "lrn", "name": "lrn1", "lrn_n": 3, "lrn_alpha": 0.01}
