"""Dense kernel, Adam and gradient-checker tests.

The finite-difference oracle comes first: everything else in the package
leans on gradient_check being trustworthy, so it is exercised against cases
with known closed-form gradients before it is used to audit the layers.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dailoc.errors import GradientCheckError, ShapeError, TrainingError
from dailoc.nn import Activation, AdamState, DenseLayer, adam_step, gradient_check


def _layer(w, b, act):
    return DenseLayer(np.asarray(w, dtype=float), np.asarray(b, dtype=float), act)


# -- gradient_check oracle ------------------------------------------------------


def test_gradient_check_quadratic_exact():
    p = {"p": np.array([0.3, -1.2, 2.0])}

    def fn(params):
        v = params["p"]
        return float(np.sum(v * v)), {"p": 2.0 * v}

    report = gradient_check(fn, p, h=1e-5, tolerance=1e-8)
    assert report.passed
    assert report.max_rel_error < 1e-8


def test_gradient_check_flags_corrupted_bias():
    rng = np.random.default_rng(0)
    layer = DenseLayer.init(3, 2, Activation.IDENTITY, rng)
    x = rng.uniform(-1, 1, size=(4, 3))
    params = {"w": layer.w, "b": layer.b}

    def fn(_):
        out = layer.forward(x)
        loss = float(np.sum(out))
        _, dw, db = layer.backward(np.ones_like(out))
        return loss, {"w": dw, "b": db + 0.1}  # inject a bias-gradient fault

    report = gradient_check(fn, params, h=1e-5, tolerance=1e-6)
    assert not report.passed
    assert report.worst_param.startswith("b[")


def test_gradient_check_rejects_nondeterministic_loss():
    state = {"n": 0}

    def fn(params):
        state["n"] += 1
        return float(state["n"]), {"p": np.zeros(1)}

    with pytest.raises(GradientCheckError, match="not deterministic"):
        gradient_check(fn, {"p": np.zeros(1)}, h=1e-5)


# -- dense forward -----------------------------------------------------------------


def test_forward_identity_passthrough():
    layer = _layer(np.eye(3), np.zeros(3), Activation.IDENTITY)
    x = np.array([[0.5, -2.0, 3.0]])
    np.testing.assert_array_equal(layer.apply(x), x)


def test_forward_relu_clamps():
    layer = _layer([[1.0]], [-2.0], Activation.RELU)
    assert layer.apply(np.array([[1.0]]))[0, 0] == 0.0


def test_forward_sigmoid_at_zero():
    layer = _layer([[0.0]], [0.0], Activation.SIGMOID)
    assert layer.apply(np.array([[5.0]]))[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_forward_shape_error_names_both_shapes():
    layer = _layer(np.ones((2, 3)), np.zeros(2), Activation.IDENTITY)
    with pytest.raises(ShapeError, match=r"\(1, 4\).*\(2, 3\)"):
        layer.apply(np.ones((1, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_deterministic_and_finite(seed):
    rng = np.random.default_rng(seed)
    layer = DenseLayer.init(5, 4, Activation(seed % 4), rng)
    x = rng.uniform(-1, 1, size=(3, 5))
    a = layer.apply(x)
    b = layer.apply(x)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


# -- dense backward -----------------------------------------------------------------


def test_backward_linear_single_weight():
    # y = w*x with loss = y: weight grad is x, input grad is w
    w = 1.7
    layer = _layer([[w]], [0.0], Activation.IDENTITY)
    layer.forward(np.array([[3.0]]))
    dx, dw, db = layer.backward(np.array([[1.0]]))
    assert dw[0, 0] == pytest.approx(3.0)
    assert dx[0, 0] == pytest.approx(w)
    assert db[0] == pytest.approx(1.0)


def test_backward_dead_relu_zero_grads():
    layer = _layer([[1.0]], [-5.0], Activation.RELU)
    layer.forward(np.array([[1.0]]))  # pre-activation -4 < 0
    dx, dw, db = layer.backward(np.array([[1.0]]))
    assert dx[0, 0] == 0.0 and dw[0, 0] == 0.0 and db[0] == 0.0


@pytest.mark.parametrize("acts", [
    (Activation.RELU, Activation.SIGMOID, Activation.IDENTITY),
    (Activation.SOFTPLUS, Activation.RELU, Activation.SIGMOID),
])
def test_backward_three_layer_net_matches_fd(acts):
    """Random 3-layer stack vs central differences at h=1e-5."""
    rng = np.random.default_rng(42)
    dims = [4, 6, 5, 3]
    layers = [DenseLayer.init(dims[i], dims[i + 1], acts[i], rng) for i in range(3)]
    x = rng.uniform(-1, 1, size=(5, 4))
    params = {}
    for i, layer in enumerate(layers):
        params[f"l{i}.w"] = layer.w
        params[f"l{i}.b"] = layer.b

    def fn(_):
        h = x
        for layer in layers:
            h = layer.forward(h)
        loss = float(np.sum(h * h))
        up = 2.0 * h
        grads = {}
        for i in reversed(range(3)):
            up, dw, db = layers[i].backward(up)
            grads[f"l{i}.w"] = dw
            grads[f"l{i}.b"] = db
        return loss, grads

    report = gradient_check(fn, params, h=1e-5, tolerance=1e-6)
    assert report.passed, f"max rel err {report.max_rel_error} at {report.worst_param}"


# -- Adam -------------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    state = AdamState()
    adam_step(p, {"w": np.zeros(3)}, state)
    np.testing.assert_array_equal(p["w"], before)
    assert state.step == 1


@pytest.mark.parametrize("g", [1e-4, 0.5, -3.0, 1e3])
def test_adam_first_step_moves_by_lr(g):
    # bias-corrected first step: lr * g / (|g| + eps) ~ sign(g) * lr
    p = {"w": np.array([0.0])}
    state = AdamState(lr=1e-3)
    adam_step(p, {"w": np.array([g])}, state)
    expected = -1e-3 * g / (abs(g) + 1e-8)
    assert p["w"][0] == pytest.approx(expected, rel=1e-12)
    assert abs(p["w"][0]) == pytest.approx(1e-3, rel=1e-3)


def test_adam_is_stateful_not_idempotent():
    # moments accumulate: after a nonzero gradient, even a zero gradient moves
    # the parameter (momentum), unlike a fresh optimizer
    p = {"w": np.array([0.0])}
    state = AdamState()
    adam_step(p, {"w": np.array([1.0])}, state)
    after_first = p["w"][0]
    adam_step(p, {"w": np.array([0.0])}, state)
    assert p["w"][0] != after_first
    assert state.step == 2
    assert state.m["w"][0] != 0.0 and state.v["w"][0] != 0.0


def test_adam_rejects_nonfinite_gradient_naming_block():
    p = {"clf.w": np.zeros(2)}
    with pytest.raises(TrainingError, match="clf.w"):
        adam_step(p, {"clf.w": np.array([np.nan, 0.0])}, AdamState())


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
