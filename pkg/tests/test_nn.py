import io
import math

import numpy as np
import pytest

from crossdenoise.nn import (
    AdamState,
    DenseLayer,
    NumericError,
    adam_step,
    bce_grad,
    bce_logit_grad,
    bce_loss,
    dense_backward,
    dense_forward,
    load_params,
    save_params,
    sigmoid,
)
from oracles import central_diff, rel_error


def test_bce_values():
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(1 - 1e-7, 1) == pytest.approx(1e-7, rel=1e-3)
    assert bce_loss(0.9, 0) == pytest.approx(2.302585, abs=1e-6)


def test_bce_clamps_extremes():
    assert np.isfinite(bce_loss(0.0, 1)) and np.isfinite(bce_loss(1.0, 0))
    assert np.isfinite(bce_grad(0.0, 1))


def test_bce_grads():
    assert bce_grad(0.5, 1) == pytest.approx(-2.0)
    assert bce_logit_grad(0.5, 1) == pytest.approx(-0.5)


def test_bce_grad_finite_differences(rng):
    h = 1e-5
    for _ in range(100):
        p = rng.uniform(0.05, 0.95)
        y = float(rng.integers(0, 2))
        num = (bce_loss(p + h, y) - bce_loss(p - h, y)) / (2 * h)
        assert abs(bce_grad(p, y) - num) < 1e-4


def test_logit_grad_matches_chain_rule(rng):
    z = rng.normal(size=50)
    y = rng.integers(0, 2, size=50).astype(float)
    p = sigmoid(z)
    assert np.allclose(bce_logit_grad(p, y), bce_grad(p, y) * p * (1 - p))


def test_sigmoid_stable():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert out.tolist() == [0.0, 0.5, 1.0]


def test_dense_identity():
    layer = DenseLayer(np.eye(3), np.zeros(3), "identity")
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(dense_forward(layer, x)[0], x)


def test_dense_sigmoid_zero():
    layer = DenseLayer(np.zeros((2, 3)), np.zeros(2), "sigmoid")
    assert np.array_equal(dense_forward(layer, np.ones((1, 3)))[0], np.full((1, 2), 0.5))


def test_dense_shape_mismatch():
    layer = DenseLayer(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        dense_forward(layer, np.ones((1, 4)))
    with pytest.raises(ValueError):
        DenseLayer(np.zeros((2, 3)), np.zeros(3))


@pytest.mark.parametrize("act", ["identity", "sigmoid", "relu"])
def test_dense_backward_finite_differences(rng, act):
    layer = DenseLayer(rng.normal(size=(4, 3)), rng.normal(size=4), act)
    x = rng.normal(size=(5, 3))
    upstream = rng.normal(size=(5, 4))

    def f():
        return float((dense_forward(layer, x)[0] * upstream).sum())

    _, cache = dense_forward(layer, x)
    gx, gw, gb = dense_backward(layer, cache, upstream)
    num = central_diff(f, {"x": x, "w": layer.weight, "b": layer.bias})
    assert np.max(np.abs(gx - num["x"])) < 1e-4
    assert np.max(np.abs(gw - num["w"])) < 1e-4
    assert np.max(np.abs(gb - num["b"])) < 1e-4
    assert rel_error(gw, num["w"]) < 1e-4


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState()
    adam_step(p, {"w": np.zeros(2)}, st)
    assert p["w"].tolist() == [1.0, -2.0]
    assert st.step_count == 1


def test_adam_first_step_magnitude():
    # m_hat = 1, v_hat = 1 after bias correction -> step lr / (1 + eps)
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(lr=1e-3))
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_descends_under_constant_gradient():
    p = {"w": np.array([0.0, 0.0])}
    st = AdamState(lr=1e-2)
    for _ in range(50):
        adam_step(p, {"w": np.array([3.0, -0.5])}, st)
    assert p["w"][0] < 0 < p["w"][1]


def test_adam_nan_names_parameter():
    with pytest.raises(NumericError, match="emb"):
        adam_step({"emb": np.zeros(2)}, {"emb": np.array([np.nan, 0.0])}, AdamState())


def test_adam_deterministic(rng):
    grads = [rng.normal(size=3) for _ in range(10)]
    outs = []
    for _ in range(2):
        p, st = {"w": np.ones(3)}, AdamState()
        for g in grads:
            adam_step(p, {"w": g}, st)
        outs.append(p["w"].copy())
    assert np.array_equal(*outs)


def test_param_container_roundtrip(rng):
    params = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    buf = io.BytesIO()
    save_params(buf, "gmf", {"dim": 2}, params)
    raw = buf.getvalue()
    kind, dims, back = load_params(io.BytesIO(raw))
    assert kind == "gmf" and dims == {"dim": 2}
    for k in params:
        assert np.array_equal(back[k], params[k])
    # little-endian float64 payload at the tail
    assert raw.endswith(params["b"].astype("<f8").tobytes())
