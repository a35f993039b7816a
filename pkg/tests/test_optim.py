import numpy as np
import pytest

from errors import RejectedStep, ShapeError
from optim import AdamState, adam_update, adamw_state


def test_first_step_moves_by_the_learning_rate():
    state = AdamState()
    params = {"a": np.array([1.0, -2.0, 0.5])}
    out = adam_update(state, params, {"a": np.array([0.3, -4.0, 1e-3])}, 0.1)
    np.testing.assert_allclose(out["a"], [0.9, -1.9, 0.4], rtol=1e-9)
    assert state.step == 1
    np.testing.assert_array_equal(params["a"], [1.0, -2.0, 0.5])


def test_per_group_learning_rates():
    state = AdamState()
    out = adam_update(
        state,
        {"a": np.zeros(2), "b": np.zeros(2)},
        {"a": np.ones(2), "b": np.ones(2)},
        {"a": 0.1, "b": 0.01},
    )
    np.testing.assert_allclose(out["a"], -0.1)
    np.testing.assert_allclose(out["b"], -0.01)


def test_non_finite_gradients_leave_the_state_untouched():
    state = AdamState()
    with pytest.raises(RejectedStep):
        adam_update(state, {"a": np.zeros(2)}, {"a": np.array([1.0, np.nan])}, 0.1)
    assert state.step == 0
    assert state.m == {}


def test_shape_checks():
    state = AdamState()
    with pytest.raises(ShapeError):
        adam_update(state, {"a": np.zeros(2)}, {"a": np.zeros(3)}, 0.1)
    with pytest.raises(ShapeError):
        adam_update(state, {"a": np.zeros(2)}, {}, 0.1)
    adam_update(state, {"a": np.zeros(2)}, {"a": np.ones(2)}, 0.1)
    with pytest.raises(ShapeError):
        adam_update(state, {"a": np.zeros(3)}, {"a": np.ones(3)}, 0.1)


def test_decoupled_weight_decay():
    state = adamw_state(weight_decay=0.1)
    out = adam_update(state, {"w": np.array([2.0])}, {"w": np.array([0.0])}, 0.5)
    np.testing.assert_allclose(out["w"], [2.0 * (1.0 - 0.05)])


def test_remap_follows_parent_rows():
    state = AdamState()
    adam_update(state, {"p": np.zeros((3, 2))}, {"p": np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])}, 0.1)
    before = state.copy()
    state.remap(np.array([2, 0, 0]))
    np.testing.assert_array_equal(state.m["p"], before.m["p"][[2, 0, 0]])
    np.testing.assert_array_equal(state.v["p"], before.v["p"][[2, 0, 0]])
    assert state.step == before.step


def test_two_identical_steps_follow_the_moment_recurrences():
    state = AdamState()
    b1, b2 = state.betas
    g = np.array([0.5, -2.0, 3e-4])
    params = {"a": np.zeros(3)}
    first = adam_update(state, params, {"a": g}, 0.1)
    second = adam_update(state, first, {"a": g}, 0.1)

    m2 = (1.0 - b1) * g * (1.0 + b1)
    v2 = (1.0 - b2) * g ** 2 * (1.0 + b2)
    np.testing.assert_allclose(state.m["a"], m2, rtol=1e-12)
    np.testing.assert_allclose(state.v["a"], v2, rtol=1e-12)
    # constant g: both bias-corrected moments equal g and g^2, so each step is -lr * sign(g)
    step = (m2 / (1.0 - b1 ** 2)) / (np.sqrt(v2 / (1.0 - b2 ** 2)) + state.eps)
    np.testing.assert_allclose(step, np.sign(g), rtol=1e-9)
    np.testing.assert_allclose(second["a"], first["a"] - 0.1 * step, rtol=1e-12)
    assert state.step == 2
