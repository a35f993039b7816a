import numpy as np
import pytest

from camera_sampler import Camera
from diffusion_math import Condition
from errors import FormatError, InvalidCondition, InvalidParameter, IoError, RejectedStep
from gradcheck import check_gradient
from optim import adamw_state
from score_adapter import (
    AdapterConfig,
    AdapterModel,
    adapter_loss_and_grads,
    adapter_train_step,
    bilinear_matrix,
    load_adapter,
    save_adapter,
)

CAM = Camera(45.0, 10.0, 2.2, 50.0, 8, 8)
COND = Condition.for_camera(0, CAM)


def test_first_layer_matches_input_dim(schedule):
    model = AdapterModel(AdapterConfig(resolution=4, hidden=8, num_prompts=2), schedule)
    assert model.params["W1"].shape == (8, model.input_dim)
    assert model.params["W3"].shape == (4 * 4 * 3, 8)


def test_fresh_adapter_predicts_zero_noise(schedule, rng):
    model = AdapterModel(AdapterConfig(resolution=4, hidden=8), schedule)
    np.testing.assert_array_equal(model.predict_noise(rng.normal(size=(8, 8, 3)), 0.4, COND), 0.0)


def test_fresh_velocity_adapter_predicts_scaled_input(schedule, rng):
    model = AdapterModel(AdapterConfig(resolution=4, hidden=8, prediction="v"), schedule)
    x_t = rng.normal(size=(8, 8, 3))
    np.testing.assert_allclose(model.predict_noise(x_t, 0.4, COND), schedule.sigma(0.4) * x_t)


def test_gray_adapter_repeats_channels(schedule, rng):
    model = AdapterModel(AdapterConfig(resolution=4, hidden=8, channels="gray"), schedule)
    model.params["b3"] = rng.normal(size=model.params["b3"].shape)
    out = model.predict_noise(rng.normal(size=(8, 8, 3)), 0.4, COND)
    np.testing.assert_array_equal(out[..., 0], out[..., 2])


def test_condition_checks(schedule):
    model = AdapterModel(AdapterConfig(resolution=4, hidden=8), schedule)
    x_t = np.zeros((8, 8, 3))
    with pytest.raises(InvalidCondition):
        model.predict_noise(x_t, 0.4, Condition(0))
    with pytest.raises(InvalidCondition):
        model.predict_noise(x_t, 0.4, Condition.for_camera(1, CAM))
    with pytest.raises(InvalidParameter):
        model.predict_noise(np.zeros((8, 8)), 0.4, COND)
    with pytest.raises(InvalidParameter):
        AdapterModel(AdapterConfig(prediction="x0"), schedule)


def test_bilinear_matrix_rows_sum_to_one():
    M = bilinear_matrix(5, 9)
    np.testing.assert_allclose(M.sum(axis=1), 1.0)
    np.testing.assert_array_equal(bilinear_matrix(4, 4), np.eye(4))


def test_loss_gradients_match_finite_differences(schedule, rng):
    model = AdapterModel(AdapterConfig(resolution=3, hidden=4, seed=1), schedule)
    model.params["W3"] = 0.3 * rng.normal(size=model.params["W3"].shape)
    x0, eps, t = rng.uniform(size=(6, 6, 3)), rng.normal(size=(6, 6, 3)), 0.35
    _, grads = adapter_loss_and_grads(model, x0, t, eps, COND)

    for name in ("W1", "b2", "W3", "b3"):
        original = model.params[name].copy()

        def loss(x, name=name):
            model.params[name] = x
            return adapter_loss_and_grads(model, x0, t, eps, COND)[0]

        res = check_gradient(name, loss, original, grads[name], tolerance=1e-3, step=1e-5, floor=1e-6)
        model.params[name] = original
        assert res.passed, f"{name}: {res.error:.3e}"


def test_training_lowers_the_loss_on_a_fixed_sample(schedule, rng):
    model = AdapterModel(AdapterConfig(resolution=8, hidden=16), schedule)
    state = adamw_state()
    x0, eps = rng.uniform(size=(8, 8, 3)), rng.normal(size=(8, 8, 3))
    losses = [adapter_train_step(model, state, x0, 0.5, eps, COND, 1e-2) for _ in range(100)]
    assert losses[-1] < 0.5 * losses[0]
    assert state.step == 100


def test_non_finite_loss_is_rejected(schedule, rng):
    model = AdapterModel(AdapterConfig(resolution=4, hidden=8), schedule)
    x0 = np.full((8, 8, 3), np.nan)
    before = {k: v.copy() for k, v in model.params.items()}
    with pytest.raises(RejectedStep):
        adapter_train_step(model, adamw_state(), x0, 0.5, rng.normal(size=(8, 8, 3)), COND, 1e-3)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_checkpoint_round_trip(tmp_path, schedule, rng):
    model = AdapterModel(AdapterConfig(resolution=4, hidden=8, num_prompts=2, prediction="v", seed=3), schedule)
    model.params["W3"] = rng.normal(size=model.params["W3"].shape)
    path = tmp_path / "adapter.bin"
    save_adapter(model, str(path))
    loaded = load_adapter(str(path), schedule)
    assert loaded.config == model.config
    assert set(loaded.params) == set(model.params)
    for k in model.params:
        np.testing.assert_array_equal(loaded.params[k], model.params[k])


def test_checkpoint_errors(tmp_path, schedule):
    with pytest.raises(IoError):
        load_adapter(str(tmp_path / "missing.bin"), schedule)

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTANADAPTER")
    with pytest.raises(FormatError):
        load_adapter(str(bad), schedule)

    good = tmp_path / "good.bin"
    save_adapter(AdapterModel(AdapterConfig(resolution=4, hidden=8), schedule), str(good))
    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(good.read_bytes()[:-16])
    with pytest.raises(FormatError):
        load_adapter(str(truncated), schedule)
