import numpy as np
import pytest

from camera_sampler import canonical_quad
from diffusion_math import (
    UNCONDITIONAL,
    AnalyticGaussianProvider,
    AnalyticJointProvider,
    AnalyticMixtureProvider,
    Condition,
    DiffusedGaussian,
    FixedTarget,
    MixtureComponent,
    NoiseSchedule,
    cfg_combine,
    eps_to_v,
    forward_diffuse,
    v_to_eps,
    velocity_target,
)
from errors import InvalidCondition, InvalidParameter, ShapeError, SingularCovariance
from score_targets import SlotArrayTargets
from verify_suites import suite_score_identity


# ---------------------------------------------------------
# Schedule
# ---------------------------------------------------------
@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_is_variance_preserving(kind):
    s = NoiseSchedule(kind)
    np.testing.assert_allclose(s.alphas ** 2 + s.sigmas ** 2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.alphas) < 0)


def test_schedule_lookup():
    s = NoiseSchedule(steps=1000)
    assert s.index(0.5) == 499
    assert s.alpha_sigma(0.5) == (s.alpha(0.5), s.sigma(0.5))
    assert s.weight(0.3) == pytest.approx(s.sigma(0.3) ** 2)
    assert NoiseSchedule(weighting="constant").weight(0.3) == 1.0
    assert NoiseSchedule(weighting=lambda t: 2.0 * t).weight(0.25) == 0.5


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_schedule_rejects_t_outside_open_interval(t):
    with pytest.raises(InvalidParameter):
        NoiseSchedule().alpha(t)


@pytest.mark.parametrize("kwargs", [dict(kind="sigmoid"), dict(steps=1), dict(beta_start=0.1, beta_end=0.01), dict(weighting="snr")])
def test_schedule_rejects_bad_arguments(kwargs):
    with pytest.raises(InvalidParameter):
        NoiseSchedule(**kwargs)


# ---------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------
def test_forward_diffuse(schedule, rng):
    x0, eps = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    alpha, sigma = schedule.alpha_sigma(0.4)
    np.testing.assert_allclose(forward_diffuse(x0, 0.4, eps, schedule), alpha * x0 + sigma * eps)
    with pytest.raises(ShapeError):
        forward_diffuse(x0, 0.4, eps[:2], schedule)


def test_cfg_combine():
    cond, uncond = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    np.testing.assert_allclose(cfg_combine(cond, uncond, 2.0), 3.0 * cond - 2.0 * uncond)
    np.testing.assert_array_equal(cfg_combine(cond, uncond, 0.0), cond)
    with pytest.raises(InvalidParameter):
        cfg_combine(cond, uncond, -1.0)


def test_velocity_parameterization(schedule, rng):
    x0, eps = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    t = 0.6
    x_t = forward_diffuse(x0, t, eps, schedule)
    v = velocity_target(x0, eps, t, schedule)
    np.testing.assert_allclose(v_to_eps(v, x_t, t, schedule), eps, atol=1e-12)
    np.testing.assert_allclose(eps_to_v(eps, x_t, t, schedule), v, atol=1e-10)


def test_unconditional_condition_carries_nothing():
    cam = canonical_quad()[0]
    with pytest.raises(InvalidCondition):
        Condition(None, camera=cam)
    assert UNCONDITIONAL.is_unconditional
    assert Condition.for_camera(0, cam).view_bucket == "front"


# ---------------------------------------------------------
# Analytic providers
# ---------------------------------------------------------
def test_score_identity_holds_for_every_provider_kind():
    for check in suite_score_identity(seed=3, trials=10):
        assert check.passed, f"{check.name}: {check.measured:.3e}"


def test_gaussian_prediction_is_zero_at_the_diffused_mean(schedule, rng):
    mean = rng.normal(size=(2, 2, 3))
    provider = AnalyticGaussianProvider(FixedTarget(mean), 0.2, schedule)
    t = 0.3
    x_t = schedule.alpha(t) * mean
    np.testing.assert_allclose(provider.predict_noise(x_t, t, Condition(0)), 0.0, atol=1e-12)


def test_fixed_target_shape_mismatch(schedule):
    provider = AnalyticGaussianProvider(np.zeros((2, 2, 3)), 0.2, schedule)
    with pytest.raises(ShapeError):
        provider.predict_noise(np.zeros((3, 3, 3)), 0.5, Condition(0))


def test_diffused_gaussian_rejects_bad_covariances():
    with pytest.raises(SingularCovariance):
        DiffusedGaussian(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(SingularCovariance):
        DiffusedGaussian(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ShapeError):
        DiffusedGaussian(np.zeros(2), np.ones(3))


def test_mixture_weights_are_checked(schedule):
    target = np.zeros((2, 2))
    with pytest.raises(InvalidParameter):
        AnalyticMixtureProvider([MixtureComponent(0.7, target, 0.1), MixtureComponent(0.7, target, 0.1)], schedule)
    with pytest.raises(InvalidParameter):
        AnalyticMixtureProvider([], schedule)


def test_single_component_mixture_matches_gaussian(schedule, rng):
    mean = rng.normal(size=(2, 2))
    x_t = rng.normal(size=(2, 2))
    mixture = AnalyticMixtureProvider([MixtureComponent(1.0, mean, 0.3)], schedule)
    gaussian = AnalyticGaussianProvider(mean, 0.3, schedule)
    np.testing.assert_array_equal(mixture.predict_noise(x_t, 0.5, Condition(0)), gaussian.predict_noise(x_t, 0.5, Condition(0)))


def test_joint_without_coupling_factorizes_over_views(schedule, rng):
    shape = (2, 2, 3)
    targets = SlotArrayTargets([rng.normal(size=shape) for _ in range(4)])
    quad = canonical_quad(size=2)
    joint = AnalyticJointProvider(targets, 0.4, 0.0, schedule)
    single = AnalyticGaussianProvider(targets, 0.4, schedule)
    x_t = rng.normal(size=(4,) + shape)
    t = 0.45

    stacked = joint.predict_noise(x_t, t, Condition(0), quad)
    for k, cam in enumerate(quad):
        np.testing.assert_allclose(stacked[k], single.predict_noise(x_t[k], t, Condition.for_camera(0, cam)), atol=1e-12)


def test_joint_coupling_bounds(schedule):
    with pytest.raises(InvalidParameter):
        AnalyticJointProvider(np.zeros((2, 2)), 0.1, 0.34, schedule)
    with pytest.raises(InvalidParameter):
        AnalyticJointProvider(np.zeros((2, 2)), 0.0, 0.1, schedule)
    provider = AnalyticJointProvider(np.zeros((2, 2)), 0.1, 0.2, schedule)
    with pytest.raises(ShapeError):
        provider.predict_noise(np.zeros((3, 2, 2)), 0.5, Condition(0), canonical_quad(size=2))
