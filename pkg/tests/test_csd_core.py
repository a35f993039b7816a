import numpy as np
import pytest

from camera_sampler import Camera, CameraRanges, quad_from_camera
from csd_core import (
    WHITE,
    CsdConfig,
    Providers,
    RunSinks,
    anneal_time_sample,
    csd_gradient,
    csd_objective,
    gaussian_kl,
    kl_product_decomposition_check,
    pick_background,
    position_lr,
    resolution_at,
    run_optimization,
    sds_gradient,
)
from diffusion_math import AnalyticGaussianProvider, AnalyticJointProvider, Condition, DiffusedGaussian, forward_diffuse
from errors import InvalidDistribution, InvalidParameter, ShapeError
from gauss_core import init_cloud
from gradcheck import check_cloud_gradients
from monitoring import MetricsWriter
from score_adapter import AdapterConfig, AdapterModel
from score_targets import PatternTargets, SlotTargets
from splat_render import EXACT_SETTINGS
from verify_suites import random_cloud, suite_csd_reduction

FIXED_RANGES = CameraRanges(elevation=(0.0, 20.0), radius=(2.2, 2.2), fov_y=(50.0, 50.0))


@pytest.fixture
def providers(schedule):
    single = AnalyticGaussianProvider(PatternTargets("face", {"back": "back"}), 0.05, schedule)
    multi = AnalyticJointProvider(SlotTargets(("face", "side", "back", "side")), 0.05, 0.2, schedule)
    return single, multi


def small_config(**kwargs):
    args = dict(total=4, resolution_schedule=((0.0, 8),), resolution_cap=8, position_lr_steps=4, seed=11)
    args.update(kwargs)
    return CsdConfig(**args)


# ---------------------------------------------------------
# Config and schedules
# ---------------------------------------------------------
def test_lambda_range_outside_ablations():
    with pytest.raises(InvalidParameter):
        CsdConfig(lam=2.0).validate()
    CsdConfig(lam=2.0, allow_any_lambda=True).validate()
    CsdConfig(lam=0.0, mode="no_adapter").validate()
    with pytest.raises(InvalidParameter):
        CsdConfig(mode="joint").validate()
    with pytest.raises(InvalidParameter):
        CsdConfig(t_annealed=(0.5, 0.2)).validate()


def test_time_annealing_switches_at_half(rng):
    cfg = CsdConfig(total=100)
    assert cfg.switch == 50
    late = [anneal_time_sample(rng, 60, cfg) for _ in range(200)]
    assert max(late) <= 0.5
    early = [anneal_time_sample(rng, 10, cfg) for _ in range(200)]
    assert max(early) > 0.5


def test_position_lr_decays_log_linearly():
    cfg = CsdConfig()
    assert position_lr(0, cfg) == pytest.approx(1e-3)
    assert position_lr(cfg.position_lr_steps, cfg) == pytest.approx(2e-5)
    assert position_lr(10 * cfg.position_lr_steps, cfg) == pytest.approx(2e-5)
    assert position_lr(cfg.position_lr_steps // 2, cfg) == pytest.approx(np.sqrt(1e-3 * 2e-5))


def test_resolution_schedule_and_cap():
    cfg = CsdConfig(total=100, resolution_cap=1024)
    assert [resolution_at(i, cfg) for i in (0, 9, 10, 30, 50, 99)] == [128, 128, 256, 512, 1024, 1024]
    assert resolution_at(99, CsdConfig(total=100)) == 128


def test_background_choice(rng):
    seen = {pick_background(rng, CsdConfig()) for _ in range(50)}
    assert seen == {(1.0, 1.0, 1.0), (0.0, 0.0, 0.0)}
    assert pick_background(rng, CsdConfig(background=(0.2, 0.2, 0.2))) == (0.2, 0.2, 0.2)


# ---------------------------------------------------------
# Gradients
# ---------------------------------------------------------
def test_zero_lambda_no_adapter_reduces_to_sds_bitwise():
    assert all(check.passed for check in suite_csd_reduction(seed=4))


def test_sds_mode_ignores_the_multi_view_term(schedule, providers, rng):
    single, multi = providers
    cloud = random_cloud(rng, 4)
    quad = quad_from_camera(Camera(20.0, 10.0, 2.2, 50.0, 8, 8))
    eps = rng.standard_normal((4, 8, 8, 3))
    res = csd_gradient(cloud, quad, 2, single, None, multi, 0.4, eps, CsdConfig(mode="sds", guidance=3.0), schedule)
    ref = sds_gradient(cloud, quad[2], single, 0.4, eps[2], schedule, 3.0)
    for a, b in zip(res.grads.params().values(), ref.params().values()):
        np.testing.assert_array_equal(a, b)
    assert res.multi_norm == 0.0
    assert list(res.renders) == [2]


def test_multi_only_has_no_single_view_term(schedule, providers, rng):
    single, multi = providers
    cloud = random_cloud(rng, 4)
    quad = quad_from_camera(Camera(20.0, 10.0, 2.2, 50.0, 8, 8))
    eps = rng.standard_normal((4, 8, 8, 3))
    res = csd_gradient(cloud, quad, 0, single, None, multi, 0.4, eps, CsdConfig(mode="multi_only"), schedule)
    assert res.single_norm == 0.0
    assert res.multi_norm > 0.0
    assert sorted(res.renders) == [0, 1, 2, 3]


def test_threaded_renders_match_serial(schedule, providers, rng):
    single, multi = providers
    cloud = random_cloud(rng, 6)
    quad = quad_from_camera(Camera(-30.0, 5.0, 2.2, 50.0, 8, 8))
    eps = rng.standard_normal((4, 8, 8, 3))
    cfg = CsdConfig(mode="no_adapter")
    serial = csd_gradient(cloud, quad, 1, single, None, multi, 0.3, eps, cfg, schedule, n_jobs=1)
    threaded = csd_gradient(cloud, quad, 1, single, None, multi, 0.3, eps, cfg, schedule, n_jobs=4)
    for a, b in zip(serial.grads.params().values(), threaded.grads.params().values()):
        np.testing.assert_array_equal(a, b)


def test_gradient_argument_checks(schedule, providers, rng):
    single, multi = providers
    cloud = random_cloud(rng, 2)
    quad = quad_from_camera(Camera(0.0, 0.0, 2.2, 50.0, 4, 4))
    eps = np.zeros((4, 4, 4, 3))
    with pytest.raises(InvalidParameter):
        csd_gradient(cloud, quad, 0, single, None, multi, 0.5, eps, CsdConfig(mode="csd"), schedule)
    with pytest.raises(InvalidParameter):
        csd_gradient(cloud, quad, 0, single, None, None, 0.5, eps, CsdConfig(mode="no_adapter"), schedule)
    with pytest.raises(InvalidParameter):
        csd_gradient(cloud, quad, 4, single, None, multi, 0.5, eps, CsdConfig(mode="no_adapter"), schedule)
    with pytest.raises(ShapeError):
        csd_gradient(cloud, quad, 0, single, None, multi, 0.5, eps[:, :2], CsdConfig(mode="no_adapter"), schedule)


def test_fresh_adapter_leaves_the_guided_prediction(schedule, providers, rng):
    # a zero-output adapter turns the single-view residual into weight * eps_hat
    single, multi = providers
    cloud = random_cloud(rng, 3)
    quad = quad_from_camera(Camera(0.0, 10.0, 2.2, 50.0, 8, 8))
    eps = rng.standard_normal((4, 8, 8, 3))
    adapter = AdapterModel(AdapterConfig(resolution=8, hidden=8), schedule)
    t = 0.5
    res = csd_gradient(cloud, quad, 0, single, adapter, multi, t, eps, CsdConfig(lam=0.1, guidance=0.0), schedule)
    x_t = forward_diffuse(res.renders[0], t, eps[0], schedule)
    eps_hat = single.predict_noise(x_t, t, Condition.for_camera(0, quad[0]))
    assert res.single_norm == pytest.approx(schedule.weight(t) * np.linalg.norm(eps_hat))


def test_objective_gradient_matches_the_update_at_zero_noise(schedule, providers):
    single, multi = providers
    cloud = random_cloud(np.random.default_rng(2), 2, radius=0.2, scale_range=(0.3, 0.5))
    quad = quad_from_camera(Camera(0.0, 15.0, 2.2, 50.0, 4, 4))
    cfg = CsdConfig(lam=0.5, guidance=1.0, mode="no_adapter")
    t, view = 0.3, 1
    update = csd_gradient(cloud, quad, view, single, None, multi, t, np.zeros((4, 4, 4, 3)), cfg, schedule, WHITE, EXACT_SETTINGS)

    def objective(c):
        return csd_objective(c, quad, view, single, multi, t, cfg, schedule, WHITE, EXACT_SETTINGS)

    for res in check_cloud_gradients(cloud, objective, update.grads.params(), tolerance=2e-3, step=1e-5):
        assert res.passed, f"{res.name}: {res.error:.3e}"


# ---------------------------------------------------------
# Closed forms
# ---------------------------------------------------------
def test_gaussian_kl_is_zero_against_itself(rng):
    mu = rng.normal(size=12)
    assert gaussian_kl(mu, 0.3, DiffusedGaussian(mu, 0.3)) == pytest.approx(0.0, abs=1e-12)
    assert gaussian_kl(mu, 0.3, DiffusedGaussian(mu + 1.0, 0.3)) == pytest.approx(0.5 * 12 / 0.3)


def test_kl_decomposition(rng):
    q = rng.dirichlet(np.ones(12)).reshape(3, 4)
    p = rng.dirichlet(np.ones(12)).reshape(3, 4)
    lhs, rhs, gap = kl_product_decomposition_check(q, p)
    assert lhs > 0
    assert gap <= 1e-12
    assert lhs == pytest.approx(rhs)


def test_kl_decomposition_rejects_bad_joints():
    p = np.full((2, 2), 0.25)
    with pytest.raises(InvalidDistribution):
        kl_product_decomposition_check(np.array([[0.5, 0.5], [0.0, 0.0]]), p)
    with pytest.raises(InvalidDistribution):
        kl_product_decomposition_check(np.full((2, 2), 0.3), p)
    with pytest.raises(InvalidDistribution):
        kl_product_decomposition_check(np.full(4, 0.25), p)


# ---------------------------------------------------------
# Training loop
# ---------------------------------------------------------
def run_small(schedule, providers, tmp_path=None, **kwargs):
    single, multi = providers
    cloud = init_cloud(20, 0.4, 0.3, (0.5, 0.5, 0.5), seed=0)
    adapter = AdapterModel(AdapterConfig(resolution=8, hidden=8), schedule)
    snapshots = []
    sinks = RunSinks(on_snapshot=lambda it, c: snapshots.append(it), snapshot_every=2, progress=False)
    if tmp_path is not None:
        sinks.metrics = MetricsWriter(str(tmp_path))
    result = run_optimization(
        cloud, small_config(**kwargs), Providers(schedule, single, multi, adapter),
        densify_cfg=None, ranges=FIXED_RANGES, sinks=sinks,
    )
    if sinks.metrics:
        sinks.metrics.close()
    return result, snapshots


def test_run_records_and_callbacks(schedule, providers, tmp_path):
    result, snapshots = run_small(schedule, providers, tmp_path)
    assert result.iterations == 4
    assert result.rejected == 0
    assert snapshots == [2, 4]
    assert [r["iter"] for r in result.records] == [0, 1, 2, 3]
    assert all(r["adapter_loss"] is not None for r in result.records)
    assert all(r["resolution"] == 8 for r in result.records)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4
    assert len((tmp_path / "timings.jsonl").read_text().splitlines()) == 4


def test_run_is_deterministic(schedule, providers):
    a, _ = run_small(schedule, providers)
    b, _ = run_small(schedule, providers)
    assert a.cloud.equals(b.cloud)
    assert a.records == b.records


def test_run_moves_the_cloud(schedule, providers):
    result, _ = run_small(schedule, providers, mode="no_adapter")
    start = init_cloud(20, 0.4, 0.3, (0.5, 0.5, 0.5), seed=0)
    assert not result.cloud.equals(start)
    assert all(r["adapter_loss"] is None for r in result.records)
    np.testing.assert_allclose(np.linalg.norm(result.cloud.rotations, axis=1), 1.0)


def test_zero_iterations_return_the_initial_cloud(schedule, providers, tmp_path):
    result, snapshots = run_small(schedule, providers, tmp_path, total=0)
    assert result.iterations == 0
    assert result.records == []
    assert snapshots == []
    assert result.cloud.equals(init_cloud(20, 0.4, 0.3, (0.5, 0.5, 0.5), seed=0))
    assert (tmp_path / "metrics.jsonl").read_text() == ""
