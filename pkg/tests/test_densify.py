import numpy as np
import pytest

from densify import DensifyConfig, DensifyStats, densify_and_prune, should_densify
from errors import GenerationMismatch, InvalidParameter, ShapeError
from gauss_core import GaussianCloud, color_to_feature, opacity_to_logit
from optim import AdamState
from splat_render import RenderGradients
from verify_suites import suite_densify_schedule


def make_cloud(scales, opacities):
    n = len(scales)
    return GaussianCloud(
        positions=np.arange(3 * n, dtype=np.float64).reshape(n, 3) * 0.1,
        log_scales=np.log(np.tile(np.asarray(scales, dtype=np.float64)[:, None], (1, 3))),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        features_dc=color_to_feature(np.full((n, 3), 0.5)),
        opacity_logits=np.array([opacity_to_logit(a) for a in opacities]),
    )


def stats_with(cloud, grad_norms):
    stats = DensifyStats.for_cloud(cloud)
    n = len(cloud)
    stats.accumulate(RenderGradients(
        **RenderGradients.zeros(n).params(),
        mean2d_norm=np.asarray(grad_norms, dtype=np.float64),
        visits=np.ones(n, dtype=np.int64),
    ))
    return stats


def test_schedule():
    cfg = DensifyConfig()
    assert [i for i in range(0, 3001) if should_densify(i, cfg)] == [250, 500, 750, 1000, 1250, 1500]


def test_verify_suite_passes():
    assert all(check.passed for check in suite_densify_schedule(seed=2))


def test_clone_split_and_prune(rng):
    #            clone   split   keep    prune (transparent)  prune (too big)
    cloud = make_cloud([0.005, 0.03, 0.005, 0.005, 0.2], [0.5, 0.5, 0.5, 0.001, 0.5])
    stats = stats_with(cloud, [0.02, 0.02, 0.0, 0.0, 0.0])
    out, report, parent = densify_and_prune(cloud, stats, DensifyConfig(), rng)

    assert (report.cloned, report.split, report.pruned) == (1, 1, 2)
    assert report.before == 5 and report.after == len(out) == 5
    assert out.generation == cloud.generation + 1
    # kept rows first, then clones, then split children
    np.testing.assert_array_equal(parent, [0, 2, 0, 1, 1])
    np.testing.assert_allclose(out.scales[-2:], 0.03 / 1.6)
    np.testing.assert_allclose(out.scales[:3], 0.005)
    assert np.all(out.opacities >= 0.01)


def test_mean_statistic_uses_visits():
    cloud = make_cloud([0.005, 0.005], [0.5, 0.5])
    stats = DensifyStats.for_cloud(cloud)
    for _ in range(4):
        stats.accumulate(RenderGradients(
            **RenderGradients.zeros(2).params(),
            mean2d_norm=np.array([0.04, 0.04]),
            visits=np.array([1, 0]),
        ))
    np.testing.assert_allclose(stats.mean(), [0.04, 0.0])


def test_parent_index_remaps_optimizer_moments(rng):
    cloud = make_cloud([0.005, 0.03, 0.005], [0.5, 0.5, 0.5])
    state = AdamState()
    state.ensure(cloud.params())
    state.m["positions"][:] = np.arange(3)[:, None]
    out, _, parent = densify_and_prune(cloud, stats_with(cloud, [0.02, 0.02, 0.0]), DensifyConfig(), rng)
    state.remap(parent)
    assert state.m["positions"].shape == (len(out), 3)
    np.testing.assert_array_equal(state.m["positions"][:, 0], parent)


def test_stale_statistics_are_refused(rng):
    cloud = make_cloud([0.005, 0.005], [0.5, 0.5])
    stats = DensifyStats.for_cloud(cloud)
    out, _, _ = densify_and_prune(cloud, stats, DensifyConfig(), rng)
    with pytest.raises(GenerationMismatch):
        densify_and_prune(out, stats, DensifyConfig(), rng)
    with pytest.raises(ShapeError):
        stats.accumulate(RenderGradients.zeros(3))


def test_config_validation():
    with pytest.raises(InvalidParameter):
        DensifyConfig(interval=0).validate()
    with pytest.raises(InvalidParameter):
        DensifyConfig(split_factor=1.0).validate()
