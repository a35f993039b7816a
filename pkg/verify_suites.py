# verify_suites.py
"""
Oracle suites behind `main.py verify <suite>`.

Every suite returns a list of CheckResult; `run_verify` prints one line per
check with the measured error against its tolerance and returns the exit
code (0 iff every check passes).
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np
from tqdm import tqdm

from camera_sampler import Camera, quad_from_camera, sample_orthogonal_quad
from csd_core import WHITE, CsdConfig, csd_gradient, csd_objective, kl_product_decomposition_check, sds_gradient
from densify import DensifyConfig, DensifyStats, densify_and_prune, should_densify
from diffusion_math import (
    AnalyticGaussianProvider,
    AnalyticJointProvider,
    AnalyticMixtureProvider,
    Condition,
    FixedTarget,
    MixtureComponent,
    NoiseSchedule,
)
from errors import CulledBehindCamera
from gauss_core import GaussianCloud, color_to_feature, opacity_to_logit
from gradcheck import GradCheckResult, check_cloud_gradients, numerical_gradient
from mesh_extract import (
    OccupancyGrid,
    build_tetgrid,
    fit_tetgrid,
    init_tetgrid_from_occupancy,
    marching_tetrahedra,
    sdf_from_occupancy,
)
from score_targets import PatternTargets, SlotArrayTargets, SlotTargets
from splat_render import EXACT_SETTINGS, RenderGradients, project_gaussian, render, render_backward
from toy_experiments import diversity_toy, janus_toy, toy_convergence


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool

    @staticmethod
    def at_most(name: str, measured: float, tolerance: float) -> "CheckResult":
        return CheckResult(name, float(measured), float(tolerance), bool(np.isfinite(measured) and measured <= tolerance))

    @staticmethod
    def from_grad(prefix: str, res: GradCheckResult) -> "CheckResult":
        return CheckResult(f"{prefix}.{res.name}", res.error, res.tolerance, res.passed)


# ---------------------------------------------------------
# Scenes
# ---------------------------------------------------------
def random_cloud(
    rng: np.random.Generator,
    count: int,
    radius: float = 0.4,
    scale_range: Sequence[float] = (0.05, 0.15),
    opacity_range: Sequence[float] = (0.3, 0.8),
) -> GaussianCloud:
    """Anisotropic, randomly rotated and coloured Gaussians inside a ball."""
    q = rng.normal(size=(count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        positions=rng.uniform(-radius, radius, size=(count, 3)),
        log_scales=np.log(rng.uniform(*scale_range, size=(count, 3))),
        rotations=q,
        features_dc=color_to_feature(rng.uniform(0.1, 0.9, size=(count, 3))),
        opacity_logits=np.array([opacity_to_logit(a) for a in rng.uniform(*opacity_range, size=count)]),
    )


def brute_force_render(cloud: GaussianCloud, cam: Camera, background: Sequence[float]) -> np.ndarray:
    """Per-pixel loop over every Gaussian in depth order; no culling, cutoff or early exit."""
    entries = []
    for i, g in enumerate(cloud):
        try:
            mean2d, cov2d, depth = project_gaussian(g, cam, EXACT_SETTINGS)
        except CulledBehindCamera:
            continue
        entries.append((depth, i, mean2d, np.linalg.inv(cov2d), g.opacity, g.color))
    entries.sort(key=lambda e: (e[0], e[1]))

    bg = np.asarray(background, dtype=np.float64)
    out = np.empty((cam.height, cam.width, 3))
    for py in range(cam.height):
        for px in range(cam.width):
            p = np.array([px + 0.5, py + 0.5])
            color = np.zeros(3)
            T = 1.0
            for _, _, mu, conic, opacity, c in entries:
                d = p - mu
                s = opacity * np.exp(-0.5 * d @ conic @ d)
                color += T * s * c
                T *= 1.0 - s
            out[py, px] = color + T * bg
    return np.clip(out, 0.0, 1.0)


def _max_relative(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| over max(|a|, |b|, floor), taken over the whole array."""
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


# ---------------------------------------------------------
# Suites
# ---------------------------------------------------------
def suite_render_oracle(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 10)
    cam = Camera(30.0, 20.0, 2.5, 50.0, 32, 32)
    background = (0.2, 0.4, 0.6)
    ours = render(cloud, cam, background, EXACT_SETTINGS).rgb
    oracle = brute_force_render(cloud, cam, background)
    return [CheckResult.at_most("max-abs-pixel", np.max(np.abs(ours - oracle)), 1e-5)]


def suite_gradient_check(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results: List[CheckResult] = []

    # Renderer: gradient of sum(G * render) for a random G
    cloud = random_cloud(rng, 5, scale_range=(0.08, 0.2))
    cam = Camera(30.0, 20.0, 2.5, 50.0, 16, 16)
    background = (0.3, 0.5, 0.7)
    grad_rgb = rng.normal(size=(16, 16, 3))
    analytic = render_backward(cloud, cam, background, grad_rgb, EXACT_SETTINGS).params()

    def render_loss(c: GaussianCloud) -> float:
        return float(np.sum(grad_rgb * render(c, cam, background, EXACT_SETTINGS).rgb))

    for res in check_cloud_gradients(cloud, render_loss, analytic, tolerance=1e-3, step=1e-5, floor=1e-6):
        results.append(CheckResult.from_grad("render", res))

    # Coupled update against the closed-form objective, noise fixed at zero
    schedule = NoiseSchedule()
    small = random_cloud(rng, 2, radius=0.2, scale_range=(0.3, 0.5))
    quad = quad_from_camera(Camera(0.0, 15.0, 2.2, 50.0, 4, 4))
    single = AnalyticGaussianProvider(PatternTargets("face", {"back": "back"}), 0.05, schedule)
    multi = AnalyticJointProvider(SlotTargets(("face", "side", "back", "side")), 0.05, 0.2, schedule)
    cfg = CsdConfig(lam=0.5, guidance=1.0, mode="no_adapter")
    t, view = 0.3, 1
    eps = np.zeros((4, 4, 4, 3))
    update = csd_gradient(small, quad, view, single, None, multi, t, eps, cfg, schedule, WHITE, EXACT_SETTINGS)

    def objective(c: GaussianCloud) -> float:
        return csd_objective(c, quad, view, single, multi, t, cfg, schedule, WHITE, EXACT_SETTINGS)

    for res in check_cloud_gradients(small, objective, update.grads.params(), tolerance=2e-3, step=1e-5, floor=1e-6):
        results.append(CheckResult.from_grad("csd-objective", res))
    return results


def _score_case(rng: np.random.Generator, kind: str, schedule: NoiseSchedule):
    """(provider, x_t, t, cond, extra args) for one random 4-pixel instance."""
    shape = (2, 2)
    t = float(rng.uniform(0.05, 0.95))
    cond = Condition(0)
    x_t = rng.normal(size=shape)

    if kind == "iso":
        return AnalyticGaussianProvider(FixedTarget(rng.normal(size=shape)), rng.uniform(0.1, 1.0), schedule), x_t, t, cond, ()
    if kind == "diag":
        return AnalyticGaussianProvider(FixedTarget(rng.normal(size=shape)), rng.uniform(0.1, 1.0, size=4), schedule), x_t, t, cond, ()
    if kind == "full":
        A = rng.normal(size=(4, 4))
        return AnalyticGaussianProvider(FixedTarget(rng.normal(size=shape)), A @ A.T + 0.1 * np.eye(4), schedule), x_t, t, cond, ()
    if kind == "mixture":
        weights = rng.dirichlet(np.ones(3))
        components = [
            MixtureComponent(float(w), FixedTarget(rng.normal(size=shape)), float(rng.uniform(0.1, 1.0)))
            for w in weights
        ]
        return AnalyticMixtureProvider(components, schedule), x_t, t, cond, ()

    # joint over a stacked quad of 2x2 views
    targets = SlotArrayTargets([rng.normal(size=shape) for _ in range(4)])
    provider = AnalyticJointProvider(targets, float(rng.uniform(0.1, 1.0)), float(rng.uniform(-0.3, 0.3)), schedule)
    quad = sample_orthogonal_quad(rng, size=2)
    return provider, rng.normal(size=(4,) + shape), t, cond, (quad,)


def suite_score_identity(seed: int = 0, trials: int = 100) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    schedule = NoiseSchedule()
    results = []
    for kind in ("iso", "diag", "full", "mixture", "joint"):
        worst = 0.0
        for _ in range(trials):
            provider, x_t, t, cond, extra = _score_case(rng, kind, schedule)
            predicted = provider.predict_noise(x_t, t, cond, *extra)
            grad = numerical_gradient(lambda x: provider.log_density(x, t, cond, *extra), x_t, step=1e-5)
            worst = max(worst, _max_relative(predicted, -schedule.sigma(t) * grad))
        results.append(CheckResult.at_most(kind, worst, 1e-5))
    return results


def suite_kl_identity(seed: int = 0, trials: int = 100) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        q = rng.dirichlet(np.ones(16)).reshape(4, 4)
        p = rng.dirichlet(np.ones(16)).reshape(4, 4)
        worst = max(worst, kl_product_decomposition_check(q, p)[2])
    return [CheckResult.at_most("decomposition-gap", worst, 1e-12)]


def suite_csd_reduction(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    schedule = NoiseSchedule()
    cloud = random_cloud(rng, 8)
    provider = AnalyticGaussianProvider(PatternTargets("face", {"back": "back", "side": "side"}), 0.05, schedule)
    cfg = CsdConfig(lam=0.0, guidance=7.5, mode="no_adapter")

    quad = sample_orthogonal_quad(rng, size=16)
    view = int(rng.integers(4))
    t = float(rng.uniform(0.02, 0.98))
    eps = rng.standard_normal((4, 16, 16, 3))

    reduced = csd_gradient(cloud, quad, view, provider, None, None, t, eps, cfg, schedule).grads
    reference = sds_gradient(cloud, quad[view], provider, t, eps[view], schedule, cfg.guidance)
    mismatched = sum(
        not np.array_equal(a, b) for a, b in zip(reduced.params().values(), reference.params().values())
    )
    return [CheckResult.at_most("bitwise-mismatched-groups", mismatched, 0)]


def suite_densify_schedule(seed: int = 0) -> List[CheckResult]:
    cfg = DensifyConfig()
    fired = [i for i in range(1, 4001) if should_densify(i, cfg)]
    expected = list(range(250, 1501, 250))
    schedule_miss = len(set(fired) ^ set(expected))

    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 64, scale_range=(0.002, 0.12), opacity_range=(0.001, 0.9))
    stats = DensifyStats.for_cloud(cloud)
    stats.accumulate(RenderGradients(
        **RenderGradients.zeros(len(cloud)).params(),
        mean2d_norm=rng.uniform(0.0, 0.03, size=len(cloud)),
        visits=np.ones(len(cloud), dtype=np.int64),
    ))
    out, _, _ = densify_and_prune(cloud, stats, cfg, rng)
    violators = int(np.sum((out.opacities < cfg.min_opacity) | (out.scales.max(axis=1) > cfg.max_scale)))
    return [
        CheckResult.at_most("schedule-mismatches", schedule_miss, 0),
        CheckResult.at_most("threshold-violators", violators, 0),
    ]


def _sphere_sdf(radius: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda p: np.linalg.norm(p, axis=-1) - radius


def suite_mesh_sphere(radius: float = 0.6) -> List[CheckResult]:
    sdf = _sphere_sdf(radius)
    tet = build_tetgrid((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), 32)
    tet.sdf = sdf(tet.vertices)
    mesh = marching_tetrahedra(tet)
    diagonal = tet.spacing * np.sqrt(3.0)
    results = [
        CheckResult.at_most("open-edges", 0 if mesh.is_watertight() else 1, 0),
        CheckResult.at_most("euler-offset", abs(mesh.euler_characteristic() - 2), 0),
        CheckResult.at_most("vertex-sdf", np.max(np.abs(sdf(mesh.vertices))), 1.5 * diagonal),
    ]

    # Coarse occupancy start, then fit the grid to the analytic field
    res = 16
    axes = -1.0 + (np.arange(res) + 0.5) * (2.0 / res)
    centers = np.stack(np.meshgrid(axes, axes, axes, indexing="ij"), axis=-1)
    occupied = sdf(centers) < 0
    grid = OccupancyGrid(occupied, occupied.astype(np.float64), np.full(3, -1.0), np.full(3, 1.0), 0.5)
    coarse = init_tetgrid_from_occupancy(grid, sdf_from_occupancy(grid), resolution=32)
    unfitted = float(np.mean(np.abs(sdf(marching_tetrahedra(coarse).vertices))))
    fitted = float(np.mean(np.abs(sdf(marching_tetrahedra(fit_tetgrid(coarse, sdf)).vertices))))
    results.append(CheckResult.at_most("fit-error-ratio", fitted / max(unfitted, 1e-12), 0.5))
    return results


def suite_toy_convergence() -> List[CheckResult]:
    report = toy_convergence()
    return [
        CheckResult("l2-drop", report.l2_drop, 0.9, report.l2_drop >= 0.9),
        CheckResult.at_most("kl-violations", report.kl_violations(), 1),
    ]


def suite_janus_toy() -> List[CheckResult]:
    report = janus_toy()
    return [CheckResult.at_most("csd-over-sds-back-l2", report.ratio, 0.5)]


def suite_diversity_toy() -> List[CheckResult]:
    report = diversity_toy()
    counts = report.counts(report.csd)
    return [
        CheckResult("csd-min-seeds-per-mode", min(counts.values()), 2, min(counts.values()) >= 2),
        CheckResult.at_most("multi-only-modes", len(set(report.multi_only)), 1),
    ]


SUITES: Dict[str, Callable[[], List[CheckResult]]] = {
    "render-oracle": suite_render_oracle,
    "gradient-check": suite_gradient_check,
    "score-identity": suite_score_identity,
    "kl-identity": suite_kl_identity,
    "csd-reduction": suite_csd_reduction,
    "densify-schedule": suite_densify_schedule,
    "mesh-sphere": suite_mesh_sphere,
    "toy-convergence": suite_toy_convergence,
    "janus-toy": suite_janus_toy,
    "diversity-toy": suite_diversity_toy,
}


def suite_names() -> List[str]:
    return list(SUITES) + ["all"]


# ---------------------------------------------------------
# Runner
# ---------------------------------------------------------
def run_suites(name: str) -> Dict[str, List[CheckResult]]:
    """Raises KeyError for an unknown suite name."""
    names = list(SUITES) if name == "all" else [name]
    for n in names:
        if n not in SUITES:
            raise KeyError(n)

    outcome: Dict[str, List[CheckResult]] = {}
    for n in tqdm(names, desc="[VERIFY] suites", disable=None if len(names) > 1 else True):
        outcome[n] = SUITES[n]()
        for check in outcome[n]:
            status = "PASS" if check.passed else "FAIL"
            tqdm.write(
                f"[VERIFY] {n} {check.name}: measured={check.measured:.3e} "
                f"tolerance={check.tolerance:.3e} {status}"
            )
    return outcome


def run_verify(name: str) -> int:
    outcome = run_suites(name)
    checks = [c for results in outcome.values() for c in results]
    failed = [c for c in checks if not c.passed]
    tqdm.write(f"[VERIFY] {len(checks) - len(failed)}/{len(checks)} checks passed")
    return 0 if not failed else 1
