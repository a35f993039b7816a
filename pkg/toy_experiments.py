# toy_experiments.py
"""
Desk-scale experiments with analytic providers.

toy_convergence   a cloud fits per-view targets rendered from a reference
                  cloud; tracks image L2 and the closed-form KL
janus_toy         every view is told "face" by the single-view provider while
                  the joint provider knows the back; CSD against SDS-only
diversity_toy     two colour modes in the single-view provider and a
                  single-mode multi-view prior between them; CSD lands in
                  both modes across seeds, the multi-view-only ablation
                  settles on the prior
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from camera_sampler import CameraQuad, CameraRanges, canonical_quad
from csd_core import WHITE, CsdConfig, Providers, RunResult, RunSinks, gaussian_kl, run_optimization
from diffusion_math import (
    AnalyticGaussianProvider,
    AnalyticJointProvider,
    AnalyticMixtureProvider,
    Condition,
    MixtureComponent,
    NoiseSchedule,
)
from gauss_core import GaussianCloud, color_to_feature, init_cloud, opacity_to_logit
from score_adapter import AdapterConfig, AdapterModel
from score_targets import PatternTargets, ReferenceCloudTargets, SlotTargets
from splat_render import render

TOY_RANGES = CameraRanges(
    azimuth=(-180.0, 180.0),
    elevation=(-10.0, 30.0),
    radius=(2.2, 2.2),
    fov_y=(50.0, 50.0),
)

BACK_VIEW = 2
GREY = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class ToySettings:
    iterations: int = 2000
    size: int = 32
    count: int = 64
    radius: float = 0.7
    covariance: float = 0.01
    rho: float = 0.2
    lam: float = 0.5
    checkpoint_every: int = 100
    kl_t: float = 0.5
    adapter_hidden: int = 64


DIVERSITY_SETTINGS = ToySettings(iterations=800, size=16, count=32, lam=0.1)


# ============================================================
# Shared plumbing
# ============================================================
def toy_config(settings: ToySettings, mode: str, seed: int, lam: Optional[float] = None) -> CsdConfig:
    return CsdConfig(
        lam=settings.lam if lam is None else lam,
        guidance=0.0,
        mode=mode,
        allow_any_lambda=True,
        total=settings.iterations,
        position_lr_steps=settings.iterations,
        resolution_schedule=((0.0, settings.size),),
        resolution_cap=settings.size,
        background=WHITE,
        seed=seed,
    )


def toy_adapter(settings: ToySettings, schedule: NoiseSchedule, seed: int) -> AdapterModel:
    cfg = AdapterConfig(resolution=settings.size, hidden=settings.adapter_hidden, seed=seed)
    return AdapterModel(cfg, schedule)


def eval_quad(settings: ToySettings) -> CameraQuad:
    return canonical_quad(elevation=15.0, radius=2.2, fov_y=50.0, size=settings.size)


def run_toy(
    cloud: GaussianCloud,
    cfg: CsdConfig,
    providers: Providers,
    checkpoint_every: int = 0,
    on_checkpoint: Optional[Callable[[int, GaussianCloud], None]] = None,
) -> RunResult:
    sinks = RunSinks(on_snapshot=on_checkpoint, snapshot_every=checkpoint_every, progress=False)
    return run_optimization(cloud, cfg, providers, densify_cfg=None, ranges=TOY_RANGES, sinks=sinks)


def view_distances(cloud: GaussianCloud, targets, quad: CameraQuad, prompt_id: int = 0) -> np.ndarray:
    """Per-view L2 (Frobenius) distance between the white-background render and its target."""
    out = []
    for cam in quad:
        rgb = render(cloud, cam, WHITE).rgb
        out.append(np.linalg.norm(rgb - targets.mean(Condition.for_camera(prompt_id, cam), rgb.shape)))
    return np.array(out)


def per_view_kl(
    cloud: GaussianCloud,
    provider: AnalyticGaussianProvider,
    quad: CameraQuad,
    t: float,
    schedule: NoiseSchedule,
    prompt_id: int = 0,
) -> float:
    """Sum over views of KL(N(alpha x0, sigma^2 I) || diffused single-view target)."""
    alpha, sigma = schedule.alpha_sigma(t)
    total = 0.0
    for cam in quad:
        x0 = render(cloud, cam, WHITE).rgb
        dist = provider.diffused_moments(t, Condition.for_camera(prompt_id, cam), x0.shape)
        total += gaussian_kl(alpha * x0, sigma ** 2, dist)
    return total


# ============================================================
# Convergence
# ============================================================
@dataclass
class ConvergenceReport:
    iterations: List[int] = field(default_factory=list)
    l2: List[float] = field(default_factory=list)
    kl: List[float] = field(default_factory=list)

    @property
    def l2_drop(self) -> float:
        return 1.0 - self.l2[-1] / self.l2[0]

    def kl_violations(self, slack: float = 0.01) -> int:
        """Checkpoint-to-checkpoint KL increases larger than `slack` times the total decrease."""
        tol = slack * max(self.kl[0] - min(self.kl), 0.0)
        return int(sum(b > a + tol for a, b in zip(self.kl, self.kl[1:])))

    def passed(self, min_drop: float = 0.9, max_violations: int = 1) -> bool:
        return self.l2_drop >= min_drop and self.kl_violations() <= max_violations


def reference_cloud(init: GaussianCloud, seed: int, opacity: float = 0.8) -> GaussianCloud:
    """Same geometry as `init`, random colours and a common higher opacity."""
    rng = np.random.default_rng(seed + 7919)
    params = {k: v.copy() for k, v in init.params().items()}
    params["features_dc"] = color_to_feature(rng.uniform(0.1, 0.9, size=(len(init), 3)))
    params["opacity_logits"] = np.full(len(init), opacity_to_logit(opacity))
    return init.with_params(params)


def toy_convergence(settings: ToySettings = ToySettings(), seed: int = 0) -> ConvergenceReport:
    schedule = NoiseSchedule()
    init = init_cloud(settings.count, settings.radius, 0.5, GREY, seed)
    targets = ReferenceCloudTargets(reference_cloud(init, seed), WHITE)
    single = AnalyticGaussianProvider(targets, settings.covariance, schedule)
    multi = AnalyticJointProvider(targets, settings.covariance, settings.rho, schedule)
    quad = eval_quad(settings)
    report = ConvergenceReport()

    def checkpoint(iteration: int, cloud: GaussianCloud) -> None:
        report.iterations.append(iteration)
        report.l2.append(float(view_distances(cloud, targets, quad).mean()))
        report.kl.append(per_view_kl(cloud, single, quad, settings.kl_t, schedule))

    checkpoint(0, init)
    cfg = toy_config(settings, "no_adapter", seed)
    run_toy(init, cfg, Providers(schedule, single, multi), settings.checkpoint_every, checkpoint)
    tqdm.write(
        f"[TOY] convergence seed={seed} l2 {report.l2[0]:.4f} -> {report.l2[-1]:.4f} "
        f"(drop {report.l2_drop:.1%}), kl violations={report.kl_violations()}"
    )
    return report


# ============================================================
# Janus
# ============================================================
@dataclass
class JanusReport:
    csd: List[float] = field(default_factory=list)
    sds: List[float] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return float(np.median(self.csd) / max(np.median(self.sds), 1e-12))

    def passed(self, max_ratio: float = 0.5) -> bool:
        return self.ratio <= max_ratio


def janus_providers(settings: ToySettings, schedule: NoiseSchedule, mode: str, seed: int) -> Providers:
    single = AnalyticGaussianProvider(PatternTargets("face"), settings.covariance, schedule)
    multi = AnalyticJointProvider(SlotTargets(("face", "side", "back", "side")), settings.covariance, settings.rho, schedule)
    adapter = toy_adapter(settings, schedule, seed) if mode == "csd" else None
    return Providers(schedule, single, multi, adapter)


def back_view_distance(cloud: GaussianCloud, settings: ToySettings) -> float:
    quad = eval_quad(settings)
    return float(view_distances(cloud, SlotTargets(("face", "side", "back", "side")), quad)[BACK_VIEW])


def janus_toy(settings: ToySettings = ToySettings(lam=1.0), seeds: Sequence[int] = range(5)) -> JanusReport:
    schedule = NoiseSchedule()
    report = JanusReport()
    for seed in tqdm(list(seeds), desc="[TOY] janus seeds", disable=None):
        for mode, sink in (("csd", report.csd), ("sds", report.sds)):
            init = init_cloud(settings.count, settings.radius, 0.5, GREY, seed)
            cfg = toy_config(settings, mode, seed)
            result = run_toy(init, cfg, janus_providers(settings, schedule, mode, seed))
            sink.append(back_view_distance(result.cloud, settings))
        tqdm.write(f"[TOY] janus seed={seed} back-view l2 csd={report.csd[-1]:.4f} sds={report.sds[-1]:.4f}")
    return report


# ============================================================
# Diversity
# ============================================================
# The two single-view modes swap into each other under R<->B; the multi-view
# colour, the grey start and the white background are invariant under it.
MODE_COLORS = {"red": (0.9, 0.2, 0.2), "blue": (0.2, 0.2, 0.9)}
MULTI_VIEW_MODE = "purple"
MULTI_VIEW_COLOR = (0.55, 0.0, 0.55)


def _disc(rgb: Sequence[float]) -> str:
    return "disc:" + ",".join(f"{c:.6f}" for c in rgb)


def swap_red_blue(values: np.ndarray) -> np.ndarray:
    return np.asarray(values)[..., [2, 1, 0]]


def mode_targets() -> Dict[str, PatternTargets]:
    colors = dict(MODE_COLORS, **{MULTI_VIEW_MODE: MULTI_VIEW_COLOR})
    return {name: PatternTargets(_disc(rgb)) for name, rgb in colors.items()}


@dataclass
class DiversityReport:
    csd: List[str] = field(default_factory=list)
    multi_only: List[str] = field(default_factory=list)

    @staticmethod
    def counts(modes: Sequence[str]) -> Dict[str, int]:
        return {name: sum(m == name for m in modes) for name in MODE_COLORS}

    def passed(self, min_per_mode: int = 2) -> bool:
        csd_ok = all(n >= min_per_mode for n in self.counts(self.csd).values())
        collapsed = len(set(self.multi_only)) <= 1
        return csd_ok and collapsed


def diversity_providers(settings: ToySettings, schedule: NoiseSchedule, mode: str, seed: int) -> Providers:
    """Two-mode single-view mixture; single-mode multi-view prior between them."""
    components = [
        MixtureComponent(0.5, PatternTargets(_disc(rgb)), settings.covariance) for rgb in MODE_COLORS.values()
    ]
    single = AnalyticMixtureProvider(components, schedule)
    multi = AnalyticJointProvider(PatternTargets(_disc(MULTI_VIEW_COLOR)), settings.covariance, settings.rho, schedule)
    adapter = toy_adapter(settings, schedule, seed) if mode == "csd" else None
    return Providers(schedule, single, multi, adapter)


def nearest_mode(cloud: GaussianCloud, settings: ToySettings) -> str:
    """Nearest disc by summed per-view L2: either single-view mode or the multi-view one."""
    quad = eval_quad(settings)
    distances = {name: float(view_distances(cloud, targets, quad).sum()) for name, targets in mode_targets().items()}
    return min(distances, key=distances.get)


def diversity_toy(settings: ToySettings = DIVERSITY_SETTINGS, seeds: Sequence[int] = range(10)) -> DiversityReport:
    """Every seed starts from the same grey cloud; only the sampling differs."""
    schedule = NoiseSchedule()
    report = DiversityReport()
    for seed in tqdm(list(seeds), desc="[TOY] diversity seeds", disable=None):
        for mode, sink in (("csd", report.csd), ("multi_only", report.multi_only)):
            init = init_cloud(settings.count, settings.radius, 0.5, GREY, seed=0)
            cfg = toy_config(settings, mode, seed)
            result = run_toy(init, cfg, diversity_providers(settings, schedule, mode, seed))
            sink.append(nearest_mode(result.cloud, settings))
        tqdm.write(f"[TOY] diversity seed={seed} csd={report.csd[-1]} multi_only={report.multi_only[-1]}")
    return report
