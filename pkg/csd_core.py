# csd_core.py
"""
Score distillation updates for a Gaussian cloud.

sds_gradient   single-view score distillation with classifier-free guidance
csd_gradient   coupled update: single-view residual against the trainable
               adapter plus a lambda-weighted joint multi-view residual
run_optimization
               the training loop: sample a quad, take one update, train the
               adapter every k iterations, densify on schedule
"""
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from camera_sampler import Camera, CameraQuad, CameraRanges, sample_orthogonal_quad
from config import CSD_DEBUG
from densify import DensifyConfig, DensifyStats, densify_and_prune, should_densify
from diffusion_math import (
    UNCONDITIONAL,
    AnalyticGaussianProvider,
    AnalyticJointProvider,
    Condition,
    MultiViewScoreProvider,
    NoiseSchedule,
    ScoreProvider,
    cfg_combine,
    forward_diffuse,
)
from errors import (
    InvalidDistribution,
    InvalidParameter,
    OptimizationAborted,
    RejectedStep,
    ShapeError,
)
from gauss_core import GaussianCloud, normalize_quaternions
from monitoring import MetricsWriter
from optim import AdamState, adam_update, adamw_state
from score_adapter import AdapterModel, adapter_train_step
from splat_render import RenderGradients, RenderSettings, render, render_backward

MODES = ("csd", "sds", "no_adapter", "multi_only")

WHITE = (1.0, 1.0, 1.0)
BLACK = (0.0, 0.0, 0.0)


# ============================================================
# Configuration
# ============================================================
@dataclass(frozen=True)
class CsdConfig:
    lam: float = 0.5
    guidance: float = 7.5
    mode: str = "csd"
    allow_any_lambda: bool = False
    prompt_id: int = 0

    total: int = 4000
    t_initial: Tuple[float, float] = (0.02, 0.98)
    t_annealed: Tuple[float, float] = (0.02, 0.50)
    switch_iteration: Optional[int] = None

    adapter_every: int = 1
    adapter_lr: float = 1e-3

    position_lr_init: float = 1e-3
    position_lr_final: float = 2e-5
    position_lr_steps: int = 1500
    feature_lr: float = 0.01
    opacity_lr: float = 0.05
    scaling_lr: float = 5e-3
    rotation_lr: float = 1e-3

    resolution_schedule: Tuple[Tuple[float, int], ...] = ((0.0, 128), (0.1, 256), (0.3, 512), (0.5, 1024))
    resolution_cap: int = 128

    background: Union[str, Tuple[float, float, float]] = "random"
    max_rejected: int = 20
    seed: int = 0

    @property
    def switch(self) -> int:
        return self.total // 2 if self.switch_iteration is None else self.switch_iteration

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InvalidParameter(f"mode must be one of {MODES}")
        if self.lam < 0:
            raise InvalidParameter("lambda must be >= 0")
        if self.mode == "csd" and not self.allow_any_lambda and not 0.1 <= self.lam <= 1.0:
            raise InvalidParameter("lambda must lie in [0.1, 1.0] outside ablation runs")
        if self.guidance < 0:
            raise InvalidParameter("guidance scale must be >= 0")
        if self.total < 0:
            raise InvalidParameter("total iterations must be >= 0")
        for name in ("t_initial", "t_annealed"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi < 1.0:
                raise InvalidParameter(f"{name} must be a range inside (0, 1)")
        if not 0 <= self.switch <= self.total:
            raise InvalidParameter("switch iteration must lie in [0, total]")
        if self.adapter_every < 1:
            raise InvalidParameter("adapter update frequency must be >= 1")
        if not self.resolution_schedule or self.resolution_schedule[0][0] != 0.0:
            raise InvalidParameter("resolution schedule must start at fraction 0")
        if self.resolution_cap < 1:
            raise InvalidParameter("resolution cap must be >= 1")
        if isinstance(self.background, str) and self.background != "random":
            raise InvalidParameter("background must be 'random' or an RGB triple")


# ============================================================
# Schedules
# ============================================================
def anneal_time_sample(rng: np.random.Generator, iteration: int, cfg: CsdConfig) -> float:
    lo, hi = cfg.t_initial if iteration < cfg.switch else cfg.t_annealed
    return float(rng.uniform(lo, hi))


def position_lr(iteration: int, cfg: CsdConfig) -> float:
    """Log-linear decay from the initial to the final rate, then constant."""
    r = min(max(iteration / max(cfg.position_lr_steps, 1), 0.0), 1.0)
    return math.exp((1.0 - r) * math.log(cfg.position_lr_init) + r * math.log(cfg.position_lr_final))


def learning_rates(iteration: int, cfg: CsdConfig) -> Dict[str, float]:
    return {
        "positions": position_lr(iteration, cfg),
        "features_dc": cfg.feature_lr,
        "opacity_logits": cfg.opacity_lr,
        "log_scales": cfg.scaling_lr,
        "rotations": cfg.rotation_lr,
    }


def resolution_at(iteration: int, cfg: CsdConfig) -> int:
    fraction = iteration / cfg.total if cfg.total > 0 else 0.0
    size = cfg.resolution_schedule[0][1]
    for start, res in cfg.resolution_schedule:
        if fraction >= start:
            size = res
    return min(size, cfg.resolution_cap)


def pick_background(rng: np.random.Generator, cfg: CsdConfig) -> Tuple[float, float, float]:
    if cfg.background == "random":
        return WHITE if rng.random() < 0.5 else BLACK
    return tuple(cfg.background)


# ============================================================
# Optimizer step on the cloud
# ============================================================
def adam_step(
    state: AdamState,
    cloud: GaussianCloud,
    grads: RenderGradients,
    lrs: Dict[str, float],
) -> GaussianCloud:
    params = adam_update(state, cloud.params(), grads.params(), lrs)
    params["rotations"] = normalize_quaternions(params["rotations"])
    return cloud.with_params(params)


def theta_adam_state() -> AdamState:
    return AdamState(betas=(0.9, 0.99), eps=1e-15)


# ============================================================
# Distillation gradients
# ============================================================
def _guided(provider: ScoreProvider, x_t: np.ndarray, t: float, cond: Condition, scale: float) -> np.ndarray:
    eps_cond = provider.predict_noise(x_t, t, cond)
    if scale == 0:
        return cfg_combine(eps_cond, eps_cond, 0.0)
    return cfg_combine(eps_cond, provider.predict_noise(x_t, t, UNCONDITIONAL), scale)


def _guided_multi(provider: MultiViewScoreProvider, x_t: np.ndarray, t: float, cond: Condition, quad: CameraQuad, scale: float) -> np.ndarray:
    eps_cond = provider.predict_noise(x_t, t, cond, quad)
    if scale == 0:
        return cfg_combine(eps_cond, eps_cond, 0.0)
    return cfg_combine(eps_cond, provider.predict_noise(x_t, t, UNCONDITIONAL, quad), scale)


def sds_gradient(
    cloud: GaussianCloud,
    cam: Camera,
    provider: ScoreProvider,
    t: float,
    eps: np.ndarray,
    schedule: NoiseSchedule,
    guidance: float,
    prompt_id: int = 0,
    background: Sequence[float] = WHITE,
    settings: RenderSettings = RenderSettings(),
) -> RenderGradients:
    x0 = render(cloud, cam, background, settings).rgb
    x_t = forward_diffuse(x0, t, eps, schedule)
    eps_hat = _guided(provider, x_t, t, Condition.for_camera(prompt_id, cam), guidance)
    residual = schedule.weight(t) * (eps_hat - eps)
    return render_backward(cloud, cam, background, residual, settings)


@dataclass
class CsdResult:
    grads: RenderGradients
    single_norm: float
    multi_norm: float
    renders: Dict[int, np.ndarray] = field(default_factory=dict)


def _uses_single(cfg: CsdConfig) -> bool:
    return cfg.mode != "multi_only"


def _uses_multi(cfg: CsdConfig) -> bool:
    return cfg.mode != "sds" and cfg.lam > 0


def csd_gradient(
    cloud: GaussianCloud,
    quad: CameraQuad,
    view: int,
    single_provider: ScoreProvider,
    adapter: Optional[ScoreProvider],
    multi_provider: Optional[MultiViewScoreProvider],
    t: float,
    eps_joint: np.ndarray,
    cfg: CsdConfig,
    schedule: NoiseSchedule,
    background: Sequence[float] = WHITE,
    settings: RenderSettings = RenderSettings(),
    n_jobs: int = 1,
) -> CsdResult:
    """
    omega(t) * [(guided single prediction - adapter prediction) on view `view`
                + lam * (joint prediction - eps) on all four views],
    back-propagated through the renderer. In `no_adapter` and `sds` modes the
    adapter prediction is replaced by the injected noise of view `view`.
    """
    cam0 = quad[0]
    expected = (4, cam0.height, cam0.width, 3)
    eps_joint = np.asarray(eps_joint, dtype=np.float64)
    if eps_joint.shape != expected:
        raise ShapeError(f"joint noise has shape {eps_joint.shape}, expected {expected}")
    if not 0 <= view < 4:
        raise InvalidParameter("view index must be in 0..3")
    use_single, use_multi = _uses_single(cfg), _uses_multi(cfg)
    if use_multi and multi_provider is None:
        raise InvalidParameter("the multi-view term needs a multi-view provider")
    if use_single and cfg.mode == "csd" and adapter is None:
        raise InvalidParameter("csd mode needs an adapter")

    views = list(range(4)) if use_multi else [view]
    rendered = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(render)(cloud, quad[k], background, settings) for k in views
    )
    renders = {k: img.rgb for k, img in zip(views, rendered)}
    weight = schedule.weight(t)

    total = RenderGradients.zeros(len(cloud))
    single_norm = multi_norm = 0.0

    if use_single:
        cam = quad[view]
        cond = Condition.for_camera(cfg.prompt_id, cam)
        x_t = forward_diffuse(renders[view], t, eps_joint[view], schedule)
        eps_hat = _guided(single_provider, x_t, t, cond, cfg.guidance)
        baseline = adapter.predict_noise(x_t, t, cond) if cfg.mode == "csd" else eps_joint[view]
        residual = weight * (eps_hat - baseline)
        single_norm = float(np.linalg.norm(residual))
        total = render_backward(cloud, cam, background, residual, settings)

    if use_multi:
        x0 = np.stack([renders[k] for k in range(4)])
        x_t = forward_diffuse(x0, t, eps_joint, schedule)
        eps_m = _guided_multi(multi_provider, x_t, t, Condition(cfg.prompt_id), quad, cfg.guidance)
        residual = cfg.lam * weight * (eps_m - eps_joint)
        multi_norm = float(np.linalg.norm(residual))
        passes = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(render_backward)(cloud, quad[k], background, residual[k], settings) for k in range(4)
        )
        for g in passes:
            total = total + g

    return CsdResult(total, single_norm, multi_norm, renders)


# ============================================================
# Closed-form objectives for analytic providers
# ============================================================
def gaussian_kl(mu0: np.ndarray, var0: float, target) -> float:
    """KL(N(mu0, var0 I) || target) for a diffused Gaussian target."""
    mu0 = np.asarray(mu0, dtype=np.float64).reshape(-1)
    d = target.mean - mu0
    dim = mu0.size
    return 0.5 * (
        var0 * target.trace_inverse()
        + float(d @ target.solve(d))
        - dim
        + target.logdet()
        - dim * math.log(var0)
    )


def csd_objective(
    cloud: GaussianCloud,
    quad: CameraQuad,
    view: int,
    single_provider: AnalyticGaussianProvider,
    multi_provider: Optional[AnalyticJointProvider],
    t: float,
    cfg: CsdConfig,
    schedule: NoiseSchedule,
    background: Sequence[float] = WHITE,
    settings: RenderSettings = RenderSettings(),
) -> float:
    """
    Scalar whose gradient equals the expected no-adapter update:
    omega(t) * sigma/alpha * [guided KL on view `view` + lam * guided joint KL],
    each KL between the diffused render N(alpha x0, sigma^2 I) and the
    provider's diffused distribution.
    """
    if not isinstance(single_provider, AnalyticGaussianProvider):
        raise InvalidParameter("closed-form objective needs an analytic Gaussian single-view provider")
    alpha, sigma = schedule.alpha_sigma(t)
    s = cfg.guidance
    value = 0.0

    if _uses_single(cfg):
        cam = quad[view]
        x0 = render(cloud, cam, background, settings).rgb
        cond = Condition.for_camera(cfg.prompt_id, cam)
        kl_c = gaussian_kl(alpha * x0, sigma ** 2, single_provider.diffused_moments(t, cond, x0.shape))
        kl_u = gaussian_kl(alpha * x0, sigma ** 2, single_provider.diffused_moments(t, UNCONDITIONAL, x0.shape)) if s else 0.0
        value += (1.0 + s) * kl_c - s * kl_u

    if _uses_multi(cfg):
        if not isinstance(multi_provider, AnalyticJointProvider):
            raise InvalidParameter("closed-form objective needs an analytic joint provider")
        x0 = np.stack([render(cloud, cam, background, settings).rgb for cam in quad])
        shape = x0.shape[1:]
        kl_c = gaussian_kl(alpha * x0, sigma ** 2, multi_provider.diffused_moments(t, Condition(cfg.prompt_id), quad, shape))
        kl_u = gaussian_kl(alpha * x0, sigma ** 2, multi_provider.diffused_moments(t, UNCONDITIONAL, quad, shape)) if s else 0.0
        value += cfg.lam * ((1.0 + s) * kl_c - s * kl_u)

    return schedule.weight(t) * sigma / alpha * value


def kl_product_decomposition_check(q_joint: np.ndarray, p_joint: np.ndarray) -> Tuple[float, float, float]:
    """
    KL(q(a,b) || p(a,b)) against KL(q(a) || p(a)) + E_q(a)[KL(q(b|a) || p(b|a))]
    on finite joints indexed [a, b].
    """
    q = np.asarray(q_joint, dtype=np.float64)
    p = np.asarray(p_joint, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 2:
        raise InvalidDistribution("joints must be 2-D arrays of the same shape")
    for name, dist in (("q", q), ("p", p)):
        if np.any(dist <= 0):
            raise InvalidDistribution(f"{name} has a cell with zero mass")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise InvalidDistribution(f"{name} does not sum to 1")

    lhs = float(np.sum(q * np.log(q / p)))
    qa, pa = q.sum(axis=1), p.sum(axis=1)
    q_cond, p_cond = q / qa[:, None], p / pa[:, None]
    marginal = float(np.sum(qa * np.log(qa / pa)))
    conditional = float(np.sum(qa * np.sum(q_cond * np.log(q_cond / p_cond), axis=1)))
    rhs = marginal + conditional
    return lhs, rhs, abs(lhs - rhs)


# ============================================================
# Training loop
# ============================================================
@dataclass
class Providers:
    schedule: NoiseSchedule
    single: ScoreProvider
    multi: Optional[MultiViewScoreProvider] = None
    adapter: Optional[AdapterModel] = None


@dataclass
class RunSinks:
    metrics: Optional[MetricsWriter] = None
    on_checkpoint: Optional[Callable[[int, GaussianCloud, Optional[AdapterModel]], None]] = None
    on_snapshot: Optional[Callable[[int, GaussianCloud], None]] = None
    checkpoint_every: int = 0
    snapshot_every: int = 0
    progress: bool = True


@dataclass
class RunResult:
    cloud: GaussianCloud
    iterations: int
    rejected: int
    records: List[dict] = field(default_factory=list)


def _due(iteration: int, every: int) -> bool:
    return every > 0 and (iteration + 1) % every == 0


def run_optimization(
    cloud: GaussianCloud,
    cfg: CsdConfig,
    providers: Providers,
    densify_cfg: Optional[DensifyConfig] = DensifyConfig(),
    ranges: CameraRanges = CameraRanges(),
    sinks: RunSinks = RunSinks(),
    settings: RenderSettings = RenderSettings(),
    n_jobs: int = 1,
) -> RunResult:
    cfg.validate()
    ranges.validate()
    if densify_cfg is not None:
        densify_cfg.validate()

    rng = np.random.default_rng(cfg.seed)
    state = theta_adam_state()
    adapter_state = adamw_state()
    stats = DensifyStats.for_cloud(cloud)
    schedule = providers.schedule
    train_adapter = cfg.mode == "csd" and providers.adapter is not None
    rejected = 0
    records: List[dict] = []

    def reject(iteration: int, what: str, ex: Exception) -> None:
        nonlocal rejected
        rejected += 1
        tqdm.write(f"[CSD] iter={iteration} rejected {what}: {ex}")
        if sinks.metrics:
            sinks.metrics.event(iteration, "rejected", {"what": what})
        if rejected > cfg.max_rejected:
            raise OptimizationAborted(f"{rejected} rejected steps exceed the budget of {cfg.max_rejected}") from ex

    for it in tqdm(range(cfg.total), desc="[CSD] optimize", disable=not sinks.progress):
        start = time.time()
        res = resolution_at(it, cfg)
        quad = sample_orthogonal_quad(rng, ranges, size=res)
        view = int(rng.integers(4))
        t = anneal_time_sample(rng, it, cfg)
        eps = rng.standard_normal((4, res, res, 3))
        background = pick_background(rng, cfg)

        result = csd_gradient(
            cloud, quad, view, providers.single, providers.adapter, providers.multi,
            t, eps, cfg, schedule, background, settings, n_jobs,
        )
        try:
            cloud = adam_step(state, cloud, result.grads, learning_rates(it, cfg))
            stats.accumulate(result.grads)
        except RejectedStep as ex:
            reject(it, "cloud step", ex)

        adapter_loss = None
        if train_adapter and it % cfg.adapter_every == 0:
            t_adapter = anneal_time_sample(rng, it, cfg)
            eps_adapter = rng.standard_normal((res, res, 3))
            x0 = result.renders.get(view)
            cond = Condition.for_camera(cfg.prompt_id, quad[view])
            try:
                adapter_loss = adapter_train_step(
                    providers.adapter, adapter_state, x0, t_adapter, eps_adapter, cond, cfg.adapter_lr
                )
            except RejectedStep as ex:
                reject(it, "adapter step", ex)

        record = {
            "iter": it,
            "t": t,
            "view": view,
            "resolution": res,
            "single_norm": result.single_norm,
            "multi_norm": result.multi_norm,
            "adapter_loss": adapter_loss,
            "gaussians": len(cloud),
        }
        records.append(record)
        if sinks.metrics:
            sinks.metrics.write(record)
        if CSD_DEBUG:
            tqdm.write(f"[CSD] {record}")

        if densify_cfg is not None and should_densify(it + 1, densify_cfg):
            cloud, report, parent = densify_and_prune(cloud, stats, densify_cfg, rng)
            state.remap(parent)
            stats = DensifyStats.for_cloud(cloud)
            tqdm.write(f"[DENSIFY] iter={it + 1} {report.as_dict()}")
            if sinks.metrics:
                sinks.metrics.event(it, "densify", report.as_dict())

        if sinks.on_checkpoint and _due(it, sinks.checkpoint_every):
            sinks.on_checkpoint(it + 1, cloud, providers.adapter)
        if sinks.on_snapshot and _due(it, sinks.snapshot_every):
            sinks.on_snapshot(it + 1, cloud)
        if sinks.metrics:
            sinks.metrics.timing(it, (time.time() - start) * 1000.0)

    return RunResult(cloud, cfg.total, rejected, records)
