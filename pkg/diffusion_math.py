# diffusion_math.py
"""
Noise schedules, forward diffusion, classifier-free guidance, and the
analytic score providers whose exact scores serve as oracles.

All providers work on flattened float64 images in row-major order.
"""
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from camera_sampler import Camera, CameraQuad, view_bucket
from errors import (
    InvalidCondition,
    InvalidParameter,
    ShapeError,
    SingularCovariance,
)

LOG_2PI = math.log(2.0 * math.pi)


# ============================================================
# 1. Noise schedule
# ============================================================
def _linear_alphas_cumprod(steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return np.cumprod(1.0 - betas)


def _cosine_alphas_cumprod(steps: int, offset: float = 0.008) -> np.ndarray:
    def f(u):
        return np.cos((u + offset) / (1.0 + offset) * math.pi / 2.0) ** 2

    grid = np.arange(steps + 1, dtype=np.float64) / steps
    betas = np.minimum(1.0 - f(grid[1:]) / f(grid[:-1]), 0.999)
    return np.cumprod(1.0 - betas)


class NoiseSchedule:
    """
    Variance-preserving schedule over a discrete table of N steps.
    Continuous t in (0, 1) maps to step floor(t * (N - 1)).
    """

    def __init__(
        self,
        kind: str = "linear",
        steps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        weighting: Union[str, Callable[[float], float]] = "sigma2",
    ):
        if steps < 2:
            raise InvalidParameter("schedule needs at least 2 steps")
        if kind == "linear":
            if not 0 < beta_start < beta_end < 1:
                raise InvalidParameter("need 0 < beta_start < beta_end < 1")
            self.alphas_cumprod = _linear_alphas_cumprod(steps, beta_start, beta_end)
        elif kind == "cosine":
            self.alphas_cumprod = _cosine_alphas_cumprod(steps)
        else:
            raise InvalidParameter(f"unknown schedule kind {kind!r}")
        if not (callable(weighting) or weighting in ("sigma2", "constant")):
            raise InvalidParameter(f"unknown weighting {weighting!r}")

        self.kind = kind
        self.steps = steps
        self.weighting = weighting
        self.alphas = np.sqrt(self.alphas_cumprod)
        self.sigmas = np.sqrt(1.0 - self.alphas_cumprod)

    def index(self, t: float) -> int:
        if not 0.0 < t < 1.0:
            raise InvalidParameter(f"t={t} must lie in (0, 1)")
        return int(math.floor(t * (self.steps - 1)))

    def alpha(self, t: float) -> float:
        return float(self.alphas[self.index(t)])

    def sigma(self, t: float) -> float:
        return float(self.sigmas[self.index(t)])

    def alpha_sigma(self, t: float) -> Tuple[float, float]:
        i = self.index(t)
        return float(self.alphas[i]), float(self.sigmas[i])

    def weight(self, t: float) -> float:
        if callable(self.weighting):
            return float(self.weighting(t))
        if self.weighting == "constant":
            self.index(t)
            return 1.0
        return self.sigma(t) ** 2


# ============================================================
# 2. Elementwise operations
# ============================================================
def _require_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def forward_diffuse(x0: np.ndarray, t: float, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    _require_same_shape(x0, eps, "forward_diffuse")
    alpha, sigma = schedule.alpha_sigma(t)
    return alpha * np.asarray(x0, dtype=np.float64) + sigma * np.asarray(eps, dtype=np.float64)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    _require_same_shape(eps_cond, eps_uncond, "cfg_combine")
    if scale < 0:
        raise InvalidParameter("guidance scale must be >= 0")
    if scale == 0:
        return np.asarray(eps_cond, dtype=np.float64)
    return (1.0 + scale) * np.asarray(eps_cond) - scale * np.asarray(eps_uncond)


def v_to_eps(v_pred: np.ndarray, x_t: np.ndarray, t: float, schedule: NoiseSchedule) -> np.ndarray:
    _require_same_shape(v_pred, x_t, "v_to_eps")
    alpha, sigma = schedule.alpha_sigma(t)
    return alpha * np.asarray(v_pred) + sigma * np.asarray(x_t)


def eps_to_v(eps: np.ndarray, x_t: np.ndarray, t: float, schedule: NoiseSchedule) -> np.ndarray:
    _require_same_shape(eps, x_t, "eps_to_v")
    alpha, sigma = schedule.alpha_sigma(t)
    return (np.asarray(eps) - sigma * np.asarray(x_t)) / alpha


def velocity_target(x0: np.ndarray, eps: np.ndarray, t: float, schedule: NoiseSchedule) -> np.ndarray:
    _require_same_shape(x0, eps, "velocity_target")
    alpha, sigma = schedule.alpha_sigma(t)
    return alpha * np.asarray(eps) - sigma * np.asarray(x0)


# ============================================================
# 3. Conditions and the provider contract
# ============================================================
@dataclass(frozen=True)
class Condition:
    prompt_id: Optional[int]
    view_bucket: Optional[str] = None
    camera: Optional[Camera] = None

    def __post_init__(self):
        if self.prompt_id is None and (self.view_bucket is not None or self.camera is not None):
            raise InvalidCondition("the unconditional condition carries no view or camera")

    @property
    def is_unconditional(self) -> bool:
        return self.prompt_id is None

    @staticmethod
    def for_camera(prompt_id: int, cam: Camera) -> "Condition":
        return Condition(prompt_id, view_bucket(cam), cam)


UNCONDITIONAL = Condition(None)


class ScoreProvider(Protocol):
    def predict_noise(self, x_t: np.ndarray, t: float, cond: Condition) -> np.ndarray:
        ...


class MultiViewScoreProvider(Protocol):
    def predict_noise(self, x_t: np.ndarray, t: float, cond: Condition, quad: CameraQuad) -> np.ndarray:
        ...


class TargetSet(Protocol):
    """Maps a condition to the mean image a provider is centred on."""

    def mean(self, cond: Condition, shape: Tuple[int, ...]) -> np.ndarray:
        ...

    def unconditional(self, shape: Tuple[int, ...]) -> np.ndarray:
        ...


class FixedTarget:
    """The same mean image for every condition."""

    def __init__(self, image: np.ndarray):
        self.image = np.asarray(image, dtype=np.float64)

    def mean(self, cond: Condition, shape: Tuple[int, ...]) -> np.ndarray:
        if self.image.shape != tuple(shape):
            raise ShapeError(f"fixed target has shape {self.image.shape}, requested {tuple(shape)}")
        return self.image

    def unconditional(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self.mean(UNCONDITIONAL, shape)


def _as_targets(targets) -> TargetSet:
    if isinstance(targets, np.ndarray):
        return FixedTarget(targets)
    return targets


def _mean_for(targets: TargetSet, cond: Condition, shape: Tuple[int, ...]) -> np.ndarray:
    m = targets.unconditional(shape) if cond.is_unconditional else targets.mean(cond, shape)
    return np.asarray(m, dtype=np.float64).reshape(-1)


# ============================================================
# 4. Diffused Gaussian densities
# ============================================================
class DiffusedGaussian:
    """
    N(alpha * m, alpha^2 * Gamma + sigma^2 * I) over flattened images, where
    Gamma is a scalar (isotropic), a vector (diagonal) or a full matrix.
    """

    def __init__(self, mean: np.ndarray, cov: Union[float, np.ndarray]):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.dim = self.mean.size
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            self.kind = "iso"
        elif cov.ndim == 1 and cov.shape == (self.dim,):
            self.kind = "diag"
        elif cov.ndim == 2 and cov.shape == (self.dim, self.dim):
            self.kind = "full"
        else:
            raise ShapeError(f"covariance shape {cov.shape} does not fit dimension {self.dim}")
        self.cov = cov

        if self.kind == "full":
            try:
                self._chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as ex:
                raise SingularCovariance("diffused covariance is not positive definite") from ex
        elif np.any(cov <= 0) or not np.all(np.isfinite(cov)):
            raise SingularCovariance("diffused covariance is not positive definite")

    @staticmethod
    def diffuse(m: np.ndarray, gamma: Union[float, np.ndarray], alpha: float, sigma: float) -> "DiffusedGaussian":
        m = np.asarray(m, dtype=np.float64).reshape(-1)
        gamma = np.asarray(gamma, dtype=np.float64)
        if gamma.ndim == 2:
            cov = alpha ** 2 * gamma + sigma ** 2 * np.eye(gamma.shape[0])
        else:
            cov = alpha ** 2 * gamma + sigma ** 2
        return DiffusedGaussian(alpha * m, cov)

    def solve(self, r: np.ndarray) -> np.ndarray:
        if self.kind == "full":
            y = np.linalg.solve(self._chol, r)
            return np.linalg.solve(self._chol.T, y)
        return r / self.cov

    def logdet(self) -> float:
        if self.kind == "iso":
            return self.dim * float(np.log(self.cov))
        if self.kind == "diag":
            return float(np.sum(np.log(self.cov)))
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def trace_inverse(self) -> float:
        if self.kind == "iso":
            return self.dim / float(self.cov)
        if self.kind == "diag":
            return float(np.sum(1.0 / self.cov))
        inv = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, np.eye(self.dim)))
        return float(np.trace(inv))

    def log_density(self, x: np.ndarray) -> float:
        r = np.asarray(x, dtype=np.float64).reshape(-1) - self.mean
        return -0.5 * (float(r @ self.solve(r)) + self.logdet() + self.dim * LOG_2PI)


class JointDiffusedGaussian:
    """
    Four exchangeable views with per-pixel variance gamma and cross-view
    correlation rho: Gamma = K (x) gamma I with K = (1 - rho) I + rho 11^T.
    Inverses run through the eigendecomposition of K.
    """

    def __init__(self, means: np.ndarray, gamma: float, rho: float, alpha: float, sigma: float):
        self.means = np.asarray(means, dtype=np.float64).reshape(4, -1)
        self.dim = self.means.size
        K = (1.0 - rho) * np.eye(4) + rho * np.ones((4, 4))
        lam, self._U = np.linalg.eigh(K)
        self._c = alpha ** 2 * gamma * lam + sigma ** 2
        if np.any(self._c <= 0):
            raise SingularCovariance("joint diffused covariance is not positive definite")
        self.mean = (alpha * self.means).reshape(-1)

    def solve(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64).reshape(4, -1)
        out = self._U @ ((self._U.T @ r) / self._c[:, None])
        return out.reshape(-1)

    def logdet(self) -> float:
        return (self.dim // 4) * float(np.sum(np.log(self._c)))

    def trace_inverse(self) -> float:
        return (self.dim // 4) * float(np.sum(1.0 / self._c))

    def log_density(self, x: np.ndarray) -> float:
        r = np.asarray(x, dtype=np.float64).reshape(-1) - self.mean
        return -0.5 * (float(r @ self.solve(r)) + self.logdet() + self.dim * LOG_2PI)


# ============================================================
# 5. Analytic providers
# ============================================================
class AnalyticGaussianProvider:
    """p0(x | cond) = N(m(cond), Gamma); noise prediction is exact."""

    def __init__(self, targets, covariance: Union[float, np.ndarray], schedule: NoiseSchedule):
        self.targets = _as_targets(targets)
        self.covariance = np.asarray(covariance, dtype=np.float64)
        self.schedule = schedule
        if self.covariance.ndim == 0 and not self.covariance >= 0:
            raise InvalidParameter("covariance scale must be >= 0")

    def diffused_moments(self, t: float, cond: Condition, shape: Tuple[int, ...]) -> DiffusedGaussian:
        alpha, sigma = self.schedule.alpha_sigma(t)
        return DiffusedGaussian.diffuse(_mean_for(self.targets, cond, shape), self.covariance, alpha, sigma)

    def predict_noise(self, x_t: np.ndarray, t: float, cond: Condition) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        sigma = self.schedule.sigma(t)
        dist = self.diffused_moments(t, cond, x_t.shape)
        return (sigma * dist.solve(x_t.reshape(-1) - dist.mean)).reshape(x_t.shape)

    def log_density(self, x_t: np.ndarray, t: float, cond: Condition) -> float:
        x_t = np.asarray(x_t, dtype=np.float64)
        return self.diffused_moments(t, cond, x_t.shape).log_density(x_t)


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    targets: object
    covariance: Union[float, np.ndarray]


class AnalyticMixtureProvider:
    """Weighted sum of Gaussian providers; responsibilities via log-sum-exp."""

    def __init__(self, components: Sequence[MixtureComponent], schedule: NoiseSchedule):
        if not components:
            raise InvalidParameter("mixture needs at least one component")
        weights = np.array([c.weight for c in components], dtype=np.float64)
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise InvalidParameter("mixture weights must be positive and sum to 1")
        self.log_weights = np.log(weights)
        self.components: List[AnalyticGaussianProvider] = [
            AnalyticGaussianProvider(c.targets, c.covariance, schedule) for c in components
        ]
        self.schedule = schedule

    def diffused_moments(self, t: float, cond: Condition, shape: Tuple[int, ...]) -> List[Tuple[float, DiffusedGaussian]]:
        return [
            (float(np.exp(lw)), comp.diffused_moments(t, cond, shape))
            for lw, comp in zip(self.log_weights, self.components)
        ]

    def _responsibilities(self, x_t: np.ndarray, t: float, cond: Condition) -> np.ndarray:
        logs = np.array([lw + comp.log_density(x_t, t, cond) for lw, comp in zip(self.log_weights, self.components)])
        return np.exp(logs - logsumexp(logs))

    def predict_noise(self, x_t: np.ndarray, t: float, cond: Condition) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        if len(self.components) == 1:
            return self.components[0].predict_noise(x_t, t, cond)
        resp = self._responsibilities(x_t, t, cond)
        out = np.zeros_like(x_t)
        for r, comp in zip(resp, self.components):
            out += r * comp.predict_noise(x_t, t, cond)
        return out

    def log_density(self, x_t: np.ndarray, t: float, cond: Condition) -> float:
        logs = np.array([lw + comp.log_density(x_t, t, cond) for lw, comp in zip(self.log_weights, self.components)])
        return float(logsumexp(logs))


class AnalyticJointProvider:
    """
    Joint Gaussian over a stacked quad of views. Each view's mean comes from
    the targets at that view's camera; views are coupled by rho.
    """

    def __init__(self, targets, gamma: float, rho: float, schedule: NoiseSchedule):
        if not abs(rho) < 1.0 / 3.0:
            raise InvalidParameter(f"coupling rho={rho} must satisfy |rho| < 1/3")
        if not gamma > 0:
            raise InvalidParameter("per-view variance gamma must be > 0")
        self.targets = _as_targets(targets)
        self.gamma = float(gamma)
        self.rho = float(rho)
        self.schedule = schedule

    def view_means(self, cond: Condition, quad: CameraQuad, shape: Tuple[int, ...]) -> np.ndarray:
        if cond.is_unconditional:
            return np.stack([self.targets.unconditional(shape) for _ in range(4)])
        return np.stack([
            self.targets.mean(Condition.for_camera(cond.prompt_id, cam), shape) for cam in quad
        ])

    def diffused_moments(self, t: float, cond: Condition, quad: CameraQuad, shape: Tuple[int, ...]) -> JointDiffusedGaussian:
        alpha, sigma = self.schedule.alpha_sigma(t)
        return JointDiffusedGaussian(self.view_means(cond, quad, shape), self.gamma, self.rho, alpha, sigma)

    def _check(self, x_t: np.ndarray) -> None:
        if x_t.ndim < 2 or x_t.shape[0] != 4:
            raise ShapeError(f"joint provider expects a stack of 4 views, got shape {x_t.shape}")

    def predict_noise(self, x_t: np.ndarray, t: float, cond: Condition, quad: CameraQuad) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        self._check(x_t)
        sigma = self.schedule.sigma(t)
        dist = self.diffused_moments(t, cond, quad, x_t.shape[1:])
        return (sigma * dist.solve(x_t.reshape(-1) - dist.mean)).reshape(x_t.shape)

    def log_density(self, x_t: np.ndarray, t: float, cond: Condition, quad: CameraQuad) -> float:
        x_t = np.asarray(x_t, dtype=np.float64)
        self._check(x_t)
        return self.diffused_moments(t, cond, quad, x_t.shape[1:]).log_density(x_t)
