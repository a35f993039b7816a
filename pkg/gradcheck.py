# gradcheck.py
"""
Central finite differences and relative-error comparison for analytic
gradients.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from gauss_core import GaussianCloud


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def numerical_gradient(func: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """
    ∇f(x) ≈ (f(x + h e_i) - f(x - h e_i)) / 2h
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + step
        f_plus = func(x)
        x.flat[i] = orig - step
        f_minus = func(x)
        x.flat[i] = orig
        grad.flat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def check_gradient(
    name: str,
    func: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    tolerance: float = 1e-3,
    step: float = 1e-6,
    floor: float = 1e-6,
) -> GradCheckResult:
    numeric = numerical_gradient(func, x, step)
    return GradCheckResult(name, relative_error(analytic, numeric, floor), tolerance)


def check_cloud_gradients(
    cloud: GaussianCloud,
    loss: Callable[[GaussianCloud], float],
    analytic: Dict[str, np.ndarray],
    tolerance: float = 1e-3,
    step: float = 1e-6,
    floor: float = 1e-6,
) -> List[GradCheckResult]:
    """One result per parameter group, perturbing that group only."""
    results = []
    for group, values in cloud.params().items():
        def group_loss(x, group=group):
            params = dict(cloud.params())
            params[group] = x
            return loss(cloud.with_params(params))

        results.append(check_gradient(group, group_loss, values, analytic[group], tolerance, step, floor))
    return results
