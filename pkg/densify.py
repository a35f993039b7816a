# densify.py
"""
Adaptive density control: clone small Gaussians and split large ones where
the mean screen-space positional gradient is high, then prune transparent
or oversized Gaussians. Opacity is never reset.
"""
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from errors import GenerationMismatch, InvalidParameter, ShapeError
from gauss_core import GaussianCloud, normalize_quaternions, quaternion_to_rotation
from splat_render import RenderGradients


@dataclass(frozen=True)
class DensifyConfig:
    interval: int = 250
    stop: int = 1500
    grad_threshold: float = 0.01
    min_opacity: float = 0.01
    max_scale: float = 0.05
    clone_max_scale: float = 0.01
    split_factor: float = 1.6

    def validate(self) -> None:
        if self.interval < 1:
            raise InvalidParameter("densify interval must be >= 1")
        for name in ("grad_threshold", "min_opacity", "max_scale", "clone_max_scale"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"densify {name} must be > 0")
        if not self.split_factor > 1:
            raise InvalidParameter("split factor must be > 1")


class DensifyStats:
    """Per-Gaussian sums of screen-space positional gradient norms and visit counts."""

    def __init__(self, count: int, generation: int):
        self.grad_sum = np.zeros(count)
        self.visits = np.zeros(count, dtype=np.int64)
        self.generation = generation

    @staticmethod
    def for_cloud(cloud: GaussianCloud) -> "DensifyStats":
        return DensifyStats(len(cloud), cloud.generation)

    def accumulate(self, grads: RenderGradients) -> None:
        if grads.mean2d_norm.shape != self.grad_sum.shape:
            raise ShapeError("render gradients do not match the tracked cloud")
        seen = grads.visits > 0
        self.grad_sum[seen] += grads.mean2d_norm[seen]
        self.visits += grads.visits

    def mean(self) -> np.ndarray:
        return np.where(self.visits > 0, self.grad_sum / np.maximum(self.visits, 1), 0.0)


@dataclass(frozen=True)
class DensifyReport:
    cloned: int
    split: int
    pruned: int
    before: int
    after: int

    def as_dict(self) -> dict:
        return asdict(self)


def should_densify(iteration: int, cfg: DensifyConfig) -> bool:
    return iteration > 0 and iteration % cfg.interval == 0 and iteration <= cfg.stop


def _sample_offsets(cloud: GaussianCloud, idx: np.ndarray, scales: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Samples of N(0, R diag(s^2) R^T) for the rows in idx."""
    R = quaternion_to_rotation(normalize_quaternions(cloud.rotations[idx]))
    z = rng.normal(size=(len(idx), 3)) * scales
    return np.einsum("nij,nj->ni", R, z)


def densify_and_prune(
    cloud: GaussianCloud,
    stats: DensifyStats,
    cfg: DensifyConfig,
    rng: np.random.Generator,
) -> Tuple[GaussianCloud, DensifyReport, np.ndarray]:
    """
    Returns the edited cloud, a report and `parent_index`: for every row of
    the new cloud, the row of the input it descends from.
    """
    cfg.validate()
    if stats.generation != cloud.generation or stats.grad_sum.shape != (len(cloud),):
        raise GenerationMismatch(
            f"stats for generation {stats.generation} applied to cloud generation {cloud.generation}"
        )

    n = len(cloud)
    max_scale = cloud.scales.max(axis=1) if n else np.zeros(0)
    hot = stats.mean() > cfg.grad_threshold
    clone_idx = np.flatnonzero(hot & (max_scale <= cfg.clone_max_scale))
    split_idx = np.flatnonzero(hot & (max_scale > cfg.clone_max_scale))

    params = cloud.params()
    keep_idx = np.setdiff1d(np.arange(n), split_idx)

    clones = {k: v[clone_idx].copy() for k, v in params.items()}
    clones["positions"] = clones["positions"] + _sample_offsets(cloud, clone_idx, cloud.scales[clone_idx], rng)

    pair = np.repeat(split_idx, 2)
    children = {k: v[pair].copy() for k, v in params.items()}
    children["positions"] = children["positions"] + _sample_offsets(cloud, pair, cloud.scales[pair], rng)
    children["log_scales"] = children["log_scales"] - np.log(cfg.split_factor)

    parent = np.concatenate([keep_idx, clone_idx, pair]).astype(np.int64)
    merged = {
        k: np.concatenate([params[k][keep_idx], clones[k], children[k]], axis=0)
        for k in params
    }
    grown = cloud.with_params(merged)

    survivors = np.flatnonzero(
        (grown.opacities >= cfg.min_opacity) & (grown.scales.max(axis=1) <= cfg.max_scale)
    )
    result = grown.subset(survivors)
    result.generation = cloud.generation + 1

    report = DensifyReport(
        cloned=len(clone_idx),
        split=len(split_idx),
        pruned=len(grown) - len(survivors),
        before=n,
        after=len(result),
    )
    return result, report, parent[survivors]
