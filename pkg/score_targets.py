# score_targets.py
"""
Per-condition mean images for the analytic providers.

A target set answers `mean(cond, shape)` and `unconditional(shape)`.
Shapes are (H, W, 3) images.
"""
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from camera_sampler import VIEW_BUCKETS, Camera, azimuth_slot, canonical_quad, view_bucket
from diffusion_math import Condition
from errors import InvalidCondition, InvalidParameter, ShapeError
from gauss_core import GaussianCloud
from splat_render import RenderSettings, load_png, render

NAMED_COLORS = {
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "grey": (0.5, 0.5, 0.5),
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.9),
}

SKIN = np.array([0.92, 0.74, 0.58])
HAIR = np.array([0.32, 0.2, 0.1])
FEATURE = np.array([0.1, 0.05, 0.05])


# ============================================================
# Procedural patterns
# ============================================================
def _grid(shape: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    if len(shape) != 3 or shape[2] != 3:
        raise ShapeError(f"pattern targets need (H, W, 3) images, got {shape}")
    h, w = shape[0], shape[1]
    v, u = np.meshgrid((np.arange(h) + 0.5) / h - 0.5, (np.arange(w) + 0.5) / w - 0.5, indexing="ij")
    return u, v


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    img[mask] = color


def _head(shape: Tuple[int, ...], background: Sequence[float]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    u, v = _grid(shape)
    img = np.empty(shape)
    img[...] = background
    head = u ** 2 + v ** 2 < 0.35 ** 2
    return img, u, v, head


def pattern_face(shape, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    img, u, v, head = _head(shape, background)
    _paint(img, head, SKIN)
    _paint(img, head & (v < -0.2), HAIR)
    for side in (-1.0, 1.0):
        _paint(img, (u - side * 0.12) ** 2 + (v + 0.05) ** 2 < 0.05 ** 2, FEATURE)
    _paint(img, (np.abs(u) < 0.12) & (np.abs(v - 0.15) < 0.025), FEATURE)
    return img


def pattern_back(shape, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    img, u, v, head = _head(shape, background)
    _paint(img, head, HAIR)
    return img


def pattern_side(shape, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    img, u, v, head = _head(shape, background)
    _paint(img, head, SKIN)
    _paint(img, head & ((u < 0.0) | (v < -0.2)), HAIR)
    _paint(img, (u - 0.2) ** 2 + (v + 0.05) ** 2 < 0.045 ** 2, FEATURE)
    return img


def pattern_disc(shape, color: Sequence[float], background=(1.0, 1.0, 1.0)) -> np.ndarray:
    img, u, v, head = _head(shape, background)
    _paint(img, head, np.asarray(color, dtype=np.float64))
    return img


def pattern_solid(shape, color: Sequence[float]) -> np.ndarray:
    _grid(shape)
    img = np.empty(shape)
    img[...] = color
    return img


PATTERNS = {
    "face": pattern_face,
    "back": pattern_back,
    "side": pattern_side,
}


def parse_color(text: str) -> Tuple[float, float, float]:
    if text in NAMED_COLORS:
        return NAMED_COLORS[text]
    try:
        rgb = tuple(float(c) for c in text.split(","))
    except ValueError as ex:
        raise InvalidParameter(f"cannot parse colour {text!r}") from ex
    if len(rgb) != 3 or any(c < 0 or c > 1 for c in rgb):
        raise InvalidParameter(f"colour {text!r} must be three values in [0, 1]")
    return rgb


def make_pattern(name: str, shape: Tuple[int, ...]) -> np.ndarray:
    """
    `face`, `back`, `side`, `solid:<colour>` (whole frame) or `disc:<colour>`
    (head-sized disc on white), with a named or r,g,b colour.
    """
    if name.startswith("solid:"):
        return pattern_solid(shape, parse_color(name[len("solid:"):]))
    if name.startswith("disc:"):
        return pattern_disc(shape, parse_color(name[len("disc:"):]))
    if name not in PATTERNS:
        raise InvalidParameter(f"unknown pattern {name!r}")
    return PATTERNS[name](shape)


# ============================================================
# Target sets
# ============================================================
def _bucket_of(cond: Condition) -> Optional[str]:
    if cond.view_bucket is not None:
        return cond.view_bucket
    if cond.camera is not None:
        return view_bucket(cond.camera)
    return None


class PatternTargets:
    """Pattern chosen by view bucket, with a default for unlisted buckets."""

    def __init__(self, default: str, by_bucket: Optional[Dict[str, str]] = None):
        by_bucket = dict(by_bucket or {})
        unknown = set(by_bucket) - set(VIEW_BUCKETS)
        if unknown:
            raise InvalidParameter(f"unknown view buckets {sorted(unknown)}")
        self.default = default
        self.by_bucket = by_bucket
        make_pattern(default, (2, 2, 3))
        for name in by_bucket.values():
            make_pattern(name, (2, 2, 3))

    def name_for(self, cond: Condition) -> str:
        return self.by_bucket.get(_bucket_of(cond), self.default)

    def mean(self, cond: Condition, shape) -> np.ndarray:
        return make_pattern(self.name_for(cond), tuple(shape))

    def unconditional(self, shape) -> np.ndarray:
        names = sorted(set(self.by_bucket.values()) | {self.default})
        return np.mean([make_pattern(n, tuple(shape)) for n in names], axis=0)


class SlotTargets:
    """Pattern chosen by the azimuth quadrant (0, 90, 180, 270 degrees) of the camera."""

    def __init__(self, slots: Sequence[str]):
        if len(slots) != 4:
            raise InvalidParameter("slot targets need exactly four patterns")
        for name in slots:
            make_pattern(name, (2, 2, 3))
        self.slots = tuple(slots)

    def mean(self, cond: Condition, shape) -> np.ndarray:
        if cond.camera is None:
            raise InvalidCondition("slot targets need a camera")
        return make_pattern(self.slots[azimuth_slot(cond.camera.azimuth)], tuple(shape))

    def unconditional(self, shape) -> np.ndarray:
        return np.mean([make_pattern(n, tuple(shape)) for n in self.slots], axis=0)


class SlotArrayTargets:
    """Four fixed mean arrays chosen by azimuth quadrant; any array shape."""

    def __init__(self, arrays: Sequence[np.ndarray]):
        if len(arrays) != 4:
            raise InvalidParameter("slot targets need exactly four arrays")
        self.arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def mean(self, cond: Condition, shape) -> np.ndarray:
        if cond.camera is None:
            raise InvalidCondition("slot targets need a camera")
        m = self.arrays[azimuth_slot(cond.camera.azimuth)]
        if m.shape != tuple(shape):
            raise ShapeError(f"slot target has shape {m.shape}, requested {tuple(shape)}")
        return m

    def unconditional(self, shape) -> np.ndarray:
        return np.mean(self.arrays, axis=0)


class ImageTargets:
    """PNG files per view bucket, resized to the requested square size."""

    def __init__(self, default: str, by_bucket: Optional[Dict[str, str]] = None):
        self.default = default
        self.by_bucket = dict(by_bucket or {})
        self._cache: Dict[Tuple[str, Tuple[int, ...]], np.ndarray] = {}

    def _load(self, path: str, shape) -> np.ndarray:
        shape = tuple(shape)
        if len(shape) != 3 or shape[0] != shape[1] or shape[2] != 3:
            raise ShapeError(f"image targets need square (S, S, 3) shapes, got {shape}")
        key = (path, shape)
        if key not in self._cache:
            self._cache[key] = load_png(path, size=shape[0])
        return self._cache[key]

    def mean(self, cond: Condition, shape) -> np.ndarray:
        return self._load(self.by_bucket.get(_bucket_of(cond), self.default), shape)

    def unconditional(self, shape) -> np.ndarray:
        paths = sorted(set(self.by_bucket.values()) | {self.default})
        return np.mean([self._load(p, shape) for p in paths], axis=0)


class ReferenceCloudTargets:
    """A fixed reference cloud rendered at the condition's camera."""

    def __init__(
        self,
        cloud: GaussianCloud,
        background: Sequence[float] = (1.0, 1.0, 1.0),
        settings: RenderSettings = RenderSettings(),
    ):
        self.cloud = cloud
        self.background = tuple(background)
        self.settings = settings
        # a training run asks for the same quad several times per iteration
        self._cached = lru_cache(maxsize=16)(self._render_at)

    def _render_at(self, cam: Camera) -> np.ndarray:
        return render(self.cloud, cam, self.background, self.settings).rgb

    def _render(self, cam: Camera, shape) -> np.ndarray:
        shape = tuple(shape)
        if len(shape) != 3 or shape[2] != 3:
            raise ShapeError(f"reference-cloud targets need (H, W, 3) images, got {shape}")
        return self._cached(cam.with_resolution(shape[1], shape[0]))

    def mean(self, cond: Condition, shape) -> np.ndarray:
        if cond.camera is None:
            raise InvalidCondition("reference-cloud targets need a camera")
        return self._render(cond.camera, shape)

    def unconditional(self, shape) -> np.ndarray:
        quad = canonical_quad(size=shape[0]).with_resolution(shape[1], shape[0])
        return np.mean([self._render(cam, shape) for cam in quad], axis=0)
