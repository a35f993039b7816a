# camera_sampler.py
"""
Orbit cameras looking at the origin.

Conventions: right-handed world, +y up, azimuth 0 on the +z axis, positive
elevation above the horizon. View space is x right, y down, z forward, so
pixel coordinates grow right and down from the top-left corner.
"""
import math
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from errors import InvalidParameter

VIEW_BUCKETS = ("front", "side", "back", "overhead")


# ============================================================
# Types
# ============================================================
@dataclass(frozen=True)
class Camera:
    azimuth: float      # degrees, [-180, 180)
    elevation: float    # degrees
    radius: float
    fov_y: float        # degrees
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidParameter("camera radius must be > 0")
        if not 0 < self.fov_y < 180:
            raise InvalidParameter("fov_y must lie in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise InvalidParameter("image size must be positive")
        object.__setattr__(self, "azimuth", wrap_azimuth(self.azimuth))

    @property
    def position(self) -> np.ndarray:
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        return self.radius * np.array([
            math.cos(el) * math.sin(az),
            math.sin(el),
            math.cos(el) * math.cos(az),
        ])

    @property
    def world_to_view(self) -> np.ndarray:
        """3x3 rotation whose rows are the camera right, down and forward axes."""
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        forward = -self.position / self.radius
        # cross(forward, +y) normalized; closed form stays defined at the poles
        right = np.array([math.cos(az), 0.0, -math.sin(az)])
        up = np.cross(right, forward)
        return np.stack([right, -up, forward])

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2.0)

    @property
    def principal_point(self) -> Tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def to_view(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.world_to_view.T

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) -> pixel coordinates (..., 2)."""
        t = self.to_view(points)
        cx, cy = self.principal_point
        return np.stack([
            self.focal * t[..., 0] / t[..., 2] + cx,
            self.focal * t[..., 1] / t[..., 2] + cy,
        ], axis=-1)

    def with_resolution(self, width: int, height: int) -> "Camera":
        return replace(self, width=width, height=height)

    def with_azimuth(self, azimuth: float) -> "Camera":
        return replace(self, azimuth=azimuth)


@dataclass(frozen=True)
class CameraQuad:
    cameras: Tuple[Camera, Camera, Camera, Camera]

    def __post_init__(self):
        if len(self.cameras) != 4:
            raise InvalidParameter("a quad holds exactly four cameras")
        base = self.cameras[0]
        for k, cam in enumerate(self.cameras):
            shared = (cam.elevation, cam.radius, cam.fov_y, cam.width, cam.height)
            if shared != (base.elevation, base.radius, base.fov_y, base.width, base.height):
                raise InvalidParameter("quad cameras must share elevation, radius, fov and size")
            if wrap_azimuth(base.azimuth + 90.0 * k) != cam.azimuth:
                raise InvalidParameter("quad azimuths must be spaced by 90 degrees")

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, k: int) -> Camera:
        return self.cameras[k]

    def __len__(self) -> int:
        return 4

    @property
    def azimuths(self) -> Tuple[float, ...]:
        return tuple(cam.azimuth for cam in self.cameras)

    def with_resolution(self, width: int, height: int) -> "CameraQuad":
        return CameraQuad(tuple(cam.with_resolution(width, height) for cam in self.cameras))


@dataclass(frozen=True)
class CameraRanges:
    azimuth: Tuple[float, float] = (-180.0, 180.0)
    elevation: Tuple[float, float] = (-90.0, 30.0)
    radius: Tuple[float, float] = (2.0, 2.5)
    fov_y: Tuple[float, float] = (40.0, 70.0)

    def validate(self) -> None:
        for name in ("azimuth", "elevation", "radius", "fov_y"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidParameter(f"camera range {name} has min > max")
        if self.radius[0] <= 0:
            raise InvalidParameter("camera radius range must be positive")
        if self.fov_y[0] <= 0 or self.fov_y[1] >= 180:
            raise InvalidParameter("camera fov range must lie in (0, 180)")
        if self.elevation[0] < -90 or self.elevation[1] > 90:
            raise InvalidParameter("camera elevation range must lie in [-90, 90]")


@dataclass(frozen=True)
class BucketBoundaries:
    front: float = 45.0
    side: float = 135.0
    overhead: float = 60.0


# ============================================================
# Operations
# ============================================================
def wrap_azimuth(azimuth: float) -> float:
    return float((azimuth + 180.0) % 360.0 - 180.0)


def _uniform(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    lo, hi = bounds
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def sample_camera(rng: np.random.Generator, ranges: CameraRanges = CameraRanges(), size: int = 64) -> Camera:
    ranges.validate()
    return Camera(
        azimuth=_uniform(rng, ranges.azimuth),
        elevation=_uniform(rng, ranges.elevation),
        radius=_uniform(rng, ranges.radius),
        fov_y=_uniform(rng, ranges.fov_y),
        width=size,
        height=size,
    )


def quad_from_camera(base: Camera) -> CameraQuad:
    return CameraQuad(tuple(base.with_azimuth(base.azimuth + 90.0 * k) for k in range(4)))


def sample_orthogonal_quad(rng: np.random.Generator, ranges: CameraRanges = CameraRanges(), size: int = 64) -> CameraQuad:
    return quad_from_camera(sample_camera(rng, ranges, size))


def canonical_quad(elevation: float = 15.0, radius: float = 2.2, fov_y: float = 50.0, size: int = 64) -> CameraQuad:
    return quad_from_camera(Camera(0.0, elevation, radius, fov_y, size, size))


def view_bucket(cam: Camera, bounds: BucketBoundaries = BucketBoundaries()) -> str:
    if abs(cam.elevation) > bounds.overhead:
        return "overhead"
    az = cam.azimuth
    if -bounds.front < az <= bounds.front:
        return "front"
    if bounds.front < az <= bounds.side or -bounds.side <= az <= -bounds.front:
        return "side"
    return "back"


def azimuth_slot(azimuth: float) -> int:
    """Quadrant index 0..3 for azimuths nearest 0, 90, 180, 270 degrees."""
    return int(math.floor((azimuth % 360.0 + 45.0) / 90.0)) % 4
