# gauss_core.py
"""
3D Gaussian cloud: parameter storage, activations, covariance construction,
random initialization and PLY persistence.

Parameters are stored unconstrained (log-scale, opacity logit, DC color
feature) and activated on read, so every optimizer step stays in R^n.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.special import expit, logit
from sklearn.neighbors import NearestNeighbors

from errors import (
    FormatError,
    InvalidParameter,
    IoError,
    SingularCovariance,
    UnnormalizedRotation,
)

# Degree-0 spherical harmonic constant; f_dc <-> rgb follows the splat PLY convention.
SH_C0 = 0.28209479177387814

ROTATION_TOLERANCE = 1e-3
MAX_CONDITION_NUMBER = 1e12

MIN_INIT_SCALE = 1e-3
MAX_INIT_SCALE = 0.05

PLY_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)
GENERATION_COMMENT = "generation"


# ============================================================
# Types
# ============================================================
@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray        # (3,)
    log_scale: np.ndarray       # (3,)
    rotation: np.ndarray        # (4,) w, x, y, z
    feature_dc: np.ndarray      # (3,)
    opacity_logit: float

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(expit(self.opacity_logit))

    @property
    def color(self) -> np.ndarray:
        return feature_to_color(self.feature_dc)


@dataclass
class GaussianCloud:
    positions: np.ndarray                 # (N, 3)
    log_scales: np.ndarray                # (N, 3)
    rotations: np.ndarray                 # (N, 4)
    features_dc: np.ndarray               # (N, 3)
    opacity_logits: np.ndarray            # (N,)
    generation: int = 0

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        n = positions.shape[0] if positions.ndim == 2 else -1
        expected = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "features_dc": (n, 3),
            "opacity_logits": (n,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InvalidParameter(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    # ---------------------------------------
    # Container protocol
    # ---------------------------------------
    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            feature_dc=self.features_dc[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    # ---------------------------------------
    # Activated views
    # ---------------------------------------
    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    @property
    def colors(self) -> np.ndarray:
        return feature_to_color(self.features_dc)

    # ---------------------------------------
    # Structural helpers
    # ---------------------------------------
    def params(self) -> dict:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "features_dc": self.features_dc,
            "opacity_logits": self.opacity_logits,
        }

    def with_params(self, params: dict, generation: Optional[int] = None) -> "GaussianCloud":
        return GaussianCloud(
            positions=params["positions"],
            log_scales=params["log_scales"],
            rotations=params["rotations"],
            features_dc=params["features_dc"],
            opacity_logits=params["opacity_logits"],
            generation=self.generation if generation is None else generation,
        )

    def copy(self) -> "GaussianCloud":
        return self.with_params({k: v.copy() for k, v in self.params().items()})

    def subset(self, indices: Sequence[int]) -> "GaussianCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return self.with_params({k: v[idx].copy() for k, v in self.params().items()})

    @staticmethod
    def concat(clouds: Sequence["GaussianCloud"], generation: int = 0) -> "GaussianCloud":
        keys = ("positions", "log_scales", "rotations", "features_dc", "opacity_logits")
        return GaussianCloud(
            **{k: np.concatenate([getattr(c, k) for c in clouds], axis=0) for k in keys},
            generation=generation,
        )

    @staticmethod
    def empty() -> "GaussianCloud":
        return GaussianCloud(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            features_dc=np.zeros((0, 3)),
            opacity_logits=np.zeros((0,)),
        )

    def equals(self, other: "GaussianCloud") -> bool:
        if len(self) != len(other):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values()))


# ============================================================
# Activations
# ============================================================
def feature_to_color(features_dc: np.ndarray) -> np.ndarray:
    return np.clip(0.5 + SH_C0 * np.asarray(features_dc, dtype=np.float64), 0.0, 1.0)


def color_to_feature(color: np.ndarray) -> np.ndarray:
    return (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0


def opacity_to_logit(opacity: float) -> float:
    return float(logit(opacity))


# ============================================================
# Rotations and covariances
# ============================================================
def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions (w, x, y, z) -> (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_vjp(q_unit: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Pull dL/dR (..., 3, 3) back to dL/dq for unit quaternions q (..., 4)."""
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    g = grad_R
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Batched Sigma = R diag(s^2) R^T; rotations are normalized on the fly."""
    R = quaternion_to_rotation(normalize_quaternions(rotations))
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


def covariance_from_scale_rotation(log_scale: Sequence[float], q: Sequence[float]) -> np.ndarray:
    log_scale = np.asarray(log_scale, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if log_scale.shape != (3,) or q.shape != (4,):
        raise InvalidParameter("log_scale must be a 3-vector and q a 4-vector")
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(q))):
        raise InvalidParameter("non-finite scale or rotation")

    norm = np.linalg.norm(q)
    if abs(norm - 1.0) >= ROTATION_TOLERANCE:
        raise UnnormalizedRotation(f"|q| = {norm:.6f} deviates from 1 by more than {ROTATION_TOLERANCE}")

    return covariances(log_scale[None], q[None])[0]


def evaluate_gaussian(cov: np.ndarray, offset: Sequence[float]) -> float:
    cov = np.asarray(cov, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    if not np.all(np.isfinite(cov)) or np.linalg.cond(cov) >= MAX_CONDITION_NUMBER:
        raise SingularCovariance("covariance is singular or ill-conditioned")
    mahalanobis2 = float(offset @ np.linalg.solve(cov, offset))
    return float(np.exp(-0.5 * mahalanobis2))


# ============================================================
# Initialization
# ============================================================
def mean_nearest_neighbor_distance(points: np.ndarray) -> Optional[float]:
    if len(points) < 2:
        return None
    nn = NearestNeighbors(n_neighbors=2).fit(points)
    distances, _ = nn.kneighbors(points)
    return float(distances[:, 1].mean())


def init_cloud(
    count: int,
    radius: float,
    opacity: float,
    color: Sequence[float],
    seed: int,
    scale: Optional[float] = None,
) -> GaussianCloud:
    """
    Uniform random Gaussians inside a sphere.

    The isotropic initial scale is a third of the mean nearest-neighbour
    spacing, clamped to [1e-3, 0.05], unless `scale` is given explicitly.
    """
    color = np.asarray(color, dtype=np.float64)
    if count < 1:
        raise InvalidParameter("count must be >= 1")
    if not radius > 0:
        raise InvalidParameter("radius must be > 0")
    if not 0.0 < opacity < 1.0:
        raise InvalidParameter("opacity must lie in (0, 1)")
    if color.shape != (3,) or np.any(color < 0) or np.any(color > 1):
        raise InvalidParameter("color must be an RGB triple in [0, 1]")
    if scale is not None and not scale > 0:
        raise InvalidParameter("scale must be > 0")

    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * rng.uniform(size=(count, 1)) ** (1.0 / 3.0)
    positions = directions * radii

    if scale is None:
        spacing = mean_nearest_neighbor_distance(positions)
        if spacing is None:
            spacing = radius
        scale = float(np.clip(spacing / 3.0, MIN_INIT_SCALE, MAX_INIT_SCALE))

    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0

    return GaussianCloud(
        positions=positions,
        log_scales=np.full((count, 3), np.log(scale)),
        rotations=rotations,
        features_dc=np.tile(color_to_feature(color), (count, 1)),
        opacity_logits=np.full(count, opacity_to_logit(opacity)),
    )


# ============================================================
# PLY persistence
# ============================================================
def save_cloud(cloud: GaussianCloud, path: str, precision: str = "float") -> None:
    """
    Binary little-endian PLY with the common 3D-GS vertex layout. The densify
    generation travels in a "generation N" header comment.
    """
    if precision not in ("float", "double"):
        raise InvalidParameter("precision must be 'float' or 'double'")
    code = "f4" if precision == "float" else "f8"

    vertex = np.empty(len(cloud), dtype=[(name, code) for name in PLY_PROPERTIES])
    vertex["x"], vertex["y"], vertex["z"] = cloud.positions.T
    for k in range(3):
        vertex[f"f_dc_{k}"] = cloud.features_dc[:, k]
        vertex[f"scale_{k}"] = cloud.log_scales[:, k]
    for k in range(4):
        vertex[f"rot_{k}"] = cloud.rotations[:, k]
    vertex["opacity"] = cloud.opacity_logits

    element = PlyElement.describe(vertex, "vertex")
    try:
        PlyData([element], byte_order="<", comments=[f"{GENERATION_COMMENT} {cloud.generation}"]).write(path)
    except OSError as ex:
        raise IoError(f"cannot write cloud to {path}: {ex}") from ex


def _read_header(raw: bytes) -> Tuple[int, dict]:
    """Returns (header byte length, {line text: byte offset})."""
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError("missing PLY magic or end_header", offset=0)
    newline = raw.find(b"\n", end)
    header_len = len(raw) if newline < 0 else newline + 1

    offsets = {}
    pos = 0
    for line in raw[:header_len].split(b"\n"):
        offsets[line.decode("ascii", errors="replace").strip()] = pos
        pos += len(line) + 1
    return header_len, offsets


def load_cloud(path: str) -> GaussianCloud:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as ex:
        raise IoError(f"cannot read cloud from {path}: {ex}") from ex

    header_len, offsets = _read_header(raw)
    vertex_line = next((line for line in offsets if line.startswith("element vertex")), None)
    if vertex_line is None:
        raise FormatError("no vertex element", offset=0)

    declared = {
        line.split()[-1] for line in offsets if line.startswith("property ")
    }
    missing = [name for name in PLY_PROPERTIES if name not in declared]
    if missing:
        raise FormatError(f"vertex element lacks properties {missing}", offset=offsets[vertex_line])

    try:
        with open(path, "rb") as f:
            ply = PlyData.read(f)
        data = ply["vertex"].data
    except Exception as ex:
        raise FormatError(f"malformed vertex payload: {ex}", offset=header_len) from ex

    def column(name: str) -> np.ndarray:
        return np.asarray(data[name], dtype=np.float64)

    generation = 0
    for line in offsets:
        parts = line.split()
        if parts[:2] == ["comment", GENERATION_COMMENT]:
            if len(parts) != 3 or not parts[2].isdigit():
                raise FormatError(f"bad generation comment {line!r}", offset=offsets[line])
            generation = int(parts[2])

    return GaussianCloud(
        positions=np.stack([column("x"), column("y"), column("z")], axis=1),
        log_scales=np.stack([column(f"scale_{k}") for k in range(3)], axis=1),
        rotations=np.stack([column(f"rot_{k}") for k in range(4)], axis=1),
        features_dc=np.stack([column(f"f_dc_{k}") for k in range(3)], axis=1),
        opacity_logits=column("opacity"),
        generation=generation,
    )
