# splat_render.py
"""
Differentiable Gaussian splatting on the CPU.

Forward: EWA projection of every Gaussian, global depth sort (ties by index),
then front-to-back alpha compositing per 16-row band of pixels.
Backward: back-to-front sweep over the same band buffers, giving analytic
gradients for all five parameter groups plus the screen-space positional
gradient norm consumed by densification.

Band partials are reduced in band order, so results are bit-stable.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.special import expit

from camera_sampler import Camera
from errors import CulledBehindCamera, InvalidParameter, ShapeError
from gauss_core import (
    MAX_CONDITION_NUMBER,
    SH_C0,
    Gaussian,
    GaussianCloud,
    covariances,
    normalize_quaternions,
    quaternion_to_rotation,
    rotation_vjp,
)


# ============================================================
# Types
# ============================================================
@dataclass(frozen=True)
class RenderSettings:
    tile_culling: bool = True
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    early_stop_transmittance: float = 1e-4
    low_pass: float = 0.3
    near: float = 0.01


# Brute-force compositing: no culling, no cutoff, no early exit.
EXACT_SETTINGS = RenderSettings(tile_culling=False, alpha_cutoff=0.0, early_stop_transmittance=0.0)


@dataclass
class RenderedImage:
    width: int
    height: int
    rgb: np.ndarray      # (H, W, 3)
    alpha: np.ndarray    # (H, W)


@dataclass
class RenderGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    features_dc: np.ndarray
    opacity_logits: np.ndarray
    mean2d_norm: np.ndarray = field(default=None)
    visits: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.mean2d_norm is None:
            self.mean2d_norm = np.zeros(n)
        if self.visits is None:
            self.visits = np.zeros(n, dtype=np.int64)

    @staticmethod
    def zeros(n: int) -> "RenderGradients":
        return RenderGradients(
            positions=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            features_dc=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
        )

    def params(self) -> dict:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "features_dc": self.features_dc,
            "opacity_logits": self.opacity_logits,
        }

    def __add__(self, other: "RenderGradients") -> "RenderGradients":
        return RenderGradients(
            **{k: v + other.params()[k] for k, v in self.params().items()},
            mean2d_norm=self.mean2d_norm + other.mean2d_norm,
            visits=self.visits + other.visits,
        )

    def scaled(self, factor: float) -> "RenderGradients":
        return RenderGradients(
            **{k: v * factor for k, v in self.params().items()},
            mean2d_norm=self.mean2d_norm.copy(),
            visits=self.visits.copy(),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())


@dataclass
class _Projection:
    valid: np.ndarray        # (N,) bool
    view: np.ndarray         # (N, 3) view-space centers
    mean2d: np.ndarray       # (N, 2)
    J: np.ndarray            # (N, 2, 3)
    cov_view: np.ndarray     # (N, 3, 3)  W Sigma W^T
    cov2d: np.ndarray        # (N, 2, 2)
    conic: np.ndarray        # (N, 2, 2)
    radius: np.ndarray       # (N,) 3-sigma pixel radius


@dataclass
class _Splat:
    """Per-Gaussian state for one band, kept for the backward sweep."""
    index: int
    cols: slice
    sigma: np.ndarray
    t_before: np.ndarray
    included: np.ndarray
    gauss: np.ndarray
    dx: np.ndarray
    dy: np.ndarray


# ============================================================
# Projection
# ============================================================
def _project(cloud: GaussianCloud, cam: Camera, settings: RenderSettings) -> _Projection:
    n = len(cloud)
    W = cam.world_to_view
    f = cam.focal
    cx, cy = cam.principal_point

    view = (cloud.positions - cam.position) @ W.T
    z = view[:, 2]
    in_front = z > settings.near
    safe_z = np.where(in_front, z, 1.0)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = f / safe_z
    J[:, 0, 2] = -f * view[:, 0] / safe_z ** 2
    J[:, 1, 1] = f / safe_z
    J[:, 1, 2] = -f * view[:, 1] / safe_z ** 2

    sigma = covariances(cloud.log_scales, cloud.rotations)
    cov_view = np.einsum("ij,njk,lk->nil", W, sigma, W)
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_view, J) + settings.low_pass * np.eye(2)

    # Eigenvalues of Sigma are s^2, so its condition number is exp(2 * log-scale spread)
    spread = cloud.log_scales.max(axis=1) - cloud.log_scales.min(axis=1) if n else np.zeros(0)
    well_conditioned = 2.0 * spread < np.log(MAX_CONDITION_NUMBER)

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    finite = np.isfinite(det) & (det > 0) & np.all(np.isfinite(view), axis=1)
    valid = in_front & well_conditioned & finite
    safe_det = np.where(valid, det, 1.0)

    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / safe_det
    conic[:, 1, 1] = cov2d[:, 0, 0] / safe_det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / safe_det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / safe_det

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(np.where(valid, lam_max, 0.0)))

    mean2d = np.stack([f * view[:, 0] / safe_z + cx, f * view[:, 1] / safe_z + cy], axis=1)
    return _Projection(valid, view, mean2d, J, cov_view, cov2d, conic, radius)


def project_gaussian(
    g: Gaussian, cam: Camera, settings: RenderSettings = RenderSettings()
) -> Tuple[np.ndarray, np.ndarray, float]:
    cloud = GaussianCloud(
        positions=g.position[None],
        log_scales=g.log_scale[None],
        rotations=g.rotation[None],
        features_dc=g.feature_dc[None],
        opacity_logits=np.array([g.opacity_logit]),
    )
    proj = _project(cloud, cam, settings)
    depth = float(proj.view[0, 2])
    if depth <= settings.near:
        raise CulledBehindCamera(f"depth {depth:.4f} is behind the near plane {settings.near}")
    return proj.mean2d[0], proj.cov2d[0], depth


# ============================================================
# Rasterization
# ============================================================
def _bands(cam: Camera, settings: RenderSettings) -> List[Tuple[int, int]]:
    step = settings.tile_size
    return [(y0, min(y0 + step, cam.height)) for y0 in range(0, cam.height, step)]


def _column_window(proj: _Projection, i: int, cam: Camera, settings: RenderSettings) -> Optional[slice]:
    if not settings.tile_culling:
        return slice(0, cam.width)
    size = settings.tile_size
    mx, r = proj.mean2d[i, 0], proj.radius[i]
    tx0 = max(int(np.floor((mx - r) / size)), 0)
    tx1 = min(int(np.floor((mx + r) / size)), (cam.width - 1) // size)
    if tx1 < tx0:
        return None
    return slice(tx0 * size, min((tx1 + 1) * size, cam.width))


def _band_touched(proj: _Projection, i: int, y0: int, y1: int, settings: RenderSettings) -> bool:
    if not settings.tile_culling:
        return True
    size = settings.tile_size
    my, r = proj.mean2d[i, 1], proj.radius[i]
    ty0 = int(np.floor((my - r) / size))
    ty1 = int(np.floor((my + r) / size))
    band = y0 // size
    return ty0 <= band <= ty1


def _sorted_visible(proj: _Projection) -> np.ndarray:
    idx = np.flatnonzero(proj.valid)
    order = np.argsort(proj.view[idx, 2], kind="stable")
    return idx[order]


def _composite_band(
    proj: _Projection,
    order: np.ndarray,
    colors: np.ndarray,
    alphas: np.ndarray,
    cam: Camera,
    y0: int,
    y1: int,
    settings: RenderSettings,
    keep: bool,
) -> Tuple[np.ndarray, np.ndarray, List[_Splat]]:
    ys = np.arange(y0, y1) + 0.5
    xs = np.arange(cam.width) + 0.5
    py, px = np.meshgrid(ys, xs, indexing="ij")

    T = np.ones((y1 - y0, cam.width))
    C = np.zeros((y1 - y0, cam.width, 3))
    splats: List[_Splat] = []

    for i in order:
        if not _band_touched(proj, i, y0, y1, settings):
            continue
        cols = _column_window(proj, i, cam, settings)
        if cols is None:
            continue

        dx = px[:, cols] - proj.mean2d[i, 0]
        dy = py[:, cols] - proj.mean2d[i, 1]
        a, b, c = proj.conic[i, 0, 0], proj.conic[i, 0, 1], proj.conic[i, 1, 1]
        gauss = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
        sigma = alphas[i] * gauss

        t_window = T[:, cols]
        included = np.ones_like(sigma, dtype=bool)
        if settings.alpha_cutoff > 0:
            included &= sigma >= settings.alpha_cutoff
        if settings.early_stop_transmittance > 0:
            included &= t_window >= settings.early_stop_transmittance
        sigma = np.where(included, sigma, 0.0)

        if keep:
            splats.append(_Splat(int(i), cols, sigma, t_window.copy(), included, gauss, dx, dy))

        C[:, cols] += colors[i] * (sigma * t_window)[..., None]
        T[:, cols] = t_window * (1.0 - sigma)

    return C, T, splats


def _validate_background(background: Sequence[float]) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape != (3,):
        raise InvalidParameter("background must be an RGB triple")
    return bg


def render(
    cloud: GaussianCloud,
    cam: Camera,
    background: Sequence[float] = (1.0, 1.0, 1.0),
    settings: RenderSettings = RenderSettings(),
) -> RenderedImage:
    bg = _validate_background(background)
    proj = _project(cloud, cam, settings)
    order = _sorted_visible(proj)
    colors = cloud.colors
    alphas = expit(cloud.opacity_logits)

    rgb = np.empty((cam.height, cam.width, 3))
    transmittance = np.empty((cam.height, cam.width))
    for y0, y1 in _bands(cam, settings):
        C, T, _ = _composite_band(proj, order, colors, alphas, cam, y0, y1, settings, keep=False)
        rgb[y0:y1] = C + T[..., None] * bg
        transmittance[y0:y1] = T

    return RenderedImage(
        width=cam.width,
        height=cam.height,
        rgb=np.clip(rgb, 0.0, 1.0),
        alpha=np.clip(1.0 - transmittance, 0.0, 1.0),
    )


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    background: Sequence[float],
    grad_rgb: np.ndarray,
    settings: RenderSettings = RenderSettings(),
) -> RenderGradients:
    """Gradients of sum(grad_rgb * C) with respect to every cloud parameter."""
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (cam.height, cam.width, 3):
        raise ShapeError(f"grad_rgb has shape {grad_rgb.shape}, expected {(cam.height, cam.width, 3)}")
    bg = _validate_background(background)

    n = len(cloud)
    out = RenderGradients.zeros(n)
    if n == 0:
        return out

    proj = _project(cloud, cam, settings)
    order = _sorted_visible(proj)
    colors = cloud.colors
    alphas = expit(cloud.opacity_logits)

    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    g_alpha = np.zeros(n)
    g_color = np.zeros((n, 3))
    touched = np.zeros(n, dtype=bool)

    for y0, y1 in _bands(cam, settings):
        _, T_final, splats = _composite_band(proj, order, colors, alphas, cam, y0, y1, settings, keep=True)
        g = grad_rgb[y0:y1]
        behind = np.broadcast_to(bg, g.shape).copy()

        # Back-to-front: `behind` is the normalized color seen through each splat
        for sp in reversed(splats):
            i, cols = sp.index, sp.cols
            g_win = g[:, cols]
            behind_win = behind[:, cols]

            weight = sp.sigma * sp.t_before
            g_color[i] += np.einsum("hwc,hw->c", g_win, weight)

            d_sigma = sp.t_before * np.einsum("hwc,hwc->hw", g_win, colors[i] - behind_win)
            d_sigma = np.where(sp.included, d_sigma, 0.0)

            behind[:, cols] = colors[i] * sp.sigma[..., None] + (1.0 - sp.sigma)[..., None] * behind_win

            if sp.included.any():
                touched[i] = True
            g_alpha[i] += np.sum(d_sigma * sp.gauss)
            d_power = d_sigma * alphas[i] * sp.gauss
            a, b, c = proj.conic[i, 0, 0], proj.conic[i, 0, 1], proj.conic[i, 1, 1]
            g_mean2d[i, 0] += np.sum(d_power * (a * sp.dx + b * sp.dy))
            g_mean2d[i, 1] += np.sum(d_power * (b * sp.dx + c * sp.dy))
            g_conic[i, 0, 0] += np.sum(d_power * -0.5 * sp.dx * sp.dx)
            off = np.sum(d_power * -0.5 * sp.dx * sp.dy)
            g_conic[i, 0, 1] += off
            g_conic[i, 1, 0] += off
            g_conic[i, 1, 1] += np.sum(d_power * -0.5 * sp.dy * sp.dy)

    # ---- 2D -> 3D chain ----
    g_cov2d = -np.einsum("nij,njk,nkl->nil", proj.conic, g_conic, proj.conic)
    g_cov_view = np.einsum("nji,njk,nkl->nil", proj.J, g_cov2d, proj.J)
    g_J = np.einsum("nij,njk,nkl->nil", g_cov2d + np.transpose(g_cov2d, (0, 2, 1)), proj.J, proj.cov_view)

    W = cam.world_to_view
    f = cam.focal
    x, y = proj.view[:, 0], proj.view[:, 1]
    z = np.where(proj.valid, proj.view[:, 2], 1.0)

    g_view = np.einsum("nji,nj->ni", proj.J, g_mean2d)
    g_view[:, 0] += g_J[:, 0, 2] * (-f / z ** 2)
    g_view[:, 1] += g_J[:, 1, 2] * (-f / z ** 2)
    g_view[:, 2] += (
        g_J[:, 0, 0] * (-f / z ** 2)
        + g_J[:, 0, 2] * (2.0 * f * x / z ** 3)
        + g_J[:, 1, 1] * (-f / z ** 2)
        + g_J[:, 1, 2] * (2.0 * f * y / z ** 3)
    )
    g_view[~proj.valid] = 0.0
    out.positions = g_view @ W

    g_sigma = np.einsum("ji,njk,kl->nil", W, g_cov_view, W)
    g_sigma = np.where(proj.valid[:, None, None], g_sigma, 0.0)
    q_unit = normalize_quaternions(cloud.rotations)
    R = quaternion_to_rotation(q_unit)
    s2 = np.exp(2.0 * cloud.log_scales)

    sym = g_sigma + np.transpose(g_sigma, (0, 2, 1))
    g_R = np.einsum("nij,njk,nk->nik", sym, R, s2)
    g_D = np.einsum("nji,njk,nki->ni", R, g_sigma, R)
    out.log_scales = 2.0 * s2 * g_D

    g_q_unit = rotation_vjp(q_unit, g_R)
    norms = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    out.rotations = (g_q_unit - q_unit * np.sum(q_unit * g_q_unit, axis=1, keepdims=True)) / norms

    raw_color = 0.5 + SH_C0 * cloud.features_dc
    inside = (raw_color > 0.0) & (raw_color < 1.0)
    out.features_dc = np.where(inside, SH_C0 * g_color, 0.0)
    out.opacity_logits = g_alpha * alphas * (1.0 - alphas)

    out.mean2d_norm = np.linalg.norm(g_mean2d, axis=1)
    out.visits = touched.astype(np.int64)
    return out


# ============================================================
# PNG I/O
# ============================================================
def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: RenderedImage, path: str, with_alpha: bool = False) -> None:
    if with_alpha:
        rgba = np.concatenate([image.rgb, image.alpha[..., None]], axis=-1)
        Image.fromarray(to_uint8(rgba), "RGBA").save(path)
    else:
        Image.fromarray(to_uint8(image.rgb), "RGB").save(path)


def load_png(path: str, size: Optional[int] = None) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0
