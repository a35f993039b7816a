# score_adapter.py
"""
Trainable noise predictor for rendered images, trained online with the
denoising objective ||pred(x_t, t, view, prompt) - target||^2.

A two-hidden-layer tanh MLP over the diffused image resized to a fixed
working resolution, conditioned on a sinusoidal timestep embedding, the
camera pose and a prompt one-hot. The output layer starts at zero, so a
fresh adapter predicts zero noise everywhere.
"""
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, Tuple

import numpy as np
from tqdm import tqdm

from diffusion_math import Condition, NoiseSchedule, v_to_eps, velocity_target
from errors import FormatError, InvalidCondition, InvalidParameter, IoError, RejectedStep
from optim import AdamState, adam_update

TIME_EMBED_DIM = 16
CAMERA_EMBED_DIM = 5
CHECKPOINT_MAGIC = b"CSDADPT1"


@dataclass(frozen=True)
class AdapterConfig:
    resolution: int = 32
    hidden: int = 128
    num_prompts: int = 1
    prediction: str = "eps"       # "eps" | "v"
    channels: str = "rgb"         # "rgb" | "gray"
    seed: int = 0

    def validate(self) -> None:
        if self.resolution < 1 or self.hidden < 1 or self.num_prompts < 1:
            raise InvalidParameter("adapter resolution, hidden width and prompt count must be >= 1")
        if self.prediction not in ("eps", "v"):
            raise InvalidParameter("adapter prediction must be 'eps' or 'v'")
        if self.channels not in ("rgb", "gray"):
            raise InvalidParameter("adapter channels must be 'rgb' or 'gray'")

    @property
    def in_channels(self) -> int:
        return 3 if self.channels == "rgb" else 1


# ============================================================
# Resizing
# ============================================================
def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation along one axis."""
    if n_out == n_in:
        return np.eye(n_in)
    M = np.zeros((n_out, n_in))
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    rows = np.arange(n_out)
    np.add.at(M, (rows, lo), 1.0 - w)
    np.add.at(M, (rows, hi), w)
    return M


def timestep_embedding(t: float, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = 1000.0 * t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def camera_embedding(cond: Condition) -> np.ndarray:
    cam = cond.camera
    az, el = math.radians(cam.azimuth), math.radians(cam.elevation)
    return np.array([math.sin(az), math.cos(az), math.sin(el), math.cos(el), cam.radius])


# ============================================================
# Model
# ============================================================
@dataclass
class AdapterModel:
    config: AdapterConfig
    schedule: NoiseSchedule
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.config.validate()
        if not self.params:
            self.params = init_params(self.config)

    @property
    def input_dim(self) -> int:
        r = self.config.resolution
        return r * r * self.config.in_channels + TIME_EMBED_DIM + CAMERA_EMBED_DIM + self.config.num_prompts

    def predict_noise(self, x_t: np.ndarray, t: float, cond: Condition) -> np.ndarray:
        return adapter_predict(self, x_t, t, cond)

    def copy(self) -> "AdapterModel":
        return AdapterModel(self.config, self.schedule, {k: v.copy() for k, v in self.params.items()})


def init_params(config: AdapterConfig) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    r = config.resolution
    n_out = r * r * config.in_channels
    n_in = n_out + TIME_EMBED_DIM + CAMERA_EMBED_DIM + config.num_prompts
    h = config.hidden
    return {
        "W1": rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(h, n_in)),
        "b1": np.zeros(h),
        "W2": rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, h)),
        "b2": np.zeros(h),
        "W3": np.zeros((n_out, h)),
        "b3": np.zeros(n_out),
    }


@dataclass
class _Forward:
    shape: Tuple[int, ...]
    Ry: np.ndarray
    Rx: np.ndarray
    Uy: np.ndarray
    Ux: np.ndarray
    z: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    raw: np.ndarray


def _check_condition(model: AdapterModel, cond: Condition) -> None:
    if cond.camera is None:
        raise InvalidCondition("the adapter needs a camera in its condition")
    if cond.prompt_id is None or not 0 <= cond.prompt_id < model.config.num_prompts:
        raise InvalidCondition(f"prompt id {cond.prompt_id} outside [0, {model.config.num_prompts})")


def _forward(model: AdapterModel, x_t: np.ndarray, t: float, cond: Condition) -> _Forward:
    _check_condition(model, cond)
    if x_t.ndim != 3 or x_t.shape[2] != 3:
        raise InvalidParameter(f"adapter input must be an (H, W, 3) image, got {x_t.shape}")
    cfg = model.config
    p = model.params
    H, W = x_t.shape[:2]
    r = cfg.resolution

    Ry, Rx = bilinear_matrix(r, H), bilinear_matrix(r, W)
    Uy, Ux = bilinear_matrix(H, r), bilinear_matrix(W, r)

    src = x_t if cfg.channels == "rgb" else x_t.mean(axis=2, keepdims=True)
    small = np.einsum("ih,hwc,jw->ijc", Ry, src, Rx)

    onehot = np.zeros(cfg.num_prompts)
    onehot[cond.prompt_id] = 1.0
    z = np.concatenate([small.reshape(-1), timestep_embedding(t), camera_embedding(cond), onehot])

    h1 = np.tanh(p["W1"] @ z + p["b1"])
    h2 = np.tanh(p["W2"] @ h1 + p["b2"])
    out_small = (p["W3"] @ h2 + p["b3"]).reshape(r, r, cfg.in_channels)
    raw = np.einsum("hi,ijc,wj->hwc", Uy, out_small, Ux)
    if cfg.channels == "gray":
        raw = np.repeat(raw, 3, axis=2)
    return _Forward(x_t.shape, Ry, Rx, Uy, Ux, z, h1, h2, raw)


def adapter_predict(model: AdapterModel, x_t: np.ndarray, t: float, cond: Condition) -> np.ndarray:
    """Noise prediction; v-mode outputs are converted to epsilon."""
    x_t = np.asarray(x_t, dtype=np.float64)
    raw = _forward(model, x_t, t, cond).raw
    if model.config.prediction == "v":
        return v_to_eps(raw, x_t, t, model.schedule)
    return raw


def training_target(model: AdapterModel, x0: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
    if model.config.prediction == "v":
        return velocity_target(x0, eps, t, model.schedule)
    return np.asarray(eps, dtype=np.float64)


def adapter_loss_and_grads(
    model: AdapterModel, x0: np.ndarray, t: float, eps: np.ndarray, cond: Condition
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean squared denoising error and its gradient with respect to every weight."""
    x0 = np.asarray(x0, dtype=np.float64)
    alpha, sigma = model.schedule.alpha_sigma(t)
    x_t = alpha * x0 + sigma * np.asarray(eps, dtype=np.float64)
    fw = _forward(model, x_t, t, cond)
    residual = fw.raw - training_target(model, x0, t, eps)
    loss = float(np.mean(residual ** 2))

    p = model.params
    g_raw = 2.0 * residual / residual.size
    if model.config.channels == "gray":
        g_raw = g_raw.sum(axis=2, keepdims=True)
    g_small = np.einsum("hi,hwc,wj->ijc", fw.Uy, g_raw, fw.Ux).reshape(-1)

    grads = {"W3": np.outer(g_small, fw.h2), "b3": g_small}
    g_a2 = (p["W3"].T @ g_small) * (1.0 - fw.h2 ** 2)
    grads["W2"] = np.outer(g_a2, fw.h1)
    grads["b2"] = g_a2
    g_a1 = (p["W2"].T @ g_a2) * (1.0 - fw.h1 ** 2)
    grads["W1"] = np.outer(g_a1, fw.z)
    grads["b1"] = g_a1
    return loss, grads


def adapter_train_step(
    model: AdapterModel,
    state: AdamState,
    x0: np.ndarray,
    t: float,
    eps: np.ndarray,
    cond: Condition,
    lr: float,
) -> float:
    """One AdamW step on the denoising loss; returns the pre-step loss."""
    loss, grads = adapter_loss_and_grads(model, x0, t, eps, cond)
    if not math.isfinite(loss):
        tqdm.write(f"[ADAPTER] rejected step: loss={loss}")
        raise RejectedStep("adapter loss is not finite")
    model.params = adam_update(state, model.params, grads, lr)
    return loss


# ============================================================
# Checkpoints: magic, u64 header length, JSON header, f8 payload
# ============================================================
def save_adapter(model: AdapterModel, path: str) -> None:
    names = sorted(model.params)
    header = {
        "config": asdict(model.config),
        "dtype": "<f8",
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for n in names:
                f.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())
    except OSError as ex:
        raise IoError(f"cannot write adapter to {path}: {ex}") from ex


def load_adapter(path: str, schedule: NoiseSchedule) -> AdapterModel:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as ex:
        raise IoError(f"cannot read adapter from {path}: {ex}") from ex

    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise FormatError("not an adapter checkpoint", offset=0)
    pos = len(CHECKPOINT_MAGIC)
    (length,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos:pos + length].decode("utf-8"))
        config = AdapterConfig(**header["config"])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as ex:
        raise FormatError(f"malformed adapter header: {ex}", offset=pos) from ex
    pos += length

    params = {}
    for entry in tensors:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise FormatError(f"truncated tensor {entry['name']}", offset=pos)
        params[entry["name"]] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    return AdapterModel(config, schedule, params)
