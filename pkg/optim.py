# optim.py
"""
Adam with bias correction over named parameter groups, plus the decoupled
weight-decay (AdamW) variant used for the score adapter.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from errors import RejectedStep, ShapeError


@dataclass
class AdamState:
    betas: Tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-15
    weight_decay: float = 0.0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def ensure(self, params: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p, dtype=np.float64)
                self.v[name] = np.zeros_like(p, dtype=np.float64)
            elif self.m[name].shape != np.shape(p):
                raise ShapeError(f"optimizer moments for {name} have shape {self.m[name].shape}, params {np.shape(p)}")

    def remap(self, parent_index: np.ndarray) -> None:
        """Rows follow a structural edit: row k takes the moments of row parent_index[k]."""
        idx = np.asarray(parent_index, dtype=np.int64)
        for name in self.m:
            self.m[name] = self.m[name][idx].copy()
            self.v[name] = self.v[name][idx].copy()

    def copy(self) -> "AdamState":
        return AdamState(
            betas=self.betas,
            eps=self.eps,
            weight_decay=self.weight_decay,
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            step=self.step,
        )


def adamw_state(weight_decay: float = 0.01) -> AdamState:
    return AdamState(betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise RejectedStep(f"non-finite gradient in {name}")


def adam_update(
    state: AdamState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: Union[float, Mapping[str, float]],
) -> Dict[str, np.ndarray]:
    """
    One bias-corrected step. Returns new arrays; `state` is advanced in place
    only after every group has been checked.
    """
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for {name}")
        if np.shape(grads[name]) != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {np.shape(grads[name])}, params {np.shape(p)}")
    check_finite(grads)
    state.ensure(params)

    b1, b2 = state.betas
    step = state.step + 1
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step

    out = {}
    for name, p in params.items():
        rate = lr[name] if isinstance(lr, Mapping) else lr
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v

        p = np.asarray(p, dtype=np.float64)
        if state.weight_decay:
            p = p * (1.0 - rate * state.weight_decay)
        out[name] = p - rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    state.step = step
    return out
