from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor
from .utils import DimensionError

BETAS = (0.9, 0.999)
EPS = 1e-8

Params = Sequence[Tuple[str, Tensor]]


@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name; only trainable parameters get buffers."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params) -> "OptimizerState":
        st = cls()
        for name, t in params:
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
        return st


def collect_grads(params: Params) -> Dict[str, np.ndarray]:
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params}


def adamw_step(
    params: Params,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 5e-2,
    betas: Tuple[float, float] = BETAS,
    eps: float = EPS,
) -> None:
    """One in-place AdamW update: decoupled decay first, then the bias-corrected Adam step."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"adamw: grad {g.shape} vs param {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def poly_lr(step: int, total: int, base: float = 1e-4, power: float = 0.9) -> float:
    if total <= 0:
        return base
    if not 0 <= step <= total:
        raise DimensionError(f"poly_lr: step {step} outside [0, {total}]")
    return base * (1.0 - step / total) ** power


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so the global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def state_arrays(state: OptimizerState) -> Dict[str, Dict[str, np.ndarray]]:
    return {"adam_m": dict(state.m), "adam_v": dict(state.v)}


def restore_state(step: int, m: Optional[Mapping[str, np.ndarray]], v: Optional[Mapping[str, np.ndarray]]) -> OptimizerState:
    return OptimizerState(
        step=step,
        m={k: np.array(a, dtype=np.float64) for k, a in (m or {}).items()},
        v={k: np.array(a, dtype=np.float64) for k, a in (v or {}).items()},
    )
