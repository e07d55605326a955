"""Decoupled-weight-decay Adam on named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class GradientError(RuntimeError):
    """A non-finite gradient reached the optimizer."""


@dataclass
class AdamWState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _decays(name: str, param: Tensor) -> bool:
    # Biases, norm gains and embeddings (all 1-d) are exempt from decay.
    return param.data.ndim >= 2


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update, in place, for every name present in grads.

    Deterministic given fixed inputs; parameters are updated as
    p <- p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps).
    """
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise GradientError(
                f"non-finite gradient for '{name}': {bad}/{g.size} bad entries "
                f"(|g|max={np.nanmax(np.abs(g)):.3e})")
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        if weight_decay and _decays(name, p):
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
