"""Training objective: masked prediction loss, distance-weighted context
loss, their sum, the EMA teacher update, and the step schedules.

The prediction loss is the mean (over levels, masked tokens and channels) of
|prediction - target|; targets always come from the no-grad teacher path, so
the stop-gradient holds by construction. The context loss applies the same
residual on visible tokens, weighted per token by
ramp(step) * lambda / sqrt(d_min), where d_min is the token's distance to
the nearest masked token and ramp rises linearly over a configured window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CONSTANT = "constant"
WEIGHTED = "weighted"


@dataclass(frozen=True)
class LossWeights:
    lambda_video: float = 0.5
    lambda_image: float = 0.7
    warmup_start_frac: float = 0.37
    warmup_end_frac: float = 0.74
    scheme: str = WEIGHTED

    def __post_init__(self):
        if self.lambda_video < 0 or self.lambda_image < 0:
            raise ValueError("lambda values must be >= 0")
        if not (0.0 <= self.warmup_start_frac < self.warmup_end_frac <= 1.0):
            raise ValueError("warm-up window must satisfy 0 <= start < end <= 1")
        if self.scheme not in (CONSTANT, WEIGHTED):
            raise ValueError(f"unknown weighting scheme {self.scheme!r}")

    def lambda_for(self, modality: str) -> float:
        return self.lambda_video if modality == "video" else self.lambda_image


def lambda_ramp(step: int, total_steps: int, weights: LossWeights) -> float:
    """Linear 0 -> 1 ramp over the configured fraction window of the run."""
    start = weights.warmup_start_frac * total_steps
    end = weights.warmup_end_frac * total_steps
    if step <= start:
        return 0.0
    if step >= end:
        return 1.0
    return (step - start) / (end - start)


def distance_weights(d_min, lambda_base: float, weights: LossWeights):
    """Post-warm-up per-token weight: lambda / sqrt(d_min) (or constant)."""
    d = np.asarray(d_min, dtype=np.float64)
    if np.any(d < 1):
        raise ValueError("d_min must be >= 1 for context tokens")
    if weights.scheme == CONSTANT:
        return np.full_like(d, lambda_base)
    return lambda_base / np.sqrt(d)


def lambda_weight(d_min, lambda_base: float, step: int, total_steps: int,
                  weights: LossWeights):
    """Per-token context weight: ramp(step) * lambda / sqrt(d_min).

    d_min may be a scalar or an array; the constant scheme ignores the
    distance. d_min == 0 would mean the token is masked, which violates the
    mask/context partition.
    """
    out = lambda_ramp(step, total_steps, weights) * distance_weights(
        d_min, lambda_base, weights)
    return float(out) if np.ndim(d_min) == 0 else out


def _level_rows(preds: Sequence[Tensor], targets: Sequence[np.ndarray], rows):
    if len(preds) != len(targets):
        raise ValueError("preds and targets must have the same number of levels")
    rows = np.asarray(rows, dtype=np.intp)
    for p, t in zip(preds, targets):
        if p.shape != np.asarray(t).shape:
            raise ValueError(f"pred/target shape mismatch: {p.shape} vs {np.asarray(t).shape}")
    return rows


def prediction_loss(preds: Sequence[Tensor], targets: Sequence[np.ndarray],
                    masked_rows) -> Tensor:
    """Mean over K levels of the masked-token L1 residual.

    preds are per-level [N, D] predictor outputs; targets are the matching
    teacher features (plain arrays: no gradient by construction).
    """
    rows = _level_rows(preds, targets, masked_rows)
    if rows.size == 0:
        raise ValueError("prediction_loss needs a nonempty masked set")
    k = len(preds)
    total = None
    for p, t in zip(preds, targets):
        term = T.mean_l1(T.take_rows(p, rows), Tensor(np.asarray(t)[rows]))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / k)


def context_loss(preds: Sequence[Tensor], targets: Sequence[np.ndarray],
                 context_rows, token_weights) -> Tensor:
    """Weighted mean over context tokens of the per-token L1 residual,
    averaged over K levels: (1/|C|) sum_i w_i * mean_d |p - t|."""
    rows = _level_rows(preds, targets, context_rows)
    if rows.size == 0:
        raise ValueError("context_loss needs a nonempty context set")
    w = np.asarray(token_weights, dtype=np.float64)
    if w.shape != (rows.size,):
        raise ValueError(f"need one weight per context token, got {w.shape}")
    k = len(preds)
    total = None
    for p, t in zip(preds, targets):
        diff = T.absolute(T.sub(T.take_rows(p, rows), Tensor(np.asarray(t)[rows])))
        per_token = T.mean_axis(diff, -1)  # [|C|]
        term = T.sum_all(T.mul(per_token, Tensor(w.astype(diff.dtype))))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / (k * rows.size))


def dense_loss(preds: Sequence[Tensor], targets: Sequence[np.ndarray],
               masked_rows, context_rows, token_weights) -> tuple[Tensor, dict]:
    """Prediction loss plus context loss, with the parts reported."""
    lp = prediction_loss(preds, targets, masked_rows)
    lc = context_loss(preds, targets, context_rows, token_weights)
    total = T.add(lp, lc)
    return total, {"loss_predict": lp.item(), "loss_ctx": lc.item()}


# ----------------------------------------------------------------------
# teacher update and diagnostics

def ema_update(teacher: Mapping[str, Tensor], student: Mapping[str, Tensor],
               momentum: float) -> None:
    """theta_bar <- m * theta_bar + (1 - m) * theta, in place, element-wise."""
    for name, t in teacher.items():
        s = student[name]
        if t.data.shape != s.data.shape:
            raise ValueError(f"teacher/student shape mismatch for '{name}'")
        t.data *= momentum
        t.data += (1.0 - momentum) * s.data


def feature_std(features: np.ndarray) -> np.ndarray:
    """Per-channel standard deviation across tokens (collapse sentinel)."""
    flat = np.asarray(features).reshape(-1, features.shape[-1])
    return flat.std(axis=0)


# ----------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class Schedule:
    """Warmup -> constant -> cooldown learning-rate plan.

    Continuous at both joins unless cooldown_start_lr is set (a restart
    value for the decay phase). total_steps includes the cooldown.
    """

    start_lr: float = 1e-4
    constant_lr: float = 5.25e-4
    final_lr: float = 1e-6
    warmup_steps: int = 200
    total_steps: int = 2200
    cooldown_steps: int = 200
    cooldown_start_lr: float | None = None

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps - self.cooldown_steps:
            raise ValueError("phases must fit: warmup + constant + cooldown = total")
        if self.cooldown_steps < 0 or self.total_steps <= 0:
            raise ValueError("step counts must be positive")

    @property
    def cooldown_start(self) -> int:
        return self.total_steps - self.cooldown_steps


def lr_at(step: int, sched: Schedule) -> float:
    """Learning rate at an integer step in [0, total_steps]."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        frac = step / sched.warmup_steps
        return sched.start_lr + frac * (sched.constant_lr - sched.start_lr)
    if step < sched.cooldown_start or sched.cooldown_steps == 0:
        return sched.constant_lr
    top = sched.cooldown_start_lr if sched.cooldown_start_lr is not None else sched.constant_lr
    frac = (step - sched.cooldown_start) / sched.cooldown_steps
    return top + frac * (sched.final_lr - top)


@dataclass(frozen=True)
class ResolutionPlan:
    """Input geometry per phase; switches once at cooldown start."""

    image_res: int = 32
    video_frames: int = 8
    video_res: int = 32
    cooldown_image_res: int = 48
    cooldown_video_frames: int = 12
    cooldown_video_res: int = 48


def resolution_at(step: int, sched: Schedule, plan: ResolutionPlan) -> tuple[int, int, int]:
    """(image resolution, video frame count, video resolution) at a step."""
    if sched.cooldown_steps and step >= sched.cooldown_start:
        return (plan.cooldown_image_res, plan.cooldown_video_frames,
                plan.cooldown_video_res)
    return (plan.image_res, plan.video_frames, plan.video_res)
