"""Pretraining and distillation loops.

Each step: the EMA teacher encodes the full token set of every sample (no
gradients), the student encodes only visible tokens, the fused context plus
mask tokens go through the predictor, and the dense loss (masked prediction
+ weighted context) is applied at every tapped level. Image and video
samples are processed as separate shards whose gradients are aggregated by
sample count, reproducing the single-mixed-batch update. One AdamW step and
one EMA teacher update follow.

All randomness is keyed by (run seed, stream name, step, sample index), so
trajectories are bitwise reproducible and resuming from a checkpoint
continues the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, run_config_to_kv, format_kv
from .data import training_batch
from .masking import MaskParams, MaskSpec, sample_mask
from .model import ModelConfig, PatchGrid, Tensor
from .objective import (LossWeights, distance_weights, ema_update, feature_std,
                        lambda_ramp, lr_at, resolution_at)
from .optim import AdamWState, adamw_step
from .rng import stream


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainState:
    step: int
    seed: int
    params: dict[str, Tensor]
    teacher: dict[str, Tensor]
    opt: AdamWState
    config_hash: str
    sentinel0: np.ndarray | None = None  # per-channel teacher std at step 0


def init_train_state(cfg: RunConfig, dtype=np.float32) -> TrainState:
    params = M.init_params(cfg.model, stream(cfg.seed, "init"), dtype=dtype)
    teacher = {n: Tensor(params[n].data.copy()) for n in M.encoder_param_names(params)}
    return TrainState(step=0, seed=cfg.seed, params=params, teacher=teacher,
                      opt=AdamWState(), config_hash=config_hash(cfg))


# ----------------------------------------------------------------------
# single-shard loss (shared by pretraining and distillation)

@dataclass
class ShardResult:
    loss: Tensor
    n_samples: int
    loss_predict: float
    loss_ctx: float
    teacher_last: np.ndarray  # [B, N, D] teacher features (sentinel input)


def _teacher_targets(teacher: dict[str, Tensor], arrays: list[np.ndarray],
                     modality: str, cfg: ModelConfig, scales) -> tuple[list[np.ndarray], PatchGrid]:
    toks, grid = zip(*(M.tokenize(a, modality, teacher, cfg) for a in arrays))
    grid = grid[0]
    batch = T.concat([T.reshape(t, (1,) + t.shape) for t in toks], axis=0)
    mlf = M.encode(teacher, batch, grid.coords(), grid, cfg, scales)
    return [lvl.data for lvl in mlf.levels], grid


def shard_loss(params: dict[str, Tensor], cfg: ModelConfig,
               arrays: list[np.ndarray], modality: str,
               masks: list[MaskSpec], targets: list[np.ndarray],
               lam: float, ramp: float, weights: LossWeights,
               scales=(1.0, 1.0, 1.0)) -> ShardResult:
    """Dense loss for one same-geometry, same-modality shard.

    targets: per-level [B, N, D] teacher features in grid token order.
    Per-sample losses are averaged over the shard, so the gradient of the
    returned scalar is the shard-mean gradient.
    """
    b = len(arrays)
    grid = masks[0].grid
    n = grid.tokens
    coords_full = grid.coords()
    k = len(targets)

    # Student encoder runs once over the whole shard: ragged visible sets are
    # zero-padded to the widest one and padded keys are masked out of every
    # attention row, which is exact for the valid tokens.
    n_ctx = [spec.context.size for spec in masks]
    n_max = max(n_ctx)
    patches0, _ = M.patchify(arrays[0], modality, cfg)
    padded = np.zeros((b, n_max, patches0.shape[1]))
    vis_coords = np.zeros((b, n_max, 3), dtype=np.int64)
    key_bias = np.full((b, 1, 1, n_max), -1e9)
    for i, (arr, spec) in enumerate(zip(arrays, masks)):
        patches, _ = (patches0, None) if i == 0 else M.patchify(arr, modality, cfg)
        padded[i, :n_ctx[i]] = patches[spec.context]
        vis_coords[i, :n_ctx[i]] = coords_full[spec.context]
        key_bias[i, 0, 0, :n_ctx[i]] = 0.0
    tokens = M.project_tokens(padded, modality, params, cfg)
    mlf = M.encode(params, tokens, vis_coords, grid, cfg, scales, attn_bias=key_bias)
    fused = M.fuse_levels(params, mlf)  # [B, n_max, D_p]

    # Predictor row b,j gathers either a fused context token or the shared
    # mask-token row appended after the flattened batch.
    dp = fused.shape[-1]
    row_idx = np.empty((b, n), dtype=np.intp)
    row_coords = np.empty((b, n, 3), dtype=np.int64)
    perms = np.empty((b, n), dtype=np.intp)
    w_pred = np.zeros((b, n))
    w_ctx = np.zeros((b, n))
    mask_row = b * n_max
    for i, spec in enumerate(masks):
        ctx, msk = spec.context, spec.masked
        n_c = ctx.size
        row_idx[i, :n_c] = i * n_max + np.arange(n_c)
        row_idx[i, n_c:] = mask_row
        perm = np.concatenate([ctx, msk])
        perms[i] = perm
        row_coords[i] = coords_full[perm]
        w_pred[i, n_c:] = 1.0 / (b * k * msk.size)
        token_w = ramp * distance_weights(spec.d_min, lam, weights)
        w_ctx[i, :n_c] = token_w / (b * k * n_c)

    pool = T.concat([T.reshape(fused, (b * n_max, dp)),
                     T.reshape(params["pred.mask_token"], (1, dp))], axis=0)
    batch_rows = T.reshape(T.take_rows(pool, row_idx.ravel()), (b, n, dp))
    if cfg.multimodal_tokenizer:
        batch_rows = T.add(batch_rows, params[f"pred.mod.{modality}"])
    preds = M.run_predictor(params, batch_rows, row_coords, cfg, scales)

    dtype = batch_rows.dtype
    wp = Tensor(w_pred.astype(dtype))
    wc = Tensor(w_ctx.astype(dtype))
    total_pred = None
    total_ctx = None
    batch_idx = np.arange(b)[:, None]
    for pred_k, tgt_k in zip(preds, targets):
        aligned = tgt_k[batch_idx, perms]  # teacher rows in predictor row order
        per_row = T.mean_axis(T.absolute(T.sub(pred_k, Tensor(aligned))), -1)
        lp = T.sum_all(T.mul(per_row, wp))
        lc = T.sum_all(T.mul(per_row, wc))
        total_pred = lp if total_pred is None else T.add(total_pred, lp)
        total_ctx = lc if total_ctx is None else T.add(total_ctx, lc)

    loss = T.add(total_pred, total_ctx)
    return ShardResult(loss=loss, n_samples=b,
                       loss_predict=total_pred.item(), loss_ctx=total_ctx.item(),
                       teacher_last=targets[-1])


def aggregate_modality_grads(image_grads: dict[str, np.ndarray] | None,
                             video_grads: dict[str, np.ndarray] | None,
                             batch_size_image: int,
                             batch_size_video: int) -> dict[str, np.ndarray]:
    """Sample-count-weighted combination of per-shard mean gradients.

    Equals the gradient a single mixed batch of both shards would produce.
    A missing modality contributes zeros.
    """
    total = batch_size_image + batch_size_video
    if total == 0:
        raise ValueError("empty batch")
    if image_grads is not None and video_grads is not None:
        keys = set(image_grads) | set(video_grads)
        out = {}
        for k in keys:
            gi = image_grads.get(k)
            gv = video_grads.get(k)
            if gi is not None and gv is not None and gi.shape != gv.shape:
                raise ValueError(f"gradient shape mismatch for '{k}'")
            acc = np.zeros_like(gi if gi is not None else gv)
            if gi is not None:
                acc += batch_size_image * gi
            if gv is not None:
                acc += batch_size_video * gv
            out[k] = acc / total
        return out
    grads = image_grads if image_grads is not None else video_grads
    if grads is None:
        raise ValueError("no gradients to aggregate")
    w = (batch_size_image if image_grads is not None else batch_size_video) / total
    return {k: g * w for k, g in grads.items()}


def _collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    for p in params.values():
        p.grad = None
    return grads


def _mask_for(seed: int, step: int, sample_idx: int, grid: PatchGrid,
              mask_params: MaskParams) -> MaskSpec:
    return sample_mask(grid, mask_params, stream(seed, "masks", step, sample_idx))


def _scales(cfg: RunConfig, res: tuple[int, int, int], modality: str):
    plan = cfg.resolution
    if modality == "image":
        s = res[0] / plan.image_res
        return (1.0, s, s)
    return (res[1] / plan.video_frames, res[2] / plan.video_res, res[2] / plan.video_res)


def pretrain_step(batch: list[tuple[str, np.ndarray]], state: TrainState,
                  cfg: RunConfig) -> dict:
    """One optimizer step over a mixed batch; images then videos."""
    step = state.step
    res = resolution_at(step, cfg.schedule, cfg.resolution)
    ramp = lambda_ramp(step, cfg.schedule.total_steps, cfg.loss)

    shard_grads: dict[str, dict[str, np.ndarray] | None] = {"image": None, "video": None}
    shard_stats: dict[str, ShardResult | None] = {"image": None, "video": None}
    counts = {"image": 0, "video": 0}

    sample_idx = 0
    for modality in ("image", "video"):
        arrays = [a for m, a in batch if m == modality]
        if not arrays:
            sample_idx += 0
            continue
        scales = _scales(cfg, res, modality)
        targets, grid = _teacher_targets(state.teacher, arrays, modality,
                                         cfg.model, scales)
        masks = []
        for a in arrays:
            masks.append(_mask_for(state.seed, step, sample_idx, grid, cfg.mask))
            sample_idx += 1
        result = shard_loss(state.params, cfg.model, arrays, modality, masks,
                            targets, cfg.lambda_for(modality), ramp, cfg.loss,
                            scales)
        if not np.isfinite(result.loss.data):
            raise TrainingAborted(
                f"non-finite loss at step {step} ({modality} shard)")
        result.loss.backward()
        shard_grads[modality] = _collect_grads(state.params)
        shard_stats[modality] = result
        counts[modality] = result.n_samples

    grads = aggregate_modality_grads(shard_grads["image"], shard_grads["video"],
                                     counts["image"], counts["video"])

    # teacher must never accumulate gradient
    for name, t in state.teacher.items():
        assert t.grad is None, f"teacher parameter '{name}' received gradient"

    lr = lr_at(step, cfg.schedule)
    adamw_step(state.params, grads, state.opt, lr, cfg.weight_decay)
    ema_update(state.teacher,
               {n: state.params[n] for n in state.teacher}, cfg.ema)
    state.step = step + 1

    total = counts["image"] + counts["video"]
    metrics = {"step": step, "lr": lr, "lambda_ramp": ramp}
    loss = lp = lc = 0.0
    for modality in ("image", "video"):
        r = shard_stats[modality]
        if r is None:
            continue
        w = counts[modality] / total
        lp += w * r.loss_predict
        lc += w * r.loss_ctx
        loss += w * (r.loss_predict + r.loss_ctx)
    metrics.update({"loss": loss, "loss_predict": lp, "loss_ctx": lc})
    return metrics


def _sentinel(state: TrainState, cfg: RunConfig) -> dict:
    """Per-channel teacher-feature std on a held-out probe batch."""
    res = resolution_at(min(state.step, cfg.schedule.cooldown_start),
                        cfg.schedule, cfg.resolution)
    batch = training_batch(state.seed ^ 0x5EED, -1, 4, 0, res[0], res[1], res[2],
                           num_objects=cfg.scene_objects, noise=cfg.scene_noise,
                           max_speed=cfg.scene_speed)
    arrays = [a for _, a in batch]
    targets, _ = _teacher_targets(state.teacher, arrays, "image", cfg.model,
                                  _scales(cfg, res, "image"))
    std = feature_std(targets[-1])
    if state.sentinel0 is None:
        state.sentinel0 = std.copy()
    ratio = std / np.maximum(state.sentinel0, 1e-12)
    return {"sentinel_min_ratio": float(ratio.min()),
            "sentinel_mean_std": float(std.mean())}


# ----------------------------------------------------------------------
# checkpoint plumbing

def _state_sections(state: TrainState) -> dict[str, dict[str, np.ndarray]]:
    sections = {
        "param": {n: p.data for n, p in state.params.items()},
        "teacher": {n: p.data for n, p in state.teacher.items()},
        "opt_m": state.opt.m,
        "opt_v": state.opt.v,
        "meta": {"adam_t": np.asarray([state.opt.t], dtype=np.float32)},
    }
    if state.sentinel0 is not None:
        sections["meta"]["sentinel0"] = state.sentinel0.astype(np.float32)
    return sections


def save_train_state(state: TrainState, path) -> None:
    save_checkpoint(path, state.step, state.seed, state.config_hash,
                    _state_sections(state))


def load_train_state(path, cfg: RunConfig) -> TrainState:
    step, seed, ck_hash, sections = load_checkpoint(path)
    expected = config_hash(cfg)
    if ck_hash != expected:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {ck_hash}, config {expected}")
    state = init_train_state(cfg)
    for name, p in state.params.items():
        if name not in sections["param"]:
            raise CheckpointError(f"checkpoint missing parameter '{name}'")
        if sections["param"][name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for parameter '{name}'")
        p.data = sections["param"][name]
    extra = set(sections["param"]) - set(state.params)
    if extra:
        raise CheckpointError(f"unknown tensor names in checkpoint: {sorted(extra)[:3]}")
    for name, t in state.teacher.items():
        t.data = sections["teacher"][name]
    state.opt.m = dict(sections.get("opt_m", {}))
    state.opt.v = dict(sections.get("opt_v", {}))
    meta = sections.get("meta", {})
    state.opt.t = int(meta.get("adam_t", np.zeros(1))[0])
    if "sentinel0" in meta:
        state.sentinel0 = meta["sentinel0"]
    state.step = step
    state.seed = seed
    return state


# ----------------------------------------------------------------------
# full runs

def _batch_for_step(cfg: RunConfig, seed: int, step: int) -> list[tuple[str, np.ndarray]]:
    res = resolution_at(step, cfg.schedule, cfg.resolution)
    return training_batch(seed, step, cfg.image_batch, cfg.video_batch,
                          res[0], res[1], res[2], num_objects=cfg.scene_objects,
                          noise=cfg.scene_noise, max_speed=cfg.scene_speed)


def run_pretraining(cfg: RunConfig, out_dir, resume_from=None,
                    log_every: int = 10) -> Path:
    """Execute the full warmup/constant/cooldown run; returns the final
    checkpoint path. Writes metrics.jsonl, config.txt and run.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_kv(run_config_to_kv(cfg)), encoding="utf-8")
    run_meta = {
        "config_hash": config_hash(cfg),
        "distance_metric": cfg.mask.metric,
        "image_batch": cfg.image_batch,
        "video_batch": cfg.video_batch,
        "threads": "numpy-default",
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "run.json").write_text(json.dumps(run_meta, indent=2) + "\n", encoding="utf-8")

    if resume_from is not None:
        state = load_train_state(resume_from, cfg)
    else:
        state = init_train_state(cfg)
    last_good = None
    mode = "a" if resume_from is not None else "w"
    with open(out / "metrics.jsonl", mode, encoding="utf-8") as log:
        if state.step == 0:
            sent = _sentinel(state, cfg)
            log.write(json.dumps({"step": 0, **sent}) + "\n")
        while state.step < cfg.schedule.total_steps:
            batch = _batch_for_step(cfg, state.seed, state.step)
            try:
                metrics = pretrain_step(batch, state, cfg)
            except TrainingAborted as exc:
                raise TrainingAborted(
                    f"{exc} (last good checkpoint: {last_good})") from exc
            if state.step % cfg.eval_interval == 0 or state.step == cfg.schedule.total_steps:
                metrics.update(_sentinel(state, cfg))
            if state.step % log_every == 0 or "sentinel_min_ratio" in metrics:
                log.write(json.dumps(metrics) + "\n")
            if state.step % cfg.checkpoint_interval == 0:
                last_good = out / f"ckpt_{state.step:07d}.mjck"
                save_train_state(state, last_good)
    final = out / "final.mjck"
    save_train_state(state, final)
    return final


# ----------------------------------------------------------------------
# distillation

@dataclass
class DistillState:
    step: int
    seed: int
    params: dict[str, Tensor]
    student_ema: dict[str, Tensor]
    opt: AdamWState
    config_hash: str


def distill_model_config(cfg: RunConfig) -> ModelConfig:
    """Student architecture for distillation: last level only, shallower
    predictor, everything predictor-side freshly initialized."""
    from dataclasses import replace
    depth = cfg.distill_predictor_depth or cfg.model.depth // 2
    depth = min(depth, cfg.model.predictor_depth)
    return replace(cfg.model, level_indices=(cfg.model.depth,),
                   predictor_depth=max(1, depth))


def init_distill_state(cfg: RunConfig, teacher_dim: int) -> DistillState:
    dcfg = distill_model_config(cfg)
    params = M.init_params(dcfg, stream(cfg.seed, "init-distill"))
    # the single head projects predictor width to the teacher dimension
    rng = stream(cfg.seed, "init-distill-head")
    params["pred.head0.w"] = Tensor(
        rng.normal(0.0, 0.02, size=(dcfg.predictor_dim, teacher_dim)),
        requires_grad=True, dtype=np.float32)
    params["pred.head0.b"] = Tensor(np.zeros(teacher_dim), requires_grad=True,
                                    dtype=np.float32)
    ema = {n: Tensor(params[n].data.copy()) for n in M.encoder_param_names(params)}
    return DistillState(step=0, seed=cfg.seed, params=params, student_ema=ema,
                        opt=AdamWState(), config_hash=config_hash(cfg))


def distill_step(batch: list[tuple[str, np.ndarray]], state: DistillState,
                 teacher: dict[str, Tensor], teacher_cfg: ModelConfig,
                 cfg: RunConfig) -> dict:
    """One distillation step: dense loss against the frozen teacher's last
    level only; the Polyak copy of the student encoder tracks the student."""
    dcfg = distill_model_config(cfg)
    if (teacher_cfg.patch_size, teacher_cfg.tubelet_size) != (
            dcfg.patch_size, dcfg.tubelet_size):
        raise ValueError("teacher/student patch geometry mismatch")
    step = state.step
    ramp = lambda_ramp(step, cfg.schedule.total_steps, cfg.loss)
    shard_grads = {"image": None, "video": None}
    counts = {"image": 0, "video": 0}
    losses = {}
    sample_idx = 0
    for modality in ("image", "video"):
        arrays = [a for m, a in batch if m == modality]
        if not arrays:
            continue
        targets, grid = _teacher_targets(teacher, arrays, modality, teacher_cfg,
                                         (1.0, 1.0, 1.0))
        targets = [targets[-1]]  # last layer only, no deep supervision
        masks = []
        for _ in arrays:
            masks.append(_mask_for(state.seed, step, sample_idx, grid, cfg.mask))
            sample_idx += 1
        result = shard_loss(state.params, dcfg, arrays, modality, masks, targets,
                            cfg.lambda_for(modality), ramp, cfg.loss)
        if not np.isfinite(result.loss.data):
            raise TrainingAborted(f"non-finite distillation loss at step {step}")
        result.loss.backward()
        shard_grads[modality] = _collect_grads(state.params)
        counts[modality] = result.n_samples
        losses[modality] = result.loss_predict + result.loss_ctx

    grads = aggregate_modality_grads(shard_grads["image"], shard_grads["video"],
                                     counts["image"], counts["video"])
    for name, t in teacher.items():
        assert t.grad is None, f"frozen teacher parameter '{name}' received gradient"
    lr = lr_at(step, cfg.schedule)
    adamw_step(state.params, grads, state.opt, lr, cfg.weight_decay)
    ema_update(state.student_ema,
               {n: state.params[n] for n in state.student_ema}, cfg.student_ema)
    state.step = step + 1
    total = sum(counts.values())
    loss = sum(losses[m] * counts[m] / total for m in losses)
    return {"step": step, "lr": lr, "loss": loss}


def run_distillation(cfg: RunConfig, teacher_ckpt, out_dir,
                     teacher_cfg: ModelConfig | None = None,
                     use_teacher_ema: bool = True, log_every: int = 10) -> Path:
    """Distill from a frozen checkpoint; exports the student's EMA copy."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher_cfg = teacher_cfg or cfg.model
    _, _, _, sections = load_checkpoint(teacher_ckpt)
    source = sections["teacher"] if use_teacher_ema and "teacher" in sections else {
        n[len("param."):] if n.startswith("param.") else n: a
        for n, a in sections["param"].items()}
    teacher = {n: Tensor(a) for n, a in source.items() if n.startswith("enc.")}
    state = init_distill_state(cfg, teacher_dim=teacher_cfg.embed_dim)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as log:
        while state.step < cfg.schedule.total_steps:
            batch = _batch_for_step(cfg, state.seed, state.step)
            metrics = distill_step(batch, state, teacher, teacher_cfg, cfg)
            if state.step % log_every == 0:
                log.write(json.dumps(metrics) + "\n")
    final = out / "distilled.mjck"
    sections = {
        "param": {n: p.data for n, p in state.params.items()},
        # the exported model is the Polyak/EMA copy of the student encoder
        "teacher": {n: p.data for n, p in state.student_ema.items()},
        "opt_m": state.opt.m,
        "opt_v": state.opt.v,
        "meta": {"adam_t": np.asarray([state.opt.t], dtype=np.float32)},
    }
    save_checkpoint(final, state.step, state.seed, state.config_hash, sections)
    return final
