"""The four-rung training-recipe ladder and its probe-based comparison.

Rung 1 trains with the masked prediction loss only, a single supervised
level and the single shared tokenizer (images duplicated temporally).
Rung 2 adds the distance-weighted context loss, rung 3 adds deep
self-supervision (four tapped levels), rung 4 switches to the
modality-specific tokenizers with modality embeddings.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import probes as P
from .config import RunConfig
from .data import NUM_CLASSES, SyntheticSceneSpec, render_scene
from .model import ModelConfig
from .objective import LossWeights
from .rng import stream
from .trainer import TrainState, init_train_state, pretrain_step, _batch_for_step

LADDER = ("mask-only", "+context-loss", "+deep-supervision", "+modality-tokenizer")


def ladder_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    model = base.model
    single_level = (model.depth,)
    rungs = [
        ("mask-only", replace(
            base,
            model=replace(model, level_indices=single_level, multimodal_tokenizer=False),
            loss=replace(base.loss, lambda_video=0.0, lambda_image=0.0))),
        ("+context-loss", replace(
            base,
            model=replace(model, level_indices=single_level, multimodal_tokenizer=False))),
        ("+deep-supervision", replace(
            base,
            model=replace(model, multimodal_tokenizer=False))),
        ("+modality-tokenizer", base),
    ]
    return rungs


def train_to_steps(cfg: RunConfig, progress=None) -> TrainState:
    """In-memory pretraining for cfg.schedule.total_steps steps."""
    state = init_train_state(cfg)
    while state.step < cfg.schedule.total_steps:
        batch = _batch_for_step(cfg, state.seed, state.step)
        metrics = pretrain_step(batch, state, cfg)
        if progress is not None and state.step % 200 == 0:
            progress(state.step, metrics)
    return state


def probe_dataset(seed: int, canvas: int, n_train: int, n_val: int,
                  num_objects: int = 3, noise: float = 8.0):
    """Deterministic single-frame scenes with labels for probing."""
    splits = {}
    for split_idx, (split, count) in enumerate((("train", n_train), ("val", n_val))):
        images, labels, masks, depths = [], [], [], []
        for i in range(count):
            s = int(stream(seed, "probe-data", split_idx, i).integers(0, 2**63 - 1))
            scene = render_scene(SyntheticSceneSpec(
                canvas=canvas, num_objects=num_objects, frame_count=1,
                noise=noise, seed=s))
            images.append(scene.frames[0])
            labels.append(scene.label)
            masks.append(scene.class_mask[0])
            depths.append(scene.depth[0])
        splits[split] = (images, np.array(labels), np.array(masks), np.array(depths))
    return splits


def patch_majority(mask: np.ndarray, patch: int, num_classes: int) -> np.ndarray:
    """Majority class id per patch, [h_p * w_p]."""
    h, w = mask.shape
    hp, wp = h // patch, w // patch
    tiles = mask[:hp * patch, :wp * patch].reshape(hp, patch, wp, patch)
    tiles = tiles.transpose(0, 2, 1, 3).reshape(hp * wp, patch * patch)
    counts = np.stack([(tiles == c).sum(axis=1) for c in range(num_classes)], axis=1)
    return counts.argmax(axis=1)


def patch_means(field: np.ndarray, patch: int) -> np.ndarray:
    h, w = field.shape
    hp, wp = h // patch, w // patch
    tiles = field[:hp * patch, :wp * patch].reshape(hp, patch, wp, patch)
    return tiles.mean(axis=(1, 3)).reshape(-1)


def probe_backbone(enc_params, cfg: RunConfig, splits, seed: int,
                   tasks=("segmentation", "classification"),
                   probe_cfg: P.ProbeConfig | None = None,
                   cache_dir=None) -> dict:
    """Run the frozen-backbone probe suite; returns task -> best metric."""
    pc = probe_cfg or P.ProbeConfig()
    patch = cfg.model.patch_size
    feats = {}
    for split in ("train", "val"):
        images = splits[split][0]
        if cache_dir is not None:
            feats[split], grid = P.cached_features(
                cache_dir, enc_params, images, "image", cfg.model, tag=split)
        else:
            feats[split], grid = P.encoder_features(enc_params, images, "image",
                                                    cfg.model)
    out = {}
    if "classification" in tasks:
        res = P.train_attentive_probe(
            feats["train"], splits["train"][1], feats["val"], splits["val"][1],
            classes=NUM_CLASSES, cfg=pc, seed=seed)
        out["cls_acc"] = res.best.metric
    if "segmentation" in tasks:
        yt = np.stack([patch_majority(m, patch, NUM_CLASSES) for m in splits["train"][2]])
        yv = np.stack([patch_majority(m, patch, NUM_CLASSES) for m in splits["val"][2]])
        res = P.linear_probe_train(feats["train"], yt, feats["val"], yv,
                                   "segmentation", pc, seed=seed,
                                   num_classes=NUM_CLASSES)
        out["seg_miou"] = res.best.metric
    if "depth" in tasks:
        yt = np.stack([patch_means(d, patch) for d in splits["train"][3]])
        yv = np.stack([patch_means(d, patch) for d in splits["val"][3]])
        res = P.linear_probe_train(feats["train"], yt, feats["val"], yv,
                                   "depth", pc, seed=seed,
                                   val_pixel_labels=splits["val"][3],
                                   grid=grid, patch_size=patch)
        out["depth_rmse"] = res.best.metric
    return out


def run_ablation(base: RunConfig, out_dir=None, tasks=("classification",
                 "segmentation", "depth"), progress=None) -> list[dict]:
    """Train every ladder rung and probe it; returns one row per rung."""
    canvas = base.resolution.image_res
    splits = probe_dataset(base.seed ^ 0xAB1A7E, canvas, n_train=256, n_val=384,
                           num_objects=base.scene_objects, noise=base.scene_noise)
    rows = []
    for name, cfg in ladder_configs(base):
        if progress is not None:
            progress(f"[{name}] training {cfg.schedule.total_steps} steps")
        state = train_to_steps(cfg)
        metrics = probe_backbone(state.teacher, cfg, splits, cfg.seed, tasks=tasks)
        row = {"config": name, **metrics}
        rows.append(row)
        if progress is not None:
            progress(f"[{name}] {metrics}")
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "ablation.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
    return rows


def format_table(rows: list[dict]) -> str:
    cols = [c for c in ("cls_acc", "seg_miou", "depth_rmse") if c in rows[0]]
    head = " ".join(f"{c:>12}" for c in cols) + "  config"
    lines = [head, "-" * len(head)]
    for row in rows:
        vals = " ".join(f"{row[c]:>12.4f}" for c in cols)
        lines.append(f"{vals}  {row['config']}")
    return "\n".join(lines)
