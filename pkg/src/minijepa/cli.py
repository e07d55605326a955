"""Command-line entry point.

Subcommands: gen-data, pretrain, distill, probe, vos, pca, ablate.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
The MINIJEPA_OUT environment variable sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation, dense_eval, probes
from . import model as M
from .checkpoint import CheckpointError, load_checkpoint
from .config import (RunConfig, desk_config, load_run_config, run_config_to_kv,
                     format_kv, config_hash)
from .data import (DatasetSpec, SyntheticSceneSpec, generate_dataset,
                   load_dataset, read_frames, write_pgm, write_ppm, NUM_CLASSES)
from .dense_eval import PropagationParams, hard_masks, pca_map, propagate_labels, vos_metrics
from .model import Tensor
from .probes import ProbeConfig
from .trainer import run_distillation, run_pretraining


def _out_root() -> Path:
    return Path(os.environ.get("MINIJEPA_OUT", "runs"))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="run seed override")
    p.add_argument("--config", type=str, default=None, help="run config file")
    p.add_argument("--out", type=str, default=None, help="output directory")


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _resolve_out(args, default_name: str) -> Path:
    return Path(args.out) if args.out else _out_root() / default_name


def _load_backbone(ckpt_path, cfg: RunConfig, which: str = "ema"):
    """Encoder weights from a checkpoint: the EMA copy or the raw student."""
    _, _, _, sections = load_checkpoint(ckpt_path)
    src = sections["teacher"] if which == "ema" else sections["param"]
    return {n: Tensor(a) for n, a in src.items() if n.startswith("enc.")}


# ----------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    scene = SyntheticSceneSpec(canvas=args.canvas, num_objects=args.objects,
                               frame_count=args.frames, noise=args.noise,
                               seed=args.seed or 0)
    spec = DatasetSpec(scene=scene, n_train=args.n_train, n_val=args.n_val,
                       seed=args.seed or 0)
    out = _resolve_out(args, "dataset")
    generate_dataset(spec, out)
    print(f"dataset written to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, f"pretrain_seed{cfg.seed}")
    final = run_pretraining(cfg, out, resume_from=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def _cmd_distill(args) -> int:
    cfg = _resolve_config(args)
    teacher_cfg = (load_run_config(args.teacher_config).model
                   if args.teacher_config else cfg.model)
    out = _resolve_out(args, f"distill_seed{cfg.seed}")
    final = run_distillation(cfg, args.teacher, out, teacher_cfg=teacher_cfg)
    print(f"distilled checkpoint: {final}")
    return 0


def _cmd_probe(args) -> int:
    cfg = _resolve_config(args)
    seed = cfg.seed
    enc = _load_backbone(args.ckpt, cfg, args.weights)
    pc = ProbeConfig(epochs=args.epochs)
    patch = cfg.model.patch_size

    if args.task == "rollout":
        return _probe_rollout(args, cfg, enc)

    samples = {s: load_dataset(args.data, s) for s in ("train", "val")}
    splits = {}
    for split, items in samples.items():
        images = [s.frames[0] for s in items]
        labels = np.array([s.label for s in items])
        masks = np.array([s.class_mask[0] for s in items])
        depths = np.array([s.depth[0] for s in items])
        splits[split] = (images, labels, masks, depths)

    task = {"seg": "segmentation", "depth": "depth", "cls": "classification"}[args.task]
    feats, grid = {}, None
    cache = _resolve_out(args, "probe") / "feature_cache"
    for split in ("train", "val"):
        feats[split], grid = probes.cached_features(
            cache, enc, splits[split][0], "image", cfg.model, tag=split)

    if task == "classification":
        res = probes.train_attentive_probe(
            feats["train"], splits["train"][1], feats["val"], splits["val"][1],
            classes=NUM_CLASSES, cfg=pc, seed=seed)
    elif task == "segmentation":
        yt = np.stack([ablation.patch_majority(m, patch, NUM_CLASSES)
                       for m in splits["train"][2]])
        yv = np.stack([ablation.patch_majority(m, patch, NUM_CLASSES)
                       for m in splits["val"][2]])
        res = probes.linear_probe_train(feats["train"], yt, feats["val"], yv,
                                        "segmentation", pc, seed=seed,
                                        num_classes=NUM_CLASSES)
    else:
        yt = np.stack([ablation.patch_means(d, patch) for d in splits["train"][3]])
        yv = np.stack([ablation.patch_means(d, patch) for d in splits["val"][3]])
        res = probes.linear_probe_train(feats["train"], yt, feats["val"], yv,
                                        "depth", pc, seed=seed,
                                        val_pixel_labels=splits["val"][3],
                                        grid=grid, patch_size=patch)
    print(res.table())
    return 0


def _probe_rollout(args, cfg: RunConfig, enc) -> int:
    samples = load_dataset(args.data, "val")
    videos = [s.frames for s in samples if s.frames.shape[0] > cfg.model.tubelet_size]
    if len(videos) < 2:
        print("rollout needs a video dataset with at least two clips", file=sys.stderr)
        return 1
    horizons = [0, 1]
    ctx = max(1, videos[0].shape[0] // cfg.model.tubelet_size - 1)
    wins = 0
    rows = []
    for i, clip in enumerate(videos):
        control = videos[(i + 1) % len(videos)]
        r = probes.rollout_eval(clip, ctx, horizons, enc, enc, cfg.model,
                                control_clip=control)
        rows.append(r)
        wins += int(r["true"][1] < r["control"][1])
    for h in horizons:
        mean_true = np.mean([r["true"][h] for r in rows])
        mean_ctrl = np.mean([r["control"][h] for r in rows])
        print(f"horizon {h}: true L1 {mean_true:.4f}  control L1 {mean_ctrl:.4f}")
    print(f"true-future wins: {wins}/{len(rows)}")
    return 0


def _cmd_vos(args) -> int:
    cfg = _resolve_config(args)
    enc = _load_backbone(args.ckpt, cfg, args.weights)
    params = PropagationParams(context_length=args.context_length,
                               radius=args.radius, shape=args.shape,
                               top_k=args.top_k, temperature=args.temperature)
    out = _resolve_out(args, "vos")
    out.mkdir(parents=True, exist_ok=True)
    (out / "params.json").write_text(json.dumps({
        "context_length": params.context_length, "radius": params.radius,
        "shape": params.shape, "top_k": params.top_k,
        "temperature": params.temperature}, indent=2) + "\n", encoding="utf-8")

    samples = load_dataset(args.data, "val")
    patch, tubelet = cfg.model.patch_size, cfg.model.tubelet_size
    results = []
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as log:
        for i, s in enumerate(samples):
            clip = s.frames
            toks, grid = M.tokenize_video(clip.astype(np.float32), enc, cfg.model)
            import minijepa.tensor as T
            mlf = M.encode(enc, T.reshape(toks, (1,) + toks.shape), grid.coords(),
                           grid, cfg.model)
            feats = mlf.last().data[0].reshape(grid.t_p, grid.h_p * grid.w_p, -1)
            frame_feats = np.repeat(feats, tubelet, axis=0)  # tubelet -> frames
            first = ablation.patch_majority(s.inst_mask[0], patch,
                                            int(s.inst_mask.max()) + 1)
            dists = propagate_labels(frame_feats, dense_eval.labels_to_onehot(
                first, int(s.inst_mask.max()) + 1), grid.h_p, grid.w_p, params)
            hard = hard_masks(dists, grid.h_p, grid.w_p)
            pixel = probes.upsample_nearest(hard, patch)
            m = vos_metrics(pixel, s.inst_mask)
            m["video"] = i
            results.append(m)
            log.write(json.dumps(m) + "\n")
            for t in range(pixel.shape[0]):
                scale = max(1, 255 // max(1, pixel.max()))
                write_pgm(out / f"video{i:03d}_frame{t:03d}.pgm",
                          (pixel[t] * scale).astype(np.uint8))
    jf = np.mean([m["JF_mean"] for m in results])
    print(f"J&F mean over {len(results)} videos: {jf:.4f}")
    return 0


def _cmd_pca(args) -> int:
    cfg = _resolve_config(args)
    enc = _load_backbone(args.ckpt, cfg, args.weights)
    path = Path(args.input)
    frames = read_frames(path if path.is_file() else path / "frames.bin")
    out = _resolve_out(args, "pca")
    out.mkdir(parents=True, exist_ok=True)
    import minijepa.tensor as T
    if frames.shape[0] == 1:
        toks, grid = M.tokenize_image(frames[0].astype(np.float32), enc, cfg.model)
    else:
        toks, grid = M.tokenize_video(frames.astype(np.float32), enc, cfg.model)
    mlf = M.encode(enc, T.reshape(toks, (1,) + toks.shape), grid.coords(), grid,
                   cfg.model)
    feats = mlf.last().data[0]
    pm = pca_map(feats, grid.t_p, grid.h_p, grid.w_p)
    maps = pm.all_permutations() if args.all_perms else [pm.maps]
    for pi, m in enumerate(maps):
        for t in range(m.shape[0]):
            big = probes.upsample_nearest(
                m[t].transpose(2, 0, 1), cfg.model.patch_size).transpose(1, 2, 0)
            write_ppm(out / f"perm{pi}_slice{t:03d}.ppm", big)
    print(f"wrote {sum(m.shape[0] for m in maps)} maps to {out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    sched = replace(cfg.schedule,
                    warmup_steps=min(cfg.schedule.warmup_steps, args.steps // 10),
                    total_steps=args.steps, cooldown_steps=0)
    cfg = replace(cfg, schedule=sched)
    out = _resolve_out(args, f"ablate_seed{cfg.seed}")
    rows = ablation.run_ablation(cfg, out_dir=out,
                                 progress=lambda *a: print(*a, file=sys.stderr))
    print(ablation.format_table(rows))
    return 0


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minijepa",
                                description="desk-scale dense self-supervised "
                                            "pretraining and evaluation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    _add_common(g)
    g.add_argument("--canvas", type=int, default=32)
    g.add_argument("--frames", type=int, default=1)
    g.add_argument("--objects", type=int, default=3)
    g.add_argument("--noise", type=float, default=8.0)
    g.add_argument("--n-train", type=int, default=128)
    g.add_argument("--n-val", type=int, default=64)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("pretrain", help="run the pretraining schedule")
    _add_common(t)
    t.add_argument("--resume", type=str, default=None, help="checkpoint to resume")
    t.set_defaults(fn=_cmd_pretrain)

    d = sub.add_parser("distill", help="distill from a frozen teacher checkpoint")
    _add_common(d)
    d.add_argument("--teacher", type=str, required=True)
    d.add_argument("--teacher-config", type=str, default=None)
    d.set_defaults(fn=_cmd_distill)

    pr = sub.add_parser("probe", help="frozen-backbone probing")
    _add_common(pr)
    pr.add_argument("--task", choices=("seg", "depth", "cls", "rollout"), required=True)
    pr.add_argument("--ckpt", type=str, required=True)
    pr.add_argument("--data", type=str, required=True)
    pr.add_argument("--weights", choices=("ema", "student"), default="ema")
    pr.add_argument("--epochs", type=int, default=20)
    pr.set_defaults(fn=_cmd_probe)

    v = sub.add_parser("vos", help="label-propagation video segmentation")
    _add_common(v)
    v.add_argument("--ckpt", type=str, required=True)
    v.add_argument("--data", type=str, required=True)
    v.add_argument("--weights", choices=("ema", "student"), default="ema")
    v.add_argument("--context-length", type=int, default=15)
    v.add_argument("--radius", type=int, default=12)
    v.add_argument("--shape", choices=("circle", "square"), default="circle")
    v.add_argument("--top-k", type=int, default=5)
    v.add_argument("--temperature", type=float, default=0.2)
    v.set_defaults(fn=_cmd_vos)

    pc = sub.add_parser("pca", help="render PCA feature maps")
    _add_common(pc)
    pc.add_argument("--ckpt", type=str, required=True)
    pc.add_argument("--input", type=str, required=True,
                    help="frames file or dataset sample directory")
    pc.add_argument("--weights", choices=("ema", "student"), default="ema")
    pc.add_argument("--all-perms", action="store_true",
                    help="write all six RGB channel permutations")
    pc.set_defaults(fn=_cmd_pca)

    ab = sub.add_parser("ablate", help="run the four-configuration ladder")
    _add_common(ab)
    ab.add_argument("--steps", type=int, default=2000)
    ab.set_defaults(fn=_cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
