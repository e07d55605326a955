"""Frozen-backbone probing.

Features are extracted once from the frozen encoder (the EMA weights by
default) and cached; probes train only their own parameters, sweeping a
small learning-rate x weight-decay grid and reporting the best cell on the
held-out split. The attentive classification probe is three self-attention
blocks followed by cross-attention from a learnable query (residual into
the query, then LayerNorm + single-GELU MLP) and a linear classifier.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .model import LN_EPS, ModelConfig, PatchGrid, Tensor
from .optim import AdamWState, adamw_step
from .rng import stream


@dataclass(frozen=True)
class ProbeConfig:
    task: str = "classification"  # segmentation | depth | classification | rollout
    lrs: tuple[float, ...] = (3e-3, 1e-3, 3e-4)
    wds: tuple[float, ...] = (1e-4, 1e-2)
    epochs: int = 20
    batch_size: int = 64
    resolution: int = 0  # 0 = native sample resolution


@dataclass
class GridCell:
    lr: float
    wd: float
    metric: float


@dataclass
class ProbeResult:
    task: str
    best: GridCell
    cells: list[GridCell]
    baseline: float | None = None
    params: dict | None = None

    def table(self) -> str:
        lines = [f"{'lr':>10} {'wd':>10} {'metric':>10}"]
        for c in self.cells:
            mark = " *" if (c.lr, c.wd) == (self.best.lr, self.best.wd) else ""
            lines.append(f"{c.lr:>10.2e} {c.wd:>10.2e} {c.metric:>10.4f}{mark}")
        if self.baseline is not None:
            lines.append(f"baseline (constant predictor): {self.baseline:.4f}")
        return "\n".join(lines)


# ----------------------------------------------------------------------
# feature extraction

def encoder_features(enc_params: dict[str, Tensor], arrays: list[np.ndarray],
                     modality: str, cfg: ModelConfig,
                     scales=(1.0, 1.0, 1.0), chunk: int = 32,
                     all_levels: bool = False) -> tuple[np.ndarray, PatchGrid]:
    """Features of the full token grid for every sample, [S, N, D].

    With all_levels=True the K tapped levels are concatenated channel-wise.
    """
    feats = []
    grid = None
    for start in range(0, len(arrays), chunk):
        part = arrays[start:start + chunk]
        toks, grids = zip(*(M.tokenize(a, modality, enc_params, cfg) for a in part))
        grid = grids[0]
        batch = T.concat([T.reshape(t, (1,) + t.shape) for t in toks], axis=0)
        mlf = M.encode(enc_params, batch, grid.coords(), grid, cfg, scales)
        if all_levels:
            feats.append(np.concatenate([lvl.data for lvl in mlf.levels], axis=-1))
        else:
            feats.append(mlf.last().data)
    return np.concatenate(feats, axis=0), grid


def _digest(*parts) -> str:
    h = hashlib.blake2s(digest_size=12)
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(str(p).encode())
    return h.hexdigest()


def cached_features(cache_dir, enc_params: dict[str, Tensor],
                    arrays: list[np.ndarray], modality: str, cfg: ModelConfig,
                    scales=(1.0, 1.0, 1.0), all_levels: bool = False,
                    tag: str = "") -> tuple[np.ndarray, PatchGrid]:
    """Disk-cached feature extraction, keyed by parameter and data content."""
    param_dig = _digest(*[enc_params[k].data for k in sorted(enc_params)])
    data_dig = _digest(len(arrays), arrays[0], arrays[-1],
                       *(a.shape for a in arrays))
    key = _digest(param_dig, data_dig, modality, all_levels, tag,
                  tuple(scales), cfg.patch_size, cfg.tubelet_size)
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    path = cache / f"feat_{key}.npz"
    if path.exists():
        z = np.load(path)
        return z["features"], PatchGrid(*[int(v) for v in z["grid"]])
    feats, grid = encoder_features(enc_params, arrays, modality, cfg, scales,
                                   all_levels=all_levels)
    np.savez(path, features=feats, grid=np.array([grid.t_p, grid.h_p, grid.w_p]))
    return feats, grid


# ----------------------------------------------------------------------
# linear probes (segmentation / depth)

def _iterate_minibatches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch):
        yield order[s:s + batch]


def _train_linear(x: np.ndarray, y: np.ndarray, out_dim: int, loss_kind: str,
                  lr: float, wd: float, epochs: int, batch: int,
                  seed: int) -> dict[str, Tensor]:
    rng = stream(seed, "probe-linear")
    params = {
        "w": Tensor(rng.normal(0, 0.01, size=(x.shape[1], out_dim)),
                    requires_grad=True, dtype=np.float32),
        "b": Tensor(np.zeros(out_dim), requires_grad=True, dtype=np.float32),
    }
    opt = AdamWState()
    order_rng = stream(seed, "probe-batches")
    for _ in range(epochs):
        for idx in _iterate_minibatches(x.shape[0], batch, order_rng):
            logits = T.linear(Tensor(x[idx]), params["w"], params["b"])
            if loss_kind == "ce":
                loss = T.cross_entropy(logits, y[idx])
            else:
                diff = T.sub(logits, Tensor(y[idx].reshape(-1, 1).astype(np.float32)))
                loss = T.mean_all(T.mul(diff, diff))
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            for p in params.values():
                p.grad = None
            adamw_step(params, grads, opt, lr, wd)
    return params


def miou_from_preds(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    ious = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


@dataclass
class FeatureNorm:
    """Eval-mode batch normalization: dataset statistics + learned affine."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def linear_probe_train(train_feats: np.ndarray, train_labels: np.ndarray,
                       val_feats: np.ndarray, val_labels: np.ndarray,
                       task: str, cfg: ProbeConfig, seed: int = 0,
                       num_classes: int | None = None,
                       val_pixel_labels: np.ndarray | None = None,
                       grid: PatchGrid | None = None,
                       patch_size: int = 0) -> ProbeResult:
    """Per-token linear probe over the grid of (lr, wd) cells.

    Features: [S, N, D]; labels: [S, N] (class ids or scalar regression
    targets at patch resolution). Segmentation reports mIoU (higher wins);
    depth reports RMSE (lower wins), against pixel labels when provided,
    with a constant-predictor baseline alongside.
    """
    if task not in ("segmentation", "depth"):
        raise ValueError(f"linear_probe_train does not handle task {task!r}")
    d = train_feats.shape[-1]
    xt = train_feats.reshape(-1, d).astype(np.float32)
    xv = val_feats.reshape(-1, d).astype(np.float32)
    norm = None
    if task == "depth":
        # learned-batchnorm style feature normalization
        norm = FeatureNorm(xt.mean(axis=0), xt.std(axis=0) + 1e-6)
        xt, xv = norm.apply(xt), norm.apply(xv)
        yt = train_labels.reshape(-1).astype(np.float32)
        out_dim, loss_kind = 1, "mse"
    else:
        yt = train_labels.reshape(-1).astype(np.intp)
        classes = int(num_classes or (yt.max() + 1))
        if classes < 2:
            raise ValueError("degenerate label set: need at least two classes")
        out_dim, loss_kind = classes, "ce"

    def evaluate(params) -> float:
        out = xv @ params["w"].data + params["b"].data
        if task == "segmentation":
            pred = out.argmax(axis=1).reshape(val_labels.shape)
            return miou_from_preds(pred, val_labels, out_dim)
        pred = out.reshape(val_feats.shape[0], -1)
        if val_pixel_labels is not None:
            px = upsample_nearest(pred.reshape(val_feats.shape[0], grid.h_p, grid.w_p),
                                  patch_size)
            return float(np.sqrt(np.mean((px - val_pixel_labels) ** 2)))
        return float(np.sqrt(np.mean((pred - val_labels.reshape(pred.shape)) ** 2)))

    cells = []
    best = None
    best_params = None
    higher_better = task == "segmentation"
    for lr in cfg.lrs:
        for wd in cfg.wds:
            params = _train_linear(xt, yt, out_dim, loss_kind, lr, wd,
                                   cfg.epochs, cfg.batch_size, seed)
            cell = GridCell(lr, wd, evaluate(params))
            cells.append(cell)
            if best is None or (cell.metric > best.metric) == higher_better and \
                    cell.metric != best.metric:
                best, best_params = cell, params

    baseline = None
    if task == "depth":
        const = float(train_labels.mean())
        if val_pixel_labels is not None:
            baseline = float(np.sqrt(np.mean((const - val_pixel_labels) ** 2)))
        else:
            baseline = float(np.sqrt(np.mean((const - val_labels) ** 2)))
    return ProbeResult(task=task, best=best, cells=cells, baseline=baseline,
                       params=best_params)


def upsample_nearest(patch_map: np.ndarray, patch_size: int) -> np.ndarray:
    """Nearest-patch upsampling of [..., h_p, w_p] maps to pixel resolution."""
    out = np.repeat(patch_map, patch_size, axis=-2)
    return np.repeat(out, patch_size, axis=-1)


# ----------------------------------------------------------------------
# attentive classification probe

def init_attentive_probe(dim: int, classes: int, heads: int,
                         rng: np.random.Generator, blocks: int = 3,
                         dtype=np.float32) -> dict[str, Tensor]:
    raw: dict[str, np.ndarray] = {}
    hidden = 4 * dim
    for i in range(blocks):
        pre = f"block{i}."
        raw[pre + "ln1.g"] = np.ones(dim)
        raw[pre + "ln1.b"] = np.zeros(dim)
        raw[pre + "attn.wqkv"] = rng.normal(0, 0.02, (dim, 3 * dim))
        raw[pre + "attn.bqkv"] = np.zeros(3 * dim)
        raw[pre + "attn.wo"] = rng.normal(0, 0.02, (dim, dim))
        raw[pre + "attn.bo"] = np.zeros(dim)
        raw[pre + "ln2.g"] = np.ones(dim)
        raw[pre + "ln2.b"] = np.zeros(dim)
        raw[pre + "mlp.w1"] = rng.normal(0, 0.02, (dim, hidden))
        raw[pre + "mlp.b1"] = np.zeros(hidden)
        raw[pre + "mlp.w2"] = rng.normal(0, 0.02, (hidden, dim))
        raw[pre + "mlp.b2"] = np.zeros(dim)
    raw["query"] = rng.normal(0, 0.02, (dim,))
    raw["x.wq"] = rng.normal(0, 0.02, (dim, dim))
    raw["x.wk"] = rng.normal(0, 0.02, (dim, dim))
    raw["x.wv"] = rng.normal(0, 0.02, (dim, dim))
    raw["x.wo"] = rng.normal(0, 0.02, (dim, dim))
    raw["x.bo"] = np.zeros(dim)
    raw["x.ln.g"] = np.ones(dim)
    raw["x.ln.b"] = np.zeros(dim)
    raw["x.mlp.w1"] = rng.normal(0, 0.02, (dim, hidden))
    raw["x.mlp.b1"] = np.zeros(hidden)
    raw["x.mlp.w2"] = rng.normal(0, 0.02, (hidden, dim))
    raw["x.mlp.b2"] = np.zeros(dim)
    raw["cls.w"] = rng.normal(0, 0.02, (dim, classes))
    raw["cls.b"] = np.zeros(classes)
    meta = {"heads": heads, "blocks": blocks}
    params = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in raw.items()}
    params["_meta"] = meta  # type: ignore[assignment]
    return params


def _probe_self_block(params, pre, x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    h = T.layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], LN_EPS)
    qkv = T.reshape(T.linear(h, params[pre + "attn.wqkv"], params[pre + "attn.bqkv"]),
                    (b, n, 3, heads, dh))
    parts = [T.transpose(T.reshape(T.slice_axis(qkv, 2, i, i + 1), (b, n, heads, dh)),
                         (0, 2, 1, 3)) for i in range(3)]
    q, k, v = parts
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    out = T.matmul(T.softmax(scores, axis=-1), v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    x = T.add(x, T.linear(out, params[pre + "attn.wo"], params[pre + "attn.bo"]))
    h = T.layernorm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], LN_EPS)
    h = T.gelu(T.linear(h, params[pre + "mlp.w1"], params[pre + "mlp.b1"]))
    return T.add(x, T.linear(h, params[pre + "mlp.w2"], params[pre + "mlp.b2"]))


def attentive_probe_forward(params: dict, features) -> Tensor:
    """Class logits for [B, N, D] (or [N, D]) frozen token features."""
    meta = params["_meta"]
    x = features if isinstance(features, Tensor) else Tensor(
        np.asarray(features, dtype=np.float32))
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    b, n, d = x.shape
    heads = meta["heads"]
    for i in range(meta["blocks"]):
        x = _probe_self_block(params, f"block{i}.", x, heads)
    # cross-attention from one learnable query, residual into the query
    dh = d // heads
    q = T.linear(T.reshape(params["query"], (1, 1, d)), params["x.wq"])      # [1,1,D]
    k = T.linear(x, params["x.wk"])
    v = T.linear(x, params["x.wv"])
    qh = T.transpose(T.reshape(q, (1, 1, heads, dh)), (0, 2, 1, 3))          # [1,H,1,dh]
    kh = T.transpose(T.reshape(k, (b, n, heads, dh)), (0, 2, 3, 1))          # [B,H,dh,N]
    vh = T.transpose(T.reshape(v, (b, n, heads, dh)), (0, 2, 1, 3))          # [B,H,N,dh]
    scores = T.scale(T.matmul(T.concat([qh] * b, axis=0), kh), 1.0 / np.sqrt(dh))
    pooled = T.matmul(T.softmax(scores, axis=-1), vh)                        # [B,H,1,dh]
    pooled = T.reshape(T.transpose(pooled, (0, 2, 1, 3)), (b, 1, d))
    attn_out = T.linear(pooled, params["x.wo"], params["x.bo"])
    h = T.add(attn_out, T.reshape(params["query"], (1, 1, d)))               # residual
    hn = T.layernorm(h, params["x.ln.g"], params["x.ln.b"], LN_EPS)
    m = T.gelu(T.linear(hn, params["x.mlp.w1"], params["x.mlp.b1"]))
    h = T.add(h, T.linear(m, params["x.mlp.w2"], params["x.mlp.b2"]))
    logits = T.linear(h, params["cls.w"], params["cls.b"])
    logits = T.reshape(logits, (b, logits.shape[-1]))
    if single:
        logits = T.reshape(logits, (logits.shape[-1],))
    return logits


def train_attentive_probe(train_feats: np.ndarray, train_labels: np.ndarray,
                          val_feats: np.ndarray, val_labels: np.ndarray,
                          classes: int, cfg: ProbeConfig, seed: int = 0,
                          heads: int = 4) -> ProbeResult:
    """Sweep the (lr, wd) grid; metric is top-1 accuracy on the val split."""
    yt = np.asarray(train_labels, dtype=np.intp)
    yv = np.asarray(val_labels, dtype=np.intp)
    cells = []
    best = None
    best_params = None
    for lr in cfg.lrs:
        for wd in cfg.wds:
            params = init_attentive_probe(train_feats.shape[-1], classes, heads,
                                          stream(seed, "probe-attn-init"))
            opt = AdamWState()
            order_rng = stream(seed, "probe-attn-batches")
            trainable = {k: v for k, v in params.items() if k != "_meta"}
            for _ in range(cfg.epochs):
                for idx in _iterate_minibatches(len(yt), cfg.batch_size, order_rng):
                    logits = attentive_probe_forward(params, train_feats[idx])
                    loss = T.cross_entropy(logits, yt[idx])
                    loss.backward()
                    grads = {n: p.grad for n, p in trainable.items()
                             if p.grad is not None}
                    for p in trainable.values():
                        p.grad = None
                    adamw_step(trainable, grads, opt, lr, wd)
            preds = attentive_probe_forward(params, val_feats).data.argmax(axis=-1)
            cell = GridCell(lr, wd, float((preds == yv).mean()))
            cells.append(cell)
            if best is None or cell.metric > best.metric:
                best, best_params = cell, params
    return ProbeResult(task="classification", best=best, cells=cells,
                       params=best_params)


# ----------------------------------------------------------------------
# predictor-rollout future-feature evaluation

def rollout_eval(clip: np.ndarray, context_steps: int, horizons: list[int],
                 params: dict[str, Tensor], teacher: dict[str, Tensor],
                 cfg: ModelConfig,
                 control_clip: np.ndarray | None = None) -> dict:
    """Encode a clip prefix, predict features at future token positions and
    report mean L1 against the teacher encoding of the true future (and of a
    mismatched control clip when provided).

    context_steps / horizons are in tubelet steps; horizon h targets tubelet
    step context_steps - 1 + h, so horizon 0 scores the visible positions.
    """
    toks, grid = M.tokenize_video(np.asarray(clip), params, cfg)
    if clip.shape[0] % cfg.tubelet_size:
        raise ValueError("clip length must be divisible by the tubelet size")
    if context_steps < 1 or context_steps > grid.t_p:
        raise ValueError("context window outside the clip")
    if max(horizons) > grid.t_p - context_steps:
        raise ValueError(f"horizon beyond clip length {grid.t_p}")

    coords = grid.coords()
    step_of = coords[:, 0]
    visible = np.flatnonzero(step_of < context_steps)
    future = np.flatnonzero(step_of >= context_steps)

    t_toks, _ = M.tokenize_video(np.asarray(clip), teacher, cfg)
    t_mlf = M.encode(teacher, T.reshape(t_toks, (1,) + t_toks.shape),
                     coords, grid, cfg)
    targets = t_mlf.last().data[0]

    s_toks, _ = M.tokenize_video(np.asarray(clip), params, cfg, visible=visible)
    mlf = M.encode(params, T.reshape(s_toks, (1,) + s_toks.shape),
                   coords[visible], grid, cfg)
    fused = M.fuse_levels(params, mlf)
    preds = M.predict(params, T.reshape(fused, fused.shape[1:]),
                      coords[visible], coords[future], M.VIDEO, cfg)
    pred_last = preds[-1].data  # rows: visible..., future...

    row_step = np.concatenate([step_of[visible], step_of[future]])
    row_token = np.concatenate([visible, future])

    def horizon_error(tgt: np.ndarray) -> dict[int, float]:
        errs = {}
        for h in horizons:
            s = context_steps - 1 + h
            rows = np.flatnonzero(row_step == s)
            errs[h] = float(np.mean(np.abs(
                pred_last[rows] - tgt[row_token[rows]])))
        return errs

    out = {"true": horizon_error(targets)}
    if control_clip is not None:
        c_toks, c_grid = M.tokenize_video(np.asarray(control_clip), teacher, cfg)
        if c_grid != grid:
            raise ValueError("control clip geometry mismatch")
        c_mlf = M.encode(teacher, T.reshape(c_toks, (1,) + c_toks.shape),
                         coords, grid, cfg)
        out["control"] = horizon_error(c_mlf.last().data[0])
    return out
