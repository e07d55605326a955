"""Joint image/video masked-latent-prediction network.

Modality-specific patch tokenizers feed a pre-norm transformer encoder whose
intermediate block outputs are tapped, normalized, fused by a small MLP and
handed to a narrower predictor that emits one prediction map per tapped
level for every token (visible context tokens first, then mask tokens).
Token positions enter every attention layer through a three-axis rotary
encoding over (t, h, w) patch coordinates.

All forward functions are pure in the parameter dictionary and operate on
batched [B, N, D] tensors; single samples use B=1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-6

IMAGE = "image"
VIDEO = "video"


class GeometryError(ValueError):
    """Input resolution incompatible with the patch/tubelet geometry."""


@dataclass(frozen=True)
class PatchGrid:
    """Patch-grid geometry of one sample: token counts per (t, h, w) axis."""

    t_p: int
    h_p: int
    w_p: int

    @property
    def tokens(self) -> int:
        return self.t_p * self.h_p * self.w_p

    def coords(self) -> np.ndarray:
        """Integer (t, h, w) coordinates of every token, row-major (t, h, w)."""
        t, h, w = np.meshgrid(
            np.arange(self.t_p), np.arange(self.h_p), np.arange(self.w_p),
            indexing="ij")
        return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    patch_size: int = 8
    tubelet_size: int = 2
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: float = 4.0
    predictor_depth: int = 4
    predictor_dim: int = 48
    predictor_heads: int = 4
    level_indices: tuple[int, ...] = (2, 4, 6, 8)
    multimodal_tokenizer: bool = True
    rope_base: float = 10000.0
    channels: int = 3

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.predictor_dim % self.predictor_heads:
            raise ValueError("predictor_dim must be divisible by predictor_heads")
        levels = tuple(self.level_indices)
        if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("level_indices must be strictly increasing")
        if levels[-1] != self.depth or levels[0] < 1:
            raise ValueError("level_indices must end at depth and start >= 1")
        for d_h in (self.head_dim, self.predictor_head_dim):
            for sub in _rope_split(d_h):
                if sub % 2:
                    raise ValueError(f"rotary sub-dimension {sub} of head dim {d_h} is odd")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def predictor_head_dim(self) -> int:
        return self.predictor_dim // self.predictor_heads

    @property
    def num_levels(self) -> int:
        return len(self.level_indices)

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class MultiLevelFeatures:
    """Per-token feature maps tapped at the configured encoder depths."""

    levels: list[Tensor]
    level_indices: tuple[int, ...]
    grid: PatchGrid

    def last(self) -> Tensor:
        return self.levels[-1]


# ----------------------------------------------------------------------
# parameters

def _normal(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape)


def _block_params(rng, dim, heads, hidden, dtype, prefix):
    p = {}
    p[prefix + "ln1.g"] = np.ones(dim)
    p[prefix + "ln1.b"] = np.zeros(dim)
    p[prefix + "attn.wqkv"] = _normal(rng, (dim, 3 * dim))
    p[prefix + "attn.bqkv"] = np.zeros(3 * dim)
    p[prefix + "attn.wo"] = _normal(rng, (dim, dim))
    p[prefix + "attn.bo"] = np.zeros(dim)
    p[prefix + "ln2.g"] = np.ones(dim)
    p[prefix + "ln2.b"] = np.zeros(dim)
    p[prefix + "mlp.w1"] = _normal(rng, (dim, hidden))
    p[prefix + "mlp.b1"] = np.zeros(hidden)
    p[prefix + "mlp.w2"] = _normal(rng, (hidden, dim))
    p[prefix + "mlp.b2"] = np.zeros(dim)
    return p


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, Tensor]:
    """Initialize all learnable parameters, in a fixed name order."""
    d, dp = cfg.embed_dim, cfg.predictor_dim
    k = cfg.num_levels
    raw: dict[str, np.ndarray] = {}

    p_img = cfg.patch_size * cfg.patch_size * cfg.channels
    p_vid = cfg.tubelet_size * p_img
    raw["enc.img_proj.w"] = _normal(rng, (p_img, d))
    raw["enc.img_proj.b"] = np.zeros(d)
    raw["enc.vid_proj.w"] = _normal(rng, (p_vid, d))
    raw["enc.vid_proj.b"] = np.zeros(d)
    raw["enc.mod.image"] = _normal(rng, (d,))
    raw["enc.mod.video"] = _normal(rng, (d,))
    for i in range(cfg.depth):
        raw.update(_block_params(rng, d, cfg.heads, cfg.mlp_hidden, dtype,
                                 f"enc.block{i}."))
    for j in range(k):
        raw[f"enc.level{j}.g"] = np.ones(d)
        raw[f"enc.level{j}.b"] = np.zeros(d)

    raw["fuse.w1"] = _normal(rng, (k * d, k * d))
    raw["fuse.b1"] = np.zeros(k * d)
    raw["fuse.w2"] = _normal(rng, (k * d, dp))
    raw["fuse.b2"] = np.zeros(dp)

    raw["pred.mask_token"] = _normal(rng, (dp,))
    raw["pred.mod.image"] = _normal(rng, (dp,))
    raw["pred.mod.video"] = _normal(rng, (dp,))
    p_hidden = int(dp * cfg.mlp_ratio)
    for i in range(cfg.predictor_depth):
        raw.update(_block_params(rng, dp, cfg.predictor_heads, p_hidden, dtype,
                                 f"pred.block{i}."))
    raw["pred.ln.g"] = np.ones(dp)
    raw["pred.ln.b"] = np.zeros(dp)
    for j in range(k):
        raw[f"pred.head{j}.w"] = _normal(rng, (dp, d))
        raw[f"pred.head{j}.b"] = np.zeros(d)

    return {name: Tensor(arr, requires_grad=True, dtype=dtype)
            for name, arr in raw.items()}


def encoder_param_names(params: Mapping[str, Tensor]) -> list[str]:
    return [n for n in params if n.startswith("enc.")]


# ----------------------------------------------------------------------
# tokenizers

def _patchify_image(image: np.ndarray, patch: int) -> tuple[np.ndarray, PatchGrid]:
    h, w, c = image.shape
    if h % patch or w % patch:
        raise GeometryError(f"image {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    # space-to-depth: stride equals kernel size, so the strided view plus a
    # matmul is exactly the patchifying convolution
    x = image.reshape(hp, patch, wp, patch, c)
    x = x.transpose(0, 2, 1, 3, 4).reshape(hp * wp, patch * patch * c)
    return x, PatchGrid(1, hp, wp)


def _patchify_video(video: np.ndarray, patch: int, tubelet: int) -> tuple[np.ndarray, PatchGrid]:
    t, h, w, c = video.shape
    if t % tubelet:
        raise GeometryError(f"frame count {t} not divisible by tubelet size {tubelet}")
    if h % patch or w % patch:
        raise GeometryError(f"frames {h}x{w} not divisible by patch size {patch}")
    tp, hp, wp = t // tubelet, h // patch, w // patch
    x = video.reshape(tp, tubelet, hp, patch, wp, patch, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6).reshape(tp * hp * wp, tubelet * patch * patch * c)
    return x, PatchGrid(tp, hp, wp)


def tokenize_image(image: np.ndarray, params: Mapping[str, Tensor], cfg: ModelConfig,
                   visible: np.ndarray | None = None) -> tuple[Tensor, PatchGrid]:
    """Project non-overlapping patches of one [H, W, C] image to tokens.

    With the multi-modal tokenizer disabled, the image is temporally
    duplicated into one tubelet and routed through the video projection
    (single-tokenizer behaviour), and no modality embedding is added.
    """
    image = np.asarray(image, dtype=params["enc.img_proj.w"].dtype)
    if not cfg.multimodal_tokenizer:
        clip = np.repeat(image[None], cfg.tubelet_size, axis=0)
        return tokenize_video(clip, params, cfg, visible=visible)
    patches, grid = _patchify_image(image, cfg.patch_size)
    if visible is not None:
        patches = patches[np.asarray(visible, dtype=np.intp)]
    tokens = T.linear(Tensor(patches), params["enc.img_proj.w"], params["enc.img_proj.b"])
    tokens = T.add(tokens, params["enc.mod.image"])
    return tokens, grid


def tokenize_video(video: np.ndarray, params: Mapping[str, Tensor], cfg: ModelConfig,
                   visible: np.ndarray | None = None) -> tuple[Tensor, PatchGrid]:
    """Project non-overlapping tubelets of one [T, H, W, C] clip to tokens."""
    video = np.asarray(video, dtype=params["enc.vid_proj.w"].dtype)
    patches, grid = _patchify_video(video, cfg.patch_size, cfg.tubelet_size)
    if visible is not None:
        patches = patches[np.asarray(visible, dtype=np.intp)]
    tokens = T.linear(Tensor(patches), params["enc.vid_proj.w"], params["enc.vid_proj.b"])
    if cfg.multimodal_tokenizer:
        tokens = T.add(tokens, params["enc.mod.video"])
    return tokens, grid


def tokenize(sample: np.ndarray, modality: str, params: Mapping[str, Tensor],
             cfg: ModelConfig, visible: np.ndarray | None = None) -> tuple[Tensor, PatchGrid]:
    if modality == IMAGE:
        return tokenize_image(sample, params, cfg, visible=visible)
    if modality == VIDEO:
        return tokenize_video(sample, params, cfg, visible=visible)
    raise ValueError(f"unknown modality {modality!r}")


def patchify(sample: np.ndarray, modality: str, cfg: ModelConfig) -> tuple[np.ndarray, PatchGrid]:
    """Raw flattened patches [N, P] plus the grid, before projection."""
    sample = np.asarray(sample, dtype=np.float64)
    if modality == IMAGE and cfg.multimodal_tokenizer:
        return _patchify_image(sample, cfg.patch_size)
    if modality == IMAGE:
        sample = np.repeat(sample[None], cfg.tubelet_size, axis=0)
    return _patchify_video(sample, cfg.patch_size, cfg.tubelet_size)


def project_tokens(patches: np.ndarray, modality: str, params: Mapping[str, Tensor],
                   cfg: ModelConfig) -> Tensor:
    """Project [..., P] patches through the modality's embedding."""
    route_image = modality == IMAGE and cfg.multimodal_tokenizer
    proj = "enc.img_proj" if route_image else "enc.vid_proj"
    w = params[proj + ".w"]
    tokens = T.linear(Tensor(patches.astype(w.dtype)), w, params[proj + ".b"])
    if cfg.multimodal_tokenizer:
        tokens = T.add(tokens, params[f"enc.mod.{modality}"])
    return tokens


# ----------------------------------------------------------------------
# rotary position encoding

def _rope_split(head_dim: int) -> tuple[int, int, int]:
    # floor-even thirds for (t, h); the remainder goes to the w axis
    third = 2 * (head_dim // 6)
    return third, third, head_dim - 2 * third


_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def rope_tables(grid: PatchGrid, head_dim: int, base: float,
                scales: tuple[float, float, float] = (1.0, 1.0, 1.0),
                dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Full-grid cos/sin tables [N, head_dim], pair-repeated per angle.

    Frequencies along each axis are divided by that axis' resolution scale,
    so evaluating at s-times the training resolution with scale s leaves
    relative geometry unchanged.
    """
    key = (grid.t_p, grid.h_p, grid.w_p, head_dim, base, tuple(scales), np.dtype(dtype).str)
    hit = _ROPE_CACHE.get(key)
    if hit is not None:
        return hit
    if len(_ROPE_CACHE) > 64:
        _ROPE_CACHE.clear()
    coords = grid.coords().astype(np.float64)
    angles = np.empty((grid.tokens, head_dim // 2), dtype=np.float64)
    col = 0
    for axis, sub in enumerate(_rope_split(head_dim)):
        if sub == 0:
            continue
        half = sub // 2
        freqs = base ** (-2.0 * np.arange(half) / sub)
        angles[:, col:col + half] = coords[:, axis:axis + 1] * freqs[None, :] / scales[axis]
        col += half
    cos = np.repeat(np.cos(angles), 2, axis=1).astype(dtype)
    sin = np.repeat(np.sin(angles), 2, axis=1).astype(dtype)
    _ROPE_CACHE[key] = (cos, sin)
    return cos, sin


def rope_apply(qk: Tensor, coords: np.ndarray, head_dim: int, base: float,
               scales: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Tensor:
    """Rotate [N, heads, head_dim] queries/keys by their (t, h, w) positions."""
    cos, sin = _coords_tables(coords, head_dim, base, scales, qk.dtype)
    # tables are [N, d_h]; broadcast over the heads axis
    return T.rope_rotate(qk, cos[:, None, :], sin[:, None, :])


def _coords_tables(coords: np.ndarray, head_dim: int, base: float, scales, dtype):
    coords = np.asarray(coords)
    angles = np.empty(coords.shape[:-1] + (head_dim // 2,), dtype=np.float64)
    col = 0
    for axis, sub in enumerate(_rope_split(head_dim)):
        if sub == 0:
            continue
        half = sub // 2
        freqs = base ** (-2.0 * np.arange(half) / sub)
        angles[..., col:col + half] = coords[..., axis:axis + 1] * freqs / scales[axis]
        col += half
    cos = np.repeat(np.cos(angles), 2, axis=-1).astype(dtype)
    sin = np.repeat(np.sin(angles), 2, axis=-1).astype(dtype)
    return cos, sin


# ----------------------------------------------------------------------
# transformer

def _attention(params, prefix, x: Tensor, cos: np.ndarray, sin: np.ndarray,
               heads: int, bias: np.ndarray | None = None) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = T.linear(x, params[prefix + "attn.wqkv"], params[prefix + "attn.bqkv"])
    qkv = T.reshape(qkv, (b, n, 3, heads, dh))
    parts = []
    for i in range(3):
        s = T.reshape(T.slice_axis(qkv, 2, i, i + 1), (b, n, heads, dh))
        parts.append(T.transpose(s, (0, 2, 1, 3)))  # [B, H, N, dh]
    q, k, v = parts
    q = T.rope_rotate(q, cos, sin)
    k = T.rope_rotate(k, cos, sin)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if bias is not None:
        scores = T.add(scores, Tensor(bias.astype(scores.dtype, copy=False)))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return T.linear(out, params[prefix + "attn.wo"], params[prefix + "attn.bo"])


def _mlp(params, prefix, x: Tensor) -> Tensor:
    h = T.gelu(T.linear(x, params[prefix + "mlp.w1"], params[prefix + "mlp.b1"]))
    return T.linear(h, params[prefix + "mlp.w2"], params[prefix + "mlp.b2"])


def transformer_block(params, prefix, x: Tensor, cos: np.ndarray, sin: np.ndarray,
                      heads: int, bias: np.ndarray | None = None) -> Tensor:
    h = T.layernorm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"], LN_EPS)
    x = T.add(x, _attention(params, prefix, h, cos, sin, heads, bias))
    h = T.layernorm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"], LN_EPS)
    return T.add(x, _mlp(params, prefix, h))


def _batched_tables(coords: np.ndarray, head_dim: int, base: float, scales, dtype):
    """cos/sin shaped to broadcast over [B, H, N, dh] attention operands."""
    cos, sin = _coords_tables(coords, head_dim, base, scales, dtype)
    if coords.ndim == 2:  # shared across batch
        return cos[None, None], sin[None, None]
    return cos[:, None], sin[:, None]  # [B, 1, N, dh]


# ----------------------------------------------------------------------
# encoder / fusion / predictor

def encode(params: Mapping[str, Tensor], tokens: Tensor, coords: np.ndarray,
           grid: PatchGrid, cfg: ModelConfig,
           scales: tuple[float, float, float] = (1.0, 1.0, 1.0),
           attn_bias: np.ndarray | None = None) -> MultiLevelFeatures:
    """Run the encoder over (visible) tokens, tapping the configured levels.

    tokens: [B, N, D]; coords: [N, 3] shared or [B, N, 3] per sample.
    attn_bias (e.g. [B, 1, 1, N] with -inf on padded keys) lets ragged
    visible sets share one batch. Each tapped level is layer-normalized with
    its own parameters; the last tap (at the final block) is the encoder
    output.
    """
    if tokens.ndim != 3:
        raise ValueError(f"encode expects [B, N, D] tokens, got {tokens.shape}")
    if tokens.shape[1] == 0:
        raise ValueError("encode called with an empty visible set")
    cos, sin = _batched_tables(coords, cfg.head_dim, cfg.rope_base, scales, tokens.dtype)
    x = tokens
    taps = {idx: j for j, idx in enumerate(cfg.level_indices)}
    levels: list[Tensor] = [None] * cfg.num_levels
    for i in range(cfg.depth):
        x = transformer_block(params, f"enc.block{i}.", x, cos, sin, cfg.heads,
                              attn_bias)
        j = taps.get(i + 1)
        if j is not None:
            levels[j] = T.layernorm(x, params[f"enc.level{j}.g"],
                                    params[f"enc.level{j}.b"], LN_EPS)
    return MultiLevelFeatures(levels, tuple(cfg.level_indices), grid)


def fuse_levels(params: Mapping[str, Tensor], mlf: MultiLevelFeatures) -> Tensor:
    """Concatenate the K levels channel-wise and project to predictor width."""
    x = mlf.levels[0] if len(mlf.levels) == 1 else T.concat(mlf.levels, axis=-1)
    h = T.gelu(T.linear(x, params["fuse.w1"], params["fuse.b1"]))
    return T.linear(h, params["fuse.w2"], params["fuse.b2"])


def predictor_rows(params: Mapping[str, Tensor], fused_ctx: Tensor,
                   n_mask: int, modality: str, cfg: ModelConfig) -> Tensor:
    """Context rows followed by tiled mask-token rows, [N_c + N_m, D_p]."""
    if fused_ctx.ndim != 2:
        raise ValueError("predictor_rows expects a single sample [N_c, D_p]")
    rows = fused_ctx
    if n_mask:
        mask_rows = T.broadcast_rows(params["pred.mask_token"], n_mask)
        rows = T.concat([rows, mask_rows], axis=0)
    if cfg.multimodal_tokenizer:
        rows = T.add(rows, params[f"pred.mod.{modality}"])
    return rows


def run_predictor(params: Mapping[str, Tensor], rows: Tensor, coords: np.ndarray,
                  cfg: ModelConfig,
                  scales: tuple[float, float, float] = (1.0, 1.0, 1.0),
                  head_dim_out: int | None = None) -> list[Tensor]:
    """Predictor transformer over [B, N, D_p] rows -> K maps of [B, N, D]."""
    cos, sin = _batched_tables(coords, cfg.predictor_head_dim, cfg.rope_base,
                               scales, rows.dtype)
    x = rows
    for i in range(cfg.predictor_depth):
        x = transformer_block(params, f"pred.block{i}.", x, cos, sin, cfg.predictor_heads)
    x = T.layernorm(x, params["pred.ln.g"], params["pred.ln.b"], LN_EPS)
    outs = []
    j = 0
    while f"pred.head{j}.w" in params:
        outs.append(T.linear(x, params[f"pred.head{j}.w"], params[f"pred.head{j}.b"]))
        j += 1
    return outs


def predict(params: Mapping[str, Tensor], context: Tensor, ctx_coords: np.ndarray,
            mask_coords: np.ndarray, modality: str, cfg: ModelConfig,
            scales: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> list[Tensor]:
    """Predict per-level features for context tokens and masked positions.

    context: fused context tokens [N_c, D_p]; outputs are K tensors of
    [N_c + N_m, D], context rows first (input order), then mask rows.
    """
    ctx_coords = np.asarray(ctx_coords).reshape(-1, 3)
    mask_coords = np.asarray(mask_coords).reshape(-1, 3)
    if mask_coords.shape[0]:
        both = np.concatenate([ctx_coords, mask_coords], axis=0)
        uniq = np.unique(both, axis=0)
        if uniq.shape[0] != both.shape[0]:
            raise ValueError("mask positions collide with context positions")
        coords = both
    else:
        coords = ctx_coords
    rows = predictor_rows(params, context, mask_coords.shape[0], modality, cfg)
    rows = T.reshape(rows, (1,) + rows.shape)
    outs = run_predictor(params, rows, coords, cfg, scales)
    return [T.reshape(o, o.shape[1:]) for o in outs]
