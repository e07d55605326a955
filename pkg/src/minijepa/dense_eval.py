"""Training-free dense-feature evaluations.

Label propagation transfers first-frame patch labels through feature
similarity: for every frame, cosine affinities against the first frame and
the last n frames (restricted to a spatial neighborhood) pick top-k
neighbors whose softmaxed weights average the source label distributions.
PCA maps project mean-centered patch features onto the top three principal
directions and render them as RGB. Metrics cover mIoU, per-object region
similarity (J), boundary accuracy (F) and RMSE.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PropagationParams:
    context_length: int = 15
    radius: int = 12
    shape: str = "circle"  # circle | square
    top_k: int = 5
    temperature: float = 0.2

    def __post_init__(self):
        if self.context_length < 1 or self.radius < 1 or self.top_k < 1:
            raise ValueError("context_length, radius and top_k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.shape not in ("circle", "square"):
            raise ValueError(f"unknown neighborhood shape {self.shape!r}")


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def _neighborhood(h_p: int, w_p: int, radius: float, shape: str) -> np.ndarray:
    """Allowed [N, N] query/source pairs by patch-grid distance."""
    ys, xs = np.meshgrid(np.arange(h_p), np.arange(w_p), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1)
    dy = coords[:, None, 0] - coords[None, :, 0]
    dx = coords[:, None, 1] - coords[None, :, 1]
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= radius
    return dy * dy + dx * dx <= radius * radius


def labels_to_onehot(patch_labels: np.ndarray, num_labels: int | None = None) -> np.ndarray:
    flat = np.asarray(patch_labels).ravel()
    n = int(num_labels or (flat.max() + 1))
    out = np.zeros((flat.size, n))
    out[np.arange(flat.size), flat] = 1.0
    return out


def propagate_labels(frame_features: np.ndarray, first_labels: np.ndarray,
                     h_p: int, w_p: int, params: PropagationParams) -> np.ndarray:
    """Per-frame patch label distributions [T, N, L].

    frame_features: [T, N, D] with N == h_p * w_p; first_labels: one-hot
    [N, L] (or [N] class ids) for frame 0.
    """
    feats = _l2_normalize(np.asarray(frame_features, dtype=np.float64))
    t_frames, n, _ = feats.shape
    if n != h_p * w_p:
        raise ValueError(f"feature tokens {n} != grid {h_p}x{w_p}")
    first = np.asarray(first_labels, dtype=np.float64)
    if first.ndim == 1:
        first = labels_to_onehot(first)
    if first.shape[0] != n:
        raise ValueError("first-frame labels must cover every patch")
    if not np.any(first.sum(axis=0) > 0):
        raise ValueError("first frame carries no labeled patch")

    allowed = _neighborhood(h_p, w_p, params.radius, params.shape)
    dists = np.empty((t_frames, n, first.shape[1]))
    dists[0] = first
    for t in range(1, t_frames):
        past = list(range(max(1, t - params.context_length), t))
        sources = [0] + past  # first frame plus the last n frames
        src_feats = np.concatenate([feats[s] for s in sources], axis=0)
        src_labels = np.concatenate([dists[s] for s in sources], axis=0)
        sims = feats[t] @ src_feats.T                       # [N, S*N]
        mask = np.tile(allowed, (1, len(sources)))
        sims = np.where(mask, sims, -np.inf)
        k = min(params.top_k, n * len(sources))
        top = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        rows = np.arange(n)[:, None]
        top_sims = sims[rows, top]
        finite = np.isfinite(top_sims)
        top_sims = np.where(finite, top_sims / params.temperature, -np.inf)
        top_sims -= top_sims.max(axis=1, keepdims=True)
        w = np.exp(top_sims)
        w /= np.maximum(w.sum(axis=1, keepdims=True), 1e-12)
        dists[t] = np.einsum("nk,nkl->nl", w, src_labels[top])
    return dists


def hard_masks(dists: np.ndarray, h_p: int, w_p: int) -> np.ndarray:
    """Argmax label per patch, shaped [T, h_p, w_p]."""
    return dists.argmax(axis=-1).reshape(dists.shape[0], h_p, w_p)


# ----------------------------------------------------------------------
# PCA feature maps

@dataclass
class PcaMap:
    components: np.ndarray        # [D, 3] orthonormal columns
    explained: np.ndarray         # [3] non-increasing variances
    maps: np.ndarray              # [T, h_p, w_p, 3] in [0, 1]

    def permutation(self, perm: tuple[int, int, int]) -> np.ndarray:
        return self.maps[..., list(perm)]

    def all_permutations(self) -> list[np.ndarray]:
        import itertools
        return [self.permutation(p) for p in itertools.permutations((0, 1, 2))]


def pca_map(features: np.ndarray, t_p: int, h_p: int, w_p: int) -> PcaMap:
    """Project [tokens, D] features on the top-3 principal directions.

    One basis is computed over all tokens; maps are rendered per temporal
    slice with per-component min-max normalization to [0, 1]. Component
    signs are fixed by making each column's largest-magnitude loading
    positive, so the map is independent of token order.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < 3:
        raise ValueError("need at least 3 tokens for a 3-component PCA")
    if n != t_p * h_p * w_p:
        raise ValueError(f"token count {n} != grid {t_p}x{h_p}x{w_p}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:3]
    comps = eigvecs[:, order]
    explained = np.maximum(eigvals[order], 0.0)
    rank = int(np.linalg.matrix_rank(cov))
    if rank < 3:
        warnings.warn(f"feature rank {rank} < 3; padding missing components with zeros")
        comps = comps.copy()
        comps[:, rank:] = 0.0
        explained = explained.copy()
        explained[rank:] = 0.0
    # deterministic sign: largest-|loading| entry of each component positive
    for j in range(3):
        col = comps[:, j]
        if col.any() and col[np.argmax(np.abs(col))] < 0:
            comps[:, j] = -col
    scores = centered @ comps
    lo, hi = scores.min(axis=0), scores.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    norm = (scores - lo) / span
    return PcaMap(components=comps, explained=explained,
                  maps=norm.reshape(t_p, h_p, w_p, 3))


# ----------------------------------------------------------------------
# metrics

def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean IoU over the classes present in either mask set."""
    if pred.shape != gt.shape:
        raise ValueError("pred/gt shape mismatch")
    classes = np.union1d(np.unique(pred), np.unique(gt))
    ious = []
    for c in classes:
        p, g = pred == c, gt == c
        union = np.logical_or(p, g).sum()
        if union:
            ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious)) if ious else 1.0


def _binary_iou(p: np.ndarray, g: np.ndarray) -> float:
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    padded = np.pad(mask, 1, constant_values=False)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out &= padded[1 + dy:1 + dy + mask.shape[0], 1 + dx:1 + dx + mask.shape[1]]
    return out


def _dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    out = mask.copy()
    for _ in range(iterations):
        padded = np.pad(out, 1, constant_values=False)
        acc = out.copy()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc |= padded[1 + dy:1 + dy + out.shape[0], 1 + dx:1 + dx + out.shape[1]]
        out = acc
    return out


def _boundary(mask: np.ndarray) -> np.ndarray:
    return mask & ~_erode(mask)


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1) -> float:
    """Boundary F-measure with a pixel tolerance band."""
    pb, gb = _boundary(pred.astype(bool)), _boundary(gt.astype(bool))
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    precision = (pb & _dilate(gb, tolerance)).sum() / pb.sum()
    recall = (gb & _dilate(pb, tolerance)).sum() / gb.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def region_and_boundary(pred_masks: np.ndarray, gt_masks: np.ndarray,
                        tolerance: int = 1) -> tuple[float, float]:
    """J (per-object IoU) and F (boundary), averaged over frames then objects.

    Masks are [T, H, W] integer object-id maps; 0 is background. Objects
    with an empty ground truth everywhere are excluded with a warning.
    """
    if pred_masks.shape != gt_masks.shape:
        raise ValueError("pred/gt shape mismatch")
    obj_ids = [int(o) for o in np.unique(gt_masks) if o != 0]
    js, fs = [], []
    for obj in obj_ids:
        g_any = (gt_masks == obj).any(axis=(1, 2))
        if not g_any.any():
            warnings.warn(f"object {obj} has empty ground truth; excluded")
            continue
        j_frames, f_frames = [], []
        for t in range(gt_masks.shape[0]):
            p, g = pred_masks[t] == obj, gt_masks[t] == obj
            j_frames.append(_binary_iou(p, g))
            f_frames.append(boundary_f(p, g, tolerance))
        js.append(np.mean(j_frames))
        fs.append(np.mean(f_frames))
    if not js:
        warnings.warn("no ground-truth objects to score")
        return 0.0, 0.0
    return float(np.mean(js)), float(np.mean(fs))


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError("pred/gt shape mismatch")
    return float(np.sqrt(np.mean((np.asarray(pred, float) - np.asarray(gt, float)) ** 2)))


def vos_metrics(pred_masks: np.ndarray, gt_masks: np.ndarray) -> dict:
    j, f = region_and_boundary(pred_masks, gt_masks)
    return {"J_mean": j, "F_mean": f, "JF_mean": (j + f) / 2.0,
            "mIoU": miou(pred_masks, gt_masks)}
