"""Multi-block spatio-temporal mask sampling and mask-distance fields.

A mask is the union of randomly placed rectangles whose spatial area
fraction, aspect ratio and temporal extent are drawn uniformly from
configured ranges. Every context token additionally carries its Chebyshev
(or Manhattan) distance, in patch units, to the nearest masked token; the
context loss weights decay with this distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PatchGrid

CHEBYSHEV = "chebyshev"
MANHATTAN = "manhattan"


@dataclass(frozen=True)
class MaskParams:
    spatial_scale: tuple[float, float] = (0.15, 0.7)
    temporal_scale: tuple[float, float] = (1.0, 1.0)
    aspect_ratio: tuple[float, float] = (0.75, 1.5)
    num_blocks: int = 8
    metric: str = CHEBYSHEV

    def __post_init__(self):
        for name in ("spatial_scale", "temporal_scale"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got ({lo}, {hi})")
        lo, hi = self.aspect_ratio
        if not (0.0 < lo <= hi):
            raise ValueError(f"aspect_ratio must be positive, got ({lo}, {hi})")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.metric not in (CHEBYSHEV, MANHATTAN):
            raise ValueError(f"unknown distance metric {self.metric!r}")


@dataclass
class MaskSpec:
    """Disjoint masked/context token index sets over one grid.

    d_min[i] is the distance from context token context[i] to the nearest
    masked token (always >= 1). blocks records the sampled rectangles as
    (t0, t1, h0, h1, w0, w1) half-open extents; clamped counts blocks that
    had to be clipped to the grid.
    """

    masked: np.ndarray
    context: np.ndarray
    d_min: np.ndarray
    grid: PatchGrid
    blocks: tuple[tuple[int, int, int, int, int, int], ...] = ()
    clamped: int = 0


def _round_extent(x: float, limit: int) -> int:
    return max(1, min(limit, int(round(x))))


def _sample_block(grid: PatchGrid, params: MaskParams, rng: np.random.Generator):
    """One rectangle; returns (extents, clamped_flag)."""
    area = rng.uniform(*params.spatial_scale) * grid.h_p * grid.w_p
    aspect = rng.uniform(*params.aspect_ratio)
    h_raw = np.sqrt(area * aspect)
    w_raw = np.sqrt(area / aspect)
    clamped = h_raw > grid.h_p + 0.5 or w_raw > grid.w_p + 0.5
    h = _round_extent(h_raw, grid.h_p)
    w = _round_extent(w_raw, grid.w_p)
    t_len = _round_extent(rng.uniform(*params.temporal_scale) * grid.t_p, grid.t_p)
    t0 = int(rng.integers(0, grid.t_p - t_len + 1))
    h0 = int(rng.integers(0, grid.h_p - h + 1))
    w0 = int(rng.integers(0, grid.w_p - w + 1))
    return (t0, t0 + t_len, h0, h0 + h, w0, w0 + w), clamped


def sample_mask(grid: PatchGrid, params: MaskParams, rng: np.random.Generator,
                max_retries: int = 100) -> MaskSpec:
    """Sample a multi-block mask; resamples whenever the context would be empty."""
    if grid.tokens < 2:
        raise ValueError("grid too small to split into mask and context")
    blocks = []
    clamped = 0
    field = np.zeros((grid.t_p, grid.h_p, grid.w_p), dtype=bool)
    for attempt in range(max_retries):
        field[:] = False
        blocks = []
        clamped = 0
        for _ in range(params.num_blocks):
            (t0, t1, h0, h1, w0, w1), was_clamped = _sample_block(grid, params, rng)
            blocks.append((t0, t1, h0, h1, w0, w1))
            clamped += int(was_clamped)
            field[t0:t1, h0:h1, w0:w1] = True
        if field.all():
            continue  # context empty: resample the whole block set
        if field.any():
            break
    else:
        # Deterministic fallback for degenerate grids: keep the first block
        # shrunk until at least one context token remains.
        field[:] = False
        t0, t1, h0, h1, w0, w1 = blocks[0]
        while (t1 - t0) * (h1 - h0) * (w1 - w0) >= grid.tokens:
            if h1 - h0 > 1:
                h1 -= 1
            elif w1 - w0 > 1:
                w1 -= 1
            else:
                t1 -= 1
        field[t0:t1, h0:h1, w0:w1] = True
        blocks = [(t0, t1, h0, h1, w0, w1)]
        clamped += 1

    flat = field.ravel()
    masked = np.flatnonzero(flat)
    context = np.flatnonzero(~flat)
    dist = distance_field(field, params.metric)
    return MaskSpec(masked=masked, context=context,
                    d_min=dist.ravel()[context], grid=grid,
                    blocks=tuple(blocks), clamped=clamped)


# ----------------------------------------------------------------------
# distance field

def _dilate_chebyshev(a: np.ndarray) -> np.ndarray:
    # separable 3-window box dilation == one Chebyshev ring
    out = a.copy()
    for axis in range(a.ndim):
        shifted = out.copy()
        sl_lo = [slice(None)] * a.ndim
        sl_hi = [slice(None)] * a.ndim
        sl_lo[axis] = slice(1, None)
        sl_hi[axis] = slice(None, -1)
        shifted[tuple(sl_lo)] |= out[tuple(sl_hi)]
        shifted[tuple(sl_hi)] |= out[tuple(sl_lo)]
        out = shifted
    return out


def _dilate_manhattan(a: np.ndarray) -> np.ndarray:
    out = a.copy()
    for axis in range(a.ndim):
        sl_lo = [slice(None)] * a.ndim
        sl_hi = [slice(None)] * a.ndim
        sl_lo[axis] = slice(1, None)
        sl_hi[axis] = slice(None, -1)
        out[tuple(sl_lo)] |= a[tuple(sl_hi)]
        out[tuple(sl_hi)] |= a[tuple(sl_lo)]
    return out


def distance_field(masked: np.ndarray, metric: str = CHEBYSHEV) -> np.ndarray:
    """Distance of every cell to the nearest masked cell (0 on the mask).

    Multi-source breadth-first expansion, one vectorized dilation per
    distance ring; O(N) work per ring and at most max-distance rings.
    """
    if not masked.any():
        raise ValueError("distance_field needs a nonempty mask")
    dilate = _dilate_chebyshev if metric == CHEBYSHEV else _dilate_manhattan
    if metric not in (CHEBYSHEV, MANHATTAN):
        raise ValueError(f"unknown distance metric {metric!r}")
    dist = np.zeros(masked.shape, dtype=np.int64)
    frontier = masked.copy()
    remaining = ~masked
    d = 0
    while remaining.any():
        d += 1
        frontier = dilate(frontier)
        new = frontier & remaining
        dist[new] = d
        remaining &= ~new
    return dist


def min_distance_map(spec: MaskSpec, metric: str | None = None) -> np.ndarray:
    """Per-context-token distance to the nearest masked token (>= 1)."""
    field = np.zeros((spec.grid.t_p, spec.grid.h_p, spec.grid.w_p), dtype=bool)
    field.ravel()[spec.masked] = True
    dist = distance_field(field, metric or CHEBYSHEV)
    return dist.ravel()[spec.context]
