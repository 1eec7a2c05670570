"""Foreground box extraction and feature-grid refinement.

A box is the bounding rectangle of the grid cells whose value exceeds the
threshold; the cropped patch-feature block is resampled back to full grid
size with normalized bilinear weights.  Thresholding is piecewise constant
in the threshold, so boxes carry no gradient; the resample is linear and
has an exact adjoint.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, check_finite

calls: Counter = Counter()   # call-count instrumentation for isolation tests


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive patch-grid rectangle, 1-indexed: columns [col_min, col_max],
    rows [row_min, row_max]."""
    col_min: int
    col_max: int
    row_min: int
    row_max: int
    fallback: bool = False    # empty exceedance set, full-grid box substituted

    def __post_init__(self):
        if not (1 <= self.col_min <= self.col_max and 1 <= self.row_min <= self.row_max):
            raise ContractViolation(f"degenerate box {self}")

    @property
    def patch_area(self) -> int:
        return (self.col_max - self.col_min + 1) * (self.row_max - self.row_min + 1)

    def pixel_box(self, patch_side: int) -> tuple[int, int, int, int]:
        """0-indexed inclusive pixel rectangle (col_min, col_max, row_min, row_max)."""
        return ((self.col_min - 1) * patch_side, self.col_max * patch_side - 1,
                (self.row_min - 1) * patch_side, self.row_max * patch_side - 1)

    def same_extent(self, other: "BoundingBox") -> bool:
        return (self.col_min, self.col_max, self.row_min, self.row_max) == \
               (other.col_min, other.col_max, other.row_min, other.row_max)


def box_identify(grid: np.ndarray, beta: float) -> BoundingBox:
    """Bounding rectangle of {cells with value > beta}.

    An empty exceedance set falls back to the full-grid box with the
    fallback flag set: training must not abort when the threshold tops the
    whole map.
    """
    calls["box_identify"] += 1
    grid = check_finite("box grid", grid)
    if grid.ndim != 2:
        raise ContractViolation("box grid must be 2-D")
    if not 0.0 <= beta <= 1.0:
        raise ContractViolation("beta must lie in [0, 1]")
    rows, cols = np.nonzero(grid > beta)
    g_r, g_c = grid.shape
    if rows.size == 0:
        return BoundingBox(col_min=1, col_max=g_c, row_min=1, row_max=g_r, fallback=True)
    return BoundingBox(col_min=int(cols.min()) + 1, col_max=int(cols.max()) + 1,
                       row_min=int(rows.min()) + 1, row_max=int(rows.max()) + 1)


def foreground_rate(boxes: list[BoundingBox], patch_side: int, image_side: int) -> float:
    """Mean fraction of image pixels covered by the (inclusive) boxes."""
    calls["foreground_rate"] += 1
    if not boxes:
        raise ContractViolation("foreground_rate needs at least one box")
    n_pixels = image_side * image_side
    areas = [b.patch_area * patch_side * patch_side / n_pixels for b in boxes]
    return float(np.mean(areas))


# ---------------------------------------------------------------------------
# Bilinear box interpolation


@dataclass
class InterpWeights:
    """Per-output-cell source base cells and the four normalized weights."""
    r0: np.ndarray          # (out_h,) int, 0-indexed into the crop
    c0: np.ndarray          # (out_w,) int
    wr: np.ndarray          # (out_h, 2): weights for rows r0, r0+1
    wc: np.ndarray          # (out_w, 2)

    def weight(self, m: int, n: int) -> np.ndarray:
        """2 x 2 weight block for output cell (m, n); sums to 1."""
        return np.outer(self.wr[m], self.wc[n])


def _axis_weights(src_len: int, out_len: int):
    if src_len < 1 or out_len < 1:
        raise ContractViolation("interpolation axes need length >= 1")
    if src_len == 1:
        base = np.zeros(out_len, dtype=int)
        w = np.column_stack([np.ones(out_len), np.zeros(out_len)])
        return base, w
    if out_len == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(out_len) * (src_len - 1) / (out_len - 1)
    base = np.minimum(np.floor(pos).astype(int), src_len - 2)
    frac = pos - base
    w0 = 1.0 - np.abs(pos - base)
    w1 = 1.0 - np.abs(pos - (base + 1))
    w = np.column_stack([w0, w1])
    w /= w.sum(axis=1, keepdims=True)
    return base, w


def interp_weights(crop_h: int, crop_w: int, out_h: int, out_w: int) -> InterpWeights:
    """Corner-aligned bilinear stencil from a crop onto the output grid.

    Full-size crops reduce to the identity stencil (weight 1 on the
    coincident cell); 1-wide axes broadcast their single cell.
    """
    r0, wr = _axis_weights(crop_h, out_h)
    c0, wc = _axis_weights(crop_w, out_w)
    return InterpWeights(r0=r0, c0=c0, wr=wr, wc=wc)


def box_interpolate(z_grid: np.ndarray, box: BoundingBox, out_side: int | None = None) -> np.ndarray:
    """Crop the feature grid to the box and resample back to out_side.

    Works channel-wise on (G, G, D) grids (plain (G, G) maps are handled as
    one channel).  The resample is convex per output cell, so the output
    range is bounded by the crop range.
    """
    calls["box_interpolate"] += 1
    z_grid = check_finite("feature grid", z_grid)
    squeeze = z_grid.ndim == 2
    if squeeze:
        z_grid = z_grid[:, :, None]
    g_r, g_c, _ = z_grid.shape
    if out_side is None:
        out_side = g_r
    if box.col_max > g_c or box.row_max > g_r:
        raise ContractViolation("box exceeds the grid")
    crop = z_grid[box.row_min - 1:box.row_max, box.col_min - 1:box.col_max, :]
    iw = interp_weights(crop.shape[0], crop.shape[1], out_side, out_side)
    rows = crop[iw.r0, :, :] * iw.wr[:, 0, None, None] + crop[iw.r0 + 1 if crop.shape[0] > 1 else iw.r0, :, :] * iw.wr[:, 1, None, None]
    out = rows[:, iw.c0, :] * iw.wc[None, :, 0, None] + rows[:, iw.c0 + 1 if crop.shape[1] > 1 else iw.c0, :] * iw.wc[None, :, 1, None]
    return out[:, :, 0] if squeeze else out


def box_interpolate_backward(d_out: np.ndarray, box: BoundingBox, grid_shape: tuple) -> np.ndarray:
    """Adjoint of box_interpolate: scatter output adjoints back onto the grid."""
    squeeze = len(grid_shape) == 2
    if squeeze:
        grid_shape = (*grid_shape, 1)
        d_out = d_out[:, :, None]
    d_grid = np.zeros(grid_shape)
    crop_h = box.row_max - box.row_min + 1
    crop_w = box.col_max - box.col_min + 1
    iw = interp_weights(crop_h, crop_w, d_out.shape[0], d_out.shape[1])
    r1 = iw.r0 + 1 if crop_h > 1 else iw.r0
    c1 = iw.c0 + 1 if crop_w > 1 else iw.c0
    crop_adj = np.zeros((crop_h, crop_w, grid_shape[2]))
    rows_adj = np.zeros((d_out.shape[0], crop_w, grid_shape[2]))
    for n in range(d_out.shape[1]):
        rows_adj[:, iw.c0[n], :] += d_out[:, n, :] * iw.wc[n, 0]
        rows_adj[:, c1[n], :] += d_out[:, n, :] * iw.wc[n, 1]
    for m in range(d_out.shape[0]):
        crop_adj[iw.r0[m], :, :] += rows_adj[m] * iw.wr[m, 0]
        crop_adj[r1[m], :, :] += rows_adj[m] * iw.wr[m, 1]
    d_grid[box.row_min - 1:box.row_max, box.col_min - 1:box.col_max, :] = crop_adj
    return d_grid[:, :, 0] if squeeze else d_grid


# ---------------------------------------------------------------------------
# Stability protocol helpers


def beta_sweep(grid: np.ndarray, betas) -> list[BoundingBox]:
    """One box per threshold; boxes change only when a threshold crosses a
    grid value, so the number of distinct boxes is bounded by the number of
    distinct values plus one."""
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(betas < 0) or np.any(betas > 1):
        raise ContractViolation("sweep thresholds must lie in [0, 1]")
    return [box_identify(grid, float(b)) for b in betas]


def perturb_check(grid: np.ndarray, beta: float, eps: float,
                  rng: np.random.Generator, trials: int = 100) -> bool:
    """True when every perturbation bounded by eps leaves the box unchanged.

    Meaningful only under the separation hypothesis (eps below half the
    minimum gap between distinct grid values and below the value-threshold
    gap); callers asserting invariance must establish that first.
    """
    base = box_identify(grid, beta)
    for _ in range(trials):
        delta = rng.uniform(-eps, eps, size=grid.shape)
        perturbed = box_identify(grid + delta, beta)
        if not base.same_extent(perturbed) or base.fallback != perturbed.fallback:
            return False
    return True


def min_value_gap(grid: np.ndarray, beta: float) -> float:
    """Separation constant: min gap between distinct values and to the threshold."""
    vals = np.unique(np.asarray(grid, dtype=np.float64).ravel())
    gaps = [float(np.min(np.abs(vals - beta)))]
    if vals.size > 1:
        gaps.append(float(np.min(np.diff(vals))))
    return min(gaps)
