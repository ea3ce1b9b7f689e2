"""Dense array helpers shared by every other module.

All public values are float32 and treated as immutable; reductions
accumulate in float64 before rounding back so sums stay stable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, NonFiniteError, ParameterError

STAGE_RAW = "raw"
STAGE_NORMALIZED = "normalized"
STAGE_UPSAMPLED = "upsampled"
STAGES = (STAGE_RAW, STAGE_NORMALIZED, STAGE_UPSAMPLED)


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Return ``data`` as a read-only C-ordered ndarray of ``dtype``.

    Rejects NaN/Inf entries and zero-sized dimensions so downstream code
    never has to re-check.
    """
    arr = np.array(data, dtype=dtype, order="C")
    if 0 in arr.shape:
        raise DimensionError(f"tensor dimensions must be positive, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf entries")
    arr.setflags(write=False)
    return arr


def _finite_or_raise(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def hadamard(a, b) -> np.ndarray:
    """Element-wise product.

    Shapes must either match exactly, or pair one rank-2 grid with one
    rank-3 channel stack sharing the trailing height and width; the grid is
    then applied to every channel.
    """
    x = np.asarray(a, dtype=np.float32)
    y = np.asarray(b, dtype=np.float32)
    if x.shape == y.shape:
        out = x * y
    elif x.ndim == 2 and y.ndim == 3 and y.shape[1:] == x.shape:
        out = x[None, :, :] * y
    elif x.ndim == 3 and y.ndim == 2 and x.shape[1:] == y.shape:
        out = x * y[None, :, :]
    else:
        raise DimensionError(f"hadamard shapes do not pair: {x.shape} vs {y.shape}")
    return _finite_or_raise(out, "hadamard")


def relu_map(t) -> np.ndarray:
    """Element-wise max(v, 0)."""
    out = np.maximum(np.asarray(t, dtype=np.float32), np.float32(0.0))
    return _finite_or_raise(out, "relu_map")


def channel_sum(t) -> np.ndarray:
    """Sum a channels-first rank-3 stack over its channel axis."""
    arr = np.asarray(t, dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionError(f"channel_sum expects rank 3, got shape {arr.shape}")
    out = arr.sum(axis=0, dtype=np.float64).astype(np.float32)
    return _finite_or_raise(out, "channel_sum")


def bilinear_resize(grid, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear interpolation of a rank-2 array.

    Corner samples are reproduced exactly; every output value is a convex
    combination of source values.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be positive, got {out_h}x{out_w}")
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise DimensionError(f"bilinear_resize expects rank 2, got shape {g.shape}")
    in_h, in_w = g.shape
    rows = np.linspace(0.0, in_h - 1.0, out_h)
    cols = np.linspace(0.0, in_w - 1.0, out_w)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = g[np.ix_(r0, c0)] * (1.0 - fc) + g[np.ix_(r0, c1)] * fc
    bottom = g[np.ix_(r1, c0)] * (1.0 - fc) + g[np.ix_(r1, c1)] * fc
    out = top * (1.0 - fr) + bottom * fr
    return out.astype(np.float32)


@dataclass(frozen=True)
class Heatmap:
    """A 2-D localization map plus the lineage needed to interpret it.

    ``stage`` records how far along the raw -> normalized -> upsampled
    pipeline the grid is. Normalized grids always lie in [0, 1]; raw and
    upsampled grids are only required to be finite.
    """

    grid: np.ndarray
    stage: str
    method: str = ""
    layer: str = ""
    class_index: int = -1

    def __post_init__(self):
        grid = as_tensor(self.grid)
        if grid.ndim != 2:
            raise DimensionError(f"heatmap grid must be rank 2, got shape {grid.shape}")
        if self.stage not in STAGES:
            raise ParameterError(f"unknown heatmap stage {self.stage!r}")
        if self.stage == STAGE_NORMALIZED and (grid.min() < 0.0 or grid.max() > 1.0):
            raise ParameterError("normalized heatmap values must lie in [0, 1]")
        object.__setattr__(self, "grid", grid)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]


def minmax_normalize(h: Heatmap, epsilon: float) -> Heatmap:
    """Rescale a raw heatmap to [0, 1) via (v - min) / (max - min + epsilon).

    A constant grid maps to all zeros. With epsilon > 0, a near-constant
    grid stays near zero everywhere (a dark map) instead of being stretched
    to full range.
    """
    if epsilon < 0:
        raise ParameterError(f"epsilon must be non-negative, got {epsilon}")
    if h.stage != STAGE_RAW:
        raise ParameterError(f"minmax_normalize expects a raw heatmap, got stage {h.stage!r}")
    g = h.grid.astype(np.float64)
    lo = g.min()
    span = g.max() - lo + float(epsilon)
    if span == 0.0:
        out = np.zeros_like(g)
    else:
        out = (g - lo) / span
    return replace(h, grid=out.astype(np.float32), stage=STAGE_NORMALIZED)


def bilinear_upsample(h: Heatmap, out_h: int, out_w: int) -> Heatmap:
    """Resize a heatmap with align-corners bilinear interpolation."""
    return replace(h, grid=bilinear_resize(h.grid, out_h, out_w), stage=STAGE_UPSAMPLED)
