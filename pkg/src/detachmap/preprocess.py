"""Covariate transformations producing the model-ready stack.

Four operations: masked Gaussian smoothing of continuous covariates,
wetness-index binarization, curvature sign trichotomy, and the land-use
merge into Natural/Anthropic. All are pure functions over immutable grids.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .raster import RasterGrid, Window

#: Continuous covariates smoothed by default.
DEFAULT_FILTER_COVARIATES = ("dtm", "slope", "northness", "eastness", "twi", "ndvi")

DEFAULT_TWI_THRESHOLD = 9.0
DEFAULT_CURVATURE_TOL = 1e-6

CURVATURE_LEVELS = ("negative", "zero", "positive")
LANDUSE_LEVELS = ("natural", "anthropic")
TWI_LEVELS = ("low", "high")


@dataclass(frozen=True)
class FilterSpec:
    """Gaussian filter parameters: kernel scale and hard cutoff, both meters."""

    sigma: float = 100.0
    radius: float = 10.0

    def __post_init__(self):
        if self.sigma <= 0 or self.radius <= 0:
            raise DataError(f"filter sigma and radius must be positive, got {self}")


@dataclass(frozen=True)
class CategoricalGrid:
    """Per-cell small-integer category with named levels; -1 marks NODATA."""

    window: Window
    labels: np.ndarray
    levels: tuple[str, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int16)
        if labels.shape != (self.window.n_rows, self.window.n_cols):
            raise DataError("label array shape does not match window")
        valid = self.window.validity_mask
        if np.any(labels[valid] < 0) or np.any(labels[valid] >= len(self.levels)):
            raise DataError("labels must index a declared level on valid cells")
        labels = np.where(valid, labels, -1).astype(np.int16)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "levels", tuple(self.levels))

    def to_raster(self) -> RasterGrid:
        """Labels as a float grid (NaN on NODATA), e.g. for stacking as a covariate."""
        values = np.where(self.window.validity_mask, self.labels.astype(float), np.nan)
        return RasterGrid(self.window, values)


def gaussian_filter(grid: RasterGrid, spec: FilterSpec) -> RasterGrid:
    """Normalized Gaussian average over valid neighbors within `spec.radius`.

    Each valid cell becomes sum(w*v)/sum(w) over neighbor cells whose center
    distance d satisfies d <= radius, with w = exp(-d^2 / (2 sigma^2));
    NODATA neighbors drop out of both sums and NODATA cells stay NODATA.
    A radius below the cell size leaves only the center cell, i.e. identity.
    """
    window = grid.window
    cell = window.cell_size
    reach = int(np.floor(spec.radius / cell))
    offsets = []
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            d2 = (di * cell) ** 2 + (dj * cell) ** 2
            if np.sqrt(d2) <= spec.radius:
                offsets.append((di, dj, np.exp(-d2 / (2.0 * spec.sigma**2))))

    valid = window.validity_mask
    filled = np.where(valid, grid.values, 0.0)
    num = np.zeros_like(filled)
    den = np.zeros_like(filled)
    n_rows, n_cols = filled.shape
    for di, dj, w in offsets:
        src_r = slice(max(0, di), min(n_rows, n_rows + di))
        src_c = slice(max(0, dj), min(n_cols, n_cols + dj))
        dst_r = slice(max(0, -di), min(n_rows, n_rows - di))
        dst_c = slice(max(0, -dj), min(n_cols, n_cols - dj))
        num[dst_r, dst_c] += w * filled[src_r, src_c]
        den[dst_r, dst_c] += w * valid[src_r, src_c]

    starved = valid & (den == 0.0)
    if starved.any():
        warnings.warn(f"gaussian_filter: {int(starved.sum())} cell(s) had no valid neighbors")
    out_mask = valid & (den > 0.0)
    with np.errstate(invalid="ignore"):
        out = np.where(out_mask, num / np.where(den > 0, den, 1.0), np.nan)
    return RasterGrid(window.with_mask(out_mask), out)


def binarize_twi(grid: RasterGrid, threshold: float = DEFAULT_TWI_THRESHOLD) -> CategoricalGrid:
    """0 where value <= threshold, 1 above; the boundary belongs to the low class."""
    labels = np.where(grid.values > threshold, 1, 0)
    return CategoricalGrid(grid.window, labels, TWI_LEVELS)


def curvature_sign(grid: RasterGrid, zero_tol: float = DEFAULT_CURVATURE_TOL) -> CategoricalGrid:
    """Trichotomize curvature: negative / zero (|v| <= tol) / positive."""
    if zero_tol < 0:
        raise DataError(f"zero_tol must be non-negative, got {zero_tol}")
    labels = np.ones(grid.values.shape, dtype=np.int16)
    with np.errstate(invalid="ignore"):
        labels[grid.values < -zero_tol] = 0
        labels[grid.values > zero_tol] = 2
    return CategoricalGrid(grid.window, labels, CURVATURE_LEVELS)


def merge_dusaf(grid: CategoricalGrid, natural_codes, anthropic_codes) -> CategoricalGrid:
    """Merge land-use classes into the binary Natural / Anthropic grid.

    `grid` levels are the source class codes (as level names). The two code
    sets must be disjoint; any observed code missing from both raises.
    """
    natural = {str(c) for c in natural_codes}
    anthropic = {str(c) for c in anthropic_codes}
    overlap = natural & anthropic
    if overlap:
        raise DataError(f"land-use code sets overlap: {sorted(overlap)}")

    lookup = np.empty(len(grid.levels), dtype=np.int16)
    observed = set(np.unique(grid.labels[grid.window.validity_mask]))
    for idx, code in enumerate(grid.levels):
        if code in natural:
            lookup[idx] = 0
        elif code in anthropic:
            lookup[idx] = 1
        elif idx in observed:
            raise DataError(f"land-use code {code!r} is not in either code set")
        else:
            lookup[idx] = -1  # declared but unobserved; never dereferenced
    labels = np.where(grid.window.validity_mask, lookup[grid.labels], -1)
    return CategoricalGrid(grid.window, labels, LANDUSE_LEVELS)


def categorical_from_codes(grid: RasterGrid) -> CategoricalGrid:
    """Turn a grid of integer class codes into a CategoricalGrid.

    Levels are the distinct observed codes in ascending order, named by their
    integer value.
    """
    valid = grid.window.validity_mask
    observed = np.unique(grid.values[valid])
    if len(observed) and not np.allclose(observed, np.round(observed)):
        raise DataError("class-code grid contains non-integer values")
    codes = [int(v) for v in observed]
    index = {c: i for i, c in enumerate(codes)}
    labels = np.zeros(grid.values.shape, dtype=np.int16)
    rr, cc = np.nonzero(valid)
    labels[rr, cc] = [index[int(round(v))] for v in grid.values[rr, cc]]
    return CategoricalGrid(grid.window, labels, tuple(str(c) for c in codes))
