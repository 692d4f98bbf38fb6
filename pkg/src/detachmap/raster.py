"""Raster grids, point patterns, file I/O and window/mask algebra.

Grids are regular 2-D rasters in planar metric coordinates (no CRS handling,
no resampling). Values are stored north-row-first, matching the on-disk ASCII
layout; invalid (NODATA) cells hold NaN and are mirrored by the window's
boolean validity mask. All types are immutable after construction.

Point-to-cell lookup uses containing-cell semantics: the cell owns the
half-open square ``[x, x + cell) x [y, y + cell)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, GridFormatError

DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass(frozen=True)
class Window:
    """Rectangular cell grid with a per-cell validity mask.

    ``origin_x``/``origin_y`` locate the lower-left (south-west) corner in
    meters; ``validity_mask`` is indexed ``[row, col]`` with row 0 the
    northernmost row.
    """

    origin_x: float
    origin_y: float
    n_rows: int
    n_cols: int
    cell_size: float
    validity_mask: np.ndarray

    def __post_init__(self):
        if self.cell_size <= 0:
            raise DataError(f"cell_size must be positive, got {self.cell_size}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise DataError(f"grid must have at least one cell, got {self.n_rows}x{self.n_cols}")
        mask = np.asarray(self.validity_mask, dtype=bool)
        if mask.shape != (self.n_rows, self.n_cols):
            raise DataError(
                f"validity mask shape {mask.shape} does not match grid {self.n_rows}x{self.n_cols}"
            )
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "validity_mask", mask)

    @classmethod
    def full(cls, origin_x, origin_y, n_rows, n_cols, cell_size):
        """Window with every cell valid."""
        return cls(origin_x, origin_y, n_rows, n_cols, cell_size,
                   np.ones((n_rows, n_cols), dtype=bool))

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def area(self) -> float:
        """Total area of valid cells, m^2."""
        return self.cell_area * int(np.count_nonzero(self.validity_mask))

    def same_geometry(self, other: "Window") -> bool:
        """True if origin, shape and cell size coincide (masks may differ)."""
        return (
            self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
            and self.n_rows == other.n_rows
            and self.n_cols == other.n_cols
            and self.cell_size == other.cell_size
        )

    def __eq__(self, other):
        if not isinstance(other, Window):
            return NotImplemented
        return self.same_geometry(other) and np.array_equal(self.validity_mask, other.validity_mask)

    def with_mask(self, mask: np.ndarray) -> "Window":
        return Window(self.origin_x, self.origin_y, self.n_rows, self.n_cols,
                      self.cell_size, mask)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing (x, y); raises if outside the grid."""
        col = math.floor((x - self.origin_x) / self.cell_size)
        row_s = math.floor((y - self.origin_y) / self.cell_size)
        if not (0 <= col < self.n_cols and 0 <= row_s < self.n_rows):
            raise DataError(f"point ({x}, {y}) lies outside the window")
        return self.n_rows - 1 - row_s, col

    def cells_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized cell lookup for an (n, 2) array; raises on any outside point."""
        points = np.asarray(points, dtype=float)
        col = np.floor((points[:, 0] - self.origin_x) / self.cell_size).astype(int)
        row_s = np.floor((points[:, 1] - self.origin_y) / self.cell_size).astype(int)
        bad = (col < 0) | (col >= self.n_cols) | (row_s < 0) | (row_s >= self.n_rows)
        if bad.any():
            idx = np.flatnonzero(bad)
            raise DataError(f"{idx.size} point(s) outside the window, first at index {idx[0]}")
        return self.n_rows - 1 - row_s, col

    def cell_center(self, row, col):
        """(x, y) center of cell (row, col); accepts arrays."""
        x = self.origin_x + (np.asarray(col) + 0.5) * self.cell_size
        y = self.origin_y + (self.n_rows - np.asarray(row) - 0.5) * self.cell_size
        return x, y


@dataclass(frozen=True)
class RasterGrid:
    """One scalar covariate on a window; NaN marks NODATA cells.

    Invariant: NaN positions in ``values`` coincide exactly with the invalid
    cells of ``window``.
    """

    window: Window
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.window.n_rows, self.window.n_cols):
            raise DataError(
                f"value array shape {values.shape} does not match window "
                f"{self.window.n_rows}x{self.window.n_cols}"
            )
        nan = np.isnan(values)
        if np.any(nan == self.window.validity_mask):
            raise DataError("NODATA cells must coincide with invalid mask cells")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values: np.ndarray, window: Window | None = None,
                   origin=(0.0, 0.0), cell_size=1.0) -> "RasterGrid":
        """Build a grid from an array, deriving the mask from NaN positions."""
        values = np.asarray(values, dtype=float)
        mask = ~np.isnan(values)
        if window is None:
            window = Window(origin[0], origin[1], values.shape[0], values.shape[1],
                            cell_size, mask)
        else:
            window = window.with_mask(window.validity_mask & mask)
            values = np.where(window.validity_mask, values, np.nan)
        return cls(window, values)

    def value_at(self, x: float, y: float) -> float:
        """Value of the containing cell; NaN when the cell is NODATA."""
        r, c = self.window.cell_of(x, y)
        return float(self.values[r, c])


class CovariateStack:
    """Aligned, named covariate grids over one window geometry.

    Member grids must share origin, shape and cell size; their NODATA masks
    may differ (preprocessing can invalidate cells per covariate). The stack's
    ``window`` carries the intersection of the member masks.
    """

    def __init__(self, grids: dict[str, RasterGrid]):
        if not grids:
            raise DataError("covariate stack needs at least one grid")
        self._grids = dict(grids)
        first = next(iter(self._grids.values())).window
        mask = np.ones((first.n_rows, first.n_cols), dtype=bool)
        for name, grid in self._grids.items():
            if not grid.window.same_geometry(first):
                raise DataError(f"grid {name!r} is not aligned with the stack window")
            mask &= grid.window.validity_mask
        self.window = first.with_mask(mask)

    @property
    def names(self) -> list[str]:
        return list(self._grids)

    def __contains__(self, name):
        return name in self._grids

    def __getitem__(self, name: str) -> RasterGrid:
        try:
            return self._grids[name]
        except KeyError:
            raise DataError(f"unknown covariate {name!r}") from None

    def items(self):
        return self._grids.items()

    def values_at_cells(self, rows, cols, names=None) -> dict[str, np.ndarray]:
        """Per-covariate cell values at (rows, cols) index arrays."""
        names = self.names if names is None else names
        return {name: self[name].values[rows, cols] for name in names}


@dataclass(frozen=True)
class PointPattern:
    """Finite planar point set inside the valid part of a window."""

    points: np.ndarray
    window: Window

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if np.isnan(points).any():
            raise DataError("point coordinates must not be NaN")
        if len(points):
            r, c = self.window.cells_of(points)
            on_invalid = ~self.window.validity_mask[r, c]
            if on_invalid.any():
                raise DataError(
                    f"{int(on_invalid.sum())} point(s) fall on invalid window cells"
                )
        points = points.copy()
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self):
        return len(self.points)

    def cells(self):
        """(rows, cols) of the containing cells."""
        return self.window.cells_of(self.points)


def read_ascii_grid(path) -> RasterGrid:
    """Read a plain-text ASCII grid (six-line header, row-major, north first).

    Header keys NCOLS, NROWS, XLLCORNER, YLLCORNER, CELLSIZE, NODATA_VALUE are
    required in that order (case-insensitive). Format violations raise
    GridFormatError naming the offending line.
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    header = {}
    for lineno, key in enumerate(_HEADER_KEYS, start=1):
        if lineno > len(lines):
            raise GridFormatError(f"{path}: line {lineno}: missing header line {key.upper()}")
        parts = lines[lineno - 1].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise GridFormatError(
                f"{path}: line {lineno}: expected '{key.upper()} <value>', got {lines[lineno - 1]!r}"
            )
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise GridFormatError(
                f"{path}: line {lineno}: non-numeric value {parts[1]!r} for {key.upper()}"
            ) from None

    n_cols, n_rows = int(header["ncols"]), int(header["nrows"])
    if n_cols != header["ncols"] or n_rows != header["nrows"] or n_cols < 1 or n_rows < 1:
        raise GridFormatError(f"{path}: NCOLS/NROWS must be positive integers")
    nodata = header["nodata_value"]

    if len(lines) < 6 + n_rows:
        raise GridFormatError(
            f"{path}: line {len(lines) + 1}: expected {n_rows} data rows, found {len(lines) - 6}"
        )
    values = np.empty((n_rows, n_cols), dtype=float)
    for i in range(n_rows):
        lineno = 7 + i
        tokens = lines[6 + i].split()
        if len(tokens) != n_cols:
            raise GridFormatError(
                f"{path}: line {lineno}: expected {n_cols} values, got {len(tokens)}"
            )
        try:
            row = np.array([float(t) for t in tokens])
        except ValueError:
            raise GridFormatError(f"{path}: line {lineno}: non-numeric token") from None
        values[i] = row

    values[values == nodata] = np.nan
    mask = ~np.isnan(values)
    window = Window(header["xllcorner"], header["yllcorner"], n_rows, n_cols,
                    header["cellsize"], mask)
    return RasterGrid(window, values)


def write_ascii_grid(grid: RasterGrid, path, nodata: float = DEFAULT_NODATA) -> None:
    """Write a grid so that read_ascii_grid returns it bit-identically.

    Values are serialized with 17 significant digits, enough to round-trip
    any finite double.
    """
    w = grid.window
    with open(path, "w") as fh:
        fh.write(f"NCOLS {w.n_cols}\n")
        fh.write(f"NROWS {w.n_rows}\n")
        fh.write(f"XLLCORNER {w.origin_x:.17g}\n")
        fh.write(f"YLLCORNER {w.origin_y:.17g}\n")
        fh.write(f"CELLSIZE {w.cell_size:.17g}\n")
        fh.write(f"NODATA_VALUE {nodata:.17g}\n")
        for i in range(w.n_rows):
            row = grid.values[i]
            tokens = [
                f"{v:.17g}" if ok else f"{nodata:.17g}"
                for v, ok in zip(row, w.validity_mask[i])
            ]
            fh.write(" ".join(tokens) + "\n")


def read_points_csv(path, window: Window) -> PointPattern:
    """Read an `x,y` CSV inventory into a PointPattern on `window`.

    Points outside the window or on invalid cells are rejected with a warning
    (one count per file), not imputed.
    """
    xs, ys = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or [h.strip().lower() for h in head[:2]] != ["x", "y"]:
            raise DataError(f"{path}: expected CSV header 'x,y', got {head!r}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                xs.append(float(rec[0]))
                ys.append(float(rec[1]))
            except (ValueError, IndexError):
                raise DataError(f"{path}: line {lineno}: malformed point record {rec!r}") from None

    points = np.column_stack([xs, ys]) if xs else np.empty((0, 2))
    keep = np.ones(len(points), dtype=bool)
    for i, (x, y) in enumerate(points):
        col = math.floor((x - window.origin_x) / window.cell_size)
        row_s = math.floor((y - window.origin_y) / window.cell_size)
        if not (0 <= col < window.n_cols and 0 <= row_s < window.n_rows):
            keep[i] = False
            continue
        if not window.validity_mask[window.n_rows - 1 - row_s, col]:
            keep[i] = False
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} point(s) outside the valid window")
    return PointPattern(points[keep], window)


def write_points_csv(pattern: PointPattern, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("x,y\n")
        for x, y in pattern.points:
            fh.write(f"{x:.17g},{y:.17g}\n")


def covariate_at(stack: CovariateStack, p) -> dict[str, float | None]:
    """Covariate values of the cell containing p; None flags NODATA covariates.

    Raises DataError when p lies outside the window.
    """
    x, y = float(p[0]), float(p[1])
    r, c = stack.window.cell_of(x, y)
    out = {}
    for name, grid in stack.items():
        v = grid.values[r, c]
        out[name] = None if np.isnan(v) else float(v)
    return out


def range_mask(stack: CovariateStack, ranges: dict[str, tuple[float, float]]) -> np.ndarray:
    """Cells where every named covariate is inside its closed range and not NODATA."""
    window = stack.window
    mask = np.ones((window.n_rows, window.n_cols), dtype=bool)
    for name, (lo, hi) in ranges.items():
        values = stack[name].values
        with np.errstate(invalid="ignore"):
            mask &= (values >= lo) & (values <= hi)
    return mask
