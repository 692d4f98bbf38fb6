"""Regionalized raw errors, residual summaries, lurking-covariate curves and
simulation-envelope QQ data.

The raw error of a subarea A is e(A) = expected count - observed count, with
the expected count the pixel-exact integral of the fitted intensity over A.
Subarea errors are additive: summed over the partition they equal the total
residual integral(intensity) - n(W) exactly.
"""

from __future__ import annotations

import numpy as np

from dataclasses import dataclass

from .errors import DataError
from .ppm import FittedModel, IntensityMap, predict_intensity
from .raster import CovariateStack, PointPattern, Window
from .simboot import SeededRng, sample_pattern

DEFAULT_SUBAREA = 250.0
DEFAULT_LURKING_GRID = 200
DEFAULT_NSIM = 39


@dataclass(frozen=True)
class ErrorGrid:
    """Per-subarea expected/observed counts and raw errors on a coarse window.

    Edge subareas may be partial; `area` records each subarea's valid area so
    no cell is double counted or lost.
    """

    window: Window  # coarse: cell_size == subarea edge
    expected: np.ndarray
    observed: np.ndarray
    error: np.ndarray
    area: np.ndarray

    def flat_errors(self) -> np.ndarray:
        """Errors of subareas holding any valid area, row-major."""
        return self.error[self.window.validity_mask]


def raw_errors(intensity: IntensityMap, pattern: PointPattern,
               subarea: float = DEFAULT_SUBAREA) -> ErrorGrid:
    """Partition the window into `subarea`-sized squares and compute
    e(A) = expected - observed per square."""
    window = intensity.window
    if len(pattern) and not pattern.window.same_geometry(window):
        raise DataError("pattern window does not match the intensity map")
    if subarea < window.cell_size:
        raise DataError(f"subarea {subarea} is below the cell size {window.cell_size}")
    ratio = max(1, int(round(subarea / window.cell_size)))
    n_tr = (window.n_rows + ratio - 1) // ratio
    n_tc = (window.n_cols + ratio - 1) // ratio

    rows_s = window.n_rows - 1 - np.arange(window.n_rows)
    tile_r = rows_s // ratio
    tile_c = np.arange(window.n_cols) // ratio
    tile_flat = tile_r[:, None] * n_tc + tile_c[None, :]

    valid = window.validity_mask
    size = n_tr * n_tc
    expected_flat = np.bincount(tile_flat[valid],
                                weights=intensity.values[valid] * window.cell_area,
                                minlength=size)
    area_flat = np.bincount(tile_flat[valid], minlength=size) * window.cell_area

    if len(pattern):
        pr, pc = pattern.cells()
        observed_flat = np.bincount(tile_flat[pr, pc], minlength=size)
    else:
        observed_flat = np.zeros(size)

    # coarse raster rows run north-first like the fine grid
    def fold(flat):
        return flat.reshape(n_tr, n_tc)[::-1].astype(float)

    area = fold(area_flat)
    coarse = Window(window.origin_x, window.origin_y, n_tr, n_tc,
                    subarea, area > 0)
    return ErrorGrid(window=coarse, expected=fold(expected_flat),
                     observed=fold(observed_flat),
                     error=fold(expected_flat - observed_flat), area=area)


_SUMMARY_COLUMNS = ("Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max.")


@dataclass(frozen=True)
class ResidualSummary:
    """Six-number summaries of the raw and absolute raw subarea residuals."""

    raw: tuple[float, ...]
    absolute: tuple[float, ...]
    columns: tuple[str, ...] = _SUMMARY_COLUMNS

    def format(self, digits: int = 4) -> str:
        head = "Vector".ljust(20) + "".join(c.rjust(12) for c in self.columns)
        rows = [head]
        for label, stats in (("Raw residuals", self.raw),
                             ("Abs. raw residuals", self.absolute)):
            rows.append(label.ljust(20) + "".join(f"{v:12.{digits}f}" for v in stats))
        return "\n".join(rows)


def _six_numbers(values: np.ndarray) -> tuple[float, ...]:
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])  # linear interpolation
    return (float(values.min()), float(q1), float(med),
            float(values.mean()), float(q3), float(values.max()))


def residual_summary(grid: ErrorGrid) -> ResidualSummary:
    """Min / quartiles / mean / max of e(A) and |e(A)| over the subareas."""
    errors = grid.flat_errors()
    if errors.size == 0:
        raise DataError("error grid has no subareas with valid area")
    return ResidualSummary(raw=_six_numbers(errors),
                           absolute=_six_numbers(np.abs(errors)))


@dataclass(frozen=True)
class LurkingCurve:
    """Cumulative raw residual against a covariate threshold, with a
    pointwise min/max simulation envelope."""

    covariate: str
    thresholds: np.ndarray
    curve: np.ndarray
    envelope_lo: np.ndarray
    envelope_hi: np.ndarray
    n_simulations: int


def _cumulative_curve(thresholds, cov_values, lam_area, point_values):
    """C(z) = #{points with Z <= z} - sum of intensity mass over cells with Z <= z."""
    order = np.argsort(cov_values)
    sorted_cov = cov_values[order]
    mass = np.cumsum(lam_area[order])
    cell_pos = np.searchsorted(sorted_cov, thresholds, side="right")
    integral = np.where(cell_pos > 0, mass[np.maximum(cell_pos - 1, 0)], 0.0)
    counts = np.searchsorted(np.sort(point_values), thresholds, side="right")
    return counts - integral


def lurking_curve(model: FittedModel, pattern: PointPattern, stack: CovariateStack,
                  covariate: str, nsim: int = DEFAULT_NSIM,
                  rng: SeededRng | None = None,
                  n_thresholds: int = DEFAULT_LURKING_GRID) -> LurkingCurve:
    """Lurking-covariate diagnostic for `covariate` (not necessarily in the
    model), with envelopes from `nsim` patterns simulated from the fitted
    intensity."""
    if nsim < 2:
        raise DataError(f"need at least 2 simulations for an envelope, got {nsim}")
    if rng is None:
        raise DataError("a SeededRng is required for the simulation envelope")
    cov = stack[covariate]
    intensity = predict_intensity(model, stack)
    support = intensity.window.validity_mask & cov.window.validity_mask

    rr, cc = np.nonzero(support)
    cov_values = cov.values[rr, cc]
    lam_area = intensity.values[rr, cc] * intensity.window.cell_area
    lo, hi = float(cov_values.min()), float(cov_values.max())
    thresholds = (np.full(1, hi) if lo == hi
                  else np.linspace(lo, hi, n_thresholds))

    def curve_for(p: PointPattern):
        if len(p) == 0:
            pv = np.empty(0)
        else:
            pr, pc = p.cells()
            on = support[pr, pc]
            pv = cov.values[pr[on], pc[on]]
        return _cumulative_curve(thresholds, cov_values, lam_area, pv)

    observed = curve_for(pattern)
    support_map = IntensityMap(intensity.window.with_mask(support),
                               np.where(support, intensity.values, np.nan))
    sims = np.stack([curve_for(sample_pattern(support_map, rng.child(s)))
                     for s in range(nsim)])
    return LurkingCurve(covariate=covariate, thresholds=thresholds, curve=observed,
                        envelope_lo=sims.min(axis=0), envelope_hi=sims.max(axis=0),
                        n_simulations=nsim)


@dataclass(frozen=True)
class QQData:
    """Sorted observed subarea residuals against the mean of the sorted
    simulated residuals, with per-rank min/max envelopes."""

    observed: np.ndarray
    simulated_mean: np.ndarray
    envelope_lo: np.ndarray
    envelope_hi: np.ndarray
    n_simulations: int
    pearson: bool


def qq_data(model: FittedModel, pattern: PointPattern, stack: CovariateStack,
            subarea: float = DEFAULT_SUBAREA, nsim: int = DEFAULT_NSIM,
            rng: SeededRng | None = None, pearson: bool = False) -> QQData:
    """Quantile pairs of subarea residuals: observed vs model simulations."""
    if nsim < 2:
        raise DataError(f"need at least 2 simulations, got {nsim}")
    if rng is None:
        raise DataError("a SeededRng is required for the simulation envelope")
    intensity = predict_intensity(model, stack)

    def residuals(p: PointPattern):
        grid = raw_errors(intensity, p, subarea)
        e = grid.flat_errors()
        if pearson:
            expected = grid.expected[grid.window.validity_mask]
            e = e / np.sqrt(np.maximum(expected, 1e-12))
        return np.sort(e)

    observed = residuals(pattern)
    sims = np.stack([residuals(sample_pattern(intensity, rng.child(s)))
                     for s in range(nsim)])
    return QQData(observed=observed, simulated_mean=sims.mean(axis=0),
                  envelope_lo=sims.min(axis=0), envelope_hi=sims.max(axis=0),
                  n_simulations=nsim, pearson=pearson)
