"""Synthetic valley generator: smooth random covariate fields plus a known
ground-truth intensity, so the whole train/validate/test workflow can run at
desk scale without any proprietary inventory.

Covariates are sums of random Gaussian bumps (smooth, bounded fields); the
ground-truth log-intensity is linear or quadratic in the covariates and is
persisted alongside the data so recovery tests can score fits against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .ppm import IntensityMap
from .raster import CovariateStack, PointPattern, RasterGrid, Window
from .simboot import SeededRng, sample_pattern


@dataclass(frozen=True)
class CovariateField:
    """Random-field parameters of one synthetic covariate."""

    name: str
    n_bumps: int = 8
    amplitude: float = 1.0
    length_scale: float = 0.25  # fraction of the window extent
    baseline: float = 0.0


@dataclass(frozen=True)
class TruthTerm:
    """One ground-truth contribution to the log-intensity.

    `quadratic` adds coef2 * z^2 on top of the linear coef * z.
    """

    covariate: str
    coef: float
    coef2: float = 0.0


@dataclass(frozen=True)
class SyntheticValleySpec:
    n_rows: int = 100
    n_cols: int = 100
    cell_size: float = 10.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    fields: tuple[CovariateField, ...] = (CovariateField("slope"),)
    intercept: float = -8.0
    terms: tuple[TruthTerm, ...] = ()

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate covariate names in synthetic spec")
        for t in self.terms:
            if t.covariate not in names:
                raise ConfigError(f"truth term references unknown covariate {t.covariate!r}")


def _bump_field(window: Window, spec: CovariateField, gen: np.random.Generator):
    extent_x = window.n_cols * window.cell_size
    extent_y = window.n_rows * window.cell_size
    scale = spec.length_scale * max(extent_x, extent_y)
    cx = window.origin_x + gen.random(spec.n_bumps) * extent_x
    cy = window.origin_y + gen.random(spec.n_bumps) * extent_y
    amp = spec.amplitude * gen.standard_normal(spec.n_bumps)

    cols, rows = np.meshgrid(np.arange(window.n_cols), np.arange(window.n_rows))
    x, y = window.cell_center(rows, cols)
    values = np.full(x.shape, spec.baseline, dtype=float)
    for a, bx, by in zip(amp, cx, cy):
        values += a * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2.0 * scale**2))
    return values


def truth_log_intensity(spec: SyntheticValleySpec, table: dict[str, np.ndarray]):
    """Ground-truth log-intensity for covariate values `table`."""
    out = np.full_like(next(iter(table.values())), spec.intercept, dtype=float)
    for t in spec.terms:
        z = table[t.covariate]
        out += t.coef * z + t.coef2 * z * z
    return out


@dataclass(frozen=True)
class SyntheticValley:
    spec: SyntheticValleySpec
    stack: CovariateStack
    truth: IntensityMap
    pattern: PointPattern


def generate_valley(spec: SyntheticValleySpec, rng: SeededRng) -> SyntheticValley:
    """Covariate stack, ground-truth intensity map and one sampled pattern."""
    window = Window.full(spec.origin_x, spec.origin_y, spec.n_rows, spec.n_cols,
                         spec.cell_size)
    grids = {}
    for i, f in enumerate(spec.fields):
        gen = rng.child(1000 + i).generator()
        grids[f.name] = RasterGrid(window, _bump_field(window, f, gen))
    stack = CovariateStack(grids)

    table = {name: grid.values for name, grid in stack.items()}
    log_lam = truth_log_intensity(spec, table)
    if not np.all(np.isfinite(log_lam)):
        raise NumericalError("ground-truth log-intensity is not finite")
    truth = IntensityMap(window, np.exp(log_lam))
    pattern = sample_pattern(truth, rng.child(2000))
    return SyntheticValley(spec=spec, stack=stack, truth=truth, pattern=pattern)
