"""Pattern simulation from intensity maps and the semiparametric bootstrap.

Sampling relies on the defining properties of the Poisson process: cell
counts are independent Poisson draws with mean intensity * cell area, and
points fall uniformly within their cell. The bootstrap repeats B times:
sample a replicate pattern from the fitted intensity, refit the same model
spec on it, and predict; per-cell standard deviation and upper order
statistics over the replicate maps quantify estimation uncertainty. The
high-level (e.g. 99th) percentile map is the alarm map: high wherever the
estimate or its uncertainty is high.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import ppm
from .errors import DataError, NumericalError
from .ppm import FittedModel, IntensityMap, QuadratureScheme, predict_intensity
from .raster import CovariateStack, PointPattern, RasterGrid

#: Per-cell expected-count ceiling guarding pathological intensities.
MAX_EXPECTED_PER_CELL = 1e6

DEFAULT_REPLICATES = 100
MAX_FAILURE_FRACTION = 0.2


@dataclass(frozen=True)
class SeededRng:
    """Deterministic random stream: (seed, stream) fully determine all draws
    on every platform. Child streams are derived by index so parallel
    consumers stay schedule-independent."""

    seed: int
    stream: int = 0
    algorithm: str = "pcg64"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "pcg64":
            raise DataError(f"unknown rng algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((self.seed, self.stream))))

    def child(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream * 100_003 + index + 1, self.algorithm)


def sample_pattern(intensity: IntensityMap, rng: SeededRng) -> PointPattern:
    """Draw one pattern: per-cell Poisson counts, uniform placement in-cell."""
    window = intensity.window
    valid = window.validity_mask
    rr, cc = np.nonzero(valid)
    lam = intensity.values[rr, cc] * window.cell_area
    if lam.size and lam.max() > MAX_EXPECTED_PER_CELL:
        raise NumericalError(
            f"expected count per cell up to {lam.max():.3g} exceeds the "
            f"{MAX_EXPECTED_PER_CELL:.0e} sampling guard"
        )
    gen = rng.generator()
    counts = gen.poisson(lam) if lam.size else np.empty(0, dtype=int)
    total = int(counts.sum())
    if total == 0:
        return PointPattern(np.empty((0, 2)), window)
    cell_idx = np.repeat(np.arange(len(rr)), counts)
    offsets = gen.random((total, 2))
    x = window.origin_x + (cc[cell_idx] + offsets[:, 0]) * window.cell_size
    y = window.origin_y + (window.n_rows - 1 - rr[cell_idx] + offsets[:, 1]) * window.cell_size
    return PointPattern(np.column_stack([x, y]), window)


def expected_count(intensity: IntensityMap, region: np.ndarray) -> float:
    """Integral of the intensity over `region`: sum of value * cell area."""
    region = np.asarray(region, dtype=bool)
    window = intensity.window
    if region.shape != intensity.values.shape:
        raise DataError("region mask shape does not match the map")
    use = region & window.validity_mask
    return float(np.sum(intensity.values[use]) * window.cell_area)


@dataclass(frozen=True)
class BootstrapMaps:
    """Per-cell sd and percentile maps over B replicate intensity fits."""

    replicates: int
    effective_replicates: int
    failures: int
    alpha: float
    sd: RasterGrid
    percentile: RasterGrid


def _percentile_index(alpha: float, n: int) -> int:
    """0-based index of the ceiling order statistic at level alpha."""
    return min(n - 1, max(0, math.ceil(alpha * n) - 1))


def semiparametric_bootstrap(model: FittedModel, stack: CovariateStack,
                             quad: QuadratureScheme, B: int = DEFAULT_REPLICATES,
                             alpha: float = 0.99, rng: SeededRng | None = None,
                             gamma_mode: str = "reuse", threads: int = 1,
                             replicate_streams=None) -> BootstrapMaps:
    """Sample-and-refit bootstrap of the fitted intensity.

    Each replicate samples a pattern from the model's own intensity map,
    refits the same spec (reusing the original dummy nodes so only the data
    nodes change), and predicts. Outputs the per-cell standard deviation and
    the ceiling order statistic at level `alpha` over the replicate maps.
    Replicates whose refit fails are dropped and counted; more than 20%
    failures aborts. `gamma_mode` "reuse" keeps the original smoothing
    parameters, "auto" re-selects them per replicate.

    `replicate_streams` overrides the per-replicate rng derivation (testing
    hook for forcing duplicate draws).
    """
    if B < 2:
        raise DataError(f"need at least 2 bootstrap replicates, got {B}")
    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must be in (0, 1), got {alpha}")
    if rng is None and replicate_streams is None:
        raise DataError("a SeededRng is required for reproducible bootstrapping")
    if gamma_mode not in ("reuse", "auto"):
        raise DataError(f"unknown gamma_mode {gamma_mode!r}")

    base_map = predict_intensity(model, stack)
    gammas = "auto" if gamma_mode == "auto" else dict(model.gammas)
    streams = (list(replicate_streams) if replicate_streams is not None
               else [rng.child(b) for b in range(B)])
    if len(streams) != B:
        raise DataError("replicate_streams length must equal B")

    def one(b):
        pattern = sample_pattern(base_map, streams[b])
        try:
            quad_b = ppm.rebind_pattern(quad, pattern, stack)
            refit = ppm.fit_model(model.spec, pattern, stack, quad_b, gammas=gammas)
        except (DataError, NumericalError):
            return None
        return predict_intensity(refit, stack).values

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # replicate non-convergence is tallied, not echoed
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, range(B)))
        else:
            results = [one(b) for b in range(B)]

    maps = [m for m in results if m is not None]
    failures = B - len(maps)
    if failures > MAX_FAILURE_FRACTION * B:
        raise NumericalError(
            f"{failures}/{B} bootstrap refits failed; the model is too unstable "
            "for a semiparametric bootstrap"
        )

    window = base_map.window
    valid = window.validity_mask
    rr, cc = np.nonzero(valid)
    cube = np.stack([m[rr, cc] for m in maps])  # (B_eff, n_valid)
    sd = np.full(valid.shape, np.nan)
    sd[rr, cc] = np.std(cube, axis=0, ddof=1)
    pct = np.full(valid.shape, np.nan)
    pct[rr, cc] = np.sort(cube, axis=0)[_percentile_index(alpha, len(maps))]
    return BootstrapMaps(
        replicates=B, effective_replicates=len(maps), failures=failures,
        alpha=alpha, sd=RasterGrid(window, sd), percentile=RasterGrid(window, pct),
    )
