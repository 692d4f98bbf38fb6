"""Point-process model layer: quadrature schemes, intensity model fitting,
log-likelihood evaluation, prediction, in-range masking and cross-area model
selection.

Fitting uses the counting-weight quadrature device: the point-process
log-likelihood

    sum_{x in X} log(lambda(x)) - integral_W lambda(u) du

is discretized onto data + dummy nodes and maximized as a weighted Poisson
regression (responses 1/w at data nodes, 0 at dummies) by the gamcore solver.
Likelihood *evaluation* is pixel-exact: the fitted intensity is piecewise
constant per raster cell, so the integral is an exact sum over cells, which
makes validation likelihoods reproducible for any mask.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gamcore
from .errors import DataError, NumericalError
from .gamcore import (DesignBlock, SplineBasis, build_design,
                      make_design_blocks, pirls_fit, smooth_coefficients)
from .raster import CovariateStack, PointPattern, RasterGrid, Window, range_mask

MODEL_FORMAT_VERSION = 1

#: Default dummy-node spacing, meters (10x the usual 5 m cell).
DEFAULT_DUMMY_SPACING = 50.0

TERM_KINDS = ("linear", "smooth", "categorical")


@dataclass(frozen=True)
class ModelSpec:
    """Intensity model formula: named terms over stack covariates.

    The intercept is always present and not listed. `terms` is a tuple of
    (covariate name, kind) with kind one of linear / smooth / categorical.
    """

    terms: tuple[tuple[str, str], ...]
    name: str = "model"

    def __post_init__(self):
        terms = tuple((str(n), str(k)) for n, k in self.terms)
        names = [n for n, _ in terms]
        if len(set(names)) != len(names):
            raise DataError(f"model {self.name!r}: a covariate appears twice")
        for n, k in terms:
            if k not in TERM_KINDS:
                raise DataError(f"model {self.name!r}: unknown term kind {k!r} for {n!r}")
        object.__setattr__(self, "terms", terms)

    @property
    def covariates(self) -> list[str]:
        return [n for n, _ in self.terms]


@dataclass(frozen=True)
class QuadratureScheme:
    """Data + dummy nodes discretizing the intensity integral.

    Tiles are dummy-grid squares (the spacing snapped to a whole number of
    cells). Every tile holding at least one valid cell carries exactly one
    dummy node at the valid cell nearest its center; each node in a tile gets
    weight = (valid area of the tile) / (nodes in the tile), so the weights
    sum to the valid window area exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    is_data: np.ndarray
    cell_rows: np.ndarray
    cell_cols: np.ndarray
    table: dict[str, np.ndarray]
    window: Window
    tile_shape: tuple[int, int] = field(repr=False, default=(1, 1))
    tile_cells: int = field(repr=False, default=1)
    tile_areas: dict = field(repr=False, default=None)

    @property
    def n_data(self) -> int:
        return int(self.is_data.sum())


def _tile_of(window: Window, rows, cols, ratio):
    """Tile indices (from the south-west corner) of cells (rows, cols)."""
    rows_s = window.n_rows - 1 - np.asarray(rows)
    return rows_s // ratio, np.asarray(cols) // ratio


def dummy_grid_cells(window: Window, valid: np.ndarray, ratio: int):
    """Dummy-node cells for a grid of `ratio`-by-`ratio`-cell tiles.

    Every tile with at least one valid cell gets one node at the valid cell
    nearest its center (ties broken row-major). Returns (rows, cols, tile ids,
    per-tile valid areas, tile grid shape).
    """
    n_rows, n_cols = valid.shape
    cell = window.cell_size
    rows_s = n_rows - 1 - np.arange(n_rows)  # south-based row index per raster row
    tile_r_of_row = rows_s // ratio
    tile_c_of_col = np.arange(n_cols) // ratio
    n_tr = int(tile_r_of_row.max()) + 1
    n_tc = int(tile_c_of_col.max()) + 1

    tile_flat = tile_r_of_row[:, None] * n_tc + tile_c_of_col[None, :]
    counts = np.bincount(tile_flat[valid].ravel(), minlength=n_tr * n_tc)
    tile_area = counts.astype(float) * window.cell_area

    vr, vc = np.nonzero(valid)
    v_tiles = tile_flat[vr, vc]
    tx, ty = window.cell_center(vr, vc)
    tile_cx = window.origin_x + (v_tiles % n_tc + 0.5) * ratio * cell
    tile_cy = window.origin_y + (v_tiles // n_tc + 0.5) * ratio * cell
    dist2 = (tx - tile_cx) ** 2 + (ty - tile_cy) ** 2
    # even ratios put the tile center on a cell corner, so four cells tie;
    # alternate the tie-break by tile parity or every dummy would drift
    # half a cell the same way and bias the quadrature moments
    parity = (v_tiles // n_tc + v_tiles % n_tc) % 2 == 0
    rank = vr.astype(np.int64) * window.n_cols + vc
    preference = np.where(parity, rank, -rank)
    order = np.lexsort((preference, dist2, v_tiles))
    v_tiles_sorted = v_tiles[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = v_tiles_sorted[1:] != v_tiles_sorted[:-1]
    pick = order[first]
    return vr[pick], vc[pick], v_tiles[pick], tile_area, (n_tr, n_tc)


def make_quadrature(pattern: PointPattern, stack: CovariateStack,
                    dummy_spacing: float = DEFAULT_DUMMY_SPACING) -> QuadratureScheme:
    """Counting-weight quadrature over the stack's valid window.

    `dummy_spacing` is rounded to a whole number of cells (at least one) so
    tile areas are pixel-exact. Pattern points sitting on cells where any
    covariate is NODATA are an error.
    """
    window = stack.window
    if not pattern.window.same_geometry(window):
        raise DataError("pattern window does not match the covariate stack window")
    cell = window.cell_size
    if dummy_spacing < cell:
        raise DataError(f"dummy_spacing {dummy_spacing} is below the cell size {cell}")
    ratio = max(1, int(round(dummy_spacing / cell)))

    valid = window.validity_mask
    if len(pattern):
        pr, pc = pattern.cells()
        bad = ~valid[pr, pc]
        if bad.any():
            offenders = pattern.points[bad][:10]
            raise DataError(
                f"{int(bad.sum())} pattern point(s) sit on NODATA covariate cells, "
                f"first offenders: {offenders.tolist()}"
            )
    else:
        pr = pc = np.empty(0, dtype=int)

    dr, dc, dummy_tiles, tile_area, (n_tr, n_tc) = dummy_grid_cells(window, valid, ratio)
    tr_p, tc_p = _tile_of(window, pr, pc, ratio)

    rows_all = np.concatenate([pr, dr])
    cols_all = np.concatenate([pc, dc])
    dx, dy = window.cell_center(dr, dc)
    points_all = np.concatenate([pattern.points.reshape(-1, 2),
                                 np.column_stack([dx, dy])])
    is_data = np.zeros(len(rows_all), dtype=bool)
    is_data[: len(pr)] = True

    node_tiles = np.concatenate([tr_p * n_tc + tc_p, dummy_tiles]).astype(int)
    per_tile_nodes = np.bincount(node_tiles, minlength=n_tr * n_tc)
    weights = tile_area[node_tiles] / per_tile_nodes[node_tiles]

    table = stack.values_at_cells(rows_all, cols_all)
    areas = {int(t): float(tile_area[t]) for t in np.unique(dummy_tiles)}
    return QuadratureScheme(
        points=points_all, weights=weights, is_data=is_data,
        cell_rows=rows_all, cell_cols=cols_all, table=table, window=window,
        tile_shape=(n_tr, n_tc), tile_cells=ratio, tile_areas=areas,
    )


def rebind_pattern(quad: QuadratureScheme, pattern: PointPattern,
                   stack: CovariateStack) -> QuadratureScheme:
    """Same dummy nodes, new data nodes; tile weights recomputed.

    Used by the bootstrap so replicate fits differ only through the sampled
    pattern, not through quadrature construction.
    """
    window = quad.window
    if not pattern.window.same_geometry(window):
        raise DataError("pattern window does not match the quadrature window")
    keep = ~quad.is_data
    dr, dc = quad.cell_rows[keep], quad.cell_cols[keep]
    dummy_pts = quad.points[keep]
    ratio = quad.tile_cells
    n_tr, n_tc = quad.tile_shape

    if len(pattern):
        pr, pc = pattern.cells()
        if (~window.validity_mask[pr, pc]).any():
            raise DataError("replicate pattern has points on NODATA cells")
    else:
        pr = pc = np.empty(0, dtype=int)

    tr, tc = _tile_of(window, np.concatenate([pr, dr]), np.concatenate([pc, dc]), ratio)
    node_tiles = (tr * n_tc + tc).astype(int)
    per_tile = np.bincount(node_tiles, minlength=n_tr * n_tc)
    tile_area = np.zeros(n_tr * n_tc)
    for t, a in quad.tile_areas.items():
        tile_area[t] = a
    weights = tile_area[node_tiles] / per_tile[node_tiles]

    rows_all = np.concatenate([pr, dr])
    cols_all = np.concatenate([pc, dc])
    points_all = np.concatenate([pattern.points.reshape(-1, 2), dummy_pts])
    is_data = np.zeros(len(rows_all), dtype=bool)
    is_data[: len(pr)] = True
    table = stack.values_at_cells(rows_all, cols_all)
    return QuadratureScheme(
        points=points_all, weights=weights, is_data=is_data,
        cell_rows=rows_all, cell_cols=cols_all, table=table, window=window,
        tile_shape=quad.tile_shape, tile_cells=ratio, tile_areas=quad.tile_areas,
    )


@dataclass(frozen=True)
class FittedModel:
    """A fitted intensity model: formula, bases, coefficients, smoothing
    parameters, training covariate ranges and fit diagnostics."""

    spec: ModelSpec
    blocks: tuple[DesignBlock, ...]
    beta: np.ndarray
    gammas: dict[str, float]
    ranges: dict[str, tuple[float, float]]
    window_meta: dict
    diagnostics: dict

    @property
    def name(self) -> str:
        return self.spec.name

    def smooth_effect(self, name: str, x):
        """Fitted marginal effect f(x) of one smooth term (sum-to-zero scaled)."""
        for b in self.blocks:
            if b.kind == "smooth" and b.name == name:
                return gamcore.evaluate_smooth(b.basis, smooth_coefficients(b, self.beta), x)
        raise DataError(f"model has no smooth term {name!r}")


@dataclass(frozen=True)
class IntensityMap(RasterGrid):
    """Estimated intensity (expected crowns per m^2) on a window.

    Values must be strictly positive on valid cells; the exponential link
    guarantees this unless the linear predictor underflows.
    """

    def __post_init__(self):
        super().__post_init__()
        valid = self.window.validity_mask
        if valid.any() and not np.all(self.values[valid] > 0):
            raise DataError("intensity must be strictly positive on valid cells")


def fit_model(spec: ModelSpec, pattern: PointPattern, stack: CovariateStack,
              quad: QuadratureScheme, gammas="auto",
              basis_dim: int = gamcore.DEFAULT_BASIS_DIM) -> FittedModel:
    """Maximum-likelihood fit of `spec` on the quadrature scheme.

    Responses are 1/w at data nodes and 0 at dummies, so the weighted Poisson
    objective equals the discretized point-process log-likelihood.
    """
    if quad.n_data != len(pattern) or not pattern.window.same_geometry(quad.window):
        raise DataError("quadrature was not built from this pattern")
    for name in spec.covariates:
        if name not in stack:
            raise DataError(f"model covariate {name!r} is not in the stack")
    if len(pattern) == 0:
        raise DataError("cannot fit an intensity model to an empty pattern")

    table = {name: quad.table[name] for name in spec.covariates}
    blocks = make_design_blocks(spec.terms, table, basis_dim=basis_dim)
    y = np.where(quad.is_data, 1.0 / quad.weights, 0.0)
    result = pirls_fit(blocks, table, y, quad.weights, gammas=gammas)
    if not result.converged:
        warnings.warn(f"model {spec.name!r}: solver stopped before convergence")

    ranges = {name: (float(np.min(col)), float(np.max(col))) for name, col in table.items()}
    w = quad.window
    window_meta = {
        "origin_x": w.origin_x, "origin_y": w.origin_y,
        "n_rows": w.n_rows, "n_cols": w.n_cols, "cell_size": w.cell_size,
        "n_points": len(pattern), "n_dummy": int(len(quad.weights) - quad.n_data),
    }
    diagnostics = {
        "converged": result.converged,
        "iterations": result.iterations,
        "loglik": result.loglik,
        "penalized_loglik": result.penalized_loglik,
        "edf": result.edf,
    }
    return FittedModel(spec=spec, blocks=tuple(blocks), beta=result.beta,
                       gammas=result.gammas, ranges=ranges,
                       window_meta=window_meta, diagnostics=diagnostics)


def _linear_predictor(model: FittedModel, stack: CovariateStack):
    """(eta grid, valid mask): eta = design row . beta wherever every model
    covariate is observed."""
    window = stack.window
    mask = np.ones((window.n_rows, window.n_cols), dtype=bool)
    for name in model.spec.covariates:
        mask &= stack[name].window.validity_mask
    rr, cc = np.nonzero(mask)
    table = stack.values_at_cells(rr, cc, names=model.spec.covariates)
    X = build_design(list(model.blocks), table, n_rows=len(rr))
    eta = np.full(mask.shape, np.nan)
    eta[rr, cc] = X @ model.beta
    return eta, mask


def predict_intensity(model: FittedModel, stack: CovariateStack) -> IntensityMap:
    """Intensity map exp(design . beta); NODATA where any covariate is missing."""
    eta, mask = _linear_predictor(model, stack)
    with np.errstate(over="raise"):
        values = np.where(mask, np.exp(np.where(mask, eta, 0.0)), np.nan)
    base = stack.window.with_mask(mask)
    return IntensityMap(base, values)


def in_range_mask_for(model: FittedModel, stack: CovariateStack) -> np.ndarray:
    """Cells where every model covariate lies in its training range."""
    return range_mask(stack, model.ranges)


def loglik(model: FittedModel, pattern: PointPattern, stack: CovariateStack,
           mask: np.ndarray | None = None) -> float:
    """Pixel-exact point-process log-likelihood restricted to `mask`.

    sum over in-mask points of log(intensity at the point) minus the exact
    per-cell integral of the intensity over the masked cells. Points on
    masked-out cells are excluded with a warning.
    """
    eta, valid = _linear_predictor(model, stack)
    if mask is None:
        mask = valid
    else:
        mask = np.asarray(mask, dtype=bool)
        outside = mask & ~valid
        if outside.any():
            warnings.warn(f"loglik: {int(outside.sum())} mask cell(s) lack intensity; ignored")
            mask = mask & valid

    total = 0.0
    if len(pattern):
        pr, pc = pattern.window.cells_of(pattern.points)
        inside = mask[pr, pc]
        if (~inside).any():
            warnings.warn(f"loglik: {int((~inside).sum())} point(s) outside the mask excluded")
        total += float(np.sum(eta[pr[inside], pc[inside]]))
    total -= float(np.sum(np.exp(eta[mask])) * stack.window.cell_area)
    return total


@dataclass(frozen=True)
class SelectionEntry:
    model: FittedModel
    loglik: float

    @property
    def name(self):
        return self.model.name


def select_model(models, pattern: PointPattern, stack: CovariateStack) -> list[SelectionEntry]:
    """Rank models by log-likelihood on the intersection of in-range masks.

    Ties (within 1e-9 relative) go to the model with fewer terms, then input
    order. An empty intersection is an error: the training ranges do not
    overlap on this stack, so no fair comparison exists.
    """
    models = list(models)
    if len(models) < 2:
        raise DataError("model selection needs at least two models")
    common = stack.window.validity_mask.copy()
    for m in models:
        common &= in_range_mask_for(m, stack)
    if not common.any():
        raise DataError(
            "intersection of in-range masks is empty; inspect the covariate ranges "
            "of the candidate models against this stack"
        )
    entries = []
    for i, m in enumerate(models):
        ll = loglik(m, pattern, stack, common)
        entries.append((ll, len(m.spec.terms), i, m))
    scale = max(1.0, max(abs(e[0]) for e in entries))

    def key(e):
        ll, n_terms, order, _ = e
        return (-round(ll / scale, 9), n_terms, order)

    return [SelectionEntry(model=m, loglik=ll) for ll, _, _, m in sorted(entries, key=key)]


# ---------------------------------------------------------------------------
# Serialization


def _block_to_dict(b: DesignBlock) -> dict:
    out = {"kind": b.kind, "name": b.name, "start": b.start, "stop": b.stop}
    if b.kind == "smooth":
        out["knots"] = b.basis.knots.tolist()
        out["constraint"] = b.constraint.tolist()
        out["penalty"] = b.penalty.tolist()
    elif b.kind == "categorical":
        out["levels"] = list(b.levels)
    return out


def _block_from_dict(d: dict) -> DesignBlock:
    kind = d["kind"]
    if kind == "smooth":
        return DesignBlock(kind, d["name"], d["start"], d["stop"],
                           basis=SplineBasis(d["name"], np.array(d["knots"])),
                           penalty=np.array(d["penalty"]),
                           constraint=np.array(d["constraint"]))
    if kind == "categorical":
        return DesignBlock(kind, d["name"], d["start"], d["stop"],
                           levels=tuple(d["levels"]))
    return DesignBlock(kind, d["name"], d["start"], d["stop"])


def save_model(model: FittedModel, path) -> None:
    """Write the model as a versioned, self-describing JSON text document."""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "name": model.spec.name,
        "terms": [list(t) for t in model.spec.terms],
        "beta": model.beta.tolist(),
        "gammas": model.gammas,
        "ranges": {k: list(v) for k, v in model.ranges.items()},
        "window": model.window_meta,
        "diagnostics": model.diagnostics,
        "blocks": [_block_to_dict(b) for b in model.blocks],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> FittedModel:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported model format version {version!r}")
    spec = ModelSpec(tuple((n, k) for n, k in doc["terms"]), name=doc["name"])
    blocks = tuple(_block_from_dict(d) for d in doc["blocks"])
    return FittedModel(
        spec=spec, blocks=blocks, beta=np.array(doc["beta"], dtype=float),
        gammas={k: float(v) for k, v in doc["gammas"].items()},
        ranges={k: (float(v[0]), float(v[1])) for k, v in doc["ranges"].items()},
        window_meta=doc["window"], diagnostics=doc["diagnostics"],
    )
