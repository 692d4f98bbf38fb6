"""Cubic regression spline bases, curvature penalties, and the penalized
weighted-Poisson solver that every intensity model reduces to.

The spline basis is the cardinal cubic regression spline: `k` strictly
increasing knots, one basis function per knot, each function the cubic spline
interpolating a unit value at its knot and zero at the others. End conditions
are not-a-knot (third-derivative continuity at the first and last interior
knots) so the span contains every global cubic on the knot range; with only
three knots the ends fall back to natural. Second derivatives are piecewise
linear, which gives the curvature penalty `S[a,b] = integral of Ba'' Bb''`
in closed form.

The solver maximizes

    sum_i w_i (y_i log(lambda_i) - lambda_i) - 1/2 sum_j gamma_j b_j' S_j b_j

with log(lambda_i) = x_i . beta, by penalized iteratively reweighted least
squares with step halving. Smoothing parameters can be fixed or selected by
minimizing an unbiased risk score of the working least-squares problem over a
log-spaced grid followed by golden-section refinement; everything is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError

DEFAULT_BASIS_DIM = 10

#: P-IRLS controls: relative objective change, gradient scale, iteration cap.
PIRLS_REL_TOL = 1e-8
PIRLS_GRAD_TOL = 1e-6
PIRLS_MAX_ITER = 200

#: Smoothing-parameter search: 33-point log grid on [1e-8, 1e8] per smooth.
GAMMA_GRID = 10.0 ** np.linspace(-8.0, 8.0, 33)
GAMMA_MAX_ROUNDS = 5
GAMMA_REL_TOL = 1e-3


# ---------------------------------------------------------------------------
# Spline basis


@dataclass(frozen=True)
class SplineBasis:
    """Cardinal cubic regression spline on strictly increasing knots."""

    name: str
    knots: np.ndarray
    curvature_map: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or len(knots) < 3:
            raise DataError("need at least 3 knots")
        if not np.all(np.diff(knots) > 0):
            raise DataError(f"knots must be strictly increasing for {self.name!r}")
        knots = knots.copy()
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        if self.curvature_map is None:
            object.__setattr__(self, "curvature_map", _second_derivative_map(knots))
        self.curvature_map.setflags(write=False)

    @property
    def k(self) -> int:
        return len(self.knots)


def _spline_system(knots):
    """(A, G) with A d = G c defining knot second-derivatives d from values c."""
    k = len(knots)
    h = np.diff(knots)
    A = np.zeros((k, k))
    G = np.zeros((k, k))
    for j in range(1, k - 1):
        A[j, j - 1] = h[j - 1] / 6.0
        A[j, j] = (h[j - 1] + h[j]) / 3.0
        A[j, j + 1] = h[j] / 6.0
        G[j, j - 1] = 1.0 / h[j - 1]
        G[j, j] = -1.0 / h[j - 1] - 1.0 / h[j]
        G[j, j + 1] = 1.0 / h[j]
    if k == 3:
        # not-a-knot needs two interior knots; fall back to natural ends
        A[0, 0] = 1.0
        A[-1, -1] = 1.0
    else:
        A[0, 0] = -1.0 / h[0]
        A[0, 1] = 1.0 / h[0] + 1.0 / h[1]
        A[0, 2] = -1.0 / h[1]
        A[-1, -3] = -1.0 / h[-2]
        A[-1, -2] = 1.0 / h[-2] + 1.0 / h[-1]
        A[-1, -1] = -1.0 / h[-1]
    return A, G


def _second_derivative_map(knots):
    """k x k matrix F with (F c) = spline second derivatives at the knots."""
    A, G = _spline_system(knots)
    return np.linalg.solve(A, G)


def _mass_matrix(knots):
    """Gram matrix of the piecewise-linear hat functions on the knots."""
    k = len(knots)
    h = np.diff(knots)
    M = np.zeros((k, k))
    for j in range(k - 1):
        M[j, j] += h[j] / 3.0
        M[j + 1, j + 1] += h[j] / 3.0
        M[j, j + 1] += h[j] / 6.0
        M[j + 1, j] += h[j] / 6.0
    return M


def build_basis(values, k: int = DEFAULT_BASIS_DIM, name: str = "") -> SplineBasis:
    """Place `k` knots at quantiles of `values` (equally spaced probability
    levels, boundaries at min/max).

    Raises when fewer than `k` distinct values are supplied.
    """
    values = np.asarray(values, dtype=float).ravel()
    distinct = np.unique(values)
    if len(distinct) < k:
        raise DataError(
            f"covariate {name!r} has {len(distinct)} distinct values, need >= {k} for the basis"
        )
    levels = np.linspace(0.0, 1.0, k)
    knots = np.quantile(values, levels)
    if not np.all(np.diff(knots) > 0):
        # heavy ties can collapse sample quantiles; spread over distinct values
        knots = np.quantile(distinct, levels)
    return SplineBasis(name, knots)


@dataclass(frozen=True)
class PenaltyMatrix:
    """Curvature penalty S[a,b] = integral of Ba''(t) Bb''(t) over the knot span.

    S is symmetric positive semidefinite and annihilates every coefficient
    vector representing a globally linear function (null space dimension 2).
    """

    basis: SplineBasis
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            F = self.basis.curvature_map
            S = F.T @ _mass_matrix(self.basis.knots) @ F
            S = (S + S.T) / 2.0
            S.setflags(write=False)
            object.__setattr__(self, "values", S)

    def quad_form(self, coefs) -> float:
        """Integrated squared second derivative of the spline with values `coefs`.

        Computed through the factorized system so that coefficient vectors of
        exactly representable linear functions give exactly zero.
        """
        c = np.asarray(coefs, dtype=float)
        knots = self.basis.knots
        k = len(knots)
        h = np.diff(knots)
        rhs = np.zeros(k)
        for j in range(1, k - 1):
            rhs[j] = (c[j - 1] - c[j]) / h[j - 1] + (c[j + 1] - c[j]) / h[j]
        A, _ = _spline_system(knots)
        d = np.linalg.solve(A, rhs)
        return float(d @ _mass_matrix(knots) @ d)


def penalty_matrix(basis: SplineBasis) -> PenaltyMatrix:
    return PenaltyMatrix(basis)


def basis_matrix(basis: SplineBasis, x) -> np.ndarray:
    """Rows of basis-function values at `x`; linear extrapolation outside the
    boundary knots (boundary value plus boundary slope)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = basis.knots
    k = basis.k
    h = np.diff(t)
    F = basis.curvature_map

    xc = np.clip(x, t[0], t[-1])
    j = np.clip(np.searchsorted(t, xc, side="right") - 1, 0, k - 2)
    hj = h[j]
    left = (t[j + 1] - xc) / hj
    right = (xc - t[j]) / hj
    psi_l = ((t[j + 1] - xc) ** 3 / hj - hj * (t[j + 1] - xc)) / 6.0
    psi_r = ((xc - t[j]) ** 3 / hj - hj * (xc - t[j])) / 6.0

    rows = np.zeros((len(x), k))
    idx = np.arange(len(x))
    rows[idx, j] += left
    rows[idx, j + 1] += right
    rows += psi_l[:, None] * F[j] + psi_r[:, None] * F[j + 1]

    below = x < t[0]
    if below.any():
        slope = np.zeros(k)
        slope[0] = -1.0 / h[0]
        slope[1] = 1.0 / h[0]
        slope -= h[0] * (2.0 * F[0] + F[1]) / 6.0
        base = np.zeros(k)
        base[0] = 1.0
        rows[below] = base + (x[below] - t[0])[:, None] * slope
    above = x > t[-1]
    if above.any():
        slope = np.zeros(k)
        slope[-2] = -1.0 / h[-1]
        slope[-1] = 1.0 / h[-1]
        slope += h[-1] * (F[-2] + 2.0 * F[-1]) / 6.0
        base = np.zeros(k)
        base[-1] = 1.0
        rows[above] = base + (x[above] - t[-1])[:, None] * slope
    return rows


def evaluate_smooth(basis: SplineBasis, coefs, x):
    """f(x) = sum_a coefs[a] * Ba(x); scalar in, scalar out."""
    coefs = np.asarray(coefs, dtype=float)
    if len(coefs) != basis.k:
        raise DataError(f"expected {basis.k} coefficients, got {len(coefs)}")
    values = basis_matrix(basis, x) @ coefs
    return float(values[0]) if np.isscalar(x) or np.ndim(x) == 0 else values


# ---------------------------------------------------------------------------
# Design blocks


@dataclass(frozen=True)
class DesignBlock:
    """One additive term's slice of the design matrix.

    Smooth blocks carry a basis, a curvature penalty (already reduced by the
    sum-to-zero constraint) and the constraint null-space transform ``Z``;
    categorical blocks carry their training levels (first level is the
    reference); intercept and linear blocks carry nothing extra.
    """

    kind: str
    name: str
    start: int
    stop: int
    basis: SplineBasis | None = None
    penalty: np.ndarray | None = None
    constraint: np.ndarray | None = None
    levels: tuple[float, ...] | None = None

    @property
    def n_cols(self) -> int:
        return self.stop - self.start


def _constraint_null_basis(c):
    """Orthonormal (k, k-1) basis of the hyperplane {v : c . v = 0}."""
    q, _ = np.linalg.qr(np.asarray(c, dtype=float).reshape(-1, 1), mode="complete")
    return q[:, 1:]


def make_design_blocks(terms, table: dict[str, np.ndarray],
                       basis_dim: int = DEFAULT_BASIS_DIM) -> list[DesignBlock]:
    """Build design blocks (intercept first) from (name, kind) terms and
    training covariate columns.

    Smooth terms get quantile knots from their training values and a
    sum-to-zero constraint over the training rows, absorbed by reparameterizing
    onto the constraint null space so the centered columns stay full rank.
    """
    blocks = [DesignBlock("intercept", "", 0, 1)]
    col = 1
    seen = set()
    for name, kind in terms:
        if name in seen:
            raise DataError(f"covariate {name!r} appears twice in the model")
        seen.add(name)
        values = np.asarray(table[name], dtype=float)
        if kind == "linear":
            blocks.append(DesignBlock("linear", name, col, col + 1))
            col += 1
        elif kind == "categorical":
            levels = tuple(float(v) for v in np.unique(values))
            if len(levels) < 2:
                raise DataError(f"categorical {name!r} has a single training level")
            blocks.append(DesignBlock("categorical", name, col, col + len(levels) - 1,
                                      levels=levels))
            col += len(levels) - 1
        elif kind == "smooth":
            basis = build_basis(values, k=basis_dim, name=name)
            S = penalty_matrix(basis).values
            B = basis_matrix(basis, values)
            Z = _constraint_null_basis(B.sum(axis=0))
            Sz = Z.T @ S @ Z
            Sz = (Sz + Sz.T) / 2.0
            blocks.append(DesignBlock("smooth", name, col, col + basis.k - 1,
                                      basis=basis, penalty=Sz, constraint=Z))
            col += basis.k - 1
        else:
            raise DataError(f"unknown term kind {kind!r} for {name!r}")
    return blocks


def build_design(blocks, table: dict[str, np.ndarray], n_rows: int | None = None) -> np.ndarray:
    """Assemble the design matrix for covariate columns `table`.

    `n_rows` is only needed for intercept-only designs, where `table` may be
    empty.
    """
    if table:
        n = len(np.asarray(next(iter(table.values()))))
    elif n_rows is not None:
        n = n_rows
    else:
        raise DataError("no covariate columns supplied and n_rows not given")
    X = np.zeros((n, blocks[-1].stop))
    for b in blocks:
        if b.kind == "intercept":
            X[:, b.start] = 1.0
        elif b.kind == "linear":
            X[:, b.start] = table[b.name]
        elif b.kind == "categorical":
            values = np.asarray(table[b.name], dtype=float)
            codes = np.searchsorted(b.levels, values)
            codes = np.clip(codes, 0, len(b.levels) - 1)
            if not np.all(np.asarray(b.levels)[codes] == values):
                raise DataError(f"categorical {b.name!r} has values outside training levels")
            for lvl in range(1, len(b.levels)):
                X[:, b.start + lvl - 1] = codes == lvl
        elif b.kind == "smooth":
            X[:, b.start:b.stop] = basis_matrix(b.basis, table[b.name]) @ b.constraint
    return X


def smooth_coefficients(block: DesignBlock, beta: np.ndarray) -> np.ndarray:
    """Full-basis coefficients of a smooth block from the fitted beta."""
    return block.constraint @ beta[block.start:block.stop]


# ---------------------------------------------------------------------------
# Penalized IRLS


@dataclass
class PirlsResult:
    beta: np.ndarray
    gammas: dict[str, float]
    converged: bool
    penalized_loglik: float
    loglik: float
    edf: float
    iterations: int
    objective_path: list


def _penalty_root(S):
    """R with S = R' R (PSD square root via the eigendecomposition)."""
    eigvals, vecs = np.linalg.eigh((S + S.T) / 2.0)
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    return root[:, None] * vecs.T


def _stable_quad(S, b):
    """b' S b through the PSD square root, so near-null-space vectors do not
    lose the value to cancellation (matters when gamma is huge)."""
    r = _penalty_root(S) @ b
    return float(r @ r)


def penalized_objective(X, y, w, beta, penalties):
    """w-weighted Poisson log-likelihood minus the curvature penalty.

    `penalties` is a list of (gamma, S, start, stop) tuples.
    """
    eta = X @ beta
    value = float(np.sum(w * (y * eta - np.exp(eta))))
    for gamma, S, start, stop in penalties:
        value -= 0.5 * gamma * _stable_quad(S, beta[start:stop])
    return value


def penalized_gradient(X, y, w, beta, penalties):
    eta = X @ beta
    g = X.T @ (w * (y - np.exp(eta)))
    for gamma, S, start, stop in penalties:
        g[start:stop] -= gamma * (S @ beta[start:stop])
    return g


def _penalty_tuples(blocks, gammas):
    return [(gammas[b.name], b.penalty, b.start, b.stop)
            for b in blocks if b.kind == "smooth"]


def _embed_penalty(p, penalties):
    P = np.zeros((p, p))
    for gamma, S, start, stop in penalties:
        P[start:stop, start:stop] += gamma * S
    return P


def _check_rank(X, blocks, penalties):
    p = X.shape[1]
    H = X.T @ X + _embed_penalty(p, penalties)
    if np.linalg.matrix_rank(H) == p:
        return
    for b in blocks:
        Xb = X[:, : b.stop]
        Hb = Xb.T @ Xb + _embed_penalty(b.stop, [t for t in penalties if t[3] <= b.stop])
        if np.linalg.matrix_rank(Hb) < b.stop:
            raise NumericalError(
                f"design is rank deficient at block {b.kind}({b.name!r}); "
                "check for constant or duplicated covariates"
            )
    raise NumericalError("design is rank deficient")


def _irls(X, y, w, penalties, beta0, grad_scale):
    """Maximize the penalized objective by IRLS with step halving.

    The working least-squares problem is solved in augmented form (penalty
    absorbed as sqrt(gamma) * R rows, S = R'R), which stays accurate even for
    extreme smoothing parameters where the normal equations lose the
    penalty-null-space directions to rounding.
    """
    n, p = X.shape
    beta = beta0.copy()
    obj = penalized_objective(X, y, w, beta, penalties)
    path = [obj]
    aug_rows = []
    for gamma, S, start, stop in penalties:
        R = np.sqrt(gamma) * _penalty_root(S)
        block = np.zeros((R.shape[0], p))
        block[:, start:stop] = R
        aug_rows.append(block)
    aug = np.vstack(aug_rows) if aug_rows else np.empty((0, p))
    aug_zero = np.zeros(aug.shape[0])
    converged = False
    it = 0
    for it in range(1, PIRLS_MAX_ITER + 1):
        eta = X @ beta
        lam = np.exp(eta)
        weights = w * lam
        z = eta + (y - lam) / lam
        root_w = np.sqrt(weights)
        A = np.vstack([root_w[:, None] * X, aug])
        b = np.concatenate([root_w * z, aug_zero])
        proposal, *_ = np.linalg.lstsq(A, b, rcond=None)
        if not np.all(np.isfinite(proposal)):
            raise NumericalError(f"singular working system at iteration {it}")

        step = proposal - beta
        new_obj = None
        t = 1.0
        for _ in range(40):
            candidate = beta + t * step
            cand_obj = penalized_objective(X, y, w, candidate, penalties)
            if np.isfinite(cand_obj) and cand_obj >= obj - 1e-12 * max(1.0, abs(obj)):
                beta = candidate
                new_obj = cand_obj
                break
            t /= 2.0
        if new_obj is None:
            break  # no ascent direction left; stop at the last iterate
        path.append(new_obj)
        rel = abs(new_obj - obj) / max(1.0, abs(obj))
        obj = new_obj
        if rel < PIRLS_REL_TOL:
            grad = penalized_gradient(X, y, w, beta, penalties)
            if np.max(np.abs(grad)) <= PIRLS_GRAD_TOL * grad_scale:
                converged = True
                break
    return beta, obj, converged, it, path


def _working_quantities(X, y, w, beta):
    eta = X @ beta
    lam = np.exp(eta)
    weights = w * lam
    z = eta + (y - lam) / lam
    return weights, z


def _ubre_score(XtWX, XtWz, zWz, penalties, p):
    """Working-model unbiased risk: weighted RSS plus twice the model dof."""
    H = XtWX + _embed_penalty(p, penalties)
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.inf, None
    beta = Hinv @ XtWz
    rss = zWz - 2.0 * float(beta @ XtWz) + float(beta @ XtWX @ beta)
    edf = float(np.trace(Hinv @ XtWX))
    return rss + 2.0 * edf, beta


def _golden_refine(score_fn, log_lo, log_hi, tol=1e-3, max_iter=40):
    """Golden-section minimization of score_fn(10**x) on [log_lo, log_hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = log_lo, log_hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = score_fn(10.0**c), score_fn(10.0**d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = score_fn(10.0**c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = score_fn(10.0**d)
    return 10.0 ** ((a + b) / 2.0)


def _select_gammas(X, y, w, beta, blocks, gammas):
    """Coordinate-wise risk minimization on the frozen working problem."""
    weights, z = _working_quantities(X, y, w, beta)
    XtWX = X.T @ (weights[:, None] * X)
    XtWz = X.T @ (weights * z)
    zWz = float(z @ (weights * z))
    p = X.shape[1]
    out = dict(gammas)
    for b in blocks:
        if b.kind != "smooth":
            continue

        def score(g, _name=b.name):
            trial = dict(out)
            trial[_name] = g
            s, _ = _ubre_score(XtWX, XtWz, zWz, _penalty_tuples(blocks, trial), p)
            return s

        values = [score(g) for g in GAMMA_GRID]
        i = int(np.argmin(values))
        lo = GAMMA_GRID[max(i - 1, 0)]
        hi = GAMMA_GRID[min(i + 1, len(GAMMA_GRID) - 1)]
        out[b.name] = _golden_refine(score, np.log10(lo), np.log10(hi))
    return out


def pirls_fit(blocks, table, y, w, gammas="auto") -> PirlsResult:
    """Fit the penalized weighted-Poisson model defined by `blocks`.

    `table` maps covariate names to node columns; `y` and `w` are the node
    responses and weights. `gammas` is either "auto" or a mapping from smooth
    names to fixed smoothing parameters.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise DataError("node weights must be positive")
    if np.any(y < 0):
        raise DataError("responses must be non-negative")
    X = build_design(blocks, table, n_rows=len(y))
    p = X.shape[1]
    smooth_blocks = [b for b in blocks if b.kind == "smooth"]

    auto = isinstance(gammas, str) and gammas == "auto"
    if auto:
        gam = {b.name: 1.0 for b in smooth_blocks}
    else:
        gam = {b.name: float(gammas[b.name]) for b in smooth_blocks}
    _check_rank(X, blocks, _penalty_tuples(blocks, {k: 1.0 for k in gam}))

    grad_scale = max(1.0, float(np.sum(w * y)))
    beta = np.zeros(p)
    mean_rate = float(np.sum(w * y) / np.sum(w))
    beta[0] = np.log(mean_rate) if mean_rate > 0 else -30.0

    iterations = 0
    path = []
    converged = False
    for round_ in range(GAMMA_MAX_ROUNDS if (auto and smooth_blocks) else 1):
        penalties = _penalty_tuples(blocks, gam)
        beta, obj, converged, its, p_path = _irls(X, y, w, penalties, beta, grad_scale)
        iterations += its
        path.extend(p_path)
        if not (auto and smooth_blocks):
            break
        new_gam = _select_gammas(X, y, w, beta, blocks, gam)
        rel = max(abs(np.log(new_gam[k]) - np.log(gam[k])) for k in gam)
        gam = new_gam
        if rel < GAMMA_REL_TOL:
            break
    if auto and smooth_blocks:
        penalties = _penalty_tuples(blocks, gam)
        beta, obj, converged, its, p_path = _irls(X, y, w, penalties, beta, grad_scale)
        iterations += its
        path.extend(p_path)

    penalties = _penalty_tuples(blocks, gam)
    weights, _ = _working_quantities(X, y, w, beta)
    XtWX = X.T @ (weights[:, None] * X)
    H = XtWX + _embed_penalty(p, penalties)
    edf = float(np.trace(np.linalg.solve(H, XtWX)))
    eta = X @ beta
    loglik = float(np.sum(w * (y * eta - np.exp(eta))))
    return PirlsResult(
        beta=beta,
        gammas=gam,
        converged=converged,
        penalized_loglik=penalized_objective(X, y, w, beta, penalties),
        loglik=loglik,
        edf=edf,
        iterations=iterations,
        objective_path=path,
    )
