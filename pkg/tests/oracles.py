"""Independent reference implementations used to freeze expected values.

Everything here is deliberately written against the *definitions* (direct
loops, dense Newton steps, quadrature) rather than the library's code paths,
so a bug in the library cannot hide in its own oracle.
"""

import numpy as np


def newton_weighted_poisson(X, y, w, tol=1e-12, max_iter=100):
    """Dense Newton maximization of sum_i w_i (y_i x_i.b - exp(x_i.b))."""
    X = np.asarray(X, dtype=float)
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        lam = np.exp(eta)
        grad = X.T @ (w * (y - lam))
        hess = -X.T @ ((w * lam)[:, None] * X)
        step = np.linalg.solve(hess, grad)
        beta = beta - step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def brute_gaussian_filter(values, mask, cell, sigma, radius):
    """Direct double-loop masked Gaussian average (the definition)."""
    n_rows, n_cols = values.shape
    out = np.full_like(values, np.nan, dtype=float)
    reach = int(np.floor(radius / cell))
    for i in range(n_rows):
        for j in range(n_cols):
            if not mask[i, j]:
                continue
            num = den = 0.0
            for di in range(-reach, reach + 1):
                for dj in range(-reach, reach + 1):
                    ii, jj = i + di, j + dj
                    if not (0 <= ii < n_rows and 0 <= jj < n_cols):
                        continue
                    if not mask[ii, jj]:
                        continue
                    d = np.hypot(di * cell, dj * cell)
                    if d > radius:
                        continue
                    wgt = np.exp(-(d * d) / (2.0 * sigma * sigma))
                    num += wgt * values[ii, jj]
                    den += wgt
            if den > 0:
                out[i, j] = num / den
    return out


def sort_based_quantiles(values, levels):
    """Type-7 quantiles by explicit sort-and-interpolate indexing."""
    s = np.sort(np.asarray(values, dtype=float))
    n = len(s)
    out = []
    for q in levels:
        pos = q * (n - 1)
        lo = int(np.floor(pos))
        hi = int(np.ceil(pos))
        frac = pos - lo
        out.append(s[lo] * (1 - frac) + s[hi] * frac)
    return np.array(out)


def simpson_curvature_integral(evaluate, knots, panels_per_interval=32):
    """Integral of f''(x)^2 over the knot span by per-interval Simpson.

    Within one knot interval the spline is a single cubic, so a central
    second difference evaluated strictly inside the interval is exact and
    f'' is linear; interval-edge values follow by exact linear extrapolation
    from two interior probes, and Simpson integrates the quadratic f''^2
    without truncation error.
    """
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        m = panels_per_interval
        xs = np.linspace(a, b, 2 * m + 1)
        step = (b - a) / (2 * m)
        h = step / 8.0

        def f2_inside(x):
            return (evaluate(x - h) - 2.0 * evaluate(x) + evaluate(x + h)) / (h * h)

        f2 = np.empty_like(xs)
        f2[1:-1] = f2_inside(xs[1:-1])
        f2[0] = 2.0 * f2_inside(a + 2 * h) - f2_inside(a + 4 * h)
        f2[-1] = 2.0 * f2_inside(b - 2 * h) - f2_inside(b - 4 * h)
        y = f2 * f2
        total += step / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())
    return total


def brute_loglik(eta_grid, mask, cell_area, point_cells):
    """Direct per-cell / per-point evaluation of the discrete log-likelihood."""
    total = 0.0
    for r, c in point_cells:
        total += eta_grid[r, c]
    n_rows, n_cols = eta_grid.shape
    for i in range(n_rows):
        for j in range(n_cols):
            if mask[i, j]:
                total -= np.exp(eta_grid[i, j]) * cell_area
    return total


def brute_max_gap(values):
    """Largest consecutive gap in a descending importance vector."""
    best, best_i = -np.inf, 0
    for i in range(len(values) - 1):
        gap = values[i] - values[i + 1]
        if gap > best:
            best, best_i = gap, i
    return best_i + 1
