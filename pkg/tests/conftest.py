import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from detachmap.raster import CovariateStack, PointPattern, RasterGrid, Window


@pytest.fixture
def square_window():
    """Fully valid 20x20 grid of 5 m cells (100 m x 100 m)."""
    return Window.full(0.0, 0.0, 20, 20, 5.0)


def make_stack(window, **fields):
    """CovariateStack from {name: fill value or array} over `window`."""
    grids = {}
    for name, value in fields.items():
        values = np.broadcast_to(np.asarray(value, dtype=float),
                                 (window.n_rows, window.n_cols)).copy()
        values[~window.validity_mask] = np.nan
        grids[name] = RasterGrid(window, values)
    return CovariateStack(grids)


def uniform_pattern(window, n, seed):
    """n points uniform over the valid cells of `window`."""
    gen = np.random.default_rng(seed)
    rr, cc = np.nonzero(window.validity_mask)
    pick = gen.integers(0, len(rr), size=n)
    offsets = gen.random((n, 2))
    x = window.origin_x + (cc[pick] + offsets[:, 0]) * window.cell_size
    y = window.origin_y + (window.n_rows - 1 - rr[pick] + offsets[:, 1]) * window.cell_size
    return PointPattern(np.column_stack([x, y]), window)
