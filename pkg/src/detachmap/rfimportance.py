"""Random-forest Gini importance for covariate ranking.

The forest is a ranking device, not a prediction map: it is trained on a
binary table (crown cells vs a regular grid of background cells) and its
normalized total impurity decrease orders the covariates. The ranking is then
cut at the largest consecutive importance gap into a top and bottom block.

Features are handled in canonical (sorted-name) order and every tree draws
its randomness from a stream derived from (seed, tree index); training is
therefore deterministic, schedule-independent, and equivariant under column
permutations of the input table.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .ppm import dummy_grid_cells
from .raster import CovariateStack, PointPattern
from .simboot import SeededRng

DEFAULT_TREES = 500
DEFAULT_MIN_NODE = 5


@dataclass(frozen=True)
class LabeledTable:
    """Binary-labeled feature rows for the ranking forest."""

    features: np.ndarray
    labels: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int8)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise DataError("feature matrix and labels disagree in length")
        if features.shape[1] != len(self.names):
            raise DataError("feature matrix width does not match the name list")
        if np.isnan(features).any():
            raise DataError("features must not contain NaN")
        present = np.unique(labels)
        if not np.array_equal(present, [0, 1]):
            raise DataError("both classes (0 and 1) must be present")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_features(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = DEFAULT_TREES
    m_features: int | None = None  # None -> floor(sqrt(q))
    min_node_size: int = DEFAULT_MIN_NODE
    seed: int = 0
    class_weighted: bool = True


@dataclass
class _Node:
    n_weight: float
    impurity: float
    counts: tuple[float, float]
    feature: int = -1  # canonical feature index; -1 marks a leaf
    threshold: float = np.nan
    left: int = -1
    right: int = -1
    decrease: float = 0.0  # (node weight / root weight) * impurity decrease


@dataclass(frozen=True)
class Forest:
    """Trained trees plus the bookkeeping needed for importances and OOB error."""

    trees: tuple
    names: tuple[str, ...]  # canonical (sorted) feature order
    config: ForestConfig
    oob_indices: tuple = field(repr=False, default=())
    class_weights: tuple[float, float] = (1.0, 1.0)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Mean leaf class-1 share over trees; `features` in canonical order."""
        features = np.asarray(features, dtype=float)
        total = np.zeros(len(features))
        for nodes in self.trees:
            total += _tree_proba(nodes, features)
        return total / len(self.trees)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.predict_proba(features) >= 0.5).astype(np.int8)


def _gini(c0, c1):
    total = c0 + c1
    if total <= 0:
        return 0.0
    p0 = c0 / total
    p1 = c1 / total
    return 1.0 - (p0 * p0 + p1 * p1)


def _best_split(values, wts0, wts1, min_child=1):
    """Best threshold of one feature column by weighted Gini decrease.

    Returns (score, threshold) where score is the weighted child impurity to
    minimize; (inf, nan) when the column admits no split.
    """
    order = np.argsort(values, kind="stable")
    sv = values[order]
    c0 = np.cumsum(wts0[order])
    c1 = np.cumsum(wts1[order])
    t0, t1 = c0[-1], c1[-1]
    total = t0 + t1
    cut = np.nonzero(sv[:-1] < sv[1:])[0]
    if len(cut) == 0:
        return np.inf, np.nan
    l0, l1 = c0[cut], c1[cut]
    r0, r1 = t0 - l0, t1 - l1
    wl = l0 + l1
    wr = r0 + r1
    gini_l = 1.0 - ((l0 / wl) ** 2 + (l1 / wl) ** 2)
    gini_r = 1.0 - ((r0 / wr) ** 2 + (r1 / wr) ** 2)
    score = (wl * gini_l + wr * gini_r) / total
    best = int(np.argmin(score))
    threshold = (sv[cut[best]] + sv[cut[best] + 1]) / 2.0
    return float(score[best]), float(threshold)


def _grow_tree(X, y, sample_idx, m, min_node, gen, w_class):
    """Depth-first CART growth on a bootstrap sample; returns the node list."""
    nodes: list[_Node] = []
    q = X.shape[1]
    wts = w_class[y]
    wts0 = np.where(y == 0, wts, 0.0)
    wts1 = np.where(y == 1, wts, 0.0)
    root_weight = float(wts[sample_idx].sum())

    def build(idx):
        c0 = float(wts0[idx].sum())
        c1 = float(wts1[idx].sum())
        imp = _gini(c0, c1)
        node_id = len(nodes)
        nodes.append(_Node(n_weight=c0 + c1, impurity=imp, counts=(c0, c1)))
        if len(idx) <= min_node or imp == 0.0:
            return node_id
        feats = gen.choice(q, size=m, replace=False)
        best = (np.inf, np.nan, -1)
        for f in feats:
            score, thr = _best_split(X[idx, f], wts0[idx], wts1[idx])
            if score < best[0]:
                best = (score, thr, int(f))
        if not np.isfinite(best[0]) or best[0] >= imp:
            return node_id
        score, thr, f = best
        go_left = X[idx, f] < thr
        node = nodes[node_id]
        node.feature = f
        node.threshold = thr
        node.decrease = (node.n_weight / root_weight) * (imp - score)
        node.left = build(idx[go_left])
        node.right = build(idx[~go_left])
        return node_id

    build(sample_idx)
    return tuple(nodes)


def _tree_proba(nodes, X):
    out = np.empty(len(X))
    stack = [(0, np.arange(len(X)))]
    while stack:
        node_id, idx = stack.pop()
        node = nodes[node_id]
        if node.feature < 0:
            c0, c1 = node.counts
            out[idx] = c1 / (c0 + c1) if (c0 + c1) > 0 else 0.0
            continue
        go_left = X[idx, node.feature] < node.threshold
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


def fit_forest(table: LabeledTable, config: ForestConfig = ForestConfig()) -> Forest:
    """Grow `config.n_trees` CART trees on bootstrap resamples of the table.

    Splits minimize class-weighted Gini impurity over m features drawn per
    node; trees grow until the minimum node size or purity. Class weights are
    inversely proportional to class frequency (so the dense background grid
    does not drown the crowns) unless `class_weighted` is off.
    """
    if config.n_trees < 1:
        raise DataError("need at least one tree")
    order = np.argsort(table.names)
    names = tuple(table.names[i] for i in order)
    X = table.features[:, order]
    y = np.asarray(table.labels, dtype=np.int64)
    n, q = X.shape
    m = config.m_features if config.m_features is not None else max(1, int(np.sqrt(q)))
    m = min(m, q)
    if config.class_weighted:
        n1 = int(y.sum())
        w_class = np.array([n / (2.0 * (n - n1)), n / (2.0 * n1)])
    else:
        w_class = np.ones(2)

    trees = []
    oob = []
    for t in range(config.n_trees):
        gen = SeededRng(config.seed, stream=t).generator()
        sample = gen.integers(0, n, size=n)
        in_bag = np.zeros(n, dtype=bool)
        in_bag[sample] = True
        oob.append(np.nonzero(~in_bag)[0])
        trees.append(_grow_tree(X, y, sample, m, config.min_node_size, gen, w_class))
    return Forest(trees=tuple(trees), names=names, config=config,
                  oob_indices=tuple(oob), class_weights=tuple(w_class))


def oob_error(forest: Forest, table: LabeledTable) -> float:
    """Out-of-bag misclassification rate (majority vote over holding trees)."""
    order = np.argsort(table.names)
    if tuple(table.names[i] for i in order) != forest.names:
        raise DataError("table schema does not match the forest")
    X = table.features[:, order]
    y = table.labels
    votes = np.zeros(len(X))
    counts = np.zeros(len(X))
    for nodes, idx in zip(forest.trees, forest.oob_indices):
        if len(idx) == 0:
            continue
        votes[idx] += _tree_proba(nodes, X[idx])
        counts[idx] += 1
    seen = counts > 0
    pred = (votes[seen] / counts[seen]) >= 0.5
    return float(np.mean(pred != (y[seen] == 1)))


@dataclass(frozen=True)
class ImportanceRanking:
    """Covariates ordered by normalized Gini importance, with the two-block
    boundary at the largest consecutive gap."""

    entries: tuple[tuple[str, float], ...]
    block_boundary: int

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def importances(self) -> np.ndarray:
        return np.array([v for _, v in self.entries])

    @property
    def top_block(self) -> list[str]:
        return self.names[: self.block_boundary]

    @property
    def bottom_block(self) -> list[str]:
        return self.names[self.block_boundary:]


def _max_gap_boundary(values) -> int:
    gaps = np.asarray(values[:-1]) - np.asarray(values[1:])
    return int(np.argmax(gaps)) + 1


def gini_importance(forest: Forest, table: LabeledTable) -> ImportanceRanking:
    """Total impurity decrease per feature, averaged over trees, normalized
    to sum one, ranked descending (ties broken by name)."""
    order = np.argsort(table.names)
    if tuple(table.names[i] for i in order) != forest.names:
        raise DataError("table schema does not match the forest")
    raw = np.zeros(len(forest.names))
    for nodes in forest.trees:
        for node in nodes:
            if node.feature >= 0:
                raw[node.feature] += node.decrease
    raw /= len(forest.trees)
    total = raw.sum()
    if total <= 0:
        raise DataError("forest produced no splits; importances undefined")
    raw /= total
    ranked = sorted(zip(forest.names, raw), key=lambda e: (-e[1], e[0]))
    entries = tuple((n, float(v)) for n, v in ranked)
    boundary = _max_gap_boundary([v for _, v in entries]) if len(entries) >= 2 else 1
    return ImportanceRanking(entries=entries, block_boundary=boundary)


def split_blocks(ranking: ImportanceRanking) -> int:
    """Boundary index after the largest consecutive importance gap (first
    maximal gap on ties); both blocks are non-empty."""
    if len(ranking.entries) < 2:
        raise DataError("need at least two ranked features to split blocks")
    return _max_gap_boundary(ranking.importances)


def build_rf_dataset(pattern: PointPattern, stack: CovariateStack,
                     dummy_spacing: float) -> LabeledTable:
    """Class-1 rows at crown cells; class-0 rows on a regular grid of valid
    cells, skipping any cell already holding a crown."""
    window = stack.window
    if not pattern.window.same_geometry(window):
        raise DataError("pattern window does not match the covariate stack")
    valid = window.validity_mask
    names = tuple(stack.names)

    if len(pattern) == 0:
        raise DataError("both classes present requires a non-empty crown pattern")
    pr, pc = pattern.cells()
    on_data = valid[pr, pc]
    if not on_data.all():
        warnings.warn(f"build_rf_dataset: {int((~on_data).sum())} crown(s) on NODATA cells excluded")
        pr, pc = pr[on_data], pc[on_data]
    if len(pr) == 0:
        raise DataError("all crowns fell on NODATA cells; both classes must be present")

    ratio = max(1, int(round(dummy_spacing / window.cell_size)))
    gr, gc = dummy_grid_cells(window, valid, ratio)[:2]
    crown_cells = set(zip(pr.tolist(), pc.tolist()))
    keep = np.array([(r, c) not in crown_cells for r, c in zip(gr.tolist(), gc.tolist())])
    gr, gc = gr[keep], gc[keep]
    if len(gr) == 0:
        raise DataError("background grid is empty; decrease dummy_spacing")

    rows = np.concatenate([pr, gr])
    cols = np.concatenate([pc, gc])
    columns = stack.values_at_cells(rows, cols, names=names)
    features = np.column_stack([columns[n] for n in names])
    labels = np.concatenate([np.ones(len(pr), dtype=np.int8),
                             np.zeros(len(gr), dtype=np.int8)])
    return LabeledTable(features=features, labels=labels, names=names)
