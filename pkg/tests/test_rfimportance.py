import numpy as np
import pytest

from detachmap.errors import DataError
from detachmap.raster import CovariateStack, PointPattern, RasterGrid, Window
from detachmap.rfimportance import (Forest, ForestConfig, ImportanceRanking,
                                    LabeledTable, build_rf_dataset, fit_forest,
                                    gini_importance, oob_error, split_blocks)

from conftest import make_stack
from oracles import brute_max_gap


def two_gaussian_table(gen, n=400, shift=2.82, extra_noise=1):
    """Balanced two-class fixture; Bayes error ~ Phi(-shift/2) ~ 0.079."""
    half = n // 2
    sep = np.concatenate([gen.normal(0.0, 1.0, half), gen.normal(shift, 1.0, half)])
    cols = [sep] + [gen.normal(0, 1, n) for _ in range(extra_noise)]
    labels = np.concatenate([np.zeros(half, dtype=int), np.ones(half, dtype=int)])
    names = ["sep"] + [f"noise{i}" for i in range(extra_noise)]
    return LabeledTable(np.column_stack(cols), labels, tuple(names))


class TestLabeledTable:
    def test_single_class_rejected(self):
        with pytest.raises(DataError, match="both classes"):
            LabeledTable(np.ones((5, 2)), np.zeros(5, dtype=int), ("a", "b"))

    def test_nan_rejected(self):
        X = np.ones((4, 1))
        X[0, 0] = np.nan
        with pytest.raises(DataError, match="NaN"):
            LabeledTable(X, np.array([0, 1, 0, 1]), ("a",))


class TestBuildRfDataset:
    def test_empty_pattern_rejected(self, square_window):
        stack = make_stack(square_window, z=1.0)
        empty = PointPattern(np.empty((0, 2)), square_window)
        with pytest.raises(DataError, match="classes"):
            build_rf_dataset(empty, stack, 25.0)

    def test_class_counts(self, square_window):
        gen = np.random.default_rng(2)
        stack = make_stack(square_window, z=gen.standard_normal((20, 20)))
        pts = np.array([[2.5 + 5 * i, 2.5] for i in range(5)])
        pattern = PointPattern(pts, square_window)
        table = build_rf_dataset(pattern, stack, 10.0)
        assert (table.labels == 1).sum() == 5
        assert 0 < (table.labels == 0).sum() <= 100

    def test_crown_cell_excluded_from_background(self):
        window = Window.full(0, 0, 4, 4, 10.0)
        stack = make_stack(window, z=np.arange(16.0).reshape(4, 4))
        # crowns exactly on the two dummy-grid cells of the west tiles
        crowns = []
        from detachmap.ppm import dummy_grid_cells

        dr, dc, *_ = dummy_grid_cells(window, window.validity_mask, 2)
        x, y = window.cell_center(dr[0], dc[0])
        crowns.append([x, y])
        pattern = PointPattern(np.array(crowns), window)
        table = build_rf_dataset(pattern, stack, 20.0)
        crown_z = stack["z"].values[dr[0], dc[0]]
        background = table.features[table.labels == 0, 0]
        assert crown_z not in background
        assert (table.labels == 0).sum() == len(dr) - 1


class TestFitForest:
    def test_separable_feature_perfect_training_accuracy(self):
        gen = np.random.default_rng(3)
        n = 200
        sep = np.concatenate([gen.uniform(0, 1, n // 2), gen.uniform(2, 3, n // 2)])
        noise = gen.normal(0, 1, n)
        labels = np.array([0] * (n // 2) + [1] * (n // 2))
        table = LabeledTable(np.column_stack([sep, noise]), labels, ("sep", "noise"))
        forest = fit_forest(table, ForestConfig(n_trees=50, seed=1))
        order = np.argsort(table.names)
        pred = forest.predict(table.features[:, order])
        assert (pred == table.labels).mean() == 1.0

    def test_oob_error_on_two_gaussian_fixture(self):
        gen = np.random.default_rng(4)
        table = two_gaussian_table(gen, n=400)
        forest = fit_forest(table, ForestConfig(n_trees=200, seed=2))
        err = oob_error(forest, table)
        assert err <= 0.2  # Bayes error is ~0.08

    def test_deterministic_given_seed(self):
        gen = np.random.default_rng(5)
        table = two_gaussian_table(gen, n=120)
        a = fit_forest(table, ForestConfig(n_trees=20, seed=7))
        b = fit_forest(table, ForestConfig(n_trees=20, seed=7))
        ra = gini_importance(a, table)
        rb = gini_importance(b, table)
        assert ra.entries == rb.entries


class TestGiniImportance:
    def test_noise_feature_has_tiny_importance(self):
        gen = np.random.default_rng(6)
        n = 300
        sep = np.concatenate([gen.uniform(0, 1, n // 2), gen.uniform(2, 3, n // 2)])
        noise = gen.normal(0, 1, n)
        labels = np.array([0] * (n // 2) + [1] * (n // 2))
        table = LabeledTable(np.column_stack([sep, noise]), labels, ("sep", "noise"))
        ranking = gini_importance(fit_forest(table, ForestConfig(n_trees=100, seed=3)),
                                  table)
        assert ranking.names[0] == "sep"
        assert dict(ranking.entries)["noise"] < 0.05

    def test_single_feature_importance_is_one(self):
        gen = np.random.default_rng(7)
        n = 100
        sep = np.concatenate([gen.uniform(0, 1, n // 2), gen.uniform(2, 3, n // 2)])
        labels = np.array([0] * (n // 2) + [1] * (n // 2))
        table = LabeledTable(sep.reshape(-1, 1), labels, ("only",))
        ranking = gini_importance(fit_forest(table, ForestConfig(n_trees=30, seed=4)),
                                  table)
        assert ranking.entries == (("only", 1.0),)

    def test_importances_sum_to_one_and_sorted(self):
        gen = np.random.default_rng(8)
        table = two_gaussian_table(gen, n=300, extra_noise=3)
        ranking = gini_importance(fit_forest(table, ForestConfig(n_trees=60, seed=5)),
                                  table)
        imps = ranking.importances
        assert imps.sum() == pytest.approx(1.0, abs=1e-12)
        assert (np.diff(imps) <= 1e-15).all()
        assert (imps >= 0).all()

    def test_permutation_equivariance(self):
        gen = np.random.default_rng(9)
        table = two_gaussian_table(gen, n=240, extra_noise=2)
        perm = [2, 0, 1]
        permuted = LabeledTable(table.features[:, perm], table.labels,
                                tuple(table.names[i] for i in perm))
        r1 = gini_importance(fit_forest(table, ForestConfig(n_trees=40, seed=6)), table)
        r2 = gini_importance(fit_forest(permuted, ForestConfig(n_trees=40, seed=6)),
                             permuted)
        assert r1.entries == r2.entries

    def test_duplicated_feature_splits_the_share(self):
        gen = np.random.default_rng(10)
        n = 300
        sep = np.concatenate([gen.normal(0, 1, n // 2), gen.normal(3, 1, n // 2)])
        noise = gen.normal(0, 1, n)
        labels = np.array([0] * (n // 2) + [1] * (n // 2))
        single = LabeledTable(np.column_stack([sep, noise]), labels, ("sep", "noise"))
        doubled = LabeledTable(np.column_stack([sep, sep, noise]), labels,
                               ("sep", "sep2", "noise"))
        r1 = gini_importance(fit_forest(single, ForestConfig(n_trees=80, seed=8)),
                             single)
        r2 = gini_importance(fit_forest(doubled, ForestConfig(n_trees=80, seed=8)),
                             doubled)
        share_single = dict(r1.entries)["sep"]
        pair = dict(r2.entries)
        assert pair["sep"] + pair["sep2"] <= 2 * share_single + 0.05


class TestSplitBlocks:
    def test_worked_example(self):
        ranking = ImportanceRanking(
            entries=(("a", 0.5), ("b", 0.4), ("c", 0.05), ("d", 0.05)),
            block_boundary=2)
        assert split_blocks(ranking) == 2

    def test_equal_importances_first_gap(self):
        ranking = ImportanceRanking(
            entries=(("a", 0.25), ("b", 0.25), ("c", 0.25), ("d", 0.25)),
            block_boundary=1)
        assert split_blocks(ranking) == 1

    def test_matches_bruteforce_oracle(self):
        gen = np.random.default_rng(11)
        for _ in range(50):
            q = int(gen.integers(2, 9))
            raw = np.sort(gen.random(q))[::-1]
            raw /= raw.sum()
            ranking = ImportanceRanking(
                entries=tuple((f"f{i}", float(v)) for i, v in enumerate(raw)),
                block_boundary=1)
            assert split_blocks(ranking) == brute_max_gap(raw)

    def test_both_blocks_non_empty(self):
        gen = np.random.default_rng(12)
        for _ in range(20):
            q = int(gen.integers(2, 7))
            raw = np.sort(gen.random(q))[::-1]
            raw /= raw.sum()
            ranking = ImportanceRanking(
                entries=tuple((f"f{i}", float(v)) for i, v in enumerate(raw)),
                block_boundary=1)
            b = split_blocks(ranking)
            assert 1 <= b <= q - 1


def test_slope_like_fixture_ranks_terrain_first():
    # crowns concentrated where the steepness field is high: the steepness
    # covariate should lead the ranking and the noise fields trail
    gen = np.random.default_rng(13)
    window = Window.full(0, 0, 30, 30, 10.0)
    cols, rows = np.meshgrid(np.arange(30), np.arange(30))
    steep = (rows / 29.0) * 40.0
    stack = CovariateStack({
        "steepness": RasterGrid(window, steep),
        "noise_a": RasterGrid(window, gen.standard_normal((30, 30))),
        "noise_b": RasterGrid(window, gen.standard_normal((30, 30))),
    })
    # crowns only in the steep half
    rr = gen.integers(0, 12, 60)
    cc = gen.integers(0, 30, 60)
    x, y = window.cell_center(rr, cc)
    off = gen.random((60, 2)) - 0.5
    pattern = PointPattern(np.column_stack([x + off[:, 0], y + off[:, 1]]), window)
    table = build_rf_dataset(pattern, stack, 30.0)
    ranking = gini_importance(fit_forest(table, ForestConfig(n_trees=100, seed=9)),
                              table)
    assert ranking.names[0] == "steepness"
    assert ranking.block_boundary == 1
