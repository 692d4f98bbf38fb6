import filecmp
from pathlib import Path

import numpy as np
import pytest

from detachmap import cli
from detachmap.raster import read_ascii_grid, write_ascii_grid, RasterGrid

SYNTH_CONFIG = """
synth.n_rows = 40
synth.n_cols = 40
synth.cell_size = 10
synth.covariates = slope,dtm,northness,eastness
synth.field.slope.amplitude = 1.0
synth.field.slope.bumps = 10
synth.field.slope.scale = 0.2
synth.field.dtm.amplitude = 1.0
synth.field.dtm.bumps = 10
synth.field.dtm.scale = 0.2
synth.field.northness.amplitude = 0.5
synth.field.northness.bumps = 12
synth.field.northness.scale = 0.15
synth.field.eastness.amplitude = 0.5
synth.field.eastness.bumps = 12
synth.field.eastness.scale = 0.15
synth.intercept = -6.0
synth.term.slope = 1.0
synth.term.dtm = -0.8
"""


def run(args):
    return cli.main([str(a) for a in args])


def write_config(path, text):
    path.write_text(text.strip() + "\n")
    return path


def make_valley(tmp_path, name, seed):
    out = tmp_path / name
    cfg = write_config(tmp_path / f"synth_{name}.txt", SYNTH_CONFIG)
    assert run(["synth", "--config", cfg, "--out", out, "--seed", seed]) == 0
    return out


def raster_entries(prefix, valley, names=("slope", "dtm", "northness", "eastness")):
    return "\n".join(f"{prefix}.{n} = {valley / (n + '.asc')}" for n in names)


class TestSynth:
    def test_same_seed_identical_outputs(self, tmp_path):
        a = make_valley(tmp_path, "a", 5)
        b = make_valley(tmp_path, "b", 5)
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_truth_persisted(self, tmp_path):
        valley = make_valley(tmp_path, "t", 6)
        truth = (valley / "truth.txt").read_text()
        assert "truth.intercept" in truth
        assert "truth.term.slope" in truth
        assert (valley / "crowns.csv").exists()
        assert (valley / "truth_intensity.asc").exists()


class TestPreprocess:
    def test_identity_config_byte_identical(self, tmp_path):
        valley = make_valley(tmp_path, "v", 7)
        out = tmp_path / "pre"
        cfg = write_config(tmp_path / "pre.txt", f"""
input.raster.slope = {valley / 'slope.asc'}
input.raster.dtm = {valley / 'dtm.asc'}
""")
        assert run(["preprocess", "--config", cfg, "--out", out]) == 0
        for name in ("slope", "dtm"):
            assert filecmp.cmp(valley / f"{name}.asc", out / f"{name}.asc",
                               shallow=False)

    def test_full_transform_config(self, tmp_path):
        valley = make_valley(tmp_path, "w", 8)
        # a land-use grid with two codes and a synthetic twi
        grid = read_ascii_grid(valley / "slope.asc")
        codes = np.where(grid.values > 0, 311.0, 112.0)
        write_ascii_grid(RasterGrid(grid.window, codes), valley / "dusaf.asc")
        twi = np.abs(grid.values) * 4 + 6
        write_ascii_grid(RasterGrid(grid.window, twi), valley / "twi.asc")

        out = tmp_path / "pre2"
        cfg = write_config(tmp_path / "pre2.txt", f"""
input.raster.slope = {valley / 'slope.asc'}
input.raster.twi = {valley / 'twi.asc'}
input.raster.plc = {valley / 'dtm.asc'}
input.raster.dusaf = {valley / 'dusaf.asc'}
filter.covariates = slope,twi
filter.sigma = 100
filter.radius = 10
twi.covariate = twi
twi.threshold = 9
curvature.covariates = plc
curvature.tol = 1e-6
dusaf.covariate = dusaf
dusaf.natural = 311
dusaf.anthropic = 112
""")
        assert run(["preprocess", "--config", cfg, "--out", out]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"slope.asc", "twi.asc", "twi_b.asc", "plc_sign.asc",
                "dusaf_bin.asc", "preprocess_manifest.txt"} <= names
        twi_b = read_ascii_grid(out / "twi_b.asc")
        assert set(np.unique(twi_b.values)) <= {0.0, 1.0}

    def test_rerun_from_manifest_byte_identical(self, tmp_path):
        valley = make_valley(tmp_path, "m", 9)
        out1, out2 = tmp_path / "p1", tmp_path / "p2"
        cfg = write_config(tmp_path / "prem.txt", f"""
input.raster.slope = {valley / 'slope.asc'}
filter.covariates = slope
filter.sigma = 50
filter.radius = 15
""")
        assert run(["preprocess", "--config", cfg, "--out", out1]) == 0
        manifest = out1 / "preprocess_manifest.txt"
        assert run(["preprocess", "--config", manifest, "--out", out2]) == 0
        for f in sorted(p.name for p in out1.iterdir()):
            assert (out1 / f).read_bytes() == (out2 / f).read_bytes(), f


class TestFitPredictSimulate:
    def fit_config(self, tmp_path, valley, terms="slope:smooth,dtm:smooth"):
        return write_config(tmp_path / "fit.txt", f"""
{raster_entries('raster', valley)}
points = {valley / 'crowns.csv'}
model.terms = {terms}
model.name = demo
dummy_spacing = 40
basis_dim = 6
""")

    def test_fit_predict_simulate_bootstrap_chain(self, tmp_path):
        valley = make_valley(tmp_path, "c", 10)
        fitdir = tmp_path / "fit"
        cfg = self.fit_config(tmp_path, valley)
        assert run(["fit", "--config", cfg, "--out", fitdir]) == 0
        model_path = fitdir / "demo.json"
        assert model_path.exists()

        preddir = tmp_path / "pred"
        pcfg = write_config(tmp_path / "pred.txt", f"""
{raster_entries('raster', valley)}
model = {model_path}
""")
        assert run(["predict", "--config", pcfg, "--out", preddir]) == 0
        intensity = read_ascii_grid(preddir / "intensity.asc")
        assert (intensity.values[intensity.window.validity_mask] > 0).all()

        simdir = tmp_path / "sim"
        scfg = write_config(tmp_path / "sim.txt",
                            f"intensity = {preddir / 'intensity.asc'}")
        assert run(["simulate", "--config", scfg, "--out", simdir, "--seed", 3]) == 0
        assert (simdir / "pattern.csv").read_text().startswith("x,y")

        bootdir = tmp_path / "boot"
        bcfg = write_config(tmp_path / "boot.txt", f"""
{raster_entries('raster', valley)}
points = {valley / 'crowns.csv'}
model = {model_path}
dummy_spacing = 40
bootstrap.b = 5
bootstrap.alpha = 0.8
""")
        assert run(["bootstrap", "--config", bcfg, "--out", bootdir, "--seed", 4]) == 0
        manifest = (bootdir / "bootstrap_manifest.txt").read_text()
        assert "seed = 4" in manifest
        assert "bootstrap.b = 5" in manifest
        assert "failures = 0" in manifest
        sd = read_ascii_grid(bootdir / "bootstrap_sd.asc")
        assert (sd.values[sd.window.validity_mask] >= 0).all()

    def test_validate_and_diagnose(self, tmp_path):
        valley = make_valley(tmp_path, "d", 11)
        other = make_valley(tmp_path, "e", 12)
        fit1 = tmp_path / "f1"
        fit2 = tmp_path / "f2"
        assert run(["fit", "--config",
                    self.fit_config(tmp_path, valley, "slope:linear,dtm:linear"),
                    "--out", fit1]) == 0
        cfg2 = write_config(tmp_path / "fit2.txt", f"""
{raster_entries('raster', valley)}
points = {valley / 'crowns.csv'}
model.terms = slope:linear
model.name = small
dummy_spacing = 40
""")
        assert run(["fit", "--config", cfg2, "--out", fit2]) == 0

        vdir = tmp_path / "val"
        vcfg = write_config(tmp_path / "val.txt", f"""
{raster_entries('raster', other)}
points = {other / 'crowns.csv'}
models = {fit1 / 'demo.json'},{fit2 / 'small.json'}
""")
        assert run(["validate", "--config", vcfg, "--out", vdir]) == 0
        table = (vdir / "selection.txt").read_text()
        assert "log-likelihood" in table
        csv = (vdir / "selection.csv").read_text().splitlines()
        assert csv[0] == "model,loglik"
        assert len(csv) == 3

        ddir = tmp_path / "diag"
        dcfg = write_config(tmp_path / "diag.txt", f"""
{raster_entries('raster', other)}
points = {other / 'crowns.csv'}
model = {fit1 / 'demo.json'}
subarea = 80
nsim = 5
lurking.covariates = slope
""")
        assert run(["diagnose", "--config", dcfg, "--out", ddir, "--seed", 5]) == 0
        names = {p.name for p in ddir.iterdir()}
        assert {"errors.csv", "errors.svg", "summary.txt", "lurking_slope.csv",
                "lurking_slope.svg", "qq.csv", "qq.svg"} <= names
        assert "Raw residuals" in (ddir / "summary.txt").read_text()


class TestExitCodes:
    def test_missing_config_key_is_2(self, tmp_path):
        cfg = write_config(tmp_path / "bad.txt", "some.key = 1")
        assert run(["fit", "--config", cfg, "--out", tmp_path / "o"]) == 2

    def test_missing_file_is_4(self, tmp_path):
        cfg = write_config(tmp_path / "bad2.txt", f"""
raster.slope = {tmp_path / 'nope.asc'}
points = {tmp_path / 'nope.csv'}
model.terms = slope:linear
""")
        assert run(["fit", "--config", cfg, "--out", tmp_path / "o"]) == 4

    def test_rank_deficiency_is_3(self, tmp_path):
        valley = make_valley(tmp_path, "x", 13)
        # duplicate covariate under two names: collinear design
        cfg = write_config(tmp_path / "bad3.txt", f"""
raster.slope = {valley / 'slope.asc'}
raster.slope2 = {valley / 'slope.asc'}
points = {valley / 'crowns.csv'}
model.terms = slope:linear,slope2:linear
dummy_spacing = 40
""")
        assert run(["fit", "--config", cfg, "--out", tmp_path / "o"]) == 3

    def test_malformed_grid_is_4(self, tmp_path):
        bad = tmp_path / "bad.asc"
        bad.write_text("NCOLS x\n")
        cfg = write_config(tmp_path / "bad4.txt", f"""
raster.slope = {bad}
points = {tmp_path / 'nope.csv'}
model.terms = slope:linear
""")
        assert run(["fit", "--config", cfg, "--out", tmp_path / "o"]) == 4


def workflow_config(tmp_path, train, validate, test, extra=""):
    return write_config(tmp_path / "wf.txt", f"""
{raster_entries('train.raster', train)}
train.points = {train / 'crowns.csv'}
{raster_entries('validate.raster', validate)}
validate.points = {validate / 'crowns.csv'}
{raster_entries('test.raster', test)}
test.points = {test / 'crowns.csv'}
dummy_spacing = 40
basis_dim = 6
rf.trees = 30
rf.spacing = 40
bootstrap.b = 4
bootstrap.alpha = 0.99
subarea = 80
orientation.covariates = northness,eastness
{extra}
""")


class TestWorkflow:
    def test_end_to_end_artifacts_and_ordering(self, tmp_path):
        train = make_valley(tmp_path, "train", 21)
        validate = make_valley(tmp_path, "validate", 22)
        test = make_valley(tmp_path, "test", 23)
        out = tmp_path / "wf_out"
        cfg = workflow_config(tmp_path, train, validate, test)

        # track file access order: the test valley must come after selection
        opened = []
        original = cli.read_ascii_grid

        def tracked(path):
            opened.append(str(path))
            return original(path)

        cli.read_ascii_grid = tracked
        try:
            assert run(["workflow", "--config", cfg, "--out", out, "--seed", 1]) == 0
        finally:
            cli.read_ascii_grid = original

        names = {p.name for p in out.iterdir()}
        assert {"report.txt", "ranking.csv", "selection.csv", "intensity.asc",
                "bootstrap_sd.asc", "percentile.asc", "errors.svg",
                "GAM-all.json", "GAM-selected.json", "GAM-reduced.json",
                "workflow_manifest.txt"} <= names

        report = (out / "report.txt").read_text()
        assert "selection_done -> loaded_test" in report
        assert "intensity.asc | bootstrap_sd.asc | percentile.asc" in report
        assert "Raw residuals" in report

        first_test_access = min(i for i, p in enumerate(opened) if str(test) in p)
        last_validate_access = max(i for i, p in enumerate(opened) if str(validate) in p)
        assert first_test_access > last_validate_access

        ranking = (out / "ranking.csv").read_text().splitlines()
        assert ranking[0] == "covariate,importance,block"
        assert len(ranking) == 5

    def test_empty_test_pattern_completes(self, tmp_path):
        train = make_valley(tmp_path, "train2", 31)
        validate = make_valley(tmp_path, "validate2", 32)
        test = make_valley(tmp_path, "test2", 33)
        (test / "crowns.csv").write_text("x,y\n")
        out = tmp_path / "wf_out2"
        cfg = workflow_config(tmp_path, train, validate, test)
        assert run(["workflow", "--config", cfg, "--out", out, "--seed", 2]) == 0
        report = (out / "report.txt").read_text()
        assert "Raw residuals" in report

    def test_workflow_selects_truth_covariates_across_seeds(self, tmp_path):
        # the generating effect lives on slope and dtm only, so the selected
        # model's covariates should be exactly that pair run after run
        import warnings

        from detachmap import ppm, rfimportance
        from detachmap.cli import _spec_from_names
        from detachmap.simboot import SeededRng
        from detachmap.synthetic import (CovariateField, SyntheticValleySpec,
                                         TruthTerm, generate_valley)

        field = dict(n_bumps=12, length_scale=0.15)
        spec = SyntheticValleySpec(
            n_rows=40, n_cols=40, cell_size=10.0,
            fields=(CovariateField("slope", amplitude=1.0, **field),
                    CovariateField("dtm", amplitude=1.0, **field),
                    CovariateField("northness", amplitude=0.5, **field),
                    CovariateField("eastness", amplitude=0.5, **field)),
            intercept=-6.0,
            terms=(TruthTerm("slope", 1.0), TruthTerm("dtm", -0.8)),
        )
        orientation = {"northness", "eastness"}
        wins = used = 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for seed in range(10):
                train = generate_valley(spec, SeededRng(4_000 + seed))
                validate = generate_valley(spec, SeededRng(4_500 + seed))
                if len(train.pattern) < 30:
                    continue
                table = rfimportance.build_rf_dataset(train.pattern, train.stack, 40.0)
                forest = rfimportance.fit_forest(
                    table, rfimportance.ForestConfig(n_trees=40, seed=seed))
                ranking = rfimportance.gini_importance(forest, table)
                top = ranking.top_block
                reduced = [n for n in top if n not in orientation] or top
                specs = [_spec_from_names(ranking.names, set(), "GAM-all"),
                         _spec_from_names(top, set(), "GAM-selected"),
                         _spec_from_names(reduced, set(), "GAM-reduced")]
                quad = ppm.make_quadrature(train.pattern, train.stack, 40.0)
                models = [ppm.fit_model(s, train.pattern, train.stack, quad,
                                        basis_dim=6) for s in specs]
                try:
                    ranked = ppm.select_model(models, validate.pattern, validate.stack)
                except Exception:
                    continue
                used += 1
                wins += set(ranked[0].model.spec.covariates) == {"slope", "dtm"}
        assert used >= 8
        assert wins >= 0.9 * used

    def test_workflow_rerun_is_deterministic(self, tmp_path):
        train = make_valley(tmp_path, "train3", 41)
        validate = make_valley(tmp_path, "validate3", 42)
        test = make_valley(tmp_path, "test3", 43)
        cfg = workflow_config(tmp_path, train, validate, test)
        out1, out2 = tmp_path / "w1", tmp_path / "w2"
        assert run(["workflow", "--config", cfg, "--out", out1, "--seed", 3]) == 0
        assert run(["workflow", "--config", (out1 / "workflow_manifest.txt"),
                    "--out", out2]) == 0
        for f in sorted(p.name for p in out1.iterdir()):
            assert (out1 / f).read_bytes() == (out2 / f).read_bytes(), f
