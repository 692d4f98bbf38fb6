"""Batch command-line front end.

Subcommands: preprocess, importance, fit, predict, simulate, bootstrap,
validate, diagnose, workflow, synth. Every command reads a plain key-value
config, resolves an explicit seed, writes its outputs plus a manifest into
--out, and is bit-reproducible when rerun from that manifest. Exit codes:
0 ok, 2 config error, 3 numerical failure, 4 data error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, diagnostics, ppm, preprocess, rfimportance, simboot
from .config import KeyValueConfig
from .errors import ConfigError, DataError, DetachmapError, NumericalError
from .ppm import ModelSpec
from .raster import (CovariateStack, PointPattern, read_ascii_grid,
                     read_points_csv, write_ascii_grid, write_points_csv)
from .simboot import SeededRng
from .svgplot import curve_with_envelope_svg, matrix_svg
from .synthetic import (CovariateField, SyntheticValley, SyntheticValleySpec,
                        TruthTerm, generate_valley, truth_log_intensity)

DEFAULT_SEED = 0


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve_seed(cfg: KeyValueConfig, args) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.get_int("seed", DEFAULT_SEED)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: KeyValueConfig, seed: int,
                    extra: dict | None = None) -> None:
    entries = dict(cfg.entries)
    entries["command"] = command
    entries["seed"] = str(seed)
    entries["version"] = __version__
    for key, value in (extra or {}).items():
        entries[key] = str(value)
    KeyValueConfig(entries).write(out / f"{command}_manifest.txt")


def _load_stack(cfg: KeyValueConfig, prefix: str) -> CovariateStack:
    paths = cfg.with_prefix(prefix)
    if not paths:
        raise ConfigError(f"{cfg.source}: no '{prefix}.<name>' raster entries")
    return CovariateStack({name: read_ascii_grid(path) for name, path in sorted(paths.items())})


def _load_pattern(cfg: KeyValueConfig, key: str, stack: CovariateStack) -> PointPattern:
    return read_points_csv(cfg.require(key), stack.window)


def _parse_terms(text: str) -> tuple[tuple[str, str], ...]:
    terms = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, kind = item.partition(":")
        terms.append((name.strip(), (kind.strip() or "smooth")))
    return tuple(terms)


def _spec_from_names(names, categorical, label) -> ModelSpec:
    terms = tuple((n, "categorical" if n in categorical else "smooth") for n in names)
    return ModelSpec(terms, name=label)


def _write_ranking_csv(ranking, path) -> None:
    with open(path, "w") as fh:
        fh.write("covariate,importance,block\n")
        for i, (name, value) in enumerate(ranking.entries):
            block = 1 if i < ranking.block_boundary else 2
            fh.write(f"{name},{value:.17g},{block}\n")


def _selection_table(entries) -> str:
    lines = ["Model                 log-likelihood",
             "-------------------- ---------------"]
    for e in entries:
        lines.append(f"{e.name:<20} {e.loglik:15.6g}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: KeyValueConfig, args) -> int:
    """Generate one synthetic valley: covariate rasters, crowns CSV and the
    persisted ground truth."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    names = cfg.get_list("synth.covariates", ["slope"])
    fields = []
    for name in names:
        fields.append(CovariateField(
            name=name,
            n_bumps=cfg.get_int(f"synth.field.{name}.bumps", 8),
            amplitude=cfg.get_float(f"synth.field.{name}.amplitude", 1.0),
            length_scale=cfg.get_float(f"synth.field.{name}.scale", 0.25),
            baseline=cfg.get_float(f"synth.field.{name}.baseline", 0.0),
        ))
    terms = []
    for name in names:
        raw = cfg.raw(f"synth.term.{name}")
        if raw is None:
            continue
        parts = [float(v) for v in raw.split(",")]
        terms.append(TruthTerm(name, parts[0], parts[1] if len(parts) > 1 else 0.0))
    spec = SyntheticValleySpec(
        n_rows=cfg.get_int("synth.n_rows", 100),
        n_cols=cfg.get_int("synth.n_cols", 100),
        cell_size=cfg.get_float("synth.cell_size", 10.0),
        fields=tuple(fields),
        intercept=cfg.get_float("synth.intercept", -8.0),
        terms=tuple(terms),
    )
    valley = generate_valley(spec, SeededRng(seed))
    for name, grid in valley.stack.items():
        write_ascii_grid(grid, out / f"{name}.asc")
    write_points_csv(valley.pattern, out / "crowns.csv")
    write_ascii_grid(valley.truth, out / "truth_intensity.asc")
    truth = {
        "truth.intercept": f"{spec.intercept:.17g}",
        "truth.n_points": str(len(valley.pattern)),
    }
    for t in spec.terms:
        truth[f"truth.term.{t.covariate}"] = f"{t.coef:.17g},{t.coef2:.17g}"
    KeyValueConfig(truth).write(out / "truth.txt")
    _write_manifest(out, "synth", cfg, seed, {"n_points": len(valley.pattern)})
    print(f"synth: {len(valley.pattern)} crowns over {spec.n_rows}x{spec.n_cols} cells -> {out}")
    return 0


def cmd_preprocess(cfg: KeyValueConfig, args) -> int:
    """Apply the configured covariate transformations and write the
    model-ready stack."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    inputs = cfg.with_prefix("input.raster")
    if not inputs:
        raise ConfigError(f"{cfg.source}: no 'input.raster.<name>' entries")
    grids = {name: read_ascii_grid(path) for name, path in sorted(inputs.items())}

    filtered = cfg.get_list("filter.covariates")
    spec = preprocess.FilterSpec(
        sigma=cfg.get_float("filter.sigma", 100.0),
        radius=cfg.get_float("filter.radius", 10.0),
    )
    twi_name = cfg.raw("twi.covariate")
    curvature_names = cfg.get_list("curvature.covariates")
    dusaf_name = cfg.raw("dusaf.covariate")

    outputs = {}
    for name, grid in grids.items():
        if name in filtered:
            grid = preprocess.gaussian_filter(grid, spec)
        if name == twi_name:
            binary = preprocess.binarize_twi(grid, cfg.get_float("twi.threshold", 9.0))
            outputs[f"{name}_b"] = binary.to_raster()
        if name in curvature_names:
            signs = preprocess.curvature_sign(grid, cfg.get_float("curvature.tol", 1e-6))
            outputs[f"{name}_sign"] = signs.to_raster()
            continue
        if name == dusaf_name:
            coded = preprocess.categorical_from_codes(grid)
            merged = preprocess.merge_dusaf(coded, cfg.get_list("dusaf.natural"),
                                            cfg.get_list("dusaf.anthropic"))
            outputs[f"{name}_bin"] = merged.to_raster()
            continue
        outputs[name] = grid

    for name, grid in outputs.items():
        write_ascii_grid(grid, out / f"{name}.asc")
    _write_manifest(out, "preprocess", cfg, seed, {"outputs": ",".join(sorted(outputs))})
    print(f"preprocess: wrote {len(outputs)} grid(s) -> {out}")
    return 0


def cmd_importance(cfg: KeyValueConfig, args) -> int:
    """Rank covariates by random-forest Gini importance."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    stack = _load_stack(cfg, "raster")
    pattern = _load_pattern(cfg, "points", stack)
    table = rfimportance.build_rf_dataset(
        pattern, stack, cfg.get_float("rf.spacing", ppm.DEFAULT_DUMMY_SPACING))
    forest = rfimportance.fit_forest(table, rfimportance.ForestConfig(
        n_trees=cfg.get_int("rf.trees", rfimportance.DEFAULT_TREES),
        min_node_size=cfg.get_int("rf.min_node", rfimportance.DEFAULT_MIN_NODE),
        seed=seed,
    ))
    ranking = rfimportance.gini_importance(forest, table)
    _write_ranking_csv(ranking, out / "ranking.csv")
    _write_manifest(out, "importance", cfg, seed,
                    {"top_block": ",".join(ranking.top_block)})
    print(f"importance: top block = {', '.join(ranking.top_block)}")
    return 0


def cmd_fit(cfg: KeyValueConfig, args) -> int:
    """Fit one intensity model and save it."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    stack = _load_stack(cfg, "raster")
    pattern = _load_pattern(cfg, "points", stack)
    spec = ModelSpec(_parse_terms(cfg.require("model.terms")),
                     name=cfg.raw("model.name", "model"))
    quad = ppm.make_quadrature(pattern, stack,
                               cfg.get_float("dummy_spacing", ppm.DEFAULT_DUMMY_SPACING))
    model = ppm.fit_model(spec, pattern, stack, quad,
                          basis_dim=cfg.get_int("basis_dim", 10))
    ppm.save_model(model, out / f"{spec.name}.json")
    _write_manifest(out, "fit", cfg, seed,
                    {"loglik": model.diagnostics["loglik"],
                     "converged": model.diagnostics["converged"]})
    print(f"fit: {spec.name} loglik={model.diagnostics['loglik']:.6g} -> {out}")
    return 0


def cmd_predict(cfg: KeyValueConfig, args) -> int:
    """Predict the intensity map of a saved model on a stack."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    stack = _load_stack(cfg, "raster")
    model = ppm.load_model(cfg.require("model"))
    intensity = ppm.predict_intensity(model, stack)
    write_ascii_grid(intensity, out / "intensity.asc")
    _write_manifest(out, "predict", cfg, seed)
    print(f"predict: intensity map -> {out / 'intensity.asc'}")
    return 0


def cmd_simulate(cfg: KeyValueConfig, args) -> int:
    """Sample one pattern from an intensity raster (or model + stack)."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    if "intensity" in cfg:
        grid = read_ascii_grid(cfg.require("intensity"))
        intensity = ppm.IntensityMap(grid.window, grid.values)
    else:
        stack = _load_stack(cfg, "raster")
        intensity = ppm.predict_intensity(ppm.load_model(cfg.require("model")), stack)
    pattern = simboot.sample_pattern(intensity, SeededRng(seed))
    write_points_csv(pattern, out / "pattern.csv")
    _write_manifest(out, "simulate", cfg, seed, {"n_points": len(pattern)})
    print(f"simulate: {len(pattern)} points -> {out / 'pattern.csv'}")
    return 0


def cmd_bootstrap(cfg: KeyValueConfig, args) -> int:
    """Semiparametric bootstrap sd and percentile maps for a saved model."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    stack = _load_stack(cfg, "raster")
    pattern = _load_pattern(cfg, "points", stack)
    model = ppm.load_model(cfg.require("model"))
    quad = ppm.make_quadrature(pattern, stack,
                               cfg.get_float("dummy_spacing", ppm.DEFAULT_DUMMY_SPACING))
    maps = simboot.semiparametric_bootstrap(
        model, stack, quad,
        B=cfg.get_int("bootstrap.b", simboot.DEFAULT_REPLICATES),
        alpha=cfg.get_float("bootstrap.alpha", 0.99),
        rng=SeededRng(seed), threads=args.threads,
    )
    write_ascii_grid(maps.sd, out / "bootstrap_sd.asc")
    write_ascii_grid(maps.percentile, out / "percentile.asc")
    _write_manifest(out, "bootstrap", cfg, seed,
                    {"bootstrap.b": maps.replicates, "bootstrap.alpha": maps.alpha,
                     "failures": maps.failures,
                     "effective_replicates": maps.effective_replicates})
    print(f"bootstrap: B={maps.replicates} failures={maps.failures} -> {out}")
    return 0


def cmd_validate(cfg: KeyValueConfig, args) -> int:
    """Rank saved models by log-likelihood on the intersected in-range mask."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    stack = _load_stack(cfg, "raster")
    pattern = _load_pattern(cfg, "points", stack)
    model_paths = cfg.get_list("models")
    if len(model_paths) < 2:
        raise ConfigError(f"{cfg.source}: 'models' must list at least two model files")
    models = [ppm.load_model(p) for p in model_paths]
    entries = ppm.select_model(models, pattern, stack)
    table = _selection_table(entries)
    (out / "selection.txt").write_text(table + "\n")
    with open(out / "selection.csv", "w") as fh:
        fh.write("model,loglik\n")
        for e in entries:
            fh.write(f"{e.name},{e.loglik:.17g}\n")
    _write_manifest(out, "validate", cfg, seed, {"selected": entries[0].name})
    print(table)
    return 0


def cmd_diagnose(cfg: KeyValueConfig, args) -> int:
    """Raw error grid, residual summary, lurking curves and QQ data."""
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    stack = _load_stack(cfg, "raster")
    pattern = _load_pattern(cfg, "points", stack)
    model = ppm.load_model(cfg.require("model"))
    subarea = cfg.get_float("subarea", diagnostics.DEFAULT_SUBAREA)
    nsim = cfg.get_int("nsim", diagnostics.DEFAULT_NSIM)
    rng = SeededRng(seed)

    intensity = ppm.predict_intensity(model, stack)
    grid = diagnostics.raw_errors(intensity, pattern, subarea)
    with open(out / "errors.csv", "w") as fh:
        fh.write("row,col,expected,observed,error,area\n")
        for i in range(grid.window.n_rows):
            for j in range(grid.window.n_cols):
                if grid.window.validity_mask[i, j]:
                    fh.write(f"{i},{j},{grid.expected[i, j]:.17g},"
                             f"{grid.observed[i, j]:.17g},{grid.error[i, j]:.17g},"
                             f"{grid.area[i, j]:.17g}\n")
    matrix_svg(np.where(grid.window.validity_mask, grid.error, np.nan),
               out / "errors.svg", title="raw errors (expected - observed)")
    summary = diagnostics.residual_summary(grid)
    (out / "summary.txt").write_text(summary.format() + "\n")

    for cov in cfg.get_list("lurking.covariates", stack.names):
        curve = diagnostics.lurking_curve(model, pattern, stack, cov,
                                          nsim=nsim, rng=rng.child(hash_name(cov)))
        with open(out / f"lurking_{cov}.csv", "w") as fh:
            fh.write("threshold,curve,envelope_lo,envelope_hi\n")
            for z, c, lo, hi in zip(curve.thresholds, curve.curve,
                                    curve.envelope_lo, curve.envelope_hi):
                fh.write(f"{z:.17g},{c:.17g},{lo:.17g},{hi:.17g}\n")
        curve_with_envelope_svg(curve.thresholds, curve.curve, curve.envelope_lo,
                                curve.envelope_hi, out / f"lurking_{cov}.svg",
                                title=f"cumulative raw residual vs {cov}",
                                x_label=cov, y_label="cumulative residual")

    qq = diagnostics.qq_data(model, pattern, stack, subarea=subarea,
                             nsim=nsim, rng=rng.child(999_999))
    with open(out / "qq.csv", "w") as fh:
        fh.write("simulated_mean,observed,envelope_lo,envelope_hi\n")
        for s, o, lo, hi in zip(qq.simulated_mean, qq.observed,
                                qq.envelope_lo, qq.envelope_hi):
            fh.write(f"{s:.17g},{o:.17g},{lo:.17g},{hi:.17g}\n")
    curve_with_envelope_svg(qq.simulated_mean, qq.observed, qq.envelope_lo,
                            qq.envelope_hi, out / "qq.svg",
                            title="subarea residual QQ",
                            x_label="mean simulated quantile", y_label="observed quantile")
    _write_manifest(out, "diagnose", cfg, seed)
    print(f"diagnose: errors/summary/lurking/qq -> {out}")
    print(summary.format())
    return 0


def hash_name(name: str) -> int:
    """Stable small integer from a covariate name (rng stream derivation)."""
    total = 0
    for ch in name:
        total = (total * 131 + ord(ch)) % 1_000_003
    return total


def cmd_workflow(cfg: KeyValueConfig, args) -> int:
    """Full pipeline: importance on the training valley, fit the three
    candidate models, select on the validation valley, then map intensity,
    bootstrap uncertainty and residuals on the test valley.

    The test valley is not read until selection has completed; the stage log
    in the report records the order.
    """
    out = _out_dir(args)
    seed = _resolve_seed(cfg, args)
    rng = SeededRng(seed)
    stages: list[str] = []
    categorical = set(cfg.get_list("terms.categorical"))
    orientation = set(cfg.get_list("orientation.covariates", ["northness", "eastness"]))
    dummy_spacing = cfg.get_float("dummy_spacing", ppm.DEFAULT_DUMMY_SPACING)
    basis_dim = cfg.get_int("basis_dim", 10)

    # (i) training valley: importance ranking and candidate fits
    train_stack = _load_stack(cfg, "train.raster")
    train_pattern = _load_pattern(cfg, "train.points", train_stack)
    stages.append("loaded_train")

    table = rfimportance.build_rf_dataset(
        train_pattern, train_stack, cfg.get_float("rf.spacing", dummy_spacing))
    forest = rfimportance.fit_forest(table, rfimportance.ForestConfig(
        n_trees=cfg.get_int("rf.trees", rfimportance.DEFAULT_TREES),
        min_node_size=cfg.get_int("rf.min_node", rfimportance.DEFAULT_MIN_NODE),
        seed=seed,
    ))
    ranking = rfimportance.gini_importance(forest, table)
    _write_ranking_csv(ranking, out / "ranking.csv")
    stages.append("importance_done")

    top = ranking.top_block
    reduced = [n for n in top if n not in orientation]
    if not reduced:
        raise DataError("orientation covariates exhaust the top block; nothing to fit")
    specs = [
        _spec_from_names(ranking.names, categorical, "GAM-all"),
        _spec_from_names(top, categorical, "GAM-selected"),
        _spec_from_names(reduced, categorical, "GAM-reduced"),
    ]
    quad = ppm.make_quadrature(train_pattern, train_stack, dummy_spacing)
    models = []
    for spec in specs:
        model = ppm.fit_model(spec, train_pattern, train_stack, quad, basis_dim=basis_dim)
        ppm.save_model(model, out / f"{spec.name}.json")
        models.append(model)
    stages.append("training_fits_done")

    # (ii) validation valley: likelihood ranking on the intersected mask
    val_stack = _load_stack(cfg, "validate.raster")
    val_pattern = _load_pattern(cfg, "validate.points", val_stack)
    stages.append("loaded_validate")
    entries = ppm.select_model(models, val_pattern, val_stack)
    selection = _selection_table(entries)
    with open(out / "selection.csv", "w") as fh:
        fh.write("model,loglik\n")
        for e in entries:
            fh.write(f"{e.name},{e.loglik:.17g}\n")
    best = entries[0].model
    stages.append("selection_done")

    # (iii) test valley: intensity, uncertainty and residual maps
    test_stack = _load_stack(cfg, "test.raster")
    test_pattern = _load_pattern(cfg, "test.points", test_stack)
    stages.append("loaded_test")

    intensity = ppm.predict_intensity(best, test_stack)
    write_ascii_grid(intensity, out / "intensity.asc")
    boot = simboot.semiparametric_bootstrap(
        best, test_stack, ppm.make_quadrature(test_pattern, test_stack, dummy_spacing),
        B=cfg.get_int("bootstrap.b", simboot.DEFAULT_REPLICATES),
        alpha=cfg.get_float("bootstrap.alpha", 0.99),
        rng=rng.child(31_337), threads=args.threads,
    )
    write_ascii_grid(boot.sd, out / "bootstrap_sd.asc")
    write_ascii_grid(boot.percentile, out / "percentile.asc")

    grid = diagnostics.raw_errors(intensity, test_pattern,
                                  cfg.get_float("subarea", diagnostics.DEFAULT_SUBAREA))
    summary = diagnostics.residual_summary(grid)
    matrix_svg(np.where(grid.window.validity_mask, grid.error, np.nan),
               out / "errors.svg", title="test-valley raw errors")
    stages.append("test_outputs_done")

    alpha_pct = int(round(100 * boot.alpha))
    report = [
        f"detachment-model workflow report (seed {seed})",
        "",
        "stage order: " + " -> ".join(stages),
        "",
        "covariate ranking (Gini importance, block boundary after "
        f"{ranking.block_boundary}):",
    ]
    report += [f"  {name:<16} {value:.4f}" for name, value in ranking.entries]
    report += ["", "validation ranking:", selection, "",
               f"selected model: {best.name}", "",
               "test-valley maps (left to right): intensity.asc | bootstrap_sd.asc | "
               f"percentile.asc ({alpha_pct}th percentile alarm map)",
               f"bootstrap: B={boot.replicates}, failures={boot.failures}", "",
               "test-valley residual summary:", summary.format(), ""]
    (out / "report.txt").write_text("\n".join(report))
    _write_manifest(out, "workflow", cfg, seed,
                    {"selected": best.name, "stages": ">".join(stages)})
    print("\n".join(report))
    return 0


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "importance": cmd_importance,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "bootstrap": cmd_bootstrap,
    "validate": cmd_validate,
    "diagnose": cmd_diagnose,
    "workflow": cmd_workflow,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detachmap",
        description="Landslide detachment maps from spatial Poisson point processes",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", required=True, help="key-value config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="seed override (otherwise the config's, default 0)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for replicate-parallel stages")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = KeyValueConfig.from_file(args.config)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except DetachmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
