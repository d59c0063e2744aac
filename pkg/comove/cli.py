# -*- coding: utf-8 -*-
"""
Command-line driver: train, predict, synth, crosscorr and plot subcommands.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything unexpected.
"""

import argparse
import json
import logging
import os
import platform
import sys
import time
import traceback
from contextlib import contextmanager
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy

from comove import analytics, config as cfg, gp_engine, plotting, series_store, synthetic, trainer
from comove.errors import EXIT_OK, ComoveError, ConfigError, ChannelMismatchError, UnknownChannelError
from comove.kernels import normalize_variant
from comove.tracking import RunTracker

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

MODELS_FILE = "models.json"
METRICS_FILE = "metrics.csv"
CORRELATION_FILE = "correlation.json"
PREDICTIONS_FILE = "predictions.csv"
MANIFEST_FILE = "run-manifest.json"
DATASET_FILE = "dataset.json"
SYNTHETIC_FILE = "synthetic.csv"
DEFAULT_SYNTHETIC_PATH = "data/synthetic.csv"

VARIANT_CHOICES = ("mosm", "csm", "smlmc", "smigp")

MSG_INFO_STARTING = "Starting {command} run"
MSG_INFO_WROTE = "Wrote {path}"
MSG_INFO_BEST = "Best trial #{index}: objective {objective:.6g}"
MSG_INFO_METRIC = "{metric}: {summary}"
MSG_INFO_INTERRUPTED = "Interrupted by user"
MSG_ERROR_STAGE = "Stage '{stage}' failed: {error}"
MSG_FATAL_ERROR = "FATAL ERROR"
MSG_ERROR_UNEXPECTED_MAIN = "Unexpected error in main execution"

# ============================================================================
# HELPERS
# ============================================================================

@contextmanager
def stage(name: str, tracker: RunTracker):
    """Time a pipeline stage; log failures with the stage name and re-raise."""
    start = time.time()
    try:
        yield
    except ComoveError as e:
        tracker.record_stage(name, time.time() - start, success=False)
        logger.error(MSG_ERROR_STAGE.format(stage=name, error=e))
        e.stage = name
        raise
    tracker.record_stage(name, time.time() - start)


def _write_json(data, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
        f.write("\n")
    logger.info(MSG_INFO_WROTE.format(path=path))
    return path


def _versions() -> Dict[str, str]:
    import comove
    return {
        "comove": comove.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "python": platform.python_version(),
    }


def _positive_int(config: Dict, path: str, default: int) -> int:
    value = cfg.get_config_value(config, path, default)
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"'{path}' must be an integer, got {value!r}") from None
    if value < 1:
        raise ConfigError(f"'{path}' must be >= 1, got {value}")
    return value


def _load_dataset(path: str, schema: str = series_store.SCHEMA_LONG) -> series_store.TimeSeriesSet:
    """dataset.json from a train run, or a raw CSV with every point in training."""
    if path.lower().endswith(".json"):
        return series_store.load_json(path)
    return series_store.load_csv(path, schema)


def _parse_channels(text: Optional[str], ts: series_store.TimeSeriesSet) -> List[str]:
    if not text:
        return list(ts.names)
    names = [n.strip() for n in text.split(",") if n.strip()]
    for name in names:
        if name not in ts.names:
            raise UnknownChannelError(f"Unknown channel '{name}' (known: {', '.join(ts.names)})")
    return names


def grid_query(ts: series_store.TimeSeriesSet, points: int, channels: Optional[Sequence[str]] = None):
    """Per-channel uniform grid over each channel's observed span."""
    query = []
    for name in channels or ts.names:
        ch = ts.channel(name)
        if len(ch) == 0:
            continue
        for t in np.linspace(ch.t[0], ch.t[-1], points):
            query.append((name, float(t)))
    return query


def _check_model_channels(model: gp_engine.GPModel, ts: series_store.TimeSeriesSet):
    if model.channel_names and list(model.channel_names) != list(ts.names):
        raise ChannelMismatchError(
            f"Model channels {list(model.channel_names)} do not match data channels {ts.names}")
    if model.spec.M != ts.M:
        raise ChannelMismatchError(f"Model has {model.spec.M} channel(s) but data has {ts.M}")

# ============================================================================
# CONFIGURATION
# ============================================================================

def resolve_train_config(args) -> Dict:
    """Fill every default and apply command-line overrides."""
    config = cfg.load_config(args.config)
    base_dir = os.path.dirname(os.path.abspath(args.config))

    for path, value in (("training.seed", args.seed), ("training.trials", args.trials),
                        ("model.variant", args.variant), ("model.Q", args.q),
                        ("outputs.directory", args.out), ("report_scale", args.scale)):
        if value is not None:
            cfg.set_config_value(config, path, value)

    data_path = cfg.require(config, "data.path")
    schema = cfg.get_config_value(config, "data.schema", cfg.DEFAULT_SCHEMA)
    if schema not in cfg.VALID_SCHEMAS:
        raise ConfigError(f"data.schema must be one of {cfg.VALID_SCHEMAS}, got '{schema}'")
    transforms = list(cfg.get_config_value(config, "transforms", []))
    for kind in transforms:
        if kind not in series_store.TRANSFORM_KINDS:
            raise ConfigError(f"Unknown transform '{kind}' (expected one of {series_store.TRANSFORM_KINDS})")
    scale = cfg.get_config_value(config, "report_scale", cfg.DEFAULT_REPORT_SCALE)
    if scale not in cfg.VALID_SCALES:
        raise ConfigError(f"report_scale must be one of {cfg.VALID_SCALES}, got '{scale}'")

    training_seed = int(cfg.get_config_value(config, "training.seed", cfg.DEFAULT_SEED))
    mask = dict(cfg.get_config_value(config, "mask", {}))
    mask.setdefault("seed", training_seed)

    return {
        "experiment": cfg.get_config_value(config, "experiment", cfg.DEFAULT_EXPERIMENT),
        "data": {"path": cfg.resolve_path(data_path, base_dir), "schema": schema},
        "transforms": transforms,
        "mask": mask,
        "model": {
            "variant": normalize_variant(cfg.get_config_value(config, "model.variant", cfg.DEFAULT_VARIANT)),
            "Q": _positive_int(config, "model.Q", cfg.DEFAULT_Q),
        },
        "training": {
            "trials": _positive_int(config, "training.trials", cfg.DEFAULT_TRIALS),
            "seed": training_seed,
            "max_iterations": _positive_int(config, "training.max_iterations", cfg.DEFAULT_MAX_ITERATIONS),
            "grid_size": _positive_int(config, "training.grid_size", cfg.DEFAULT_GRID_SIZE),
            "gradient_check": bool(cfg.get_config_value(config, "training.gradient_check",
                                                        cfg.DEFAULT_GRADIENT_CHECK)),
            "perturbation": {
                "lognormal_std": float(cfg.get_config_value(config, "training.perturbation.lognormal_std",
                                                            cfg.DEFAULT_LOGNORMAL_STD)),
                "additive_std": float(cfg.get_config_value(config, "training.perturbation.additive_std",
                                                           cfg.DEFAULT_ADDITIVE_STD)),
            },
        },
        "outputs": {
            "directory": cfg.get_config_value(config, "outputs.directory", cfg.DEFAULT_OUTPUT_DIR),
            "grid_points": _positive_int(config, "outputs.grid_points", cfg.DEFAULT_GRID_POINTS),
        },
        "report_scale": scale,
        "metrics": {
            "export_to_json": bool(cfg.get_config_value(config, "metrics.export_to_json",
                                                        cfg.DEFAULT_METRICS_EXPORT_TO_JSON)),
            "json_output_path": cfg.get_config_value(config, "metrics.json_output_path",
                                                     cfg.DEFAULT_METRICS_JSON_PATH),
        },
    }

# ============================================================================
# COMMANDS
# ============================================================================

def cmd_train(args, tracker: RunTracker) -> int:
    """load -> mask -> transform -> init -> fit -> aggregate -> write."""
    with stage("config", tracker):
        resolved = resolve_train_config(args)
    out = resolved["outputs"]["directory"]
    training = resolved["training"]
    variant, Q = resolved["model"]["variant"], resolved["model"]["Q"]
    scale = resolved["report_scale"]

    with stage("load", tracker):
        ts = series_store.load_csv(resolved["data"]["path"], resolved["data"]["schema"])
    with stage("mask", tracker):
        mask_spec = series_store.mask_spec_from_config(resolved["mask"], ts.origin)
        ts = series_store.apply_mask(ts, mask_spec)
    with stage("transform", tracker):
        ts = series_store.transform_set(ts, resolved["transforms"])
    with stage("init", tracker):
        initial = trainer.init_spec(ts, variant, Q, grid_size=training["grid_size"], seed=training["seed"])
    with stage("fit", tracker):
        trials = trainer.fit(
            ts, variant, Q,
            trials=training["trials"],
            seed=training["seed"],
            max_iterations=training["max_iterations"],
            grid_size=training["grid_size"],
            lognormal_std=training["perturbation"]["lognormal_std"],
            additive_std=training["perturbation"]["additive_std"],
            check_gradient=training["gradient_check"],
            tracker=tracker,
            initial=initial,
        )
    best = trials[0]
    logger.info(MSG_INFO_BEST.format(index=best.index, objective=best.final_objective))

    with stage("aggregate", tracker):
        metrics = analytics.aggregate_trials(trials, ts, scale=scale, experiment=resolved["experiment"])
        correlation = analytics.correlation_report(best.model, ts)
        for row in metrics.rows():
            logger.info(MSG_INFO_METRIC.format(metric=row["metric"], summary=row["summary"]))
    with stage("predict", tracker):
        query = grid_query(ts, resolved["outputs"]["grid_points"])
        predictions = gp_engine.posterior_to_frame(
            gp_engine.posterior(best.model, ts, query), data=ts, scale=scale)

    with stage("write", tracker):
        os.makedirs(out, exist_ok=True)
        written = [
            trainer.save_trials(trials, os.path.join(out, MODELS_FILE), report=initial[1]),
            metrics.to_csv(os.path.join(out, METRICS_FILE)),
            correlation.save_json(os.path.join(out, CORRELATION_FILE)),
            *correlation.save_csv(out),
            gp_engine.write_posterior_csv(predictions, os.path.join(out, PREDICTIONS_FILE)),
            series_store.save_json(ts, os.path.join(out, DATASET_FILE)),
        ]
        manifest = {
            "command": "train",
            "config": resolved,
            "seeds": {
                "mask": mask_spec.seed,
                "training": training["seed"],
                "trials": sorted((t.index, t.seed) for t in trials),
            },
            "mask_warnings": list(ts.mask_warnings),
            "estimator": initial[1].estimator,
            "versions": _versions(),
            "outputs": sorted(os.path.basename(p) for p in written),
        }
        _write_json(manifest, os.path.join(out, MANIFEST_FILE))

    if resolved["metrics"]["export_to_json"]:
        tracker.export_to_json(resolved["metrics"]["json_output_path"])
    tracker.print_summary()
    return EXIT_OK


def cmd_predict(args, tracker: RunTracker) -> int:
    with stage("load", tracker):
        model = gp_engine.load_model(args.model)
        ts = _load_dataset(args.data, args.schema)
        _check_model_channels(model, ts)
    with stage("predict", tracker):
        names = _parse_channels(args.channels, ts)
        if args.times:
            try:
                times = [float(v) for v in args.times.split(",") if v.strip()]
            except ValueError as e:
                raise ConfigError(f"--times must be comma-separated numbers: {e}") from e
            query = [(name, t) for name in names for t in times]
        else:
            query = grid_query(ts, args.grid, names)
        frame = gp_engine.posterior_to_frame(gp_engine.posterior(model, ts, query), data=ts, scale=args.scale)
    with stage("write", tracker):
        gp_engine.write_posterior_csv(frame, os.path.join(args.out, PREDICTIONS_FILE))
    return EXIT_OK


def cmd_synth(args, tracker: RunTracker) -> int:
    with stage("config", tracker):
        config = cfg.load_config(args.config)
        section = config.get("synthetic", config)
        if args.seed is not None:
            section = dict(section, seed=args.seed)
        spec = synthetic.SyntheticSpec.from_dict(section)
        if args.out:
            path = os.path.join(args.out, SYNTHETIC_FILE)
        else:
            path = section.get("path", DEFAULT_SYNTHETIC_PATH)
    with stage("write", tracker):
        csv_path, manifest = synthetic.write_dataset(spec, path)
        logger.info(MSG_INFO_WROTE.format(path=manifest))
    return EXIT_OK


def cmd_crosscorr(args, tracker: RunTracker) -> int:
    with stage("load", tracker):
        model = gp_engine.load_model(args.model)
        ts = _load_dataset(args.data, args.schema)
        _check_model_channels(model, ts)
    with stage("aggregate", tracker):
        report = analytics.correlation_report(model, ts, args.mode)
    with stage("write", tracker):
        report.save_json(os.path.join(args.out, CORRELATION_FILE))
        report.save_csv(args.out)
    return EXIT_OK


def cmd_plot(args, tracker: RunTracker) -> int:
    with stage("load", tracker):
        predictions = plotting.read_predictions(args.predictions)
        ts = _load_dataset(args.data, args.schema)
    with stage("plot", tracker):
        plotting.plot_predictions(predictions, ts, args.out, scale=args.scale, stamp=args.stamp)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "synth": cmd_synth,
    "crosscorr": cmd_crosscorr,
    "plot": cmd_plot,
}

# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comove",
        description="Multi-output spectral mixture Gaussian processes for coupled time series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Fit a kernel and write models, metrics, correlations, predictions")
    train.add_argument("--config", required=True, help="experiment config (JSON)")
    train.add_argument("--seed", type=int, help="override training.seed")
    train.add_argument("--out", help="override outputs.directory")
    train.add_argument("--scale", choices=cfg.VALID_SCALES, help="override report_scale")
    train.add_argument("--trials", type=int, help="override training.trials")
    train.add_argument("--variant", choices=VARIANT_CHOICES, help="override model.variant")
    train.add_argument("--q", type=int, help="override model.Q")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--data", required=True, help="dataset.json from a train run, or a CSV file")
    data_opts.add_argument("--schema", choices=cfg.VALID_SCHEMAS, default=cfg.DEFAULT_SCHEMA,
                           help="CSV layout when --data is a CSV file")
    data_opts.add_argument("--out", default=".", help="output directory")

    predict = sub.add_parser("predict", parents=[data_opts], help="Posterior mean/variance/band at query points")
    predict.add_argument("--model", required=True, help="models.json or a single model file")
    query = predict.add_mutually_exclusive_group()
    query.add_argument("--grid", type=int, default=cfg.DEFAULT_GRID_POINTS, help="points per channel")
    query.add_argument("--times", help="comma-separated day offsets")
    predict.add_argument("--channels", help="comma-separated channel names (default all)")
    predict.add_argument("--scale", choices=cfg.VALID_SCALES, default=cfg.DEFAULT_REPORT_SCALE)

    synth = sub.add_parser("synth", help="Generate a synthetic data set with a ground-truth manifest")
    synth.add_argument("--config", required=True, help="synthetic spec (JSON)")
    synth.add_argument("--seed", type=int, help="override the generator seed")
    synth.add_argument("--out", help="output directory (default: synthetic.path from the config)")

    crosscorr = sub.add_parser("crosscorr", parents=[data_opts], help="Kernel and empirical correlation matrices")
    crosscorr.add_argument("--model", required=True)
    crosscorr.add_argument("--mode", choices=analytics.NORMALIZATIONS, default=analytics.DIAGONAL_SQRT)

    plot = sub.add_parser("plot", parents=[data_opts], help="One SVG per channel from predictions.csv")
    plot.add_argument("--predictions", required=True)
    plot.add_argument("--scale", choices=cfg.VALID_SCALES, default=cfg.DEFAULT_REPORT_SCALE)
    plot.add_argument("--stamp", action="store_true", help="add a generation timestamp comment")
    return parser

# ============================================================================
# MAIN EXECUTION
# ============================================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    tracker = RunTracker()
    logger.info(MSG_INFO_STARTING.format(command=args.command))
    try:
        return COMMANDS[args.command](args, tracker)
    except ComoveError as e:
        if not getattr(e, "stage", None):
            logger.error(str(e))
        return e.exit_code


def run_cli():
    """Entry point wrapper that handles CLI execution and exit codes."""
    try:
        exit_code = main()
        sys.exit(exit_code if isinstance(exit_code, int) else 0)
    except KeyboardInterrupt:
        logger.info(f"\n{MSG_INFO_INTERRUPTED}")
        sys.exit(1)
    except Exception as e:
        logger.critical(f"\n{MSG_FATAL_ERROR}: {MSG_ERROR_UNEXPECTED_MAIN}: {e}")
        logger.critical(traceback.format_exc())
        sys.exit(1)


if __name__ == "__main__":
    run_cli()
