"""Command-line front end: ``dte train | predict | cv | export-folds | import-folds``.

Settings come from, in increasing priority: built-in defaults, the
``DTE_SEED`` / ``DTE_WORKERS`` environment variables, a JSON config file
(``--config``) and command-line flags. Every output is written to a
temporary sibling and renamed into place, so the exit status is zero iff
the requested file is complete.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import persist
from .dataset import DatasetError, ShapeError, export_folds, import_folds, kfold_split, read_table
from .experiment import (
    BASELINE,
    VARIANTS,
    ExperimentConfig,
    ExperimentError,
    FoldFailure,
    ResultsTable,
    build_dataset,
    load_table,
    run_cv,
    summary_path,
    tune_and_fit,
)
from .metrics import MetricError

log = logging.getLogger("dte")

PREDICTIONS_FORMAT = "dte-predictions/1"


class CommandError(RuntimeError):
    pass


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands


def cmd_train(exp: ExperimentConfig, output: str | Path) -> Path:
    """Tune on the full data by inner CV, fit the winning configuration and save it."""
    if len(exp.variants) != 1:
        raise ExperimentError(f"train needs exactly one variant, got {', '.join(exp.variants)} (use --variant)")
    variant = exp.variants[0]
    table = load_table(exp)
    data = build_dataset(exp, table)
    model, grid = tune_and_fit(exp, variant, data, workers=exp.workers)
    meta = {
        "dataset": exp.dataset_name,
        "variant": variant,
        "feature_columns": list(data.features.columns),
        "target_columns": list(data.targets.columns),
        "grid_point": {"n_trees": grid.best.n_trees, "components": grid.best.components},
        "grid_scores": [[p.n_trees, p.components, s] for p, s in grid.scores],
        "experiment": exp.to_dict(),
    }
    if exp.impute:
        cols = table.values[:, [table.header.index(c) for c in data.features.columns]]
        meta["feature_means"] = [float(v) for v in np.nanmean(cols, axis=0)]
    persist.save(model, output, meta)
    log.info("trained %s: %d layer(s), grid point %s", variant, model.best_layer, grid.best.label())
    return Path(output)


def _feature_block(table, meta: dict, n_features: int) -> np.ndarray:
    names = meta.get("feature_columns") or []
    if names and all(c in table.header for c in names):
        x = table.values[:, [table.header.index(c) for c in names]]
    elif table.values.shape[1] == n_features:
        x = table.values
    else:
        raise ShapeError(
            f"model expects D={n_features} features, data has D={table.values.shape[1]} columns"
            + (" and lacks the training column names" if names else "")
        )
    if np.isnan(x).any():
        means = meta.get("feature_means")
        if means is None:
            r, c = np.argwhere(np.isnan(x))[0]
            raise DatasetError(f"empty feature cell at row {r + 2}, column {c + 1}; the model was trained without imputation")
        x = np.where(np.isnan(x), np.asarray(means)[None, :], x)
    return x


def cmd_predict(model_path: str | Path, data_path: str | Path, output: str | Path) -> Path:
    """Write an N x M CSV of predictions (label probabilities for multi-label models)."""
    from .cascade import predict_cascade

    model, meta = persist.load_with_meta(model_path)
    if not hasattr(model, "layers"):
        raise persist.ModelFormatError(f"{model_path} holds a {type(model).__name__}, not a cascade model")
    table = read_table(data_path)
    x = _feature_block(table, meta, model.n_features)
    pred = predict_cascade(model, x)
    header = meta.get("target_columns") or [f"y{j}" for j in range(model.n_outputs)]
    persist.write_atomic(output, _csv_text(header, [[repr(float(v)) for v in row] for row in pred]).encode())
    return Path(output)


def cmd_cv(exp: ExperimentConfig, output: str | Path) -> ResultsTable:
    """Cross-validated evaluation; writes the per-fold table and a summary next to it."""
    table = run_cv(exp)
    summary = summary_path(output)
    persist.write_atomic(summary, table.summary_csv().encode())
    persist.write_atomic(output, table.to_csv().encode())
    return table


def cmd_export_folds(data_path: str | Path, k: int, seed: int, directory: str | Path) -> list[Path]:
    n = read_table(data_path).values.shape[0]
    Path(directory).mkdir(parents=True, exist_ok=True)
    return export_folds(kfold_split(n, k, seed), directory)


def cmd_import_folds(directory: str | Path, n: int | None = None):
    return import_folds(directory, n)


# --------------------------------------------------------------------------
# argument parsing


def _targets(s: str):
    try:
        return int(s)
    except ValueError:
        return [t.strip() for t in s.split(",") if t.strip()]


def _list(conv):
    def parse(s: str):
        return [conv(v.strip()) for v in s.split(",") if v.strip()]
    return parse


def _component(s: str):
    return s if s == "single" else float(s)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment (override the config file)")
    g.add_argument("--config", help="JSON experiment config; every key optional")
    g.add_argument("--data", help="CSV file with a header row")
    g.add_argument("--targets", type=_targets, help="number of trailing target columns, or comma-separated names")
    g.add_argument("--task", choices=["regression", "multilabel"])
    g.add_argument("--name", help="dataset name used in result tables")
    g.add_argument("--impute", action="store_true", default=None, help="fill empty feature cells with training means")
    g.add_argument("--variant", action="append", dest="variants", choices=VARIANTS,
                   help=f"repeatable; {BASELINE} is the single-layer baseline")
    g.add_argument("--seed", type=int)
    g.add_argument("--cv-folds", type=int, dest="cv_folds")
    g.add_argument("--inner-folds", type=int, dest="inner_folds")
    g.add_argument("--folds-dir", dest="folds_dir", help="use outer folds from this directory")
    g.add_argument("--trees", type=_list(int), dest="tree_grid", help="tree-count grid, e.g. 50,100")
    g.add_argument("--components", type=_list(_component), dest="component_grid",
                   help="component grid as fractions or 'single', e.g. single,0.05,0.4")
    g.add_argument("--max-layers", type=int, dest="max_layers")
    g.add_argument("--filter-p", type=float, dest="filter_p")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--subsample", type=float, dest="subsample_fraction")
    g.add_argument("--os-folds", type=int, dest="os_folds")
    g.add_argument("--stopping-metric", dest="stopping_metric")
    g.add_argument("--stopping-rule", dest="stopping_rule", choices=["best", "first_deterioration", "patience"])
    g.add_argument("--patience", type=int)
    g.add_argument("--metrics", type=_list(str), help="comma-separated metric ids")
    g.add_argument("--workers", type=int, help="parallel workers (default: $DTE_WORKERS or 1)")


_EXPERIMENT_KEYS = (
    "data", "targets", "task", "name", "impute", "variants", "seed", "cv_folds", "inner_folds", "folds_dir",
    "tree_grid", "component_grid", "max_layers", "filter_p", "epsilon", "subsample_fraction", "os_folds",
    "stopping_metric", "stopping_rule", "patience", "metrics", "workers",
)


def experiment_from_args(args: argparse.Namespace, env=None) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in _EXPERIMENT_KEYS if getattr(args, k, None) is not None}
    if args.config:
        return ExperimentConfig.from_file(args.config, env, **overrides)
    return ExperimentConfig.from_dict(overrides, env)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dte", description="Deep tree-ensemble cascades for multi-output prediction.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="tune by inner CV, fit and save a model")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("predict", help="predict a CSV with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="prediction CSV to write")

    p = sub.add_parser("cv", help="cross-validated evaluation")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="results CSV; the summary goes to <name>.summary.csv")

    p = sub.add_parser("export-folds", help="write k-fold test-index files")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=None, help="default: $DTE_SEED or 0")
    p.add_argument("--dir", required=True)

    p = sub.add_parser("import-folds", help="validate fold files and print their sizes")
    p.add_argument("--dir", required=True)
    p.add_argument("--n", type=int, default=None, help="expected number of rows")
    p.add_argument("--data", default=None, help="take the expected number of rows from this CSV")
    return parser


def main(argv=None, env=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "train":
            path = cmd_train(experiment_from_args(args, env), args.out)
            print(f"model written to {path}")
        elif args.command == "predict":
            path = cmd_predict(args.model, args.data, args.out)
            print(f"predictions written to {path}")
        elif args.command == "cv":
            exp = experiment_from_args(args, env)
            table = cmd_cv(exp, args.out)
            for s in table.summary():
                print(f"{s['dataset']}\t{s['variant']}\t{s['metric']}\t{s['cell']}")
        elif args.command == "export-folds":
            seed = args.seed if args.seed is not None else ExperimentConfig.defaults(env)["seed"]
            paths = cmd_export_folds(args.data, args.k, seed, args.dir)
            print(f"{len(paths)} fold files written to {args.dir}")
        elif args.command == "import-folds":
            n = args.n if args.n is not None else (read_table(args.data).values.shape[0] if args.data else None)
            folds = cmd_import_folds(args.dir, n)
            print(json.dumps({"folds": len(folds), "test_sizes": [len(f.test_indices) for f in folds]}))
    except (ExperimentError, DatasetError, ShapeError, MetricError, persist.ModelFormatError, FoldFailure,
            ValueError, OSError) as exc:
        print(f"dte: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
