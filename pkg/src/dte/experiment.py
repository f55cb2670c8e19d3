"""Experiment configuration, hyperparameter grid search and cross-validation.

An :class:`ExperimentConfig` is read from a JSON file in which every key is
optional; the defaults reproduce the published protocol (10-fold outer CV,
5-fold inner tuning over tree counts and embedding sizes, at most 10
layers). The environment may only provide the worker limit
(``DTE_WORKERS``) and the default seed (``DTE_SEED``).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed

from ._seeds import ROLE_FOLDS, ROLE_GRID, derive_seed
from .cascade import CascadeConfig, StoppingRule, Variant, fit_cascade, predict_cascade
from .dataset import Dataset, FoldSplit, RawTable, TaskKind, import_folds, kfold_split, read_table, table_to_dataset
from .embeddings import EmbeddingConfig
from .metrics import TrainStats, default_metrics, default_stopping_metric, get_metric

log = logging.getLogger(__name__)

BASELINE = "RF+ET"
VARIANTS = (BASELINE, "TE", "X_TE", "X_OS", "X_OS_TE")
SINGLE = "single"
DEFAULT_TREE_GRID = (10, 20, 50, 100, 150, 200)
DEFAULT_COMPONENT_GRID = (SINGLE, 0.01, 0.05, 0.2, 0.4, 0.6, 0.8, 0.95)
# reduced grid for desk-scale runs
DESK_TREE_GRID = (50, 100)
DESK_COMPONENT_GRID = (0.05, 0.4)

ENV_WORKERS = "DTE_WORKERS"
ENV_SEED = "DTE_SEED"


class ExperimentError(ValueError):
    pass


class FoldFailure(RuntimeError):
    def __init__(self, variant: str, fold: int, cause: BaseException):
        super().__init__(f"variant {variant}, fold {fold} failed: {type(cause).__name__}: {cause}")
        self.variant = variant
        self.fold = fold


def _env_int(env: Mapping[str, str], key: str, default: int) -> int:
    raw = env.get(key)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ExperimentError(f"environment variable {key} must be an integer, got {raw!r}") from None


def _component(c) -> str | float:
    if isinstance(c, str):
        if c == SINGLE:
            return SINGLE
        try:
            c = float(c)
        except ValueError:
            raise ExperimentError(f"component grid entries are fractions in (0, 1] or {SINGLE!r}, got {c!r}") from None
    c = float(c)
    if not 0 < c <= 1:
        raise ExperimentError(f"component fraction must lie in (0, 1], got {c}")
    return c


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a train or cv run needs.

    ``targets`` is either the number of trailing target columns or a list
    of target column names. ``component_grid`` entries are fractions of
    ``min(N, |C|)`` or ``"single"`` for exactly one component. ``metrics``
    defaults to every metric of the task kind.
    """

    data: str | None = None
    targets: int | tuple[str, ...] = 1
    task: TaskKind = TaskKind.REGRESSION
    name: str | None = None
    impute: bool = False
    variants: tuple[str, ...] = VARIANTS
    seed: int = 0
    cv_folds: int = 10
    inner_folds: int = 5
    folds_dir: str | None = None
    tree_grid: tuple[int, ...] = DEFAULT_TREE_GRID
    component_grid: tuple[str | float, ...] = DEFAULT_COMPONENT_GRID
    max_layers: int = 10
    filter_p: float = 90.0
    epsilon: float = 1.0
    subsample_fraction: float = 0.5
    os_folds: int = 5
    stopping_metric: str | None = None
    stopping_rule: StoppingRule = StoppingRule.BEST
    patience: int = 3
    metrics: tuple[str, ...] | None = None
    workers: int = 1

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("task", TaskKind(self.task))
        set_("stopping_rule", StoppingRule(self.stopping_rule))
        set_("targets", self.targets if isinstance(self.targets, int) else tuple(self.targets))
        set_("variants", tuple(self.variants))
        set_("tree_grid", tuple(int(t) for t in self.tree_grid))
        set_("component_grid", tuple(_component(c) for c in self.component_grid))
        if self.metrics is not None:
            set_("metrics", tuple(self.metrics))
        if not self.variants:
            raise ExperimentError("at least one variant is required")
        for v in self.variants:
            if v not in VARIANTS:
                raise ExperimentError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        if not self.tree_grid or not self.component_grid:
            raise ExperimentError("hyperparameter grids must be nonempty")
        if min(self.tree_grid) < 1:
            raise ExperimentError("tree counts must be >= 1")
        if self.cv_folds < 2 or self.inner_folds < 2:
            raise ExperimentError("cv_folds and inner_folds must be >= 2")
        if self.max_layers < 1:
            raise ExperimentError("max_layers must be >= 1")
        if not 0 <= self.filter_p <= 100:
            raise ExperimentError("filter_p is a percentage in [0, 100]")
        if self.epsilon <= 0:
            raise ExperimentError("epsilon must be > 0")
        if not 0 < self.subsample_fraction <= 1:
            raise ExperimentError("subsample_fraction must lie in (0, 1]")
        if self.workers < 1:
            raise ExperimentError("workers must be >= 1")
        if isinstance(self.targets, int) and self.targets < 1:
            raise ExperimentError("targets must name at least one column")
        for m in self.metric_names:
            get_metric(m)
        get_metric(self.objective)

    @property
    def metric_names(self) -> tuple[str, ...]:
        return self.metrics if self.metrics is not None else default_metrics(self.task)

    @property
    def objective(self) -> str:
        return self.stopping_metric or default_stopping_metric(self.task)

    @classmethod
    def defaults(cls, env: Mapping[str, str] | None = None) -> dict:
        env = os.environ if env is None else env
        return {"seed": _env_int(env, ENV_SEED, 0), "workers": _env_int(env, ENV_WORKERS, 1)}

    @classmethod
    def from_dict(cls, d: Mapping, env: Mapping[str, str] | None = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ExperimentError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**cls.defaults(env), **{k: v for k, v in d.items() if v is not None or k in ("metrics",)}}
        try:
            return cls(**merged)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ExperimentError):
                raise
            raise ExperimentError(f"invalid config: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path, env: Mapping[str, str] | None = None, **overrides) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ExperimentError(f"{path}: not valid JSON ({exc})") from None
        except OSError as exc:
            raise ExperimentError(f"cannot read config {path}: {exc.strerror}") from None
        if not isinstance(d, dict):
            raise ExperimentError(f"{path}: top level must be an object")
        return cls.from_dict({**d, **overrides}, env)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        d["stopping_rule"] = self.stopping_rule.value
        for k in ("targets", "variants", "tree_grid", "component_grid", "metrics"):
            if isinstance(d[k], tuple):
                d[k] = list(d[k])
        return d

    @property
    def dataset_name(self) -> str:
        return self.name or (Path(self.data).stem if self.data else "dataset")


# --------------------------------------------------------------------------
# grid


@dataclass(frozen=True, order=True)
class GridPoint:
    n_trees: int
    components: str | float | None = None

    @property
    def size_key(self) -> tuple[int, float]:
        # tie order: fewer trees, then fewer components ("single" is smallest)
        c = self.components
        return self.n_trees, (-1.0 if c == SINGLE else (0.0 if c is None else float(c)))

    def label(self) -> str:
        return f"{self.n_trees}" if self.components is None else f"{self.n_trees}/{self.components}"


def grid_points(exp: ExperimentConfig, variant: str) -> list[GridPoint]:
    if variant != BASELINE and Variant(variant).uses_embeddings:
        return [GridPoint(t, c) for t in exp.tree_grid for c in exp.component_grid]
    return [GridPoint(t) for t in exp.tree_grid]


def cascade_config(exp: ExperimentConfig, variant: str, point: GridPoint, seed: int | None = None) -> CascadeConfig:
    seed = exp.seed if seed is None else seed
    common = dict(
        n_trees=point.n_trees,
        os_folds=exp.os_folds,
        stopping_metric=exp.stopping_metric,
        stopping_rule=exp.stopping_rule,
        patience=exp.patience,
        seed=seed,
    )
    if variant == BASELINE:
        return CascadeConfig.baseline(**common)
    c = point.components
    emb = EmbeddingConfig(
        filter_p=exp.filter_p,
        epsilon=exp.epsilon,
        n_components=1 if c == SINGLE else None,
        component_fraction=0.05 if c is None else (None if c == SINGLE else float(c)),
        subsample_fraction=exp.subsample_fraction,
    )
    return CascadeConfig(variant=Variant(variant), embedding=emb, max_layers=exp.max_layers, **common)


def _run_tasks(fn, tasks: Sequence[tuple], workers: int) -> list:
    # results come back in task order whatever the completion order
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    return Parallel(n_jobs=min(workers, len(tasks)))(delayed(fn)(*t) for t in tasks)


def _inner_score(exp: ExperimentConfig, variant: str, point: GridPoint, data: Dataset, split: FoldSplit) -> float:
    train, val = data.take(split.train_indices), data.take(split.test_indices)
    model = fit_cascade(train, cascade_config(exp, variant, point))
    pred = predict_cascade(model, val.features.values)
    return get_metric(exp.objective)(val.targets.values, pred, TrainStats.from_targets(train.targets.values))


@dataclass(frozen=True)
class GridResult:
    best: GridPoint
    scores: tuple[tuple[GridPoint, float], ...]
    searched: bool


def select_point(scores: Sequence[tuple[GridPoint, float]], lower_is_better: bool = True) -> GridPoint:
    """Best mean score; exact ties go to fewer trees, then fewer components."""
    sign = 1.0 if lower_is_better else -1.0
    return min(scores, key=lambda ps: (sign * ps[1], ps[0].size_key))[0]


def grid_search(exp: ExperimentConfig, variant: str, data: Dataset, seed: int, workers: int = 1) -> GridResult:
    points = grid_points(exp, variant)
    if len(points) == 1:
        return GridResult(points[0], (), False)
    if data.n_rows < exp.inner_folds:
        raise ExperimentError(f"{data.n_rows} rows cannot be split into {exp.inner_folds} inner folds")
    splits = kfold_split(data.n_rows, exp.inner_folds, derive_seed(seed, ROLE_GRID))
    tasks = [(exp, variant, p, data, s) for p in points for s in splits]
    flat = _run_tasks(_inner_score, tasks, workers)
    k = len(splits)
    scores = tuple((p, float(np.mean(flat[i * k:(i + 1) * k]))) for i, p in enumerate(points))
    for p, s in scores:
        log.info("grid %s %s: %s=%.6f", variant, p.label(), exp.objective, s)
    best = select_point(scores, get_metric(exp.objective).lower_is_better)
    return GridResult(best, scores, True)


def tune_and_fit(exp: ExperimentConfig, variant: str, data: Dataset, seed: int | None = None, workers: int = 1):
    seed = exp.seed if seed is None else seed
    result = grid_search(exp, variant, data, seed, workers)
    model = fit_cascade(data, cascade_config(exp, variant, result.best, seed))
    return model, result


# --------------------------------------------------------------------------
# data


def load_table(exp: ExperimentConfig) -> RawTable:
    if not exp.data:
        raise ExperimentError("no dataset given (set 'data' in the config or pass --data)")
    return read_table(exp.data)


def build_dataset(exp: ExperimentConfig, table: RawTable, impute_rows=None) -> Dataset:
    return table_to_dataset(table, exp.targets, exp.task, impute=exp.impute, impute_rows=impute_rows,
                            name=exp.dataset_name)


# --------------------------------------------------------------------------
# results


RESULT_COLUMNS = ("dataset", "fold", "variant", "metric", "value", "layers", "wall_time", "n_trees", "components")
SUMMARY_COLUMNS = ("dataset", "variant", "metric", "mean", "std", "mean_layers", "folds", "cell")


@dataclass(frozen=True)
class ResultRow:
    dataset: str
    fold: int
    variant: str
    metric: str
    value: float
    layers: int
    wall_time: float
    n_trees: int
    components: str | float | None


def format_cell(value: float, layers: float, digits: int = 3) -> str:
    """Table cell: mean value with the mean layer count as superscript, e.g. ``0.101^6.8``."""
    return f"{value:.{digits}f}^{layers:.1f}"


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in self.rows:
            w.writerow([r.dataset, r.fold, r.variant, r.metric, repr(float(r.value)), r.layers,
                        f"{r.wall_time:.3f}", r.n_trees, "" if r.components is None else r.components])
        return buf.getvalue()

    def summary(self) -> list[dict]:
        groups: dict[tuple, list[ResultRow]] = {}
        for r in self.rows:
            groups.setdefault((r.dataset, r.variant, r.metric), []).append(r)
        out = []
        for (ds, v, m), rows in groups.items():
            vals = np.array([r.value for r in rows])
            layers = float(np.mean([r.layers for r in rows]))
            mean = float(np.mean(vals))
            out.append({"dataset": ds, "variant": v, "metric": m, "mean": mean,
                        "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                        "mean_layers": layers, "folds": len(rows), "cell": format_cell(mean, layers)})
        return out

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in self.summary():
            w.writerow([s["dataset"], s["variant"], s["metric"], repr(s["mean"]), repr(s["std"]),
                        f"{s['mean_layers']:.2f}", s["folds"], s["cell"]])
        return buf.getvalue()

    def mean(self, variant: str, metric: str) -> float:
        vals = [r.value for r in self.rows if r.variant == variant and r.metric == metric]
        if not vals:
            raise KeyError(f"no rows for {variant}/{metric}")
        return float(np.mean(vals))

    @classmethod
    def read_csv(cls, path: str | Path) -> "ResultsTable":
        rows = []
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for d in csv.DictReader(fh):
                comp = d["components"]
                rows.append(ResultRow(d["dataset"], int(d["fold"]), d["variant"], d["metric"], float(d["value"]),
                                      int(d["layers"]), float(d["wall_time"]), int(d["n_trees"]),
                                      None if comp == "" else (comp if comp == SINGLE else float(comp))))
        return cls(rows)


def summary_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".summary" + (p.suffix or ".csv"))


# --------------------------------------------------------------------------
# cross-validation


def outer_folds(exp: ExperimentConfig, n: int) -> list[FoldSplit]:
    if exp.folds_dir:
        return import_folds(exp.folds_dir, n)
    return kfold_split(n, exp.cv_folds, derive_seed(exp.seed, ROLE_FOLDS))


def _cv_fold(exp: ExperimentConfig, variant: str, table: RawTable, i: int, split: FoldSplit) -> list[ResultRow]:
    try:
        start = time.perf_counter()
        data = build_dataset(exp, table, impute_rows=split.train_indices)
        train, test = data.take(split.train_indices), data.take(split.test_indices)
        model, grid = tune_and_fit(exp, variant, train, derive_seed(exp.seed, ROLE_GRID, i))
        pred = predict_cascade(model, test.features.values)
        stats = TrainStats.from_targets(train.targets.values)
        values = {m: get_metric(m)(test.targets.values, pred, stats) for m in exp.metric_names}
        wall = time.perf_counter() - start
    except Exception as exc:  # noqa: BLE001
        raise FoldFailure(variant, i, exc) from exc
    log.info("%s fold %d: %s layers=%d (%.1fs)", variant, i, values, model.best_layer, wall)
    return [ResultRow(exp.dataset_name, i, variant, m, float(v), model.best_layer, wall,
                      grid.best.n_trees, grid.best.components) for m, v in values.items()]


def run_cv(exp: ExperimentConfig, table: RawTable | None = None) -> ResultsTable:
    """Outer k-fold loop: per fold tune on the training part, fit, and score the test part.

    Rows are ordered by (variant, fold, metric) whatever the completion order.
    """
    table = load_table(exp) if table is None else table
    build_dataset(exp, table)  # validate once up front
    folds = outer_folds(exp, table.values.shape[0])
    tasks = [(exp, v, table, i, s) for v in exp.variants for i, s in enumerate(folds)]
    chunks = _run_tasks(_cv_fold, tasks, exp.workers)
    return ResultsTable([r for chunk in chunks for r in chunk])


def with_overrides(exp: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(exp, **{k: v for k, v in kw.items() if v is not None})
