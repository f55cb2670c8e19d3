import json

import pytest
from conftest import make_regression

from dte.cascade import CascadeConfig, Variant, fit_cascade, predict_cascade
from dte.dataset import write_csv
from dte.experiment import (
    BASELINE,
    DEFAULT_COMPONENT_GRID,
    DEFAULT_TREE_GRID,
    VARIANTS,
    ExperimentConfig,
    ExperimentError,
    FoldFailure,
    GridPoint,
    ResultsTable,
    cascade_config,
    format_cell,
    grid_points,
    grid_search,
    run_cv,
    select_point,
    summary_path,
)

TOY = dict(tree_grid=(3,), component_grid=(0.2,), max_layers=2, os_folds=2, inner_folds=2, cv_folds=2)


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    write_csv(make_regression(n=20, d=3, m=2, seed=5), path)
    return path


def test_defaults_match_protocol():
    exp = ExperimentConfig.from_dict({}, env={})
    assert exp.tree_grid == DEFAULT_TREE_GRID and exp.component_grid == DEFAULT_COMPONENT_GRID
    assert exp.cv_folds == 10 and exp.max_layers == 10 and exp.filter_p == 90 and exp.epsilon == 1
    assert exp.subsample_fraction == 0.5 and exp.variants == VARIANTS
    assert exp.objective == "arrmse"
    assert ExperimentConfig(task="multilabel").objective == "ranking_error"
    assert ExperimentConfig(task="multilabel").metric_names == (
        "hamming_loss", "one_error", "ranking_error", "micro_average_precision", "micro_auc")


def test_env_sets_only_seed_and_workers(tmp_path):
    exp = ExperimentConfig.from_dict({}, env={"DTE_SEED": "7", "DTE_WORKERS": "3", "DTE_MAX_LAYERS": "2"})
    assert exp.seed == 7 and exp.workers == 3 and exp.max_layers == 10
    with pytest.raises(ExperimentError, match="DTE_SEED"):
        ExperimentConfig.from_dict({}, env={"DTE_SEED": "x"})
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 11, "max_layers": 4}))
    exp = ExperimentConfig.from_file(cfg, env={"DTE_SEED": "7"}, max_layers=2)
    assert exp.seed == 11 and exp.max_layers == 2


def test_config_validation(tmp_path):
    with pytest.raises(ExperimentError, match="unknown config keys: bogus"):
        ExperimentConfig.from_dict({"bogus": 1}, env={})
    with pytest.raises(ExperimentError, match="variant"):
        ExperimentConfig(variants=("XX",))
    with pytest.raises(ExperimentError):
        ExperimentConfig(cv_folds=1)
    with pytest.raises(ValueError):
        ExperimentConfig(metrics=("nope",))
    bad = tmp_path / "b.json"
    bad.write_text("{")
    with pytest.raises(ExperimentError, match="JSON"):
        ExperimentConfig.from_file(bad, env={})
    exp = ExperimentConfig(seed=3, component_grid=("single", 0.4))
    assert ExperimentConfig.from_dict(exp.to_dict(), env={}) == exp


def test_grid_points_and_cascade_config():
    exp = ExperimentConfig(tree_grid=(10, 20), component_grid=("single", 0.05))
    assert grid_points(exp, BASELINE) == [GridPoint(10), GridPoint(20)]
    assert grid_points(exp, "X_OS") == [GridPoint(10), GridPoint(20)]
    assert len(grid_points(exp, "X_TE")) == 4
    base = cascade_config(exp, BASELINE, GridPoint(10))
    assert base == CascadeConfig.baseline(n_trees=10, seed=0)
    one = cascade_config(exp, "TE", GridPoint(20, "single"))
    assert one.embedding.n_components == 1 and one.variant is Variant.TE and one.n_trees == 20
    frac = cascade_config(exp, "X_OS_TE", GridPoint(20, 0.05), seed=4)
    assert frac.embedding.component_fraction == 0.05 and frac.seed == 4


def test_grid_tie_break():
    pts = [(GridPoint(20, 0.05), 0.3), (GridPoint(10, 0.4), 0.3), (GridPoint(10, "single"), 0.3),
           (GridPoint(50, 0.05), 0.4)]
    assert select_point(pts) == GridPoint(10, "single")
    assert select_point(pts, lower_is_better=False) == GridPoint(50, 0.05)
    assert select_point([(GridPoint(100), 0.2), (GridPoint(50), 0.2)]) == GridPoint(50)


def test_grid_search_size_one_skips_and_is_reproducible():
    ds = make_regression(n=30, d=3)
    exp = ExperimentConfig(**TOY)
    one = grid_search(exp, "X_TE", ds, seed=1)
    assert not one.searched and one.best == GridPoint(3, 0.2)
    exp2 = ExperimentConfig(**{**TOY, "tree_grid": (2, 3)})
    a, b = grid_search(exp2, "X_OS", ds, seed=1), grid_search(exp2, "X_OS", ds, seed=1)
    assert a.searched and a == b and len(a.scores) == 2


def test_cv_toy_shape_and_summary(toy_csv, tmp_path):
    exp = ExperimentConfig(data=str(toy_csv), targets=2, variants=(BASELINE, "X_OS_TE"), **TOY)
    table = run_cv(exp)
    for v in exp.variants:
        for m in exp.metric_names:
            assert sum(r.variant == v and r.metric == m for r in table.rows) == 2
    assert [r.variant for r in table.rows[:2]] == [BASELINE, BASELINE]
    assert all(r.layers == 1 for r in table.rows if r.variant == BASELINE)
    assert all(1 <= r.layers <= 2 for r in table.rows)
    summary = table.summary()
    assert len(summary) == 2 and summary[0]["folds"] == 2
    out = tmp_path / "r.csv"
    out.write_text(table.to_csv())
    back = ResultsTable.read_csv(out)
    assert [(r.variant, r.fold, r.metric, r.value, r.components) for r in back.rows] == [
        (r.variant, r.fold, r.metric, r.value, r.components) for r in table.rows]
    # same seed, same table (wall time aside)
    again = run_cv(exp)
    assert [r.value for r in again.rows] == [r.value for r in table.rows]


def test_baseline_reproduces_single_layer_fit(toy_csv):
    exp = ExperimentConfig(data=str(toy_csv), targets=2, variants=(BASELINE,), **TOY)
    from dte._seeds import ROLE_GRID, derive_seed
    from dte.experiment import build_dataset, load_table, outer_folds
    from dte.metrics import TrainStats, arrmse

    table = run_cv(exp)
    data = build_dataset(exp, load_table(exp))
    split = outer_folds(exp, data.n_rows)[0]
    train, test = data.take(split.train_indices), data.take(split.test_indices)
    model = fit_cascade(train, CascadeConfig.baseline(n_trees=3, seed=derive_seed(exp.seed, ROLE_GRID, 0)))
    value = arrmse(test.targets.values, predict_cascade(model, test.features.values),
                   TrainStats.from_targets(train.targets.values))
    assert table.rows[0].fold == 0 and table.rows[0].metric == "arrmse"
    assert table.rows[0].value == value


def test_fold_failure_names_fold(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,y\n" + "".join(f"{i},{i % 3}\n" for i in range(6)))
    exp = ExperimentConfig(data=str(path), variants=("X_OS",), **{**TOY, "os_folds": 5})
    with pytest.raises(FoldFailure, match="fold 0"):
        run_cv(exp)


def test_result_formatting(tmp_path):
    assert format_cell(0.10123, 6.8) == "0.101^6.8"
    assert summary_path(tmp_path / "res.csv").name == "res.summary.csv"
