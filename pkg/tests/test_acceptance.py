"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
without ``-s``). Criteria 5 to 7 need the benchmark CSV files; they are looked
up in ``$DTE_DATA_DIR`` and then ``tests/data``. Each file holds the features
followed by the target columns, with a header row. A directory
``<name>_folds/`` next to a file supplies fixed outer folds.
"""
import os
import time
import warnings
from pathlib import Path

import numpy as np
import oracles
import pytest
from audits import audit_fit
from conftest import make_multilabel, make_regression
from test_embeddings import HAND_X, _leaf_depths, hand_forest

from dte import persist
from dte.cascade import CascadeConfig, Variant, fit_cascade, predict_cascade, truncate
from dte.embeddings import EmbeddingConfig, build_path_matrix, extractor_from_forest
from dte.experiment import BASELINE, DESK_COMPONENT_GRID, DESK_TREE_GRID, ExperimentConfig, run_cv
from dte.metrics import (
    TrainStats,
    arrmse,
    hamming_loss,
    micro_auc,
    micro_average_precision,
    one_error,
    ranking_error,
)
from dte.trees import ForestKind, SplitParams, fit_forest

# name -> (trailing target columns, task)
BENCHMARKS = {
    "enb": (2, "regression"),
    "slump": (3, "regression"),
    "edm": (2, "regression"),
    "jura": (3, "regression"),
    "emotions": (6, "multilabel"),
}


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail
    return emit


def data_file(name):
    for root in (os.environ.get("DTE_DATA_DIR"), Path(__file__).parent / "data"):
        if root and (Path(root) / f"{name}.csv").is_file():
            return Path(root) / f"{name}.csv"
    return None


def desk_cv(name, variants, seed=0):
    path = data_file(name)
    targets, task = BENCHMARKS[name]
    folds = path.with_name(f"{name}_folds")
    exp = ExperimentConfig(
        data=str(path), targets=targets, task=task, name=name, impute=True, variants=tuple(variants), seed=seed,
        tree_grid=DESK_TREE_GRID, component_grid=DESK_COMPONENT_GRID,
        folds_dir=str(folds) if folds.is_dir() else None,
        workers=int(os.environ.get("DTE_WORKERS", "1")),
    )
    start = time.perf_counter()
    table = run_cv(exp)
    return table, (time.perf_counter() - start) / 60


def require_data(report, number, names):
    missing = [n for n in names if data_file(n) is None]
    if missing:
        report(number, False, f"benchmark data not found: {', '.join(n + '.csv' for n in missing)} "
                              "(set DTE_DATA_DIR); criterion cannot be evaluated")


# --------------------------------------------------------------------------


def test_criterion_1_metric_oracles(report):
    rng = np.random.default_rng(20240501)
    start = time.perf_counter()
    worst = 0.0
    done = 0
    while done < 200:
        n, m = int(rng.integers(2, 13)), int(rng.integers(2, 7))
        y = (rng.random((n, m)) < 0.4).astype(float)
        pos = y.sum(axis=1)
        if not (0 < y.sum() < y.size) or not np.any((pos > 0) & (pos < m)):
            continue
        grid = int(rng.choice([4, 10, 1000]))
        s = np.round(rng.random((n, m)) * grid) / grid
        yl, sl = y.tolist(), s.tolist()
        yt, yp, ytr = rng.normal(size=(n, m)), rng.normal(size=(n, m)), rng.normal(size=(n + 3, m))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pairs = [
                (arrmse(yt, yp, TrainStats.from_targets(ytr)), oracles.arrmse(yt.tolist(), yp.tolist(), ytr.tolist())),
                (hamming_loss(y, s), oracles.hamming(yl, sl)),
                (one_error(y, s), oracles.one_error(yl, sl)),
                (ranking_error(y, s), oracles.ranking_error(yl, sl)),
                (micro_average_precision(y, s), oracles.micro_precision(yl, sl)),
                (micro_auc(y, s), oracles.pairwise_auc(yl, sl)),
            ]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
        done += 1
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-12 and elapsed < 5.0,
           f"200 instances x 6 metrics, max |diff| = {worst:.2e} (tol 1e-12), {elapsed:.2f}s (limit 5s)")


def test_criterion_2_normalization_anchors(report):
    rng = np.random.default_rng(2)
    ytr = rng.normal(size=(30, 3))
    yte = rng.normal(size=(12, 3))
    stats = TrainStats.from_targets(ytr)
    mean_pred = np.tile(ytr.mean(axis=0), (12, 1))
    labels = (rng.random((12, 5)) < 0.5).astype(float)
    labels[0] = [1, 0, 1, 0, 0]
    checks = {
        "arrmse(train mean) = 1": arrmse(yte, mean_pred, stats) == 1.0,
        "arrmse(perfect) = 0": arrmse(yte, yte, stats) == 0.0,
        "hamming(perfect) = 0": hamming_loss(labels, labels) == 0.0,
        "one_error(perfect) = 0": one_error(labels[labels.sum(axis=1) > 0], labels[labels.sum(axis=1) > 0]) == 0.0,
        "ranking_error(perfect) = 0": ranking_error(labels, labels) == 0.0,
        "micro_auc(constant) = 0.5": micro_auc(labels, np.full_like(labels, 0.3)) == 0.5,
    }
    bad = [k for k, ok in checks.items() if not ok]
    report(2, not bad, "all anchors exact" if not bad else f"violated: {', '.join(bad)}")


def test_criterion_3_embedding_oracle(report):
    import math

    ex = extractor_from_forest(hand_forest(), HAND_X, filter_p=90, epsilon=1.0, n_components=2)
    paths = [[1, 1, 0, 1, 1, 0, 0, 0], [1, 1, 0, 1, 0, 1, 1, 0], [1, 0, 1, 1, 0, 1, 1, 0], [1, 0, 1, 1, 0, 1, 0, 1]]
    kept = [j for j in range(8) if sum(r[j] for r in paths) * 100 <= 90 * 4]
    counts = [sum(r[j] for r in paths) for j in kept]
    weighted = np.array([[r[j] / (math.log(c) + 1.0) for j, c in zip(kept, counts)] for r in paths])
    centered = weighted - weighted.mean(axis=0)
    vals, vecs = np.linalg.eigh(centered.T @ centered / 4)
    axes = vecs[:, np.argsort(vals)[::-1][:2]].T
    axes *= np.sign(axes[np.arange(2), np.argmax(np.abs(axes), axis=1)])[:, None]
    manual = centered @ axes.T
    pipeline_err = float(np.max(np.abs(ex.transform(HAND_X) - manual)))
    same_kept = list(ex.kept_columns) == kept

    rng = np.random.default_rng(0)
    row_sum_ok = 0
    for trial in range(100):
        n, d = int(rng.integers(5, 30)), int(rng.integers(1, 5))
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, 2))
        kind = ForestKind.RANDOM_FOREST if trial % 2 else ForestKind.EXTRA_TREES
        f = fit_forest(x, y, SplitParams(kind), int(rng.integers(1, 4)), seed=trial)
        q = rng.normal(size=(7, d))
        sums = np.asarray(build_path_matrix(f, q).values.sum(axis=1)).ravel()
        expected = np.sum([np.array(_leaf_depths(t, q)) + 1 for t in f.trees], axis=0)
        row_sum_ok += int(np.array_equal(sums, expected))
    ok = same_kept and pipeline_err <= 1e-9 and row_sum_ok == 100
    report(3, ok, f"hand fixture max |diff| = {pipeline_err:.1e} (tol 1e-9), kept nodes match: {same_kept}; "
                  f"row-sum invariant on {row_sum_ok}/100 random forests")


def test_criterion_4_leakage_and_crossover(report):
    small = dict(n_trees=10, embedding=EmbeddingConfig(n_trees=10), os_folds=5, max_layers=3)
    problems = []
    for variant in Variant:
        _, p = audit_fit(make_regression(n=100), CascadeConfig(variant=variant, **small), rows=(0, 37, 99))
        problems += [f"{variant.value}: {x}" for x in p]
    _, p = audit_fit(make_multilabel(n=100), CascadeConfig(variant=Variant.X_OS_TE, **small), rows=(3, 64))
    problems += [f"multilabel X_OS_TE: {x}" for x in p]
    report(4, not problems, "4 variants x 3 layers on 100 rows (plus a multi-label run): OS leakage probe, "
                            "out-of-fold scoring probe and cross-over recipes clean"
           if not problems else "; ".join(problems[:5]))


def test_criterion_5_desk_scale_table4(report):
    require_data(report, 5, ["enb", "slump"])
    enb, t_enb = desk_cv("enb", [BASELINE, "X_OS"])
    slump, t_slump = desk_cv("slump", [BASELINE])
    base, xos, sl = enb.mean(BASELINE, "arrmse"), enb.mean("X_OS", "arrmse"), slump.mean(BASELINE, "arrmse")
    ok = abs(base - 0.132) <= 0.03 and xos <= 0.13 and abs(sl - 0.436) <= 0.08 and max(t_enb, t_slump) <= 30
    report(5, ok, f"enb RF+ET {base:.3f} (0.132 +- 0.03), enb X_OS {xos:.3f} (<= 0.13), slump RF+ET {sl:.3f} "
                  f"(0.436 +- 0.08); runtimes {t_enb:.1f} / {t_slump:.1f} min (limit 30)")


def test_criterion_6_ordering(report):
    names = ["edm", "enb", "jura", "slump"]
    require_data(report, 6, names)
    gaps = []
    for seed in (0, 1, 2):
        a = [desk_cv(n, [BASELINE, "X_OS_TE"], seed)[0] for n in names]
        gaps.append(np.mean([t.mean(BASELINE, "arrmse") - t.mean("X_OS_TE", "arrmse") for t in a]))
        if seed == 0 and gaps[0] >= 0.005:
            break
    gap = gaps[0] if len(gaps) == 1 else float(np.mean(gaps))
    report(6, gap >= 0.005, f"mean RF+ET - X_OS_TE aRRMSE gap {gap:.4f} over {len(gaps)} seed(s) (need >= 0.005)")


def test_criterion_7_mlc_property(report):
    require_data(report, 7, ["emotions"])
    table, minutes = desk_cv("emotions", [BASELINE, "X_TE"])
    h = table.mean("X_TE", "hamming_loss") - table.mean(BASELINE, "hamming_loss")
    r = table.mean("X_TE", "ranking_error") - table.mean(BASELINE, "ranking_error")
    report(7, h <= 0.01 and r <= 0.01 and minutes <= 20,
           f"X_TE - RF+ET: hamming {h:+.4f}, ranking {r:+.4f} (each <= 0.01); {minutes:.1f} min (limit 20)")


def test_criterion_8_stopping_hook(report):
    ds = make_regression(n=80)
    cfg = dict(n_trees=5, embedding=EmbeddingConfig(n_trees=5), os_folds=3)
    rng = np.random.default_rng(8)
    sequences = [[0.9, 0.7, 0.5], [0.6, 0.3, 0.45, 0.5], [0.4, 0.5, 0.6], list(rng.random(5))]
    q = np.random.default_rng(1).normal(size=(25, 6))
    failures = []
    for i, seq in enumerate(sequences):
        variant = list(Variant)[i % 4]
        c = CascadeConfig(variant=variant, max_layers=len(seq), **cfg)
        hook = lambda t, y, p, seq=seq: seq[t - 1]  # noqa: E731
        full = fit_cascade(ds, c, score_fn=hook, discard=False)
        kept = fit_cascade(ds, c, score_fn=hook)
        want = int(np.argmin(seq)) + 1
        if full.best_layer != want or kept.best_layer != want or len(kept.layers) != want:
            failures.append(f"{seq}: best {full.best_layer}, expected {want}")
        if not (np.array_equal(predict_cascade(full, q), predict_cascade(kept, q))
                and np.array_equal(predict_cascade(truncate(full), q), predict_cascade(full, q))):
            failures.append(f"{seq}: predictions changed after discarding")
    report(8, not failures, f"{len(sequences)} injected sequences, argbest selected and discarding is bitwise neutral"
           if not failures else "; ".join(failures))


def test_criterion_9_serialization(report, tmp_path):
    ds = make_regression(n=100)
    q = np.vstack([ds.features.values, np.random.default_rng(9).normal(size=(50, 6)) * 2])
    bad = []
    for variant in Variant:
        model = fit_cascade(ds, CascadeConfig(variant=variant, n_trees=8, embedding=EmbeddingConfig(n_trees=8),
                                              os_folds=3, max_layers=2))
        path = tmp_path / f"{variant.value}.dte"
        persist.save(model, path)
        if not np.array_equal(predict_cascade(persist.load(path), q), predict_cascade(model, q)):
            bad.append(variant.value)
    report(9, not bad, "save -> load -> predict bitwise identical for TE, X_TE, X_OS, X_OS_TE"
           if not bad else f"mismatch for {', '.join(bad)}")
