"""Evaluation measures for multi-target regression and multi-label classification.

Lower is better for ``arrmse``, ``hamming_loss``, ``one_error`` and
``ranking_error``; higher is better for ``micro_average_precision`` and
``micro_auc``.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise MetricError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def _pair(y_true, y_score) -> tuple[np.ndarray, np.ndarray]:
    y_true = _as_2d(y_true, "y_true")
    y_score = _as_2d(y_score, "scores")
    if y_true.shape != y_score.shape:
        raise MetricError(f"shape mismatch: {y_true.shape} vs {y_score.shape}")
    return y_true, y_score


@dataclass(frozen=True)
class TrainStats:
    """Per-target training means used as the reference predictor of aRRMSE."""

    means: np.ndarray

    @classmethod
    def from_targets(cls, y_train) -> "TrainStats":
        return cls(_as_2d(y_train, "y_train").mean(axis=0))


def arrmse(y_true, y_pred, train_stats: TrainStats) -> float:
    """Average over targets of RMSE relative to the training-mean predictor.

    Targets whose reference error is zero are excluded with a warning.
    """
    y_true, y_pred = _pair(y_true, y_pred)
    means = np.asarray(train_stats.means, dtype=np.float64).ravel()
    if means.shape[0] != y_true.shape[1]:
        raise MetricError(f"train stats cover {means.shape[0]} targets, data has {y_true.shape[1]}")
    num = ((y_true - y_pred) ** 2).sum(axis=0)
    den = ((y_true - means) ** 2).sum(axis=0)
    ok = den > 0
    if not ok.all():
        if not ok.any():
            raise MetricError("every target has zero reference error; aRRMSE undefined")
        warnings.warn(
            f"aRRMSE: excluding {int((~ok).sum())} target(s) with zero reference error",
            RuntimeWarning,
            stacklevel=2,
        )
    return float(np.mean(np.sqrt(num[ok] / den[ok])))


def hamming_loss(y_true, scores, threshold: float = 0.5) -> float:
    """Fraction of instance-label pairs whose thresholded prediction is wrong."""
    y_true, scores = _pair(y_true, scores)
    z = scores >= threshold
    return float(np.mean(z != (y_true > 0.5)))


def one_error(y_true, scores) -> float:
    """Fraction of instances whose top-scored label is not relevant.

    Ties for the top score go to the lowest label index. Instances without
    relevant labels always count as errors.
    """
    y_true, scores = _pair(y_true, scores)
    top = np.argmax(scores, axis=1)
    hit = y_true[np.arange(y_true.shape[0]), top] > 0.5
    return float(np.mean(~hit))


def ranking_error(y_true, scores) -> float:
    """Mean fraction of (relevant, irrelevant) label pairs ordered wrongly.

    A pair scored equal counts one half. Instances with no relevant or no
    irrelevant label are skipped.
    """
    y_true, scores = _pair(y_true, scores)
    pos = y_true > 0.5
    losses = []
    for s, p in zip(scores, pos):
        n_pos = int(p.sum())
        n_neg = p.size - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        sp = s[p][:, None]
        sn = s[~p][None, :]
        bad = np.count_nonzero(sp < sn) + 0.5 * np.count_nonzero(sp == sn)
        losses.append(bad / (n_pos * n_neg))
    if not losses:
        raise MetricError("ranking error undefined: every instance has an empty or full label set")
    return float(np.mean(losses))


def micro_average_precision(y_true, scores, threshold: float = 0.5) -> float:
    """Pooled TP / (TP + FP) over all instance-label pairs after thresholding."""
    y_true, scores = _pair(y_true, scores)
    z = scores >= threshold
    t = y_true > 0.5
    tp = np.count_nonzero(z & t)
    fp = np.count_nonzero(z & ~t)
    if tp + fp == 0:
        warnings.warn("micro precision: no positive predictions, returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return tp / (tp + fp)


def micro_auc(y_true, scores) -> float:
    """ROC AUC of all instance-label pairs pooled into one binary problem.

    Computed from the Mann-Whitney rank statistic with midranks for ties.
    """
    y_true, scores = _pair(y_true, scores)
    t = (y_true > 0.5).ravel()
    s = scores.ravel()
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("micro AUC undefined: pooled labels contain a single class")
    ranks = rankdata(s, method="average")
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class MetricSpec:
    name: str
    func: Callable
    lower_is_better: bool
    needs_train_stats: bool = False

    def __call__(self, y_true, y_pred, train_stats: TrainStats | None = None) -> float:
        if self.needs_train_stats:
            if train_stats is None:
                raise MetricError(f"{self.name} needs training statistics")
            return self.func(y_true, y_pred, train_stats)
        return self.func(y_true, y_pred)

    def better(self, a: float, b: float) -> bool:
        """True when ``a`` is strictly better than ``b``."""
        return a < b if self.lower_is_better else a > b


METRICS: dict[str, MetricSpec] = {
    "arrmse": MetricSpec("arrmse", arrmse, True, needs_train_stats=True),
    "hamming_loss": MetricSpec("hamming_loss", hamming_loss, True),
    "one_error": MetricSpec("one_error", one_error, True),
    "ranking_error": MetricSpec("ranking_error", ranking_error, True),
    "micro_average_precision": MetricSpec("micro_average_precision", micro_average_precision, False),
    "micro_auc": MetricSpec("micro_auc", micro_auc, False),
}

REGRESSION_METRICS = ("arrmse",)
MULTILABEL_METRICS = (
    "hamming_loss",
    "one_error",
    "ranking_error",
    "micro_average_precision",
    "micro_auc",
)


def get_metric(name: str) -> MetricSpec:
    try:
        return METRICS[name]
    except KeyError:
        raise MetricError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None


def default_metrics(kind) -> tuple[str, ...]:
    return REGRESSION_METRICS if str(getattr(kind, "value", kind)) == "regression" else MULTILABEL_METRICS


def default_stopping_metric(kind) -> str:
    return "arrmse" if str(getattr(kind, "value", kind)) == "regression" else "ranking_error"


@dataclass
class MetricReport:
    entries: dict[str, float]
    n_instances: int
    n_targets: int
    per_target: dict[str, list[float]] | None = field(default=None)

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = list(self.entries)
        writer.writerow(names + ["n_instances", "n_targets"])
        writer.writerow([repr(self.entries[k]) for k in names] + [self.n_instances, self.n_targets])
        return buf.getvalue()


def evaluate(
    y_true,
    y_pred,
    metrics: Sequence[str],
    train_stats: TrainStats | None = None,
) -> MetricReport:
    y_true, y_pred = _pair(y_true, y_pred)
    entries = {name: get_metric(name)(y_true, y_pred, train_stats) for name in metrics}
    per_target = None
    if "arrmse" in entries and train_stats is not None:
        per_target = {
            "rrmse": [
                arrmse(y_true[:, [t]], y_pred[:, [t]], TrainStats(train_stats.means[[t]]))
                if np.any(y_true[:, t] != train_stats.means[t])
                else float("nan")
                for t in range(y_true.shape[1])
            ]
        }
    return MetricReport(entries, y_true.shape[0], y_true.shape[1], per_target)
