"""Multi-output decision trees and RF / ET ensembles in the predictive-clustering setting.

Split search is delegated to scikit-learn's CART and extra-tree splitters,
run on targets divided by their per-target standard deviation, so that the
squared-error criterion equals variance reduction summed over standardized
targets. Fitted trees are copied into plain node tables (pre-order node ids,
mean raw-target prototypes, training counts) that this module traverses on
its own, so a loaded forest predicts without any scikit-learn state.

Features are routed at single precision, exactly like the splitter sees them.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from sklearn.tree import DecisionTreeRegressor, ExtraTreeRegressor

from ._seeds import ROLE_TREE, derive_seed
from .dataset import FeatureMatrix, ShapeError, TargetMatrix, TaskKind


class ForestKind(str, Enum):
    RANDOM_FOREST = "rf"
    EXTRA_TREES = "et"


@dataclass(frozen=True)
class SplitParams:
    kind: ForestKind = ForestKind.RANDOM_FOREST
    min_samples_split: int = 2
    max_depth: int | None = None
    mtry: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ForestKind(self.kind))
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")


def default_mtry(n_features: int, task: TaskKind | str = TaskKind.REGRESSION) -> int:
    if TaskKind(task) is TaskKind.MULTILABEL:
        return max(1, math.ceil(math.sqrt(n_features)))
    return max(1, math.ceil(n_features / 3))


def _values(a) -> np.ndarray:
    if isinstance(a, (FeatureMatrix, TargetMatrix)):
        return a.values
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _task_of(y, task) -> TaskKind:
    if task is not None:
        return TaskKind(task)
    if isinstance(y, TargetMatrix):
        return y.kind
    return TaskKind.REGRESSION


def target_scale(y: np.ndarray) -> np.ndarray:
    """Per-target standard deviation, with 1 for constant targets."""
    s = np.asarray(y, dtype=np.float64).std(axis=0)
    return np.where(s > 0, s, 1.0)


def variance_reduction(parent, left, right, scale=None) -> float:
    """Drop in summed per-target variance achieved by splitting ``parent``.

    ``Var(P) - |L|/|P| Var(L) - |R|/|P| Var(R)``, where ``Var`` sums the
    population variances of the targets after dividing each by ``scale``
    (default: the parent's standard deviation, constant targets left as is).
    """
    parent, left, right = (_values(a) for a in (parent, left, right))
    if len(left) == 0 or len(right) == 0:
        raise ValueError("both children of a split must be non-empty")
    if len(left) + len(right) != len(parent):
        raise ValueError("children must partition the parent")
    s = target_scale(parent) if scale is None else np.asarray(scale, dtype=np.float64)

    def var(a):
        return float(np.sum((a / s).var(axis=0)))

    n = len(parent)
    return var(parent) - len(left) / n * var(left) - len(right) / n * var(right)


def routing_values(x: np.ndarray) -> np.ndarray:
    """Feature values as compared against thresholds (single precision)."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    split: tuple[int, float] | None
    children: tuple[int, int] | None
    prototype: np.ndarray
    train_count: int

    @property
    def is_leaf(self) -> bool:
        return self.split is None


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Node table of one tree; node 0 is the root, ids are in pre-order.

    ``feature`` is -1 and ``left``/``right`` are -1 at leaves.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prototype: np.ndarray
    train_count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def root(self) -> TreeNode:
        return self.node(0)

    def node(self, i: int) -> TreeNode:
        leaf = self.feature[i] < 0
        return TreeNode(
            node_id=int(i),
            split=None if leaf else (int(self.feature[i]), float(self.threshold[i])),
            children=None if leaf else (int(self.left[i]), int(self.right[i])),
            prototype=self.prototype[i],
            train_count=int(self.train_count[i]),
        )

    @property
    def nodes(self) -> list[TreeNode]:
        return [self.node(i) for i in range(self.n_nodes)]

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def apply(self, x) -> np.ndarray:
        return _apply(self.feature, self.threshold, self.left, self.right, np.zeros(1, np.int64), _values(x))[:, 0]

    def predict(self, x) -> np.ndarray:
        return self.prototype[self.apply(x)]


def _apply(feature, threshold, left, right, roots, x) -> np.ndarray:
    """Leaf reached by every row in every tree, shape ``(n_rows, n_trees)``."""
    xr = routing_values(x)
    n = xr.shape[0]
    node = np.tile(roots, (n, 1))
    r, c = np.nonzero(feature[node] >= 0)
    while r.size:
        nd = node[r, c]
        go_left = xr[r, feature[nd]] <= threshold[nd]
        nxt = np.where(go_left, left[nd], right[nd])
        node[r, c] = nxt
        keep = feature[nxt] >= 0
        r, c = r[keep], c[keep]
    return node


def _decision_path(feature, threshold, left, right, roots, x, n_nodes) -> sp.csr_matrix:
    """Binary (n_rows, n_nodes) matrix marking every node on each row's paths."""
    xr = routing_values(x)
    n = xr.shape[0]
    node = np.tile(roots, (n, 1))
    rows = [np.repeat(np.arange(n), len(roots))]
    cols = [node.ravel().copy()]
    r, c = np.nonzero(feature[node] >= 0)
    while r.size:
        nd = node[r, c]
        go_left = xr[r, feature[nd]] <= threshold[nd]
        nxt = np.where(go_left, left[nd], right[nd])
        node[r, c] = nxt
        rows.append(r)
        cols.append(nxt)
        keep = feature[nxt] >= 0
        r, c = r[keep], c[keep]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    m = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n_nodes))
    m.sort_indices()
    return m


def _check_preorder(left: np.ndarray, right: np.ndarray) -> None:
    inner = np.flatnonzero(left >= 0)
    if not (np.all(left[inner] == inner + 1) and np.all(right[inner] > left[inner])):
        raise RuntimeError("splitter returned nodes that are not in pre-order")


def _grow(x: np.ndarray, y: np.ndarray, scale: np.ndarray, params: SplitParams, mtry: int, seed: int) -> DecisionTree:
    cls = DecisionTreeRegressor if params.kind is ForestKind.RANDOM_FOREST else ExtraTreeRegressor
    est = cls(
        criterion="squared_error",
        max_features=min(mtry, x.shape[1]),
        min_samples_split=params.min_samples_split,
        max_depth=params.max_depth,
        random_state=seed % (2**32),
    )
    est.fit(x, y / scale)
    t = est.tree_
    left = t.children_left.astype(np.int32)
    right = t.children_right.astype(np.int32)
    _check_preorder(left, right)
    leaf = left < 0
    feature = np.where(leaf, -1, t.feature).astype(np.int32)
    threshold = np.where(leaf, 0.0, t.threshold).astype(np.float64)
    path = _decision_path(feature, threshold, left, right, np.zeros(1, np.int64), x, feature.size)
    counts = np.asarray(path.sum(axis=0)).ravel().astype(np.int64)
    if np.any(counts == 0):
        raise RuntimeError("a node received no training rows when re-routed")
    prototype = np.asarray(path.T @ y) / counts[:, None]
    for a in (feature, threshold, left, right, prototype, counts):
        a.setflags(write=False)
    return DecisionTree(feature, threshold, left, right, prototype, counts)


def fit_tree(X, Y, params: SplitParams, rng: np.random.Generator, task=None) -> DecisionTree:
    """Grow one tree on all given rows (no resampling)."""
    x, y = _values(X), _values(Y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows vs {y.shape[0]} target rows")
    mtry = params.mtry or default_mtry(x.shape[1], _task_of(Y, task))
    return _grow(x, y, target_scale(y), params, mtry, int(rng.integers(0, 2**31 - 1)))


@dataclass(frozen=True, eq=False)
class Forest:
    """Trees stored back to back: tree ``t`` owns global node ids
    ``tree_offsets[t]:tree_offsets[t+1]``; child ids are global.
    """

    kind: ForestKind
    n_features: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prototype: np.ndarray
    train_count: np.ndarray
    tree_offsets: np.ndarray
    mtry: int
    seed: int
    min_samples_split: int = 2
    max_depth: int | None = None

    @classmethod
    def from_trees(cls, trees: Sequence[DecisionTree], kind, n_features, mtry, seed, min_samples_split=2, max_depth=None):
        sizes = np.array([t.n_nodes for t in trees], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

        def shift(a, off):
            return np.where(a >= 0, a + off, -1)

        arrays = dict(
            feature=np.concatenate([t.feature for t in trees]).astype(np.int32),
            threshold=np.concatenate([t.threshold for t in trees]),
            left=np.concatenate([shift(t.left, o) for t, o in zip(trees, offsets)]).astype(np.int32),
            right=np.concatenate([shift(t.right, o) for t, o in zip(trees, offsets)]).astype(np.int32),
            prototype=np.concatenate([t.prototype for t in trees]),
            train_count=np.concatenate([t.train_count for t in trees]),
            tree_offsets=offsets,
        )
        for a in arrays.values():
            a.setflags(write=False)
        return cls(ForestKind(kind), int(n_features), mtry=int(mtry), seed=int(seed),
                   min_samples_split=int(min_samples_split), max_depth=max_depth, **arrays)

    @property
    def n_trees(self) -> int:
        return self.tree_offsets.shape[0] - 1

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.prototype.shape[1]

    @property
    def roots(self) -> np.ndarray:
        return self.tree_offsets[:-1]

    @property
    def trees(self) -> list[DecisionTree]:
        out = []
        for t in range(self.n_trees):
            a, b = self.tree_offsets[t], self.tree_offsets[t + 1]
            out.append(
                DecisionTree(
                    self.feature[a:b],
                    self.threshold[a:b],
                    np.where(self.left[a:b] >= 0, self.left[a:b] - a, -1),
                    np.where(self.right[a:b] >= 0, self.right[a:b] - a, -1),
                    self.prototype[a:b],
                    self.train_count[a:b],
                )
            )
        return out

    def tree_of(self, node_ids) -> np.ndarray:
        return np.searchsorted(self.tree_offsets, node_ids, side="right") - 1

    def _check(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"forest expects {self.n_features} features, got {x.shape[-1] if x.ndim else 0}")
        return x

    def apply(self, X) -> np.ndarray:
        x = self._check(_values(X))
        return _apply(self.feature, self.threshold, self.left, self.right, self.roots, x)

    def decision_path(self, X) -> sp.csr_matrix:
        x = self._check(_values(X))
        return _decision_path(self.feature, self.threshold, self.left, self.right, self.roots, x, self.n_nodes)

    def predict(self, X) -> np.ndarray:
        return self.prototype[self.apply(X)].mean(axis=1)

    def structure_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.feature, self.threshold, self.left, self.right, self.tree_offsets):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def fit_forest(X, Y, params: SplitParams, n_trees: int, seed: int, task=None, n_jobs: int | None = 1) -> Forest:
    """Train ``n_trees`` trees with independent per-tree random streams.

    Random forests draw a size-N bootstrap sample per tree; extra-trees use
    every row. Targets are standardized with the statistics of ``Y`` as a
    whole.
    """
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    x, y = _values(X), _values(Y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows vs {y.shape[0]} target rows")
    mtry = min(params.mtry or default_mtry(x.shape[1], _task_of(Y, task)), x.shape[1])
    scale = target_scale(y)
    n = x.shape[0]
    bootstrap = params.kind is ForestKind.RANDOM_FOREST

    def one(t):
        rng = np.random.default_rng(derive_seed(seed, ROLE_TREE, t))
        if bootstrap:
            rows = rng.integers(0, n, n)
            xt, yt = x[rows], y[rows]
        else:
            xt, yt = x, y
        return _grow(xt, yt, scale, params, mtry, int(rng.integers(0, 2**31 - 1)))

    if n_jobs in (None, 1) or n_trees == 1:
        trees = [one(t) for t in range(n_trees)]
    else:
        trees = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(t) for t in range(n_trees))
    return Forest.from_trees(trees, params.kind, x.shape[1], mtry, seed, params.min_samples_split, params.max_depth)


def predict(forest: Forest, X) -> np.ndarray:
    return forest.predict(X)


def predict_pooled(forests: Sequence[Forest], inputs: Sequence) -> np.ndarray:
    """Mean over every tree of every forest, each forest fed its own input."""
    leaves = [f.prototype[f.apply(x)] for f, x in zip(forests, inputs)]
    return np.concatenate(leaves, axis=1).mean(axis=1)
