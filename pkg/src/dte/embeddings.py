"""Low-dimensional tree-embeddings.

An instance is encoded by the nodes its decision paths visit across a
forest (one binary column per node). Columns occupied by too many
instances are dropped, the rest are weighted by ``1 / (ln|c_j| + eps)``
where ``|c_j|`` is the node's instance count, and the result is projected
on its leading principal axes.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._seeds import ROLE_SUBSAMPLE, ROLE_TREE, derive_seed
from .dataset import FeatureMatrix, ShapeError, TaskKind, subsample_indices
from .trees import Forest, ForestKind, SplitParams, _values, fit_forest

log = logging.getLogger(__name__)


class EmptyEmbeddingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PathMatrix:
    values: sp.csr_matrix
    node_ids: np.ndarray
    counts: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def columns(self, keep) -> "PathMatrix":
        keep = np.asarray(keep)
        return PathMatrix(self.values[:, keep].tocsr(), self.node_ids[keep], self.counts[keep])


def build_path_matrix(forest: Forest, X) -> PathMatrix:
    """Binary matrix with ``F[i, j] = 1`` iff row ``i`` passes through node ``j``."""
    values = forest.decision_path(X)
    counts = np.asarray(values.sum(axis=0)).ravel().astype(np.int64)
    return PathMatrix(values, np.arange(forest.n_nodes, dtype=np.int64), counts)


def filter_columns(F: PathMatrix, p: float) -> PathMatrix:
    """Drop the columns whose occupancy exceeds ``p`` percent of the rows."""
    if not 0 < p <= 100:
        raise ValueError(f"p must lie in (0, 100], got {p}")
    n = F.values.shape[0]
    # occupancy > p/100  <=>  100 * count > p * n, kept exact for integer p
    keep = np.flatnonzero(100 * F.counts <= p * n)
    if keep.size == 0:
        raise EmptyEmbeddingError(f"every node is present in more than {p}% of the instances")
    return F.columns(keep)


@dataclass(frozen=True)
class NodeWeights:
    weights: np.ndarray
    epsilon: float


def node_weights(counts, epsilon: float = 1.0) -> NodeWeights:
    counts = np.asarray(counts, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if np.any(counts < 1):
        raise ValueError("node counts must be >= 1")
    return NodeWeights(1.0 / (np.log(counts) + epsilon), float(epsilon))


def weight_columns(F: PathMatrix, epsilon: float = 1.0) -> PathMatrix:
    w = node_weights(F.counts, epsilon)
    return PathMatrix((F.values @ sp.diags(w.weights)).tocsr(), F.node_ids, F.counts)


# --------------------------------------------------------------------------
# PCA


def _dense(z) -> np.ndarray:
    return z.toarray() if sp.issparse(z) else np.asarray(z, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Principal axes of a centered matrix.

    Axes are held either explicitly (``components_``, k x d) or, when the
    data has more columns than rows, implicitly as ``coef.T @ (Z - mean)``
    over the fitting matrix ``basis``; the latter avoids a dense k x d block
    for wide sparse path matrices.
    """

    mean: np.ndarray
    explained_variance: np.ndarray
    components_: np.ndarray | None = None
    basis: sp.csr_matrix | np.ndarray | None = None
    coef: np.ndarray | None = None
    k_requested: int = 0

    @property
    def k(self) -> int:
        return self.explained_variance.shape[0]

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    @property
    def clamped(self) -> bool:
        return self.k < self.k_requested

    @property
    def components(self) -> np.ndarray:
        if self.components_ is not None:
            return self.components_
        zc = _dense(self.basis) - self.mean
        return self.coef.T @ zc


def _rank_tol(eigvals: np.ndarray, shape) -> float:
    top = float(eigvals.max()) if eigvals.size else 0.0
    return max(top, 0.0) * max(shape) * np.finfo(np.float64).eps * 10


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip rows so each one's largest-magnitude coordinate is positive."""
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(vectors.shape[0]), idx])
    signs[signs == 0] = 1.0
    return signs


def fit_pca(Z, k: int) -> PcaModel:
    """Fit ``k`` principal axes, ordered by decreasing explained variance.

    ``k`` is clamped to the numerical rank of the centered matrix (the
    model records the requested value). A matrix of identical rows yields
    a single axis along the first coordinate with zero variance.
    """
    n, d = Z.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k must lie in [1, {min(n, d)}], got {k}")
    sparse = sp.issparse(Z)
    if sparse:
        Z = sp.csr_matrix(Z, dtype=np.float64)
        mean = np.asarray(Z.mean(axis=0)).ravel()
    else:
        Z = np.asarray(Z, dtype=np.float64)
        mean = Z.mean(axis=0)

    if d <= n:
        zc = _dense(Z) - mean
        cov = zc.T @ zc / n
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        rank = int(np.sum(vals > _rank_tol(vals, (n, d))))
        if rank == 0:
            return _degenerate(mean, k)
        r = min(k, rank)
        comps = vecs[:, :r].T.copy()
        comps *= _fix_signs(comps)[:, None]
        return PcaModel(mean, np.maximum(vals[:r], 0.0), components_=comps, k_requested=k)

    # wide: eigendecompose the n x n Gram matrix of the centered rows
    zm = np.asarray(Z @ mean).ravel()
    mm = float(mean @ mean)
    zz = Z @ Z.T
    gram = (_dense(zz) if sp.issparse(zz) else zz) - zm[:, None] - zm[None, :] + mm
    gram = (gram + gram.T) / 2
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    rank = int(np.sum(vals > _rank_tol(vals, (n, d))))
    if rank == 0:
        return _degenerate(mean, k)
    r = min(k, rank)
    coef = vecs[:, :r] / np.sqrt(vals[:r])
    signs = _dual_signs(Z, mean, coef)
    return PcaModel(mean, vals[:r] / n, basis=Z, coef=coef * signs[None, :], k_requested=k)


def _dual_signs(Z, mean: np.ndarray, coef: np.ndarray, block: int = 4096) -> np.ndarray:
    """Sign flips of implicit axes, scanning columns blockwise to bound memory."""
    k = coef.shape[1]
    best = np.full(k, -1.0)
    sign = np.ones(k)
    for a in range(0, Z.shape[1], block):
        b = min(a + block, Z.shape[1])
        chunk = coef.T @ (_dense(Z[:, a:b]) - mean[a:b])
        idx = np.argmax(np.abs(chunk), axis=1)
        mag = np.abs(chunk[np.arange(k), idx])
        better = mag > best
        best[better] = mag[better]
        s = np.sign(chunk[np.arange(k), idx])
        sign[better] = np.where(s[better] == 0, 1.0, s[better])
    return sign


def _degenerate(mean: np.ndarray, k: int) -> PcaModel:
    comps = np.zeros((1, mean.shape[0]))
    comps[0, 0] = 1.0
    return PcaModel(mean, np.zeros(1), components_=comps, k_requested=k)


def transform_pca(model: PcaModel, Z) -> np.ndarray:
    """Project ``Z - mean`` on the model's axes."""
    if Z.shape[1] != model.n_features:
        raise ShapeError(f"PCA expects {model.n_features} columns, got {Z.shape[1]}")
    if model.components_ is not None:
        zc = _dense(Z) - model.mean
        return zc @ model.components_.T
    # (z - mu) (B - 1 mu^T)^T = z B^T - 1 (B mu)^T - (z mu - mu mu) 1^T
    B, mu = model.basis, model.mean
    zb = Z @ B.T
    zb = _dense(zb) if sp.issparse(zb) else np.asarray(zb)
    bm = np.asarray(B @ mu).ravel()
    zm = np.asarray(Z @ mu).ravel()
    a = zb - bm[None, :] - (zm - float(mu @ mu))[:, None]
    return a @ model.coef


# --------------------------------------------------------------------------
# extractor


@dataclass(frozen=True)
class EmbeddingConfig:
    """``n_components`` (absolute) wins over ``component_fraction`` when both are set."""

    n_trees: int = 100
    filter_p: float = 90.0
    epsilon: float = 1.0
    n_components: int | None = None
    component_fraction: float | None = 0.05
    subsample_fraction: float = 0.5
    min_samples_split: int = 2
    max_depth: int | None = None
    mtry: int | None = None

    def __post_init__(self):
        if self.n_components is None and self.component_fraction is None:
            raise ValueError("set n_components or component_fraction")
        if self.component_fraction is not None and not 0 < self.component_fraction <= 1:
            raise ValueError("component_fraction must lie in (0, 1]")
        if self.n_components is not None and self.n_components < 1:
            raise ValueError("n_components must be >= 1")


def resolve_components(fraction: float, n_rows: int, n_columns: int) -> int:
    """``round(fraction * min(n_rows, n_columns))``, at least 1."""
    return max(1, int(round(fraction * min(n_rows, n_columns))))


@dataclass(frozen=True, eq=False)
class EmbeddingExtractor:
    forest: Forest
    kept_columns: np.ndarray
    weights: NodeWeights
    pca: PcaModel
    filter_p: float
    n_features: int
    leaf_fallback: bool = False
    # coordinates of the fitting rows; not persisted
    fit_coordinates: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.pca.k

    @property
    def clamped(self) -> bool:
        return self.pca.clamped

    def _weighted(self, X) -> sp.csr_matrix:
        x = _values(X)
        if x.shape[1] != self.n_features:
            raise ShapeError(f"extractor expects {self.n_features} features, got {x.shape[1]}")
        path = self.forest.decision_path(x)[:, self.kept_columns]
        return (path @ sp.diags(self.weights.weights)).tocsr()

    def transform(self, X) -> np.ndarray:
        return transform_pca(self.pca, self._weighted(X))


def fit_embedding_extractor(
    X,
    Y,
    kind: ForestKind | str,
    config: EmbeddingConfig,
    seed: int,
    task=None,
    n_jobs: int | None = 1,
) -> EmbeddingExtractor:
    """Fit a dedicated forest on a subsample and learn the projection.

    The forest sees ``subsample_fraction`` of the rows; node filtering, node
    counts and PCA are computed on the path matrix of all rows of ``X``.
    """
    x, y = _values(X), _values(Y)
    n = x.shape[0]
    rows = np.sort(subsample_indices(n, config.subsample_fraction, derive_seed(seed, ROLE_SUBSAMPLE)))
    params = SplitParams(kind=kind, min_samples_split=config.min_samples_split,
                         max_depth=config.max_depth, mtry=config.mtry)
    if task is None:
        task = getattr(Y, "kind", TaskKind.REGRESSION)
    forest = fit_forest(x[rows], y[rows], params, config.n_trees, derive_seed(seed, ROLE_TREE), task=task, n_jobs=n_jobs)
    return extractor_from_forest(forest, x, config.filter_p, config.epsilon,
                                 n_components=config.n_components, component_fraction=config.component_fraction)


def extractor_from_forest(
    forest: Forest,
    X,
    filter_p: float = 90.0,
    epsilon: float = 1.0,
    n_components: int | None = None,
    component_fraction: float | None = 0.05,
) -> EmbeddingExtractor:
    """Learn filter, weights and projection of ``forest``'s paths over the rows of ``X``."""
    x = _values(X)
    n = x.shape[0]
    full = build_path_matrix(forest, x)
    fallback = False
    try:
        kept = filter_columns(full, filter_p)
    except EmptyEmbeddingError:
        warnings.warn("node filter removed every column; keeping leaf columns instead", RuntimeWarning, stacklevel=3)
        fallback = True
        kept = full.columns(np.flatnonzero(forest.feature < 0))
    weighted = weight_columns(kept, epsilon)
    n_cols = weighted.shape[1]
    if n_components is not None:
        k = min(n_components, min(n, n_cols))
    else:
        k = resolve_components(component_fraction, n, n_cols)
    pca = fit_pca(weighted.values, k)
    coords = transform_pca(pca, weighted.values)
    if pca.clamped:
        log.info("embedding components clamped from %d to rank %d", pca.k_requested, pca.k)
    return EmbeddingExtractor(
        forest=forest,
        kept_columns=kept.node_ids,
        weights=node_weights(kept.counts, epsilon),
        pca=pca,
        filter_p=float(filter_p),
        n_features=x.shape[1],
        leaf_fallback=fallback,
        fit_coordinates=coords,
    )


def embed(extractor: EmbeddingExtractor, X, prefix: str = "emb") -> FeatureMatrix:
    z = extractor.transform(X)
    return FeatureMatrix(z, tuple(f"{prefix}{j}" for j in range(z.shape[1])))
