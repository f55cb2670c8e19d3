"""Deep tree-ensemble cascade.

Every layer holds one random forest and one extra-trees predictor. Their
inputs are the original features concatenated with representations built
from the previous layer's inputs: tree-embeddings and/or output-space (OS)
features, i.e. out-of-fold predictions of auxiliary RF/ET models. Features
are crossed over: the RF predictor only consumes ET-derived features and
vice versa.

The number of layers is chosen after the fact: ``max_layers`` layers are
trained, each is scored on the training data from out-of-fold predictions,
and the cascade is cut after the best-scoring layer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from ._seeds import ROLE_EMBEDDING, ROLE_FOLDS, ROLE_OS, ROLE_PREDICTOR, ROLE_SCORE, derive_seed
from .dataset import Dataset, FeatureMatrix, ShapeError, TaskKind, kfold_split
from .embeddings import EmbeddingConfig, EmbeddingExtractor, fit_embedding_extractor
from .metrics import TrainStats, default_stopping_metric, get_metric
from .trees import Forest, ForestKind, SplitParams, _values, fit_forest, predict_pooled

log = logging.getLogger(__name__)

RF, ET = "rf", "et"
KIND = {RF: ForestKind.RANDOM_FOREST, ET: ForestKind.EXTRA_TREES}
OTHER = {RF: ET, ET: RF}


class ConfigurationError(ValueError):
    pass


class Variant(str, Enum):
    TE = "TE"
    X_TE = "X_TE"
    X_OS = "X_OS"
    X_OS_TE = "X_OS_TE"

    @property
    def uses_embeddings(self) -> bool:
        return self in (Variant.TE, Variant.X_TE, Variant.X_OS_TE)

    @property
    def uses_os(self) -> bool:
        return self in (Variant.X_OS, Variant.X_OS_TE)

    @property
    def uses_original(self) -> bool:
        return self is not Variant.TE


class StoppingRule(str, Enum):
    BEST = "best"
    FIRST_DETERIORATION = "first_deterioration"
    PATIENCE = "patience"


@dataclass(frozen=True)
class CascadeConfig:
    """Settings of one cascade fit.

    ``use_os=False`` switches the OS sources off; together with
    ``variant=X_OS`` and ``max_layers=1`` this is the single-layer RF+ET
    baseline (see :meth:`baseline`). ``score_mode="train"`` scores layers on
    raw training predictions instead of out-of-fold ones.
    """

    variant: Variant = Variant.X_OS_TE
    n_trees: int = 100
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    embedding_trees: int | None = None
    os_folds: int = 5
    max_layers: int = 10
    stopping_metric: str | None = None
    stopping_rule: StoppingRule = StoppingRule.BEST
    patience: int = 3
    score_mode: str = "oof"
    score_folds: int = 5
    use_os: bool = True
    min_samples_split: int = 2
    max_depth: int | None = None
    mtry: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "stopping_rule", StoppingRule(self.stopping_rule))
        if self.max_layers < 1:
            raise ConfigurationError("max_layers must be >= 1")
        if self.n_trees < 1:
            raise ConfigurationError("n_trees must be >= 1")
        if self.variant.uses_os and self.use_os and self.os_folds < 2:
            raise ConfigurationError("os_folds must be >= 2")
        if self.score_mode not in ("oof", "train"):
            raise ConfigurationError(f"score_mode must be 'oof' or 'train', got {self.score_mode!r}")
        if self.score_mode == "oof" and self.score_folds < 2:
            raise ConfigurationError("score_folds must be >= 2")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.stopping_metric is not None:
            get_metric(self.stopping_metric)

    @classmethod
    def baseline(cls, **kwargs) -> "CascadeConfig":
        kwargs.setdefault("max_layers", 1)
        return cls(variant=Variant.X_OS, use_os=False, **kwargs)

    @property
    def os_enabled(self) -> bool:
        return self.variant.uses_os and self.use_os

    def split_params(self, role: str) -> SplitParams:
        return SplitParams(KIND[role], self.min_samples_split, self.max_depth, self.mtry)

    def embedding_config(self) -> EmbeddingConfig:
        return replace(self.embedding, n_trees=self.embedding_trees or self.n_trees)


# --------------------------------------------------------------------------
# output-space features


@dataclass(frozen=True, eq=False)
class OSGenerator:
    """K fold-models per family; ``folds[i]`` is the fold that held out row ``i``."""

    rf_models: tuple[Forest, ...]
    et_models: tuple[Forest, ...]
    folds: np.ndarray

    @property
    def n_outputs(self) -> int:
        return self.rf_models[0].n_outputs

    def transform(self, x_rf, x_et=None) -> np.ndarray:
        """OS features of unseen rows: each half averages its family's K fold-models."""
        x_rf = _values(x_rf)
        x_et = x_rf if x_et is None else _values(x_et)
        rf = predict_pooled(self.rf_models, [x_rf] * len(self.rf_models))
        et = predict_pooled(self.et_models, [x_et] * len(self.et_models))
        return np.hstack([rf, et])


def _fold_ids(n: int, k: int, seed: int) -> np.ndarray:
    folds = np.empty(n, dtype=np.int64)
    for f, split in enumerate(kfold_split(n, k, seed)):
        folds[split.test_indices] = f
    return folds


def _os_columns(m: int, names: Sequence[str] | None = None) -> tuple[str, ...]:
    names = list(names) if names else [f"y{j}" for j in range(m)]
    return tuple(f"os_rf_{c}" for c in names) + tuple(f"os_et_{c}" for c in names)


def generate_os_features(
    X,
    Y,
    n_trees: int,
    K: int,
    seed: int,
    X_et=None,
    params: dict[str, SplitParams] | None = None,
    task=None,
    n_jobs: int | None = 1,
) -> tuple[FeatureMatrix, OSGenerator]:
    """Out-of-fold RF and ET predictions for every training row.

    Row ``i`` only receives predictions from the two fold-models whose
    training rows exclude ``i``. ``X_et`` (default ``X``) is the input of
    the ET family. Returns the ``N x 2M`` matrix ``[RF half | ET half]``
    and the fold-models for use on unseen rows.
    """
    x_rf = _values(X)
    x_et = x_rf if X_et is None else _values(X_et)
    y = _values(Y)
    n = x_rf.shape[0]
    if not 2 <= K <= n:
        raise ValueError(f"OS features need 2 <= K <= N, got K={K}, N={n}")
    if task is None:
        task = getattr(Y, "kind", TaskKind.REGRESSION)
    params = params or {RF: SplitParams(ForestKind.RANDOM_FOREST), ET: SplitParams(ForestKind.EXTRA_TREES)}
    folds = _fold_ids(n, K, derive_seed(seed, ROLE_FOLDS))
    out = {RF: np.empty_like(y), ET: np.empty_like(y)}
    models: dict[str, list[Forest]] = {RF: [], ET: []}
    for f in range(K):
        held = folds == f
        for role, x in ((RF, x_rf), (ET, x_et)):
            forest = fit_forest(x[~held], y[~held], params[role], n_trees,
                                derive_seed(seed, ROLE_OS, f, role == ET), task=task, n_jobs=n_jobs)
            out[role][held] = forest.predict(x[held])
            models[role].append(forest)
    names = getattr(Y, "columns", None)
    feats = FeatureMatrix(np.hstack([out[RF], out[ET]]), _os_columns(y.shape[1], names))
    folds.setflags(write=False)
    return feats, OSGenerator(tuple(models[RF]), tuple(models[ET]), folds)


# --------------------------------------------------------------------------
# input assembly


def recipe(variant: Variant, role: str, use_os: bool = True) -> tuple[str, ...]:
    """Ordered feature sources of a predictor; only the other family's features enter."""
    other = OTHER[role]
    parts = []
    if variant.uses_original:
        parts.append("X")
    if variant.uses_os and use_os:
        parts.append(f"OS_{other}")
    if variant.uses_embeddings:
        parts.append(f"F_{other}")
    return tuple(parts)


def assemble_inputs(
    variant: Variant | str,
    X,
    F_rf=None,
    F_et=None,
    OS=None,
    use_os: bool = True,
) -> dict[str, np.ndarray]:
    """Predictor inputs ``{"rf": ..., "et": ...}`` for one layer.

    ``OS`` is the ``N x 2M`` matrix from :func:`generate_os_features`; its
    ET half feeds the RF predictor and its RF half the ET predictor.
    """
    variant = Variant(variant)
    x = _values(X)
    sources: dict[str, np.ndarray] = {"X": x}
    if variant.uses_embeddings:
        if F_rf is None or F_et is None:
            raise ConfigurationError(f"{variant.value} needs both tree-embeddings")
        sources["F_rf"], sources["F_et"] = _values(F_rf), _values(F_et)
    if variant.uses_os and use_os:
        if OS is None:
            raise ConfigurationError(f"{variant.value} needs output-space features")
        os_ = _values(OS)
        if os_.shape[1] % 2:
            raise ShapeError("OS matrix must have an even number of columns")
        m = os_.shape[1] // 2
        sources["OS_rf"], sources["OS_et"] = os_[:, :m], os_[:, m:]
    out = {}
    for role in (RF, ET):
        parts = [sources[s] for s in recipe(variant, role, use_os)]
        if not parts:
            raise ConfigurationError("predictor input would be empty")
        n = {p.shape[0] for p in parts}
        if len(n) != 1:
            raise ShapeError(f"feature sources disagree on row count: {sorted(n)}")
        out[role] = np.hstack(parts) if len(parts) > 1 else parts[0]
    return out


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class Layer:
    index: int
    predictors: dict[str, Forest]
    recipes: dict[str, tuple[str, ...]]
    extractors: dict[str, EmbeddingExtractor] | None = None
    os_generator: OSGenerator | None = None
    score: float = float("nan")


@dataclass(frozen=True, eq=False)
class CascadeModel:
    layers: tuple[Layer, ...]
    best_layer: int
    config: CascadeConfig
    task: TaskKind
    n_features: int
    n_outputs: int
    layer_scores: tuple[float, ...]
    stopping_metric: str
    n_forests_trained: int = 0

    def __post_init__(self):
        if not 1 <= self.best_layer <= len(self.layers):
            raise ValueError(f"best_layer {self.best_layer} outside 1..{len(self.layers)}")

    @property
    def n_layers_trained(self) -> int:
        return len(self.layer_scores)


def select_best_layer(scores: Sequence[float], lower_is_better: bool = True) -> int:
    """1-based index of the best score; the earliest layer wins ties."""
    best = 0
    for i, s in enumerate(scores):
        if (s < scores[best]) if lower_is_better else (s > scores[best]):
            best = i
    return best + 1


def _should_stop(scores: list[float], lower: bool, rule: StoppingRule, patience: int) -> bool:
    if rule is StoppingRule.BEST or len(scores) < 2:
        return False
    if rule is StoppingRule.FIRST_DETERIORATION:
        a, b = scores[-1], scores[-2]
        return a > b if lower else a < b
    return len(scores) - select_best_layer(scores, lower) >= patience


def layer_score(y_true, y_pred, metric: str, train_stats: TrainStats | None = None) -> float:
    return get_metric(metric)(y_true, y_pred, train_stats)


ScoreHook = Callable[[int, np.ndarray, np.ndarray], float]


@dataclass
class LayerTrace:
    """Training-time representations of one layer, kept for audits."""

    index: int
    prev_inputs: dict[str, np.ndarray]
    inputs: dict[str, np.ndarray]
    os_features: np.ndarray | None
    os_seed: int | None
    oof_prediction: np.ndarray | None
    # seed and fold count of the out-of-fold models behind oof_prediction
    oof_seed: int | None = None
    oof_folds: int | None = None


def fit_cascade(
    train: Dataset,
    config: CascadeConfig,
    score_fn: ScoreHook | None = None,
    discard: bool = True,
    n_jobs: int | None = 1,
    trace: list | None = None,
) -> CascadeModel:
    """Train up to ``max_layers`` layers and keep the prefix ending at the best one.

    ``score_fn(layer_index, y_true, y_pred)`` replaces the stopping metric
    when given. With ``discard=False`` all trained layers are kept (the
    model still predicts from ``best_layer``). Pass a list as ``trace`` to
    collect a :class:`LayerTrace` per layer.
    """
    x = train.features.values
    y = train.targets.values
    task = train.kind
    n, m = y.shape
    metric_name = config.stopping_metric or default_stopping_metric(task)
    metric = get_metric(metric_name)
    stats = TrainStats.from_targets(y)
    params = {role: config.split_params(role) for role in (RF, ET)}
    emb_cfg = config.embedding_config()
    seed = config.seed
    variant = config.variant
    use_os = config.os_enabled

    prev = {RF: x, ET: x}
    pending: tuple[np.ndarray, OSGenerator, int] | None = None
    layers: list[Layer] = []
    scores: list[float] = []
    n_forests = 0

    for t in range(1, config.max_layers + 1):
        extractors = None
        f_rf = f_et = None
        if variant.uses_embeddings:
            extractors = {
                role: fit_embedding_extractor(prev[role], y, KIND[role], emb_cfg,
                                              derive_seed(seed, ROLE_EMBEDDING, t, role == ET),
                                              task=task, n_jobs=n_jobs)
                for role in (RF, ET)
            }
            n_forests += 2
            f_rf, f_et = extractors[RF].fit_coordinates, extractors[ET].fit_coordinates

        generator = None
        os_seed = None
        os_feats = None
        if use_os:
            if pending is None:
                os_seed = derive_seed(seed, ROLE_OS, t)
                feats, generator = generate_os_features(prev[RF], y, config.n_trees, config.os_folds, os_seed,
                                                        X_et=prev[ET], params=params, task=task, n_jobs=n_jobs)
                os_feats = feats.values
                n_forests += 2 * config.os_folds
            else:
                os_feats, generator, os_seed = pending

        inputs = assemble_inputs(variant, x, f_rf, f_et, os_feats, use_os=use_os)
        predictors = {
            role: fit_forest(inputs[role], y, params[role], config.n_trees,
                             derive_seed(seed, ROLE_PREDICTOR, t, role == ET), task=task, n_jobs=n_jobs)
            for role in (RF, ET)
        }
        n_forests += 2

        # out-of-fold models on this layer's inputs: they score the layer and,
        # with matching fold counts, generate the next layer's OS features
        next_os = None
        oof_pred = None
        oof_seed = oof_folds = None
        if use_os and t < config.max_layers:
            nseed = derive_seed(seed, ROLE_OS, t + 1)
            feats, gen = generate_os_features(inputs[RF], y, config.n_trees, config.os_folds, nseed,
                                              X_et=inputs[ET], params=params, task=task, n_jobs=n_jobs)
            n_forests += 2 * config.os_folds
            next_os = (feats.values, gen, nseed)
        # a single layer needs no selection, so skip the out-of-fold scoring pass
        if config.score_mode == "oof" and (config.max_layers > 1 or score_fn is not None):
            if next_os is not None and config.score_folds == config.os_folds:
                oof, oof_seed, oof_folds = next_os[0], next_os[2], config.os_folds
            else:
                sseed = derive_seed(seed, ROLE_SCORE, t) if not use_os else derive_seed(seed, ROLE_OS, t + 1)
                feats, _ = generate_os_features(inputs[RF], y, config.n_trees, config.score_folds, sseed,
                                                X_et=inputs[ET], params=params, task=task, n_jobs=n_jobs)
                n_forests += 2 * config.score_folds
                oof, oof_seed, oof_folds = feats.values, sseed, config.score_folds
            oof_pred = (oof[:, :m] + oof[:, m:]) / 2.0
        else:
            oof_pred = predict_pooled([predictors[RF], predictors[ET]], [inputs[RF], inputs[ET]])

        if score_fn is not None:
            score = float(score_fn(t, y, oof_pred))
        else:
            score = metric(y, oof_pred, stats)
        scores.append(score)
        log.debug("layer %d %s=%.6f", t, metric_name, score)

        layers.append(
            Layer(
                index=t,
                predictors=predictors,
                recipes={role: recipe(variant, role, use_os) for role in (RF, ET)},
                extractors=extractors,
                os_generator=generator,
                score=score,
            )
        )
        if trace is not None:
            trace.append(LayerTrace(t, dict(prev), inputs, os_feats, os_seed, oof_pred, oof_seed, oof_folds))
        pending = next_os
        prev = inputs
        if _should_stop(scores, metric.lower_is_better, config.stopping_rule, config.patience):
            break

    best = select_best_layer(scores, metric.lower_is_better)
    kept = tuple(layers[:best]) if discard else tuple(layers)
    return CascadeModel(
        layers=kept,
        best_layer=best,
        config=config,
        task=task,
        n_features=x.shape[1],
        n_outputs=m,
        layer_scores=tuple(scores),
        stopping_metric=metric_name,
        n_forests_trained=n_forests,
    )


def truncate(model: CascadeModel, best_layer: int | None = None) -> CascadeModel:
    """Drop every layer after ``best_layer`` (default: the model's own)."""
    best = model.best_layer if best_layer is None else best_layer
    return replace(model, layers=model.layers[:best], best_layer=best)


def layer_inputs(model: CascadeModel, X, upto: int | None = None) -> list[dict[str, np.ndarray]]:
    """Assembled predictor inputs of layers ``1..upto`` for unseen rows."""
    x = _values(X)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, got {x.shape[-1]}")
    upto = model.best_layer if upto is None else upto
    cfg = model.config
    prev = {RF: x, ET: x}
    out = []
    for layer in model.layers[:upto]:
        f_rf = f_et = os_feats = None
        if layer.extractors is not None:
            f_rf = layer.extractors[RF].transform(prev[RF])
            f_et = layer.extractors[ET].transform(prev[ET])
        if layer.os_generator is not None:
            os_feats = layer.os_generator.transform(prev[RF], prev[ET])
        prev = assemble_inputs(cfg.variant, x, f_rf, f_et, os_feats, use_os=cfg.os_enabled)
        out.append(prev)
    return out


def predict_cascade(model: CascadeModel, X, layer: int | None = None) -> np.ndarray:
    """Mean over all trees of both forests of the best (or given) layer."""
    upto = model.best_layer if layer is None else layer
    if not 1 <= upto <= len(model.layers):
        raise ValueError(f"layer {upto} not available (model keeps {len(model.layers)})")
    inputs = layer_inputs(model, X, upto)[-1]
    final = model.layers[upto - 1]
    return predict_pooled([final.predictors[RF], final.predictors[ET]], [inputs[RF], inputs[ET]])


def check_crossover(model: CascadeModel) -> None:
    """Raise if any predictor consumes features generated by its own family."""
    for layer in model.layers:
        for role, parts in layer.recipes.items():
            own = {f"F_{role}", f"OS_{role}"}
            if own & set(parts):
                raise AssertionError(f"layer {layer.index}: {role} predictor fed its own features {parts}")
            if model.config.variant.uses_original and "X" not in parts:
                raise AssertionError(f"layer {layer.index}: {role} predictor lost the original features")
            if model.config.variant is Variant.TE and "X" in parts:
                raise AssertionError(f"layer {layer.index}: TE predictor sees the original features")
