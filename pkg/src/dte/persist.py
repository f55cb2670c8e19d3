"""Versioned model containers.

A container is a zip archive holding ``manifest.json`` plus one ``.npy``
entry per array (little-endian, no pickles). The manifest records the
format name, version, object type and every scalar field, and refers to
arrays by entry name. Entries carry a fixed timestamp so that saving the
same object twice produces identical bytes. See ``docs/formats.md``.
"""
from __future__ import annotations

import dataclasses
import io
import json
import os
import tempfile
import zipfile
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .cascade import CascadeConfig, CascadeModel, Layer, OSGenerator, StoppingRule, Variant
from .dataset import TaskKind
from .embeddings import EmbeddingConfig, EmbeddingExtractor, NodeWeights, PcaModel
from .trees import Forest, ForestKind

FORMAT = "dte-model"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ModelFormatError(ValueError):
    pass


class _Writer:
    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}

    def put(self, name: str, a: np.ndarray) -> str:
        a = np.asarray(a)
        if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
            a = a.astype(a.dtype.newbyteorder("<"))
        key = f"{name}.npy"
        if key in self.arrays:
            raise ValueError(f"duplicate array entry {key}")
        self.arrays[key] = np.ascontiguousarray(a)
        return key


class _Reader:
    def __init__(self, zf: zipfile.ZipFile):
        self.zf = zf

    def get(self, key: str) -> np.ndarray:
        try:
            with self.zf.open(key) as fh:
                a = np.load(io.BytesIO(fh.read()), allow_pickle=False)
        except KeyError:
            raise ModelFormatError(f"missing array entry {key}") from None
        a.setflags(write=False)
        return a


# --------------------------------------------------------------------------
# forests


def _forest_out(f: Forest, w: _Writer, p: str) -> dict:
    return {
        "kind": f.kind.value,
        "n_features": f.n_features,
        "mtry": f.mtry,
        "seed": f.seed,
        "min_samples_split": f.min_samples_split,
        "max_depth": f.max_depth,
        "arrays": {
            name: w.put(f"{p}/{name}", getattr(f, name))
            for name in ("feature", "threshold", "left", "right", "prototype", "train_count", "tree_offsets")
        },
    }


def _forest_in(d: dict, r: _Reader) -> Forest:
    arrays = {name: r.get(key) for name, key in d["arrays"].items()}
    return Forest(
        ForestKind(d["kind"]),
        int(d["n_features"]),
        mtry=int(d["mtry"]),
        seed=int(d["seed"]),
        min_samples_split=int(d["min_samples_split"]),
        max_depth=d["max_depth"],
        **arrays,
    )


# --------------------------------------------------------------------------
# embeddings


def _pca_out(m: PcaModel, w: _Writer, p: str) -> dict:
    d = {
        "k_requested": m.k_requested,
        "mean": w.put(f"{p}/mean", m.mean),
        "explained_variance": w.put(f"{p}/explained_variance", m.explained_variance),
    }
    if m.components_ is not None:
        d["components"] = w.put(f"{p}/components", m.components_)
    else:
        d["coef"] = w.put(f"{p}/coef", m.coef)
        if sp.issparse(m.basis):
            b = sp.csr_matrix(m.basis)
            d["basis_csr"] = {
                "shape": list(b.shape),
                "data": w.put(f"{p}/basis_data", b.data),
                "indices": w.put(f"{p}/basis_indices", b.indices),
                "indptr": w.put(f"{p}/basis_indptr", b.indptr),
            }
        else:
            d["basis"] = w.put(f"{p}/basis", m.basis)
    return d


def _pca_in(d: dict, r: _Reader) -> PcaModel:
    kw = dict(mean=r.get(d["mean"]), explained_variance=r.get(d["explained_variance"]),
              k_requested=int(d["k_requested"]))
    if "components" in d:
        return PcaModel(components_=r.get(d["components"]), **kw)
    if "basis_csr" in d:
        b = d["basis_csr"]
        basis = sp.csr_matrix((r.get(b["data"]), r.get(b["indices"]), r.get(b["indptr"])), shape=tuple(b["shape"]))
    else:
        basis = r.get(d["basis"])
    return PcaModel(basis=basis, coef=r.get(d["coef"]), **kw)


def _extractor_out(e: EmbeddingExtractor, w: _Writer, p: str) -> dict:
    return {
        "forest": _forest_out(e.forest, w, f"{p}/forest"),
        "kept_columns": w.put(f"{p}/kept_columns", e.kept_columns),
        "weights": w.put(f"{p}/weights", e.weights.weights),
        "epsilon": e.weights.epsilon,
        "filter_p": e.filter_p,
        "n_features": e.n_features,
        "leaf_fallback": e.leaf_fallback,
        "clamped": e.clamped,
        "pca": _pca_out(e.pca, w, f"{p}/pca"),
    }


def _extractor_in(d: dict, r: _Reader) -> EmbeddingExtractor:
    return EmbeddingExtractor(
        forest=_forest_in(d["forest"], r),
        kept_columns=r.get(d["kept_columns"]),
        weights=NodeWeights(r.get(d["weights"]), float(d["epsilon"])),
        pca=_pca_in(d["pca"], r),
        filter_p=float(d["filter_p"]),
        n_features=int(d["n_features"]),
        leaf_fallback=bool(d["leaf_fallback"]),
    )


# --------------------------------------------------------------------------
# cascade


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    return obj


def config_to_dict(config: CascadeConfig) -> dict:
    return _plain(config)


def config_from_dict(d: dict) -> CascadeConfig:
    d = dict(d)
    d["embedding"] = EmbeddingConfig(**d.get("embedding", {}))
    d["variant"] = Variant(d.get("variant", Variant.X_OS_TE.value))
    d["stopping_rule"] = StoppingRule(d.get("stopping_rule", StoppingRule.BEST.value))
    return CascadeConfig(**d)


def _layer_out(layer: Layer, w: _Writer, p: str) -> dict:
    d = {
        "index": layer.index,
        "score": layer.score,
        "recipes": {k: list(v) for k, v in layer.recipes.items()},
        "predictors": {k: _forest_out(f, w, f"{p}/predictor_{k}") for k, f in layer.predictors.items()},
        "extractors": None,
        "os_generator": None,
    }
    if layer.extractors is not None:
        d["extractors"] = {k: _extractor_out(e, w, f"{p}/extractor_{k}") for k, e in layer.extractors.items()}
    if layer.os_generator is not None:
        g = layer.os_generator
        d["os_generator"] = {
            "folds": w.put(f"{p}/os/folds", g.folds),
            "rf_models": [_forest_out(f, w, f"{p}/os/rf_{i}") for i, f in enumerate(g.rf_models)],
            "et_models": [_forest_out(f, w, f"{p}/os/et_{i}") for i, f in enumerate(g.et_models)],
        }
    return d


def _ordered(d: dict) -> dict:
    # manifest keys come back sorted; restore predictor order
    return {k: d[k] for k in sorted(d, key=lambda k: (k != "rf", k))}


def _layer_in(d: dict, r: _Reader) -> Layer:
    extractors = None
    if d["extractors"] is not None:
        extractors = {k: _extractor_in(e, r) for k, e in _ordered(d["extractors"]).items()}
    gen = None
    if d["os_generator"] is not None:
        g = d["os_generator"]
        gen = OSGenerator(
            tuple(_forest_in(f, r) for f in g["rf_models"]),
            tuple(_forest_in(f, r) for f in g["et_models"]),
            r.get(g["folds"]),
        )
    return Layer(
        index=int(d["index"]),
        predictors={k: _forest_in(f, r) for k, f in _ordered(d["predictors"]).items()},
        recipes={k: tuple(v) for k, v in _ordered(d["recipes"]).items()},
        extractors=extractors,
        os_generator=gen,
        score=float(d["score"]),
    )


def _cascade_out(m: CascadeModel, w: _Writer) -> dict:
    return {
        "config": config_to_dict(m.config),
        "task": m.task.value,
        "n_features": m.n_features,
        "n_outputs": m.n_outputs,
        "best_layer": m.best_layer,
        "layer_scores": list(m.layer_scores),
        "stopping_metric": m.stopping_metric,
        "n_forests_trained": m.n_forests_trained,
        "layers": [_layer_out(layer, w, f"layer_{layer.index:02d}") for layer in m.layers],
    }


def _cascade_in(d: dict, r: _Reader) -> CascadeModel:
    return CascadeModel(
        layers=tuple(_layer_in(layer, r) for layer in d["layers"]),
        best_layer=int(d["best_layer"]),
        config=config_from_dict(d["config"]),
        task=TaskKind(d["task"]),
        n_features=int(d["n_features"]),
        n_outputs=int(d["n_outputs"]),
        layer_scores=tuple(float(s) for s in d["layer_scores"]),
        stopping_metric=d["stopping_metric"],
        n_forests_trained=int(d["n_forests_trained"]),
    )


_OUT = {"forest": _forest_out, "extractor": _extractor_out}
_IN = {"forest": _forest_in, "extractor": _extractor_in, "cascade": _cascade_in}


def _object_type(obj) -> str:
    if isinstance(obj, CascadeModel):
        return "cascade"
    if isinstance(obj, EmbeddingExtractor):
        return "extractor"
    if isinstance(obj, Forest):
        return "forest"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def dumps(obj, meta: dict | None = None) -> bytes:
    """Serialize ``obj``; ``meta`` is a JSON-able dict stored alongside (e.g. column names)."""
    kind = _object_type(obj)
    w = _Writer()
    body = _cascade_out(obj, w) if kind == "cascade" else _OUT[kind](obj, w, kind)
    manifest = {"format": FORMAT, "version": VERSION, "type": kind, "object": body, "meta": meta or {}}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
        for key, a in sorted(w.arrays.items()):
            ab = io.BytesIO()
            np.save(ab, a, allow_pickle=False)
            zf.writestr(_entry(key), ab.getvalue())
    return buf.getvalue()


def loads(data: bytes):
    return loads_with_meta(data)[0]


def loads_with_meta(data: bytes):
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            try:
                manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
            except KeyError:
                raise ModelFormatError("not a model container: manifest.json missing") from None
            if manifest.get("format") != FORMAT:
                raise ModelFormatError(f"unknown container format {manifest.get('format')!r}")
            if manifest.get("version") != VERSION:
                raise ModelFormatError(f"unsupported container version {manifest.get('version')!r}")
            kind = manifest.get("type")
            if kind not in _IN:
                raise ModelFormatError(f"unknown object type {kind!r}")
            return _IN[kind](manifest["object"], _Reader(zf)), manifest.get("meta", {})
    except (zipfile.BadZipFile, EOFError, zipfile.LargeZipFile, ValueError, OSError, KeyError, TypeError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"corrupt model container: {exc}") from exc


def write_atomic(path: str | Path, data: bytes) -> None:
    """Write through a temporary sibling and rename: the target is either complete or untouched."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(obj, path: str | Path, meta: dict | None = None) -> None:
    write_atomic(path, dumps(obj, meta))


def load(path: str | Path):
    return load_with_meta(path)[0]


def load_with_meta(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise ModelFormatError(f"no such model file: {path}")
    return loads_with_meta(path.read_bytes())
