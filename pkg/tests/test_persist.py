import io
import zipfile

import numpy as np
import pytest
from conftest import make_multilabel

from dte import persist
from dte.cascade import CascadeConfig, Variant, fit_cascade, predict_cascade
from dte.embeddings import EmbeddingConfig, fit_embedding_extractor
from dte.trees import ForestKind, SplitParams, fit_forest

SMALL = dict(n_trees=4, embedding=EmbeddingConfig(n_trees=4, component_fraction=0.1), os_folds=3,
             score_folds=3, max_layers=2)


@pytest.fixture(scope="module")
def models():
    from conftest import make_regression

    ds = make_regression(n=100)
    return ds, {v: fit_cascade(ds, CascadeConfig(variant=v, **SMALL)) for v in Variant}


@pytest.mark.parametrize("variant", list(Variant))
def test_round_trip_predictions_bitwise(models, variant, tmp_path):
    ds, fitted = models
    model = fitted[variant]
    q = np.vstack([ds.features.values, np.random.default_rng(1).normal(size=(20, 6)) * 3])
    path = tmp_path / "m.dte"
    persist.save(model, path, {"note": "x"})
    back, meta = persist.load_with_meta(path)
    assert meta == {"note": "x"}
    assert back.best_layer == model.best_layer and back.config == model.config
    np.testing.assert_array_equal(predict_cascade(back, q), predict_cascade(model, q))
    for layer in range(1, model.best_layer + 1):
        np.testing.assert_array_equal(predict_cascade(back, q, layer), predict_cascade(model, q, layer))


def test_bytes_are_stable(models):
    _, fitted = models
    b = persist.dumps(fitted[Variant.X_OS_TE])
    assert persist.dumps(persist.loads(b)) == b


def test_forest_and_extractor_round_trip():
    ds = make_multilabel(n=40)
    x, y = ds.features.values, ds.targets.values
    f = fit_forest(x, y, SplitParams(ForestKind.EXTRA_TREES), 3, seed=3)
    back = persist.loads(persist.dumps(f))
    assert back.structure_hash() == f.structure_hash()
    np.testing.assert_array_equal(back.threshold, f.threshold)
    np.testing.assert_array_equal(back.predict(x), f.predict(x))
    e = fit_embedding_extractor(x, y, ForestKind.RANDOM_FOREST, EmbeddingConfig(n_trees=3), seed=1)
    e2 = persist.loads(persist.dumps(e))
    np.testing.assert_array_equal(e2.transform(x), e.transform(x))


def test_corrupt_and_truncated_files(models, tmp_path):
    _, fitted = models
    b = persist.dumps(fitted[Variant.X_TE])
    for bad in (b[: len(b) // 2], b"", b"not a zip at all", b[:-30]):
        with pytest.raises(persist.ModelFormatError):
            persist.loads(bad)
    with pytest.raises(persist.ModelFormatError):
        persist.load(tmp_path / "absent.dte")

    def rewrite(manifest_edit=None, drop=None):
        src = zipfile.ZipFile(io.BytesIO(b))
        out = io.BytesIO()
        with zipfile.ZipFile(out, "w") as zf:
            for name in src.namelist():
                if name == drop:
                    continue
                data = src.read(name)
                if name == "manifest.json" and manifest_edit:
                    data = manifest_edit(data.decode()).encode()
                zf.writestr(name, data)
        return out.getvalue()

    with pytest.raises(persist.ModelFormatError, match="version"):
        persist.loads(rewrite(lambda s: s.replace('"version": 1', '"version": 99')))
    with pytest.raises(persist.ModelFormatError, match="format"):
        persist.loads(rewrite(lambda s: s.replace('"dte-model"', '"other"')))
    with pytest.raises(persist.ModelFormatError):
        persist.loads(rewrite(drop="manifest.json"))
    array = next(n for n in zipfile.ZipFile(io.BytesIO(b)).namelist() if n.endswith(".npy"))
    with pytest.raises(persist.ModelFormatError):
        persist.loads(rewrite(drop=array))


def test_write_atomic_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.bin"
    target.write_bytes(b"old")

    with pytest.raises(TypeError):
        persist.write_atomic(target, object())
    assert target.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]
    persist.write_atomic(target, b"new")
    assert target.read_bytes() == b"new"
