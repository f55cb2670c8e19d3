import sys
from pathlib import Path

import numpy as np
import pytest

from dte.dataset import Dataset, FeatureMatrix, TargetMatrix, TaskKind

sys.path.insert(0, str(Path(__file__).parent))


def make_regression(n=100, d=6, m=2, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = np.column_stack([x[:, 0] + x[:, 1] ** 2, np.sin(2 * x[:, 2]) + 0.5 * x[:, 0]][:m])
    if m > 2:
        y = np.column_stack([y] + [x[:, j % d] * x[:, (j + 1) % d] for j in range(m - 2)])
    y = y + noise * rng.normal(size=y.shape)
    return Dataset(FeatureMatrix(x), TargetMatrix(y, TaskKind.REGRESSION), "synthetic")


def make_multilabel(n=100, d=6, m=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    logits = x[:, :m] + 0.5 * x[:, [(j + 1) % d for j in range(m)]] + 0.3 * rng.normal(size=(n, m))
    y = (logits > 0).astype(float)
    return Dataset(FeatureMatrix(x), TargetMatrix(y, TaskKind.MULTILABEL), "synthetic-ml")


@pytest.fixture
def regression():
    return make_regression()


@pytest.fixture
def multilabel():
    return make_multilabel()
