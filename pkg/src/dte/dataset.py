"""Tabular data ingestion, fold splitting and subsampling.

CSV is the canonical on-disk format: comma separated, ``.`` as decimal
point, UTF-8, mandatory header row. Targets are either named columns or the
trailing ``M`` columns of the file.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np


class TaskKind(str, Enum):
    REGRESSION = "regression"
    MULTILABEL = "multilabel"


class DatasetError(ValueError):
    """Base class for ingestion and validation failures."""


class ParseError(DatasetError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


class DomainError(DatasetError):
    pass


class ShapeError(ValueError):
    pass


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeError(f"feature matrix must be 2-d and non-empty, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("feature matrix contains NaN or infinite entries")
        columns = tuple(self.columns or ()) or tuple(f"x{j}" for j in range(values.shape[1]))
        if len(columns) != values.shape[1]:
            raise ShapeError(f"{len(columns)} column names for {values.shape[1]} columns")
        object.__setattr__(self, "columns", columns)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "FeatureMatrix":
        return FeatureMatrix(self.values[np.asarray(rows)], self.columns)


@dataclass(frozen=True, eq=False)
class TargetMatrix:
    values: np.ndarray
    kind: TaskKind = TaskKind.REGRESSION
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeError(f"target matrix must be 2-d and non-empty, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("target matrix contains NaN or infinite entries")
        if self.kind is TaskKind.MULTILABEL and not np.all((values == 0) | (values == 1)):
            raise DomainError("multi-label targets must be 0 or 1")
        columns = tuple(self.columns or ()) or tuple(f"y{j}" for j in range(values.shape[1]))
        if len(columns) != values.shape[1]:
            raise ShapeError(f"{len(columns)} column names for {values.shape[1]} targets")
        object.__setattr__(self, "columns", columns)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_targets(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "TargetMatrix":
        return TargetMatrix(self.values[np.asarray(rows)], self.kind, self.columns)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: FeatureMatrix
    targets: TargetMatrix
    name: str = "dataset"

    def __post_init__(self):
        if self.features.n_rows != self.targets.n_rows:
            raise ShapeError(
                f"features have {self.features.n_rows} rows but targets have {self.targets.n_rows}"
            )

    @property
    def n_rows(self) -> int:
        return self.features.n_rows

    @property
    def kind(self) -> TaskKind:
        return self.targets.kind

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features.take(rows), self.targets.take(rows), self.name)


@dataclass(frozen=True, eq=False)
class FoldSplit:
    train_indices: np.ndarray
    test_indices: np.ndarray

    def __post_init__(self):
        for name in ("train_indices", "test_indices"):
            arr = np.array(getattr(self, name), dtype=np.int64).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.intersect1d(self.train_indices, self.test_indices).size:
            raise DatasetError("train and test indices overlap")

    def __eq__(self, other):
        if not isinstance(other, FoldSplit):
            return NotImplemented
        return np.array_equal(self.train_indices, other.train_indices) and np.array_equal(
            self.test_indices, other.test_indices
        )


# --------------------------------------------------------------------------
# CSV


@dataclass
class RawTable:
    header: list[str]
    values: np.ndarray  # NaN marks empty cells
    missing: np.ndarray = field(repr=False)


def read_table(path: str | Path) -> RawTable:
    """Parse a numeric CSV, keeping empty cells as NaN."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file, header row required") from None
        if not header or any(h == "" for h in header):
            raise ParseError("header row has empty column names", row=1)
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(cell.strip() == "" for cell in record) and len(record) <= 1:
                continue
            if len(record) != len(header):
                raise ParseError(
                    f"expected {len(header)} cells, found {len(record)}", row=lineno
                )
            parsed = []
            for j, cell in enumerate(record):
                cell = cell.strip()
                if cell == "":
                    parsed.append(math.nan)
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", row=lineno, column=header[j]) from None
                if not math.isfinite(value):
                    raise ParseError(f"non-finite cell {cell!r}", row=lineno, column=header[j])
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise ParseError("no data rows")
    values = np.array(rows, dtype=np.float64)
    return RawTable(header, values, np.isnan(values))


def resolve_target_columns(header: Sequence[str], targets: int | Sequence[str]) -> list[int]:
    if isinstance(targets, (int, np.integer)):
        m = int(targets)
        if not 1 <= m < len(header):
            raise DatasetError(f"cannot take {m} trailing target columns from {len(header)} columns")
        return list(range(len(header) - m, len(header)))
    names = list(targets)
    if not names:
        raise DatasetError("no target columns given")
    missing = [n for n in names if n not in header]
    if missing:
        raise DatasetError(f"target columns not found in header: {missing}")
    idx = [header.index(n) for n in names]
    if len(idx) == len(header):
        raise DatasetError("at least one feature column is required")
    return idx


def impute_mean(values: np.ndarray, rows=None) -> np.ndarray:
    """Replace NaNs by column means computed over ``rows`` (default: all rows)."""
    values = np.array(values, dtype=np.float64, copy=True)
    ref = values if rows is None else values[np.asarray(rows)]
    with np.errstate(invalid="ignore"):
        means = np.nanmean(ref, axis=0) if ref.size else np.full(values.shape[1], np.nan)
    if np.any(np.isnan(means) & np.isnan(values).any(axis=0)):
        raise DatasetError("cannot impute a column with no observed values in the reference rows")
    nan_r, nan_c = np.nonzero(np.isnan(values))
    values[nan_r, nan_c] = means[nan_c]
    return values


def table_to_dataset(
    table: RawTable,
    targets: int | Sequence[str],
    kind: TaskKind | str = TaskKind.REGRESSION,
    *,
    impute: bool = False,
    impute_rows=None,
    name: str = "dataset",
) -> Dataset:
    kind = TaskKind(kind)
    target_idx = resolve_target_columns(table.header, targets)
    feature_idx = [j for j in range(len(table.header)) if j not in set(target_idx)]
    y = table.values[:, target_idx]
    if np.isnan(y).any():
        r, c = np.argwhere(np.isnan(y))[0]
        raise ParseError("empty target cell", row=int(r) + 2, column=table.header[target_idx[c]])
    if kind is TaskKind.MULTILABEL:
        bad = np.argwhere((y != 0) & (y != 1))
        if bad.size:
            r, c = bad[0]
            raise DomainError(
                f"label value {y[r, c]:g} outside {{0, 1}} at row {r + 2}, "
                f"column {table.header[target_idx[c]]!r}"
            )
    x = table.values[:, feature_idx]
    if np.isnan(x).any():
        if not impute:
            r, c = np.argwhere(np.isnan(x))[0]
            raise ParseError(
                "empty feature cell (enable imputation to fill it)",
                row=int(r) + 2,
                column=table.header[feature_idx[c]],
            )
        x = impute_mean(x, impute_rows)
    return Dataset(
        FeatureMatrix(x, tuple(table.header[j] for j in feature_idx)),
        TargetMatrix(y, kind, tuple(table.header[j] for j in target_idx)),
        name,
    )


def load_csv(
    path: str | Path,
    targets: int | Sequence[str],
    kind: TaskKind | str = TaskKind.REGRESSION,
    *,
    impute: bool = False,
    name: str | None = None,
) -> Dataset:
    """Load a numeric CSV into a :class:`Dataset`.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    targets : int or sequence of str
        Either the number of trailing target columns or the target column names.
    kind : TaskKind
        Regression targets or binary labels.
    impute : bool
        Fill empty feature cells with the column mean of this file's rows.
        Without it an empty cell is a :class:`ParseError`.
    """
    path = Path(path)
    return table_to_dataset(
        read_table(path), targets, kind, impute=impute, name=name or path.stem
    )


def _format(value: float) -> str:
    return repr(float(value))


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write features followed by targets; values round-trip exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(dataset.features.columns) + list(dataset.targets.columns))
        for xr, yr in zip(dataset.features.values, dataset.targets.values):
            writer.writerow([_format(v) for v in xr] + [_format(v) for v in yr])


# --------------------------------------------------------------------------
# splitting and sampling


def kfold_split(n: int, k: int, seed: int) -> list[FoldSplit]:
    """Shuffled k-fold partition of ``range(n)``; the first ``n % k`` folds get one extra row."""
    if not 2 <= k <= n:
        raise ValueError(f"k-fold needs 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    splits = []
    for test in np.array_split(perm, k):
        test = np.sort(test)
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        splits.append(FoldSplit(np.flatnonzero(mask), test))
    return splits


def subsample_indices(n: int, fraction: float, seed) -> np.ndarray:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    size = math.ceil(fraction * n)
    return np.random.default_rng(seed).choice(n, size=size, replace=False)


def subsample(dataset: Dataset, fraction: float, seed) -> Dataset:
    return dataset.take(subsample_indices(dataset.n_rows, fraction, seed))


def _unique_names(names: Sequence[str]) -> tuple[str, ...]:
    seen: dict[str, int] = {}
    out = []
    taken = set(names)
    for name in names:
        if name not in seen:
            seen[name] = 1
            out.append(name)
            continue
        i = seen[name]
        candidate = f"{name}.{i}"
        while candidate in taken:
            i += 1
            candidate = f"{name}.{i}"
        seen[name] = i + 1
        taken.add(candidate)
        out.append(candidate)
    return tuple(out)


def concat_features(parts: Sequence[FeatureMatrix]) -> FeatureMatrix:
    """Column-wise concatenation; duplicate column names get ``.1``, ``.2`` suffixes."""
    parts = list(parts)
    if not parts:
        raise ShapeError("nothing to concatenate")
    n = parts[0].n_rows
    for p in parts[1:]:
        if p.n_rows != n:
            raise ShapeError(f"row-count mismatch: {n} vs {p.n_rows}")
    if len(parts) == 1:
        return parts[0]
    values = np.hstack([p.values for p in parts])
    names = _unique_names([c for p in parts for c in p.columns])
    return FeatureMatrix(values, names)


# --------------------------------------------------------------------------
# fold files


def export_folds(folds: Sequence[FoldSplit], directory: str | Path) -> list[Path]:
    """Write one ``fold_XX.txt`` per split holding its test indices, one per line."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, split in enumerate(folds, start=1):
        p = directory / f"fold_{i:02d}.txt"
        p.write_text("".join(f"{int(j)}\n" for j in split.test_indices), encoding="utf-8")
        paths.append(p)
    return paths


def import_folds(directory: str | Path, n: int | None = None) -> list[FoldSplit]:
    """Read fold files written by :func:`export_folds` (or by hand).

    Test sets must be disjoint and, together, cover ``0..n-1``; when ``n``
    is omitted it is taken to be ``max index + 1``.
    """
    directory = Path(directory)
    files = sorted(directory.glob("fold_*.txt"))
    if not files:
        raise DatasetError(f"no fold_*.txt files in {directory}")
    tests = []
    for p in files:
        idx = []
        for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            try:
                idx.append(int(line))
            except ValueError:
                raise ParseError(f"{p.name}: not an integer: {line!r}", row=lineno) from None
            if idx[-1] < 0 or (n is not None and idx[-1] >= n):
                raise ParseError(f"{p.name}: index {idx[-1]} out of range", row=lineno)
        if not idx:
            raise DatasetError(f"{p.name}: empty test set")
        tests.append(np.array(idx, dtype=np.int64))
    allidx = np.concatenate(tests)
    total = int(allidx.max()) + 1 if n is None else n
    counts = np.bincount(allidx, minlength=total)
    if np.any(counts > 1):
        raise DatasetError(f"test sets overlap at index {int(np.argmax(counts > 1))}")
    if np.any(counts == 0):
        raise DatasetError(f"index {int(np.argmin(counts))} is in no test set")
    out = []
    for test in tests:
        mask = np.ones(total, dtype=bool)
        mask[test] = False
        out.append(FoldSplit(np.flatnonzero(mask), np.sort(test)))
    return out
