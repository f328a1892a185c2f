"""Feature/label/explanation triples: containers, CSV ingestion, transforms and splits.

Labels and explanations are stored by space kind:

* ``categorical``       -> 1-D ``int64`` array of class indices in ``[0, n)``
* ``continuous-scalar`` -> 1-D ``float64`` array
* ``continuous-vector`` -> 2-D ``float64`` array of shape ``(rows, d)``
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

CATEGORICAL = "categorical"
SCALAR = "continuous-scalar"
VECTOR = "continuous-vector"
SPACE_KINDS = (CATEGORICAL, SCALAR, VECTOR)

ROLES = ("feature", "label", "explanation", "id", "ignore")


class DataError(ValueError):
    """Malformed input data. ``row``/``column`` locate the offending cell when known."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class SpaceDescriptor:
    kind: str
    size: int = 1
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in SPACE_KINDS:
            raise ValueError(f"unknown space kind {self.kind!r}")
        if self.kind == SCALAR and self.size != 1:
            raise ValueError("continuous-scalar space has size 1")
        if self.kind == VECTOR and self.size < 1:
            raise ValueError("continuous-vector dimension must be >= 1")
        if self.kind == CATEGORICAL and self.size < 2:
            raise ValueError("categorical cardinality must be >= 2")
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def categorical(cls, n, names=None):
        return cls(CATEGORICAL, n, names)

    @classmethod
    def scalar(cls, name=None):
        return cls(SCALAR, 1, None if name is None else (name,))

    @classmethod
    def vector(cls, d, names=None):
        return cls(VECTOR, d, names)

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def n_columns(self) -> int:
        """Number of CSV/matrix columns this space occupies."""
        return self.size if self.kind == VECTOR else 1

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "size": self.size}
        if self.names is not None:
            out["names"] = list(self.names)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "SpaceDescriptor":
        names = d.get("names")
        return cls(d["kind"], int(d.get("size", 1)), tuple(names) if names is not None else None)

    def __str__(self):
        if self.kind == SCALAR:
            return self.kind
        return f"{self.kind}({self.size})"


def _coerce_payload(values, space: SpaceDescriptor, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if space.kind == CATEGORICAL:
        arr = arr.reshape(-1)
        if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DataError(f"{what}: categorical values must be integers")
        arr = arr.astype(np.int64)
        bad = np.flatnonzero((arr < 0) | (arr >= space.size))
        if bad.size:
            raise DataError(f"{what}: categorical value {arr[bad[0]]} outside [0, {space.size})", row=int(bad[0]))
        return arr
    arr = arr.astype(np.float64)
    if space.kind == SCALAR:
        return arr.reshape(-1)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.shape[1] != space.size:
        raise DataError(f"{what}: expected {space.size} columns, got {arr.shape[1]}")
    return arr


def payload_matrix(values: np.ndarray) -> np.ndarray:
    """View a label/explanation payload as a 2-D float matrix (one row per instance)."""
    arr = np.asarray(values, dtype=np.float64)
    return arr.reshape(len(arr), -1)


@dataclass(frozen=True, eq=False)
class TripleDataset:
    """Aligned (X, Y, E) triples. Arrays are made read-only on construction."""

    features: np.ndarray
    labels: np.ndarray
    explanations: np.ndarray
    y_space: SpaceDescriptor
    e_space: SpaceDescriptor
    ids: np.ndarray = None
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        n = X.shape[0]
        Y = _coerce_payload(self.labels, self.y_space, "labels")
        E = _coerce_payload(self.explanations, self.e_space, "explanations")
        if len(Y) != n or len(E) != n:
            raise DataError(f"row counts differ: features {n}, labels {len(Y)}, explanations {len(E)}")
        for name, arr in (("features", X), ("labels", Y), ("explanations", E)):
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                row = int(np.flatnonzero(~np.isfinite(arr.reshape(n, -1)).all(axis=1))[0])
                raise DataError(f"{name}: non-finite value", row=row)
        ids = np.arange(n).astype(str) if self.ids is None else np.asarray(self.ids).astype(str)
        if len(ids) != n:
            raise DataError("ids length differs from row count")
        for arr in (X, Y, E, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", Y)
        object.__setattr__(self, "explanations", E)
        object.__setattr__(self, "ids", ids)
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def x_space(self) -> SpaceDescriptor:
        return SpaceDescriptor.vector(self.n_features, self.feature_names)

    def subset(self, rows) -> "TripleDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return self.replace(
            features=self.features[rows],
            labels=self.labels[rows],
            explanations=self.explanations[rows],
            ids=self.ids[rows],
        )

    def replace(self, **changes) -> "TripleDataset":
        fields = dict(
            features=self.features,
            labels=self.labels,
            explanations=self.explanations,
            y_space=self.y_space,
            e_space=self.e_space,
            ids=self.ids,
            feature_names=self.feature_names,
        )
        fields.update(changes)
        return TripleDataset(**fields)

    def joint_labels(self) -> np.ndarray:
        """Cartesian-product class per row (categorical Y and E only)."""
        if not (self.y_space.is_categorical and self.e_space.is_categorical):
            raise ValueError("joint labels need categorical labels and explanations")
        return cartesian_encode(self.labels, self.explanations, self.y_space.size, self.e_space.size)


# --------------------------------------------------------------------------- CSV


@dataclass(frozen=True)
class TripleSchema:
    """Column-role map plus space declarations for the label and explanation columns."""

    columns: Mapping[str, str]
    y_space: SpaceDescriptor | None = None
    e_space: SpaceDescriptor | None = None

    def __post_init__(self):
        for name, role in self.columns.items():
            if role not in ROLES:
                raise DataError(f"unknown role {role!r}", column=name)
        for role in ("feature", "label", "explanation"):
            if role not in self.columns.values():
                raise DataError(f"schema has no {role} column")
        if list(self.columns.values()).count("id") > 1:
            raise DataError("schema has more than one id column")

    def names(self, role: str) -> list[str]:
        return [c for c, r in self.columns.items() if r == role]

    def to_dict(self) -> dict:
        out = {"columns": dict(self.columns)}
        if self.y_space is not None:
            out["label_space"] = self.y_space.to_dict()
        if self.e_space is not None:
            out["explanation_space"] = self.e_space.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "TripleSchema":
        def space(key):
            return SpaceDescriptor.from_dict(d[key]) if d.get(key) is not None else None

        return cls(dict(d["columns"]), space("label_space"), space("explanation_space"))

    @classmethod
    def load(cls, path) -> "TripleSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def schema_path_for(csv_path) -> str:
    """Conventional sidecar location: ``data.csv`` -> ``data.schema.json``."""
    root, _ = os.path.splitext(os.fspath(csv_path))
    return root + ".schema.json"


def _infer_space(declared, n_cols, role):
    if declared is not None:
        if declared.n_columns != n_cols:
            raise DataError(f"{role} space {declared} needs {declared.n_columns} columns, schema has {n_cols}")
        return declared
    return SpaceDescriptor.scalar() if n_cols == 1 else SpaceDescriptor.vector(n_cols)


def load_csv_triples(path, schema: TripleSchema | Mapping | str | None = None) -> TripleDataset:
    """Read a comma-separated file with a header row into a :class:`TripleDataset`.

    ``schema`` may be a :class:`TripleSchema`, its dict form, a path to a JSON
    sidecar, or ``None`` to use the sidecar next to ``path``.
    """
    if schema is None:
        schema = schema_path_for(path)
    if isinstance(schema, (str, os.PathLike)):
        schema = TripleSchema.load(schema)
    elif not isinstance(schema, TripleSchema):
        schema = TripleSchema.from_dict(schema)
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file, header row required") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    missing = [c for c in header if c not in schema.columns]
    if missing:
        raise DataError("column has no role in schema", column=missing[0])
    absent = [c for c in schema.columns if c not in header]
    if absent:
        raise DataError("schema column missing from file", column=absent[0])

    pos = {name: i for i, name in enumerate(header)}
    feat_cols = schema.names("feature")
    label_cols = schema.names("label")
    expl_cols = schema.names("explanation")
    id_cols = schema.names("id")
    y_space = _infer_space(schema.y_space, len(label_cols), "label")
    e_space = _infer_space(schema.e_space, len(expl_cols), "explanation")

    numeric = feat_cols + label_cols + expl_cols
    data = np.empty((len(rows), len(numeric)), dtype=np.float64)
    ids = []
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(row)}", row=r)
        for j, col in enumerate(numeric):
            cell = row[pos[col]].strip()
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell {cell!r}", row=r, column=col) from None
            if not math.isfinite(value):
                raise DataError(f"non-finite cell {cell!r}", row=r, column=col)
            data[r - 1, j] = value
        if id_cols:
            ids.append(row[pos[id_cols[0]]])

    nf, nl = len(feat_cols), len(label_cols)
    X = data[:, :nf]
    Y = data[:, nf : nf + nl]
    E = data[:, nf + nl :]
    for values, space, cols in ((Y, y_space, label_cols), (E, e_space, expl_cols)):
        if space.is_categorical:
            col = values[:, 0]
            bad = np.flatnonzero((col != np.round(col)) | (col < 0) | (col >= space.size))
            if bad.size:
                raise DataError(
                    f"categorical value {col[bad[0]]:g} outside [0, {space.size})", row=int(bad[0]) + 1, column=cols[0]
                )

    def squeeze(values, space):
        return values[:, 0] if space.n_columns == 1 and space.kind != VECTOR else values

    return TripleDataset(
        features=X,
        labels=squeeze(Y, y_space),
        explanations=squeeze(E, e_space),
        y_space=y_space,
        e_space=e_space,
        ids=ids if id_cols else None,
        feature_names=feat_cols,
    )


def _fmt(v) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v))


def write_csv_triples(ds: TripleDataset, path, label_names=None, explanation_names=None, schema_path=None) -> TripleSchema:
    """Write ``ds`` as CSV plus a JSON schema sidecar; returns the schema written.

    Output is byte-stable for a given dataset (``\\n`` line endings, shortest
    round-trip float repr).
    """
    feat = list(ds.feature_names or [f"f{i}" for i in range(ds.n_features)])

    def payload_names(space, given, stem):
        if given is not None:
            return list(given)
        if space.kind == VECTOR:
            return list(space.names) if space.names else [f"{stem}{i}" for i in range(space.size)]
        return [stem]

    lab = payload_names(ds.y_space, label_names, "y")
    exp = payload_names(ds.e_space, explanation_names, "e")
    columns = {"id": "id"}
    columns.update({c: "feature" for c in feat})
    columns.update({c: "label" for c in lab})
    columns.update({c: "explanation" for c in exp})
    if len(columns) != 1 + len(feat) + len(lab) + len(exp):
        raise DataError("duplicate column names")
    schema = TripleSchema(columns, ds.y_space, ds.e_space)

    Y = payload_matrix(ds.labels)
    E = payload_matrix(ds.explanations)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(columns))
        for i in range(len(ds)):
            writer.writerow(
                [ds.ids[i]]
                + [_fmt(v) for v in ds.features[i]]
                + [_fmt(v) for v in Y[i]]
                + [_fmt(v) for v in E[i]]
            )
    schema.save(schema_path or schema_path_for(path))
    return schema


# --------------------------------------------------------------------- transforms


def transform_log_offset(ds: TripleDataset, offset: float = 100.0) -> TripleDataset:
    """Replace every feature ``x`` by ``log10(offset + x)``."""
    X = ds.features
    bad = np.argwhere(X <= -offset)
    if bad.size:
        r, c = bad[0]
        raise DataError(f"feature value {X[r, c]:g} <= -{offset:g}, log undefined", row=int(r), column=int(c))
    return ds.replace(features=np.log10(offset + X))


@dataclass(frozen=True, eq=False)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (X - self.mean) / safe, 0.0)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardization":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    def __eq__(self, other):
        return (
            isinstance(other, Standardization)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
        )


def standardize(ds: TripleDataset, stats: Standardization | None = None) -> tuple[TripleDataset, Standardization]:
    """Zero-mean/unit-variance features (population std).

    Pass the training ``stats`` when transforming validation or test rows.
    Constant columns map to zero.
    """
    if stats is None:
        stats = Standardization(ds.features.mean(axis=0), ds.features.std(axis=0))
    elif stats.mean.shape != (ds.n_features,):
        raise DataError(f"stats cover {stats.mean.shape[0]} columns, dataset has {ds.n_features}")
    return ds.replace(features=stats.apply(ds.features)), stats


# -------------------------------------------------------------------------- split


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.fractions}")
        object.__setattr__(self, "fractions", fr)

    def sizes(self, n: int) -> tuple[int, int, int]:
        """floor(fraction * n) rows for validation and test; the remainder goes to train."""
        n_val = math.floor(self.fractions[1] * n + 1e-9)
        n_test = math.floor(self.fractions[2] * n + 1e-9)
        return n - n_val - n_test, n_val, n_test


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_train, n_val, n_test = spec.sizes(n)
    for frac, size, name in zip(spec.fractions, (n_train, n_val, n_test), ("train", "validation", "test")):
        if frac > 0 and size == 0:
            warnings.warn(f"{name} fraction {frac} of {n} rows rounds to an empty partition", stacklevel=3)
    perm = np.random.default_rng(spec.seed).permutation(n)
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test : n_test + n_val])
    train = np.sort(perm[n_test + n_val :])
    return train, val, test


def split(ds: TripleDataset, spec: SplitSpec) -> tuple[TripleDataset, TripleDataset, TripleDataset]:
    """Seeded disjoint train/validation/test partition; row order is kept within each part."""
    return tuple(ds.subset(idx) for idx in split_indices(len(ds), spec))


# ------------------------------------------------------------------- discretizing


@dataclass(frozen=True)
class Discretizer:
    """Maps reals to {-1, 0, 1}; thresholds themselves fall in the middle bin."""

    low: float
    high: float

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise ValueError("thresholds must be finite")
        if self.low > self.high:
            raise ValueError(f"low threshold {self.low} exceeds high threshold {self.high}")

    def __call__(self, values) -> np.ndarray:
        return discretize(values, self)

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, d) -> "Discretizer":
        return cls(float(d["low"]), float(d["high"]))


def discretize(values, d: Discretizer) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return (v > d.high).astype(np.int64) - (v < d.low).astype(np.int64)


def quantile_thresholds(values) -> Discretizer:
    """Tercile thresholds (linear interpolation between order statistics)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 3:
        raise ValueError(f"need at least 3 values for tercile thresholds, got {v.size}")
    low, high = np.quantile(v, [1.0 / 3.0, 2.0 / 3.0])
    if low == high:
        warnings.warn("degenerate tercile thresholds (heavily tied values)", stacklevel=2)
    return Discretizer(float(low), float(high))


# ---------------------------------------------------------------------- cartesian


def _check_range(v, n, what):
    v = np.asarray(v)
    if np.any((v < 0) | (v >= n)):
        raise ValueError(f"{what} out of range [0, {n})")
    return v


def cartesian_encode(y, e, ny: int, ne: int):
    """Joint class ``y * ne + e``; works on scalars and arrays."""
    y = _check_range(y, ny, "label")
    e = _check_range(e, ne, "explanation")
    out = y.astype(np.int64) * ne + e.astype(np.int64)
    return int(out) if out.ndim == 0 else out


def cartesian_decode(c, ny: int, ne: int):
    c = _check_range(c, ny * ne, "joint class").astype(np.int64)
    y, e = np.divmod(c, ne)
    if c.ndim == 0:
        return int(y), int(e)
    return y, e
