"""Dataset ingestion, splitting, standardization and cost vectors.

Everything here is a pure function over immutable inputs. Datasets carry
features as a float64 matrix (rows = examples) and labels as integer class
ids in ``[0, n_classes)``.
"""

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._io import atomic_open
from .errors import DataError

__all__ = [
    "Dataset",
    "CostVector",
    "SplitSpec",
    "Standardizer",
    "load_csv",
    "write_csv",
    "split_thirds",
    "write_split_manifest",
    "standardize",
    "make_costs",
    "fingerprint",
]


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: tuple = ()
    label_tokens: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if X.shape[1] < 1:
            raise DataError("dataset needs at least one feature")
        if self.n_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.n_classes}")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain NaN or Inf")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if not self.feature_names:
            names = tuple(f"f{i}" for i in range(X.shape[1]))
            object.__setattr__(self, "feature_names", names)
        if not self.label_tokens:
            object.__setattr__(self, "label_tokens", tuple(str(k) for k in range(self.n_classes)))

    @property
    def n(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.features[rows],
            self.labels[rows],
            self.n_classes,
            self.feature_names,
            self.label_tokens,
            dict(self.meta),
        )

    def with_features(self, features):
        return Dataset(
            features, self.labels, self.n_classes, self.feature_names, self.label_tokens, dict(self.meta)
        )


@dataclass(frozen=True)
class CostVector:
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if c.size == 0:
            raise DataError("empty cost vector")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise DataError("costs must be finite and nonnegative")
        if c.sum() <= 0:
            raise DataError("total cost must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @property
    def total(self):
        return float(self.c.sum())

    @property
    def uniform(self):
        return bool(np.all(self.c == self.c[0]))

    def __len__(self):
        return self.c.size


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    ratios: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise DataError("ratios must be three positive numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"ratios must sum to 1, got {sum(self.ratios)}")


def _resolve_label_column(header, label_column):
    if isinstance(label_column, int):
        idx = label_column
    elif label_column in header:
        idx = header.index(label_column)
    elif isinstance(label_column, str) and label_column.lstrip("-").isdigit():
        idx = int(label_column)
    else:
        raise DataError(f"label column {label_column!r} not found in header {header}")
    if not -len(header) <= idx < len(header):
        raise DataError(f"label column index {label_column!r} out of range for {len(header)} columns")
    return idx % len(header)


def load_csv(path, label_column, classes: Optional[Sequence[str]] = None):
    """Read a comma-separated file with a header row.

    Labels are re-encoded ``0..Y-1`` by order of first appearance unless an
    explicit ``classes`` token order is given. Every other column must parse
    as a real number; empty or malformed cells raise :class:`DataError`
    naming the (1-based, header = row 1) row and the column.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        li = _resolve_label_column(header, label_column)
        feat_cols = [j for j in range(len(header)) if j != li]
        rows, tokens = [], []
        for r, rec in enumerate(reader, start=2):
            if not rec or all(not s.strip() for s in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {r} has {len(rec)} cells, expected {len(header)}")
            vals = []
            for j in feat_cols:
                cell = rec[j].strip()
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {r}, column {header[j]!r}: cannot parse {cell!r} as a number"
                    ) from None
            tok = rec[li].strip()
            if not tok:
                raise DataError(f"{path}: row {r}, column {header[li]!r}: empty label")
            rows.append(vals)
            tokens.append(tok)

    if classes is None:
        order = list(dict.fromkeys(tokens))
    else:
        order = [str(t) for t in classes]
        unknown = sorted(set(tokens) - set(order))
        if unknown:
            raise DataError(f"{path}: labels {unknown} not in the given class list")
    if len(order) < 2:
        raise DataError(f"{path}: need at least 2 distinct labels, found {len(order)}")
    code = {t: k for k, t in enumerate(order)}
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_cols))
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        raise DataError(f"{path}: row {bad[0] + 2}, column {header[feat_cols[bad[1]]]!r}: non-finite value")
    y = np.array([code[t] for t in tokens], dtype=np.int64)
    return Dataset(
        X,
        y,
        len(order),
        tuple(header[j] for j in feat_cols),
        tuple(order),
        {"source": str(path), "label_column": header[li], "label_mapping": dict(code)},
    )


def write_csv(d: Dataset, path, label_name="label"):
    """Write ``d`` so that ``load_csv(path, label_name, d.label_tokens)`` restores it exactly."""
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(d.feature_names) + [label_name])
        for x, y in zip(d.features, d.labels):
            w.writerow([repr(float(v)) for v in x] + [d.label_tokens[y]])


def split_thirds(d: Dataset, spec: SplitSpec = SplitSpec()):
    """Seeded shuffle then contiguous partition; remainder rows go to the last split."""
    ell = len(d)
    perm = np.random.default_rng(spec.seed).permutation(ell)
    n0 = int(np.floor(ell * spec.ratios[0]))
    n1 = int(np.floor(ell * spec.ratios[1]))
    parts = (perm[:n0], perm[n0 : n0 + n1], perm[n0 + n1 :])
    if any(len(p) == 0 for p in parts):
        raise DataError(f"cannot split {ell} rows with ratios {spec.ratios}: a split would be empty")
    out = []
    for name, rows in zip(("train", "valid", "test"), parts):
        s = d.subset(rows)
        s.meta["split"] = name
        s.meta["rows"] = rows
        out.append(s)
    return tuple(out)


def write_split_manifest(splits, path):
    with atomic_open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "row_index"])
        for s in splits:
            for r in s.meta["rows"]:
                w.writerow([s.meta["split"], int(r)])


@dataclass(frozen=True)
class Standardizer:
    """Per-feature train mean/std (population formula); zero-std features map to 0."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.size:
            raise DataError(f"expected {self.mean.size} features, got {X.shape[-1]}")
        live = self.std > 0
        out = np.zeros_like(X)
        out[..., live] = (X[..., live] - self.mean[live]) / self.std[live]
        return out

    def save(self, path):
        with atomic_open(path, "w") as fh:
            fh.write("feature_index,mean,std\n")
            for i, (m, s) in enumerate(zip(self.mean, self.std)):
                fh.write(f"{i},{float(m)!r},{float(s)!r}\n")

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["feature_index"]))
        return cls(np.array([float(r["mean"]) for r in rows]), np.array([float(r["std"]) for r in rows]))


def standardize(train: Dataset, others=()):
    """Z-score every split with the train split's statistics.

    Returns ``(train', [others'], record)``.
    """
    if len(train) == 0:
        raise DataError("cannot standardize with an empty train split")
    X = train.features
    std = X.std(axis=0)
    # constant columns can come out with a roundoff-sized std; pin them to exactly 0
    std[np.ptp(X, axis=0) == 0] = 0.0
    rec = Standardizer(X.mean(axis=0), std)
    return (
        train.with_features(rec.apply(train.features)),
        [o.with_features(rec.apply(o.features)) for o in others],
        rec,
    )


def make_costs(kind, n: int):
    """Build a cost vector.

    ``kind`` is ``"uniform"`` (all ones), ``"linear"`` (``c_i = (i+1)/n``,
    zero-based ``i``) or ``"file:PATH"`` / ``("file", PATH)`` for one
    nonnegative real per line.
    """
    if n < 1:
        raise DataError(f"feature count must be positive, got {n}")
    if isinstance(kind, tuple):
        kind, path = kind
    elif isinstance(kind, str) and kind.startswith("file:"):
        kind, path = "file", kind[len("file:") :]
    else:
        path = None
    if kind == "uniform":
        return CostVector(np.ones(n))
    if kind == "linear":
        return CostVector(np.arange(1, n + 1, dtype=np.float64) / n)
    if kind == "file":
        try:
            lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        except OSError as e:
            raise DataError(f"cannot read cost file {path}: {e}") from None
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        try:
            c = np.array([float(v) for v in lines])
        except ValueError as e:
            raise DataError(f"cost file {path}: {e}") from None
        if c.size != n:
            raise DataError(f"cost file {path} holds {c.size} costs, dataset has {n} features")
        if np.any(c < 0):
            i = int(np.argmax(c < 0))
            raise DataError(f"cost file {path}: negative cost {c[i]} at line {i + 1}")
        return CostVector(c)
    raise DataError(f"unknown cost kind {kind!r}")


def fingerprint(d: Dataset):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(d.features).tobytes())
    h.update(np.ascontiguousarray(d.labels).tobytes())
    return {"rows": len(d), "cols": d.n, "classes": d.n_classes, "sha256": h.hexdigest()}
