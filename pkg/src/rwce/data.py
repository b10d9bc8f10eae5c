"""Synthetic Gaussian-mixture benchmark, CSV ingestion and partition handling.

Labels are 0-based in memory and 1-based in CSV files.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .scores import ConfigError

SPLITS = ("train", "val", "cal", "test")


class ParseError(ValueError):
    pass


@dataclass
class Partition:
    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class SplitDataset:
    train: Partition
    val: Partition
    cal: Partition
    test: Partition
    n_classes: int
    provenance: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.train.X.shape[1]

    def part(self, name: str) -> Partition:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def parts(self):
        return [(name, getattr(self, name)) for name in SPLITS]


@dataclass
class SyntheticSpec:
    """Isotropic Gaussian classes with means spread on a sphere of radius ``separation``."""

    seed: int
    n_classes: int = 10
    n_features: int = 32
    separation: float = 2.4
    noise: float = 1.0
    n_train: int = 8000
    n_val: int = 1000
    n_cal: int = 1000
    n_test: int = 2000

    def __post_init__(self):
        if not (self.separation > 0 and self.noise > 0):
            raise ConfigError("separation and noise must be positive")
        if min(self.n_train, self.n_val, self.n_cal, self.n_test) < 0:
            raise ConfigError("partition sizes must be non-negative")
        if self.n_classes < 2 or self.n_features < 1:
            raise ConfigError("need at least 2 classes and 1 feature")

    @property
    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "cal": self.n_cal, "test": self.n_test}

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        known = {f.name for f in fields(cls)}
        if "seed" not in d:
            raise ConfigError("config: missing field seed")
        extra = set(d) - known
        if extra:
            raise ConfigError(f"config: unknown fields {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def class_means(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    m = rng.normal(size=(spec.n_classes, spec.n_features))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return spec.separation * m


def generate_synthetic(spec: SyntheticSpec) -> SplitDataset:
    """One exchangeable i.i.d. stream, cut into consecutive partitions."""
    means = class_means(spec)
    rng = np.random.default_rng([spec.seed, 1])
    total = sum(spec.counts.values())
    y = rng.integers(spec.n_classes, size=total)
    X = means[y] + spec.noise * rng.normal(size=(total, spec.n_features))
    ids = np.arange(total)
    parts, start = {}, 0
    for name in SPLITS:
        stop = start + spec.counts[name]
        parts[name] = Partition(ids[start:stop], X[start:stop], y[start:stop])
        start = stop
    return SplitDataset(**parts, n_classes=spec.n_classes,
                        provenance={"synthetic": spec.to_dict()})


def standardize(data: SplitDataset) -> SplitDataset:
    """Z-score every partition with the training split's per-feature statistics."""
    mu = data.train.X.mean(axis=0)
    sd = data.train.X.std(axis=0)
    sd[sd == 0] = 1.0
    out = {name: replace(p, X=(p.X - mu) / sd) for name, p in data.parts()}
    return SplitDataset(**out, n_classes=data.n_classes, provenance=dict(data.provenance, standardized=True))


def export_csv(data: SplitDataset, path: str | Path) -> None:
    d = data.n_features
    rows = []
    for name, p in data.parts():
        for i in range(len(p)):
            rows.append((int(p.ids[i]), name, p.X[i], int(p.y[i])))
    rows.sort(key=lambda r: r[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"f{j}" for j in range(d)] + ["label", "split"])
        for rid, name, x, label in rows:
            w.writerow([rid] + [repr(float(v)) for v in x] + [label + 1, name])


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_csv(
    path: str | Path,
    n_classes: int,
    fractions: dict[str, float] | None = None,
    split_seed: int = 0,
    standardize_features: bool = False,
) -> SplitDataset:
    """Read a dataset CSV.

    The header must name feature columns ``f0..f{d-1}`` and a ``label`` column
    holding 1-based classes; ``id`` and ``split`` columns are optional. Without
    a split column the rows are shuffled with ``split_seed`` and cut by
    ``fractions`` (train/val/cal/test, summing to 1).
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        feat_cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        feat_cols.sort(key=lambda i: int(header[i][1:]))
        if "label" not in header or not feat_cols:
            raise ParseError(f"{path}:1: header needs f0.. feature columns and a label column")
        li = header.index("label")
        si = header.index("split") if "split" in header else None
        ii = header.index("id") if "id" in header else None
        X, y, split, ids = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                X.append([float(row[i]) for i in feat_cols])
                label = int(row[li])
                ids.append(int(row[ii]) if ii is not None else lineno - 2)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not 1 <= label <= n_classes:
                raise ConfigError(f"{path}:{lineno}: label {label} outside 1..{n_classes}")
            y.append(label - 1)
            if si is not None:
                if row[si] not in SPLITS:
                    raise ParseError(f"{path}:{lineno}: unknown split {row[si]!r}")
                split.append(row[si])
    X = np.asarray(X, dtype=float).reshape(len(y), len(feat_cols))
    y = np.asarray(y, dtype=int)
    ids = np.asarray(ids, dtype=int)
    if si is None:
        fractions = fractions or {"train": 0.7, "val": 0.1, "cal": 0.1, "test": 0.1}
        perm = np.random.default_rng(split_seed).permutation(len(y))
        cuts = np.floor(np.cumsum([fractions[s] for s in SPLITS]) * len(y) + 1e-9).astype(int)
        cuts[-1] = len(y)
        split = np.empty(len(y), dtype=object)
        start = 0
        for name, stop in zip(SPLITS, cuts):
            split[perm[start:stop]] = name
            start = stop
    split = np.asarray(split, dtype=object)
    parts = {name: Partition(ids[split == name], X[split == name], y[split == name]) for name in SPLITS}
    data = SplitDataset(**parts, n_classes=n_classes,
                        provenance={"source": str(path), "sha256": file_hash(path)})
    return standardize(data) if standardize_features else data


def resplit(data: SplitDataset, cal_fraction: float, test_fraction: float, seed: int) -> SplitDataset:
    """Reshuffle the pooled calibration and test examples into fresh partitions.

    Fractions are of the pool; train and val are untouched. Any leftover
    (``1 - cal_fraction - test_fraction``) is dropped.
    """
    if not (0 < cal_fraction < 1 and 0 < test_fraction < 1) or cal_fraction + test_fraction > 1 + 1e-12:
        raise ConfigError("fractions must lie in (0, 1) and sum to at most 1")
    ids = np.concatenate([data.cal.ids, data.test.ids])
    if ids.size == 0:
        raise ConfigError("calibration/test pool is empty")
    X = np.concatenate([data.cal.X, data.test.X])
    y = np.concatenate([data.cal.y, data.test.y])
    # sort by id first so the result does not depend on the current cal/test cut
    base = np.argsort(ids, kind="stable")
    perm = base[np.random.default_rng(seed).permutation(len(ids))]
    n_cal = int(round(cal_fraction * len(ids)))
    n_test = int(round(test_fraction * len(ids)))
    c, t = perm[:n_cal], perm[n_cal:n_cal + n_test]
    return SplitDataset(data.train, data.val, Partition(ids[c], X[c], y[c]), Partition(ids[t], X[t], y[t]),
                        data.n_classes, dict(data.provenance, resplit_seed=seed))
