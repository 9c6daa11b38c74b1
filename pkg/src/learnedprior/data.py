"""Synthetic transfer tasks, CSV ingestion and dataset splitting."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class CsvFormatError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason


class MissingHeaderError(CsvFormatError):
    pass


class RaggedRowError(CsvFormatError):
    pass


class NonNumericCellError(CsvFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("features must be a non-empty n x d array")
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (x.shape[0],):
                raise ValueError(f"expected {x.shape[0]} labels, got {y.shape}")
            if y.size and (not np.all(y == np.round(y)) or y.min() < 0):
                raise ValueError("labels must be non-negative integers")
            object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], None if self.labels is None else self.labels[idx],
                       self.name if name is None else name)


@dataclass(frozen=True)
class TransferSpec:
    """Parametric source/target pair.

    Class clusters have means on the unit sphere.  The target distribution is
    the source distribution rotated by ``shift`` radians in a fixed plane and
    translated by ``translation * shift`` along a fixed unit vector; the
    shifted test set uses ``shift + shifted_increment``.
    """

    dim: int = 10
    source_classes: int = 10
    target_classes: int = 10
    cluster_sd: float = 0.3
    shift: float = 0.5
    source_seed: int = 0
    target_seed: int = 1
    clusters_per_class: int = 1
    translation: float = 0.5
    shifted_increment: float = 0.5
    n_source: int = 2000
    n_target_train: int = 100
    n_val: int = 200
    n_test: int = 1000
    n_shifted_test: int = 1000

    def __post_init__(self):
        if self.source_classes < 1 or self.target_classes < 1:
            raise ValueError("class counts must be at least 1")
        if self.target_classes > self.source_classes:
            raise ValueError("target classes must be a subset of the source classes")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if self.cluster_sd < 0 or self.clusters_per_class < 1:
            raise ValueError("cluster_sd >= 0 and clusters_per_class >= 1 required")
        for f in ("n_source", "n_target_train", "n_val", "n_test", "n_shifted_test"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be at least 1")


class _Geometry:
    """Cluster means and the shift transform, all drawn from the source seed."""

    def __init__(self, spec: TransferSpec):
        rng = np.random.default_rng(np.random.SeedSequence([spec.source_seed, 7]))
        k = spec.source_classes * spec.clusters_per_class
        m = rng.standard_normal((k, spec.dim))
        self.means = m / np.linalg.norm(m, axis=1, keepdims=True)
        # cluster c belongs to class c % source_classes
        self.cluster_class = np.arange(k) % spec.source_classes
        q, _ = np.linalg.qr(rng.standard_normal((spec.dim, 3)))
        self.plane = q[:, :2]
        self.direction = q[:, 2]
        self.spec = spec

    def transform(self, x: np.ndarray, shift: float) -> np.ndarray:
        if shift == 0:
            return x.copy()
        c, s = math.cos(shift), math.sin(shift)
        p = self.plane
        coords = x @ p
        rot = coords @ np.array([[c, s], [-s, c]])
        return x + (rot - coords) @ p.T + self.spec.translation * shift * self.direction

    def draw(self, n: int, classes: int, rng: np.random.Generator, shift: float):
        clusters = np.flatnonzero(self.cluster_class < classes)
        pick = clusters[rng.integers(0, len(clusters), size=n)]
        x = self.means[pick] + self.spec.cluster_sd * rng.standard_normal((n, self.spec.dim))
        return self.transform(x, shift), self.cluster_class[pick]


def class_means(spec: TransferSpec, shift: float = 0.0) -> np.ndarray:
    """Per-cluster means (rows) after applying ``shift``."""
    g = _Geometry(spec)
    return g.transform(g.means, shift)


def make_transfer_pair(spec: TransferSpec):
    """``(source, target_train, target_val, target_test, target_shifted_test)``."""
    g = _Geometry(spec)
    src_rng = np.random.default_rng(np.random.SeedSequence([spec.source_seed, 11]))
    xs, ys = g.draw(spec.n_source, spec.source_classes, src_rng, 0.0)
    out = [Dataset(xs, ys, "source")]
    tgt = [("target_train", spec.n_target_train, spec.shift),
           ("target_val", spec.n_val, spec.shift),
           ("target_test", spec.n_test, spec.shift),
           ("target_shifted_test", spec.n_shifted_test, spec.shift + spec.shifted_increment)]
    for i, (name, n, shift) in enumerate(tgt):
        rng = np.random.default_rng(np.random.SeedSequence([spec.target_seed, 100 + i]))
        x, y = g.draw(n, spec.target_classes, rng, shift)
        out.append(Dataset(x, y, name))
    return tuple(out)


def split(ds: Dataset, fractions: Sequence[float], seed: int):
    """Disjoint shuffled splits of sizes ``floor(f * n)``.

    The permutation depends only on ``seed`` and ``len(ds)``, so splitting
    with shrinking leading fractions gives nested subsets.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ValueError(f"fractions must be positive and sum to at most 1, got {fractions}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    out, start = [], 0
    for i, f in enumerate(fractions):
        size = int(math.floor(f * n + 1e-9))
        if size == 0:
            raise ValueError(f"split {i} (fraction {f}) is empty for n={n}")
        out.append(ds.subset(perm[start:start + size], f"{ds.name}[{i}]"))
        start += size
    return tuple(out)


def load_csv(path, has_labels: bool | None = None, name: str | None = None) -> Dataset:
    """Read ``f0,...,f{d-1}[,y]`` with a header row.

    ``has_labels=None`` infers the label column from the header.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise MissingHeaderError(path, 1, "empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    if has_labels is None:
        has_labels = bool(header) and header[-1] == "y"
    n_feat = len(header) - (1 if has_labels else 0)
    expected = [f"f{i}" for i in range(n_feat)] + (["y"] if has_labels else [])
    if n_feat < 1 or header != expected:
        raise MissingHeaderError(path, 1, f"expected header {','.join(expected) or 'f0,...'}"
                                 f", got {','.join(header)}")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise RaggedRowError(path, lineno, f"expected {len(header)} cells, got {len(row)}")
        try:
            vals = [float(c) for c in row[:n_feat]]
        except ValueError:
            bad = next(c for c in row[:n_feat] if not _is_float(c))
            raise NonNumericCellError(path, lineno, f"non-numeric cell {bad!r}") from None
        feats.append(vals)
        if has_labels:
            try:
                labels.append(int(row[-1]))
            except ValueError:
                raise NonNumericCellError(path, lineno, f"non-integer label {row[-1]!r}") from None
    if not feats:
        raise CsvFormatError(path, len(rows) + 1, "no data rows")
    return Dataset(np.array(feats), np.array(labels) if has_labels else None,
                   name or os.path.splitext(os.path.basename(str(path)))[0])


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def save_csv(ds: Dataset, path) -> None:
    """Write a dataset so that :func:`load_csv` restores it bit-exactly."""
    d = ds.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + (["y"] if ds.labels is not None else []))
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)
