"""Labeled datasets for participants and the server's held-out test set.

Synthetic Gaussian blobs, CSV ingestion, sharding across participants and the
input strategies a participant may apply to its true data before training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ParameterError

__all__ = [
    "LabeledDataset",
    "InputStrategy",
    "generate_synthetic",
    "load_csv",
    "partition",
    "apply_strategy",
]


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
        y = np.asarray(self.labels).reshape(-1)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ParameterError("labels must be integer class ids")
        y = y.astype(np.int64)
        if X.ndim != 2:
            raise ParameterError(f"features must be 2-d, got {X.ndim}-d")
        if X.shape[0] != y.shape[0]:
            raise ParameterError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if self.n_classes < 2:
            raise ParameterError("n_classes must be at least 2")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ParameterError(f"labels must lie in 0..{self.n_classes - 1}")
        if not np.all(np.isfinite(X)):
            raise ParameterError("features contain NaN or Inf")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes, name or self.name)

    def empty(self):
        return LabeledDataset(np.zeros((0, self.n_features)), np.zeros(0, dtype=np.int64), self.n_classes, self.name)


_KINDS = ("truthful", "noise", "removal", "labelflip", "quit")


@dataclass(frozen=True)
class InputStrategy:
    """How a participant transforms its true data before local training.

    ``degree`` is the false degree in [0, 1]: the noise scale relative to each
    feature's standard deviation, the fraction of rows removed, or the
    fraction of labels flipped. It is ignored for ``truthful`` and ``quit``.
    """

    kind: str = "truthful"
    degree: float = 0.0
    _label: str = field(default="", repr=False, compare=False)

    def __post_init__(self):
        kind = self.kind.lower().replace("_", "").replace("-", "")
        if kind not in _KINDS:
            raise ParameterError(f"unknown strategy kind {self.kind!r}; expected one of {_KINDS}")
        if not 0.0 <= float(self.degree) <= 1.0:
            raise ParameterError(f"strategy degree must be in [0, 1], got {self.degree}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "degree", float(self.degree))

    @classmethod
    def truthful(cls):
        return cls("truthful")

    @classmethod
    def noise(cls, degree):
        return cls("noise", degree)

    @classmethod
    def removal(cls, degree):
        return cls("removal", degree)

    @classmethod
    def label_flip(cls, degree):
        return cls("labelflip", degree)

    @classmethod
    def quit(cls):
        return cls("quit")

    @classmethod
    def parse(cls, text):
        """Parse ``"kind"`` or ``"kind:degree"``, e.g. ``"labelflip:0.5"``."""
        kind, _, deg = text.strip().partition(":")
        try:
            return cls(kind, float(deg) if deg else 0.0)
        except ValueError as exc:
            raise ParameterError(f"bad strategy {text!r}: {exc}") from None

    @property
    def is_identity(self):
        return self.kind == "truthful" or (self.kind in ("noise", "removal", "labelflip") and self.degree == 0.0)

    def __str__(self):
        if self.kind in ("truthful", "quit"):
            return self.kind
        return f"{self.kind}:{self.degree:g}"


def generate_synthetic(n_samples, n_features, n_classes, class_separation=3.0, seed=0, name="synthetic"):
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class means sit at pairwise distance ``class_separation`` (scaled one-hot
    directions when ``n_classes <= n_features``, random unit directions
    otherwise). Labels are balanced to within one sample.
    """
    if n_classes < 2 or n_samples < n_classes or n_features < 1:
        raise ParameterError(
            f"need n_samples >= n_classes >= 2 and n_features >= 1 "
            f"(got {n_samples}, {n_classes}, {n_features})"
        )
    rng = np.random.default_rng(seed)
    if n_classes <= n_features:
        means = np.zeros((n_classes, n_features))
        means[np.arange(n_classes), np.arange(n_classes)] = 1.0
    else:
        means = rng.normal(size=(n_classes, n_features))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= class_separation / np.sqrt(2.0)
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    X = means[labels] + rng.normal(size=(n_samples, n_features))
    return LabeledDataset(X, labels, n_classes, name)


def load_csv(path, label_column, name=None):
    """Read a headed, comma-separated UTF-8 file.

    Every column except ``label_column`` must be numeric. Labels may be
    integers (used as class ids) or strings (mapped to ids in sorted order).
    Malformed rows raise with their 1-based line number.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParameterError(f"{path}: empty file, header row expected") from None
        if label_column not in header:
            raise ParameterError(f"{path}: label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        feats, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParameterError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            label = row[li].strip()
            if not label:
                raise ParameterError(f"{path}:{lineno}: missing label")
            try:
                vals = [float(cell) for j, cell in enumerate(row) if j != li]
            except ValueError:
                raise ParameterError(f"{path}:{lineno}: non-numeric feature value") from None
            if not all(np.isfinite(vals)):
                raise ParameterError(f"{path}:{lineno}: non-finite feature value")
            feats.append(vals)
            raw_labels.append(label)
    if not raw_labels:
        raise ParameterError(f"{path}: no data rows")
    try:
        ints = [int(v) for v in raw_labels]
    except ValueError:
        classes = sorted(set(raw_labels))
        labels = np.array([classes.index(v) for v in raw_labels])
        n_classes = len(classes)
    else:
        labels = np.array(ints)
        if labels.min() < 0:
            raise ParameterError(f"{path}: integer labels must be non-negative")
        n_classes = max(int(labels.max()) + 1, 2)
    return LabeledDataset(np.array(feats, dtype=float), labels, n_classes, name or path.stem)


def partition(data, n_participants, test_fraction=0.1, seed=0):
    """Shuffle, hold out ``round(test_fraction * N)`` rows, shard the rest evenly.

    Returns ``(shards, test)``; shard sizes differ by at most one.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n_participants < 1:
        raise ParameterError("n_participants must be at least 1")
    N = len(data)
    n_test = int(round(test_fraction * N))
    if n_test < 1 or N - n_test < n_participants:
        raise ParameterError(
            f"{N} samples cannot give a nonempty test set and {n_participants} nonempty shards"
        )
    order = np.random.default_rng(seed).permutation(N)
    test = data.subset(order[:n_test], f"{data.name}/test")
    shards = [
        data.subset(part, f"{data.name}/p{i}")
        for i, part in enumerate(np.array_split(order[n_test:], n_participants))
    ]
    return shards, test


def apply_strategy(data, strategy, seed=0):
    """Return the dataset a participant actually inputs under ``strategy``."""
    if strategy.is_identity:
        return data
    if strategy.kind == "quit":
        return data.empty()
    m = len(data)
    if m == 0:
        return data
    rng = np.random.default_rng(seed)
    if strategy.kind == "noise":
        scale = strategy.degree * data.features.std(axis=0)
        X = data.features + rng.normal(size=data.features.shape) * scale
        return LabeledDataset(X, data.labels, data.n_classes, data.name)
    k = int(np.floor(strategy.degree * m))
    if strategy.kind == "removal":
        drop = rng.choice(m, size=k, replace=False)
        keep = np.setdiff1d(np.arange(m), drop)
        return data.subset(keep)
    # labelflip: each chosen label moves to a uniformly random *different* class
    idx = rng.choice(m, size=k, replace=False)
    y = data.labels.copy()
    y[idx] = (y[idx] + rng.integers(1, data.n_classes, size=k)) % data.n_classes
    return LabeledDataset(data.features, y, data.n_classes, data.name)
