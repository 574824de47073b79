"""Feature datasets: synthetic generators, CSV I/O, filtering and splitting.

Generators are pure functions of their arguments. Per-class streams are
seeded with ``numpy.random.default_rng([seed, class_index + 1])``; the class
centers come from ``default_rng([seed, 0])``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, DimensionError, EmptyResultError
from .io_utils import atomic_write_text

MAX_CENTER_ATTEMPTS = 10000


@dataclass
class FeatureDataset:
    X: np.ndarray  # (n, feature_dim)
    y: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DimensionError("one label per feature row required")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features contain non-finite values")
        if self.y.size and self.y.min() < 0:
            raise ValueError("labels must be nonnegative")

    def __len__(self):
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def class_labels(self) -> list:
        return sorted(int(c) for c in np.unique(self.y))

    @property
    def samples(self):
        return list(zip(self.X, self.y.tolist()))

    def subset(self, idx) -> "FeatureDataset":
        return FeatureDataset(self.X[idx], self.y[idx])

    def relabel(self, mapping: dict, default: int | None = None) -> "FeatureDataset":
        """Map labels through ``mapping``; unmapped labels become ``default``."""
        if default is None:
            y = np.array([mapping[int(v)] for v in self.y], dtype=np.int64)
        else:
            y = np.array([mapping.get(int(v), default) for v in self.y], dtype=np.int64)
        return FeatureDataset(self.X, y)

    @staticmethod
    def concat(parts) -> "FeatureDataset":
        parts = list(parts)
        return FeatureDataset(
            np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts])
        )


def _draw_centers(rng, num_classes, feature_dim, spread, min_dist):
    centers = []
    attempts = 0
    while len(centers) < num_classes:
        if attempts >= MAX_CENTER_ATTEMPTS:
            raise ConfigError(
                f"could not place {num_classes} centers at distance >= {min_dist} "
                f"within [-{spread}, {spread}]^{feature_dim}; center_spread too small"
            )
        attempts += 1
        c = rng.uniform(-spread, spread, size=feature_dim)
        if all(np.linalg.norm(c - o) >= min_dist for o in centers):
            centers.append(c)
    return np.array(centers)


def gen_gaussian_blobs(
    num_classes: int,
    samples_per_class: int,
    feature_dim: int,
    center_spread: float,
    cluster_std: float,
    seed: int = 0,
    min_center_dist: float | None = None,
) -> FeatureDataset:
    """Isotropic Gaussian blobs, one per class.

    Centers are uniform in ``[-center_spread, center_spread]^feature_dim`` and
    at least ``min_center_dist`` apart (default ``2 * cluster_std``).
    """
    if min(num_classes, samples_per_class, feature_dim) < 1:
        raise ConfigError("class, sample and feature counts must be >= 1")
    if not center_spread > 0 or not cluster_std > 0:
        raise ConfigError("center_spread and cluster_std must be positive")
    min_dist = 2.0 * cluster_std if min_center_dist is None else min_center_dist
    centers = _draw_centers(
        np.random.default_rng([seed, 0]), num_classes, feature_dim, center_spread, min_dist
    )
    X, y = [], []
    for k in range(num_classes):
        rng = np.random.default_rng([seed, k + 1])
        X.append(centers[k] + cluster_std * rng.standard_normal((samples_per_class, feature_dim)))
        y.append(np.full(samples_per_class, k))
    return FeatureDataset(np.concatenate(X), np.concatenate(y))


def gen_ring_vs_blob(
    seed: int = 0,
    samples_per_class: int = 200,
    feature_dim: int = 2,
    r_in: float = 2.0,
    r_out: float = 3.0,
    num_blobs: int = 1,
    cluster_std: float = 0.3,
) -> FeatureDataset:
    """Class 0 is a spherical shell around the origin; classes 1.. are blobs.

    The first blob sits at the shell's center, so its mean coincides with the
    shell's mean. Further blobs are spaced on a circle of radius ``2 * r_out``
    in the first two coordinates.
    """
    if samples_per_class < 1 or feature_dim < 2 or num_blobs < 1:
        raise ConfigError("need samples_per_class >= 1, feature_dim >= 2, num_blobs >= 1")
    if not 0 < r_in <= r_out or not cluster_std > 0:
        raise ConfigError("need 0 < r_in <= r_out and cluster_std > 0")
    rng = np.random.default_rng([seed, 1])
    direction = rng.standard_normal((samples_per_class, feature_dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(r_in, r_out, size=samples_per_class)
    X = [direction * radius[:, None]]
    y = [np.zeros(samples_per_class, dtype=np.int64)]
    for b in range(num_blobs):
        center = np.zeros(feature_dim)
        if b > 0:
            angle = 2.0 * np.pi * (b - 1) / max(num_blobs - 1, 1)
            center[:2] = 2.0 * r_out * np.array([np.cos(angle), np.sin(angle)])
        rng = np.random.default_rng([seed, b + 2])
        X.append(center + cluster_std * rng.standard_normal((samples_per_class, feature_dim)))
        y.append(np.full(samples_per_class, b + 1))
    return FeatureDataset(np.concatenate(X), np.concatenate(y))


def generate(config: dict) -> FeatureDataset:
    """Build a dataset from a JSON-style generator config (``kind`` selects)."""
    cfg = dict(config)
    kind = cfg.pop("kind", "blobs")
    cfg.pop("test_fraction", None)
    try:
        if kind == "blobs":
            return gen_gaussian_blobs(**cfg)
        if kind == "ring":
            return gen_ring_vs_blob(**cfg)
    except TypeError as exc:
        raise ConfigError(f"bad generator config: {exc}") from None
    raise ConfigError(f"unknown generator kind {kind!r}")


# CSV -------------------------------------------------------------------------


def dataset_to_csv(dataset: FeatureDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"feature_{i}" for i in range(dataset.feature_dim)] + ["label"])
    for row, label in zip(dataset.X, dataset.y):
        w.writerow([format(v, ".17g") for v in row] + [int(label)])
    return buf.getvalue()


def save_csv(dataset: FeatureDataset, path) -> None:
    atomic_write_text(path, dataset_to_csv(dataset))


def load_csv(path) -> FeatureDataset:
    text = Path(path).read_text()
    return parse_csv(text)


def parse_csv(text: str) -> FeatureDataset:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None:
        raise DataFormatError("empty file", line=1)
    n = len(header) - 1
    expected = [f"feature_{i}" for i in range(n)] + ["label"]
    if n < 1 or [h.strip() for h in header] != expected:
        raise DataFormatError(
            "header must be feature_0,...,feature_{n-1},label", line=1
        )
    X, y = [], []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != n + 1:
            raise DataFormatError(f"expected {n + 1} fields, found {len(row)}", line=lineno)
        try:
            feats = [float(v) for v in row[:n]]
        except ValueError:
            raise DataFormatError("non-numeric feature value", line=lineno) from None
        if not all(np.isfinite(feats)):
            raise DataFormatError("non-finite feature value", line=lineno)
        try:
            label = int(row[n])
        except ValueError:
            raise DataFormatError(f"label {row[n]!r} is not an integer", line=lineno) from None
        if label < 0:
            raise DataFormatError(f"label {label} is negative", line=lineno)
        X.append(feats)
        y.append(label)
    if not X:
        raise DataFormatError("file has a header but no rows", line=2)
    return FeatureDataset(np.array(X), np.array(y))


# Filtering and splitting -------------------------------------------------------


def filter_by_labels(dataset: FeatureDataset, labels) -> FeatureDataset:
    keep = np.isin(dataset.y, sorted(int(v) for v in labels))
    if not keep.any():
        raise EmptyResultError(f"no samples with labels {sorted(labels)}")
    return dataset.subset(keep)


def holdout_split(dataset: FeatureDataset, fraction: float, seed: int = 0):
    """Stratified split; returns ``(train, test)`` with ``round(fraction * n_c)``
    test samples from each class of size ``n_c``."""
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in dataset.class_labels:
        idx = np.flatnonzero(dataset.y == c)
        k = int(round(fraction * len(idx)))
        test_idx.append(rng.permutation(idx)[:k])
    test_mask = np.zeros(len(dataset), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    if test_mask.all() or not test_mask.any():
        raise EmptyResultError("split left one side empty")
    return dataset.subset(~test_mask), dataset.subset(test_mask)
