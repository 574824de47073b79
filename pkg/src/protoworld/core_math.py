"""Numeric kernels shared by the losses, model and metrics.

Single-vector functions validate their inputs; the ``pairwise_*`` and
``*_rows`` variants work on stacked batches and are what the training loop
uses.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError, DimensionError

NORM_EPSILON = 1e-12


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_pair(f, c, d=None):
    f = _as_vector(f, "f")
    c = _as_vector(c, "c")
    if f.shape != c.shape:
        raise DimensionError(f"length mismatch: {f.shape[0]} vs {c.shape[0]}")
    if d is not None and f.shape[0] != d:
        raise DimensionError(f"vectors have length {f.shape[0]}, expected d={d}")
    return f, c


def euclidean_sq_scaled(f, c, d: int | None = None) -> float:
    """Squared Euclidean distance divided by the dimension: ``||f - c||^2 / d``."""
    f, c = _check_pair(f, c, d)
    diff = f - c
    return float(np.dot(diff, diff) / f.shape[0])


def dot_similarity(f, c) -> float:
    f, c = _check_pair(f, c)
    return float(np.dot(f, c))


def proto_distance(f, c, d: int | None = None) -> float:
    """Prototype distance: scaled squared Euclidean minus dot product.

    Unbounded below; a long embedding aligned with ``c`` has a large negative
    distance.
    """
    f, c = _check_pair(f, c, d)
    diff = f - c
    return float(np.dot(diff, diff) / f.shape[0] - np.dot(f, c))


def softmax_neg_distance(distances) -> np.ndarray:
    """Posterior ``exp(-D_j) / sum_k exp(-D_k)`` with max-shift stabilization."""
    dist = np.asarray(distances, dtype=np.float64)
    if dist.ndim != 1 or dist.size == 0:
        raise ValueError("distances must be a non-empty 1-D array")
    if not np.all(np.isfinite(dist)):
        raise ValueError("distances contain non-finite entries")
    return softmax_rows(-dist[None, :])[0]


def cosine_similarity(f, w) -> float:
    f, w = _check_pair(f, w)
    nf = np.linalg.norm(f)
    nw = np.linalg.norm(w)
    if nf < NORM_EPSILON or nw < NORM_EPSILON:
        raise DegenerateVectorError(
            f"cannot take cosine of a vector with norm below {NORM_EPSILON}"
        )
    return float(np.clip(np.dot(f, w) / (nf * nw), -1.0, 1.0))


# Batched kernels ----------------------------------------------------------


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=1))


def pairwise_euclidean_sq_scaled(embeddings: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, K) matrix of ``||e_i - c_k||^2 / d``."""
    if embeddings.shape[1] != centers.shape[1]:
        raise DimensionError(
            f"embedding dim {embeddings.shape[1]} != center dim {centers.shape[1]}"
        )
    diff = embeddings[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff) / embeddings.shape[1]


def pairwise_proto_distance(embeddings: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, K) matrix of prototype distances."""
    return pairwise_euclidean_sq_scaled(embeddings, centers) - embeddings @ centers.T


def row_norms(x: np.ndarray, what: str = "row") -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms < NORM_EPSILON):
        bad = int(np.argmax(norms < NORM_EPSILON))
        raise DegenerateVectorError(f"{what} {bad} has norm below {NORM_EPSILON}")
    return norms


def pairwise_cosine(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """(n, K) cosine similarities between feature rows and weight rows."""
    if features.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"feature dim {features.shape[1]} != weight dim {weights.shape[1]}"
        )
    nf = row_norms(features, "feature")
    nw = row_norms(weights, "weight row")
    sim = (features / nf[:, None]) @ (weights / nw[:, None]).T
    return np.clip(sim, -1.0, 1.0)
