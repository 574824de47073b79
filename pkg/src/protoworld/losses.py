"""Training objectives for the prototype branch and the classifier head.

Every loss returns its value together with hand-derived gradients. The batch
functions (``*_batch``) average over the rows they are given; the
single-sample functions wrap them with a batch of one.

Gradient summary, with ``w = onehot(label) - p`` and prototype distance
``D_k = ||f - C_k||^2 / d - f . C_k``::

    dL_dce/df   = -(1 + 2/d) * sum_k w_k C_k
    dL_dce/dC_k = -(1 + 2/d) * w_k f + (2/d) * w_k C_k
    dL_osr/df   = (2/d) (f - C_y)      if ||f - C_y||^2/d > R else 0
    dL_osr/dR   = -1                   if active else 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core_math import (
    logsumexp_rows,
    pairwise_euclidean_sq_scaled,
    pairwise_proto_distance,
    row_norms,
    softmax_rows,
)
from .errors import ConfigError, DimensionError, LabelError

FIXED = "fixed"
LEARNABLE = "learnable"
PROTO_MODES = (FIXED, LEARNABLE)

DEFAULT_LAMBDA = 0.1
DEFAULT_ALPHA = 16.0

# log arguments are floored here; -log(1e-30) caps the per-sample loss
POSTERIOR_FLOOR = 1e-30
LOSS_CAP = -math.log(POSTERIOR_FLOOR)


@dataclass
class PrototypeSet:
    """Class centers (one row per class) and the shared radius."""

    centers: np.ndarray
    radius: float = 0.0
    mode: str = FIXED

    def __post_init__(self):
        self.centers = np.array(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise DimensionError("centers must be a (K, d) matrix")
        if self.mode not in PROTO_MODES:
            raise ConfigError(f"unknown prototype mode {self.mode!r}")
        if self.mode == FIXED and self.dim < self.num_classes:
            raise ConfigError(
                f"fixed prototypes need d >= K (d={self.dim}, K={self.num_classes})"
            )
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("prototype centers contain non-finite values")
        if not self.radius >= 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        self.radius = float(self.radius)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def learnable(self) -> bool:
        return self.mode == LEARNABLE

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.centers.copy(), self.radius, self.mode)


@dataclass
class LossBreakdown:
    dce: float = 0.0
    osr: float = 0.0
    cls: float = 0.0
    lam: float = DEFAULT_LAMBDA
    clamped: int = 0

    @property
    def total(self) -> float:
        return self.cls + self.dce + self.lam * self.osr


@dataclass
class GradientBundle:
    """Gradients of one loss evaluation.

    ``None`` marks a parameter group the loss does not touch. ``clamped`` is
    set when a posterior fell below the log floor.
    """

    embedding: Optional[np.ndarray] = None
    centers: Optional[np.ndarray] = None
    radius: float = 0.0
    classifier_weights: Optional[np.ndarray] = None
    feature: Optional[np.ndarray] = None
    clamped: bool = False

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return GradientBundle(
            embedding=add(self.embedding, other.embedding),
            centers=add(self.centers, other.centers),
            radius=self.radius + other.radius,
            classifier_weights=add(self.classifier_weights, other.classifier_weights),
            feature=add(self.feature, other.feature),
            clamped=self.clamped or other.clamped,
        )

    def scaled(self, s: float) -> "GradientBundle":
        def mul(a):
            return None if a is None else s * a

        return GradientBundle(
            embedding=mul(self.embedding),
            centers=mul(self.centers),
            radius=s * self.radius,
            classifier_weights=mul(self.classifier_weights),
            feature=mul(self.feature),
            clamped=self.clamped,
        )


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError("labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.intp)


def _check_embeddings(embeddings: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != protos.dim:
        raise DimensionError(
            f"embeddings must be (n, {protos.dim}), got {embeddings.shape}"
        )
    return embeddings


# Batch losses -----------------------------------------------------------


def dce_loss_batch(embeddings, labels, protos: PrototypeSet):
    """Mean distance-based cross-entropy over a batch.

    Returns ``(loss, grad_embeddings, grad_centers, n_clamped)``. Gradients are
    of the batch mean. ``grad_centers`` is always computed; callers decide
    whether to apply it.
    """
    emb = _check_embeddings(embeddings, protos)
    y = _check_labels(labels, protos.num_classes)
    n = emb.shape[0]
    d = protos.dim
    C = protos.centers

    dist = pairwise_proto_distance(emb, C)
    rows = np.arange(n)
    per_sample = dist[rows, y] + logsumexp_rows(-dist)
    clamped = per_sample > LOSS_CAP
    per_sample = np.minimum(per_sample, LOSS_CAP)

    w = -softmax_rows(-dist)
    w[rows, y] += 1.0
    k = 1.0 + 2.0 / d
    grad_emb = -k * (w @ C) / n
    grad_centers = (-k * (w.T @ emb) + (2.0 / d) * w.sum(axis=0)[:, None] * C) / n
    return float(per_sample.mean()), grad_emb, grad_centers, int(clamped.sum())


def osr_loss_batch(embeddings, labels, protos: PrototypeSet):
    """Mean radius hinge ``max(0, ||f - C_y||^2/d - R)`` over a batch.

    Returns ``(loss, grad_embeddings, grad_centers, grad_radius)``. At exact
    equality with the radius the hinge counts as inactive.
    """
    emb = _check_embeddings(embeddings, protos)
    y = _check_labels(labels, protos.num_classes)
    n = emb.shape[0]
    d = protos.dim

    diff = emb - protos.centers[y]
    de = np.einsum("ij,ij->i", diff, diff) / d
    margin = de - protos.radius
    active = margin > 0

    grad_emb = np.where(active[:, None], (2.0 / d) * diff, 0.0) / n
    grad_centers = np.zeros_like(protos.centers)
    np.add.at(grad_centers, y, -grad_emb)
    grad_radius = -float(active.sum()) / n
    loss = float(np.where(active, margin, 0.0).mean())
    return loss, grad_emb, grad_centers, grad_radius


def cosine_ce_loss_batch(features, labels, weights, alpha: float):
    """Mean softmax cross-entropy over scaled cosine logits.

    Returns ``(loss, grad_features, grad_weights, n_clamped)``.
    """
    H = np.asarray(features, dtype=np.float64)
    W = np.asarray(weights, dtype=np.float64)
    if H.ndim != 2 or W.ndim != 2 or H.shape[1] != W.shape[1]:
        raise DimensionError(f"features {H.shape} incompatible with weights {W.shape}")
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    y = _check_labels(labels, W.shape[0])
    n = H.shape[0]

    nf = row_norms(H, "feature")
    nw = row_norms(W, "weight row")
    U = H / nf[:, None]
    V = W / nw[:, None]
    S = U @ V.T
    logits = alpha * S
    rows = np.arange(n)
    per_sample = logsumexp_rows(logits) - logits[rows, y]
    clamped = per_sample > LOSS_CAP
    per_sample = np.minimum(per_sample, LOSS_CAP)

    G = softmax_rows(logits)
    G[rows, y] -= 1.0
    G *= alpha / n
    GS = G * S
    grad_h = (G @ V - GS.sum(axis=1)[:, None] * U) / nf[:, None]
    grad_w = (G.T @ U - GS.sum(axis=0)[:, None] * V) / nw[:, None]
    return float(per_sample.mean()), grad_h, grad_w, int(clamped.sum())


def linear_ce_loss_batch(features, labels, weights):
    """Cross-entropy over plain inner-product logits ``W h`` (no normalization)."""
    H = np.asarray(features, dtype=np.float64)
    W = np.asarray(weights, dtype=np.float64)
    if H.ndim != 2 or W.ndim != 2 or H.shape[1] != W.shape[1]:
        raise DimensionError(f"features {H.shape} incompatible with weights {W.shape}")
    y = _check_labels(labels, W.shape[0])
    n = H.shape[0]
    logits = H @ W.T
    rows = np.arange(n)
    per_sample = logsumexp_rows(logits) - logits[rows, y]
    clamped = per_sample > LOSS_CAP
    per_sample = np.minimum(per_sample, LOSS_CAP)
    G = softmax_rows(logits)
    G[rows, y] -= 1.0
    G /= n
    return float(per_sample.mean()), G @ W, G.T @ H, int(clamped.sum())


# Single-sample losses ---------------------------------------------------


def _one(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise DimensionError(f"expected a single vector, got shape {f.shape}")
    return f[None, :]


def _check_label(label: int, num_classes: int) -> int:
    if not 0 <= int(label) < num_classes:
        raise LabelError(f"label {label} outside [0, {num_classes})")
    return int(label)


def dce_loss(f, label: int, protos: PrototypeSet):
    """Distance-based cross-entropy for one embedding.

    Center gradients are zeroed for fixed prototypes. When the posterior of
    ``label`` underflows, the loss is capped at ``LOSS_CAP`` and
    ``grads.clamped`` is set; the gradient is still that of the uncapped loss
    so training can move out of the saturated region.
    """
    label = _check_label(label, protos.num_classes)
    loss, g_emb, g_c, n_clamped = dce_loss_batch(_one(f), [label], protos)
    if not protos.learnable:
        g_c = np.zeros_like(g_c)
    return loss, GradientBundle(embedding=g_emb[0], centers=g_c, clamped=n_clamped > 0)


def osr_loss(f, label: int, protos: PrototypeSet):
    label = _check_label(label, protos.num_classes)
    loss, g_emb, g_c, g_r = osr_loss_batch(_one(f), [label], protos)
    if not protos.learnable:
        g_c = np.zeros_like(g_c)
    return loss, GradientBundle(embedding=g_emb[0], centers=g_c, radius=g_r)


def proto_loss(f, label: int, protos: PrototypeSet, lam: float = DEFAULT_LAMBDA):
    """Prototype-branch objective ``L_dce + lam * L_osr``.

    Returns a :class:`LossBreakdown` (``cls`` left at zero) and the combined
    gradients. With ``lam == 0`` the result is exactly the dce result.
    """
    if not lam >= 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    dce, g_dce = dce_loss(f, label, protos)
    osr, g_osr = osr_loss(f, label, protos)
    breakdown = LossBreakdown(dce=dce, osr=osr, lam=lam, clamped=int(g_dce.clamped))
    if lam == 0:
        return breakdown, g_dce
    return breakdown, g_dce + g_osr.scaled(lam)


def cosine_ce_loss(feature, label: int, weights, alpha: float = DEFAULT_ALPHA):
    weights = np.asarray(weights, dtype=np.float64)
    label = _check_label(label, weights.shape[0])
    loss, g_h, g_w, n_clamped = cosine_ce_loss_batch(_one(feature), [label], weights, alpha)
    return loss, GradientBundle(
        feature=g_h[0], classifier_weights=g_w, clamped=n_clamped > 0
    )
