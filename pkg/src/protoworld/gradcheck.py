"""Finite-difference verification of the analytic gradients.

The reference losses here are written out independently of
:mod:`protoworld.losses` and :mod:`protoworld.model` and are evaluated in
``numpy.longdouble``, so central differences stay accurate even for tiny
gradient entries. Random configurations avoid the non-differentiable points
(hinge at ``D_e = R``, leaky-ReLU at zero) by resampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (
    DEFAULT_ALPHA,
    DEFAULT_LAMBDA,
    FIXED,
    LEARNABLE,
    PrototypeSet,
    cosine_ce_loss,
    dce_loss,
    osr_loss,
    proto_loss,
)
from .model import COSINE, LEAKY_RELU, LEAKY_SLOPE, LINEAR, Layer, ModelParams, backward

LD = np.longdouble
OPS = ("dce", "osr", "proto", "cosine_ce", "backward")
KINK_MARGIN = 1e-3


@dataclass
class GradcheckReport:
    op: str
    trials: int
    max_rel_error: float
    worst_group: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "trials": self.trials,
            "max_rel_error": self.max_rel_error,
            "worst_group": self.worst_group,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(fn, x: np.ndarray, step: float) -> np.ndarray:
    """Central differences of scalar ``fn`` around ``x`` (evaluated in longdouble)."""
    x = np.asarray(x, dtype=LD)
    g = np.zeros(x.shape, dtype=LD)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + LD(step)
        up = fn(x)
        x[i] = orig - LD(step)
        down = fn(x)
        x[i] = orig
        g[i] = (up - down) / (2 * LD(step))
    return g.astype(np.float64)


# Reference losses (longdouble, straight from the definitions) ----------------


def _log_softmax_at(scores, j):
    m = max(scores)
    total = sum(np.exp(s - m) for s in scores)
    return scores[j] - m - np.log(total)


def ref_distance(f, c):
    d = len(f)
    de = sum((f[m] - c[m]) ** 2 for m in range(d)) / d
    dd = sum(f[m] * c[m] for m in range(d))
    return de - dd


def ref_dce(f, label, centers):
    scores = [-ref_distance(f, centers[k]) for k in range(len(centers))]
    return -_log_softmax_at(scores, label)


def ref_osr(f, label, centers, radius):
    d = len(f)
    de = sum((f[m] - centers[label][m]) ** 2 for m in range(d)) / d
    return max(LD(0), de - radius)


def ref_cosine_ce(h, label, weights, alpha):
    nh = np.sqrt(sum(v * v for v in h))
    scores = []
    for w in weights:
        nw = np.sqrt(sum(v * v for v in w))
        scores.append(LD(alpha) * sum(a * b for a, b in zip(h, w)) / (nh * nw))
    return -_log_softmax_at(scores, label)


def ref_linear_ce(h, label, weights):
    scores = [sum(a * b for a, b in zip(h, w)) for w in weights]
    return -_log_softmax_at(scores, label)


def ref_model_loss(arrays: dict, radius, X, y, n_layers, classifier, alpha, lam):
    """Mean total loss of a batch through the extractor and both heads."""
    total = LD(0)
    for x, label in zip(X, y):
        a = np.asarray(x, dtype=LD)
        for i in range(n_layers):
            W, b = arrays[f"layers.{i}.weight"], arrays[f"layers.{i}.bias"]
            z = np.array([sum(W[r, c] * a[c] for c in range(len(a))) + b[r] for r in range(W.shape[0])])
            a = np.where(z > 0, z, LD(LEAKY_SLOPE) * z)
        P = arrays["embed_proj"]
        e = np.array([sum(P[r, c] * a[c] for c in range(len(a))) for r in range(P.shape[0])])
        if classifier == COSINE:
            cls = ref_cosine_ce(a, label, arrays["classifier"], alpha)
        else:
            cls = ref_linear_ce(a, label, arrays["classifier"])
        total += cls + ref_dce(e, label, arrays["centers"]) + LD(lam) * ref_osr(
            e, label, arrays["centers"], radius
        )
    return total / len(y)


# Random configurations --------------------------------------------------------


def _random_protos(rng, d, K, mode=LEARNABLE):
    if mode == FIXED:
        centers = np.eye(K, d) * rng.uniform(0.5, 2.0)
    else:
        centers = rng.normal(0.0, 1.0, size=(K, d))
    return PrototypeSet(centers, 0.0, mode)


def _radius_off_kink(rng, de_values):
    """A radius in [0, 2 max(D_e)] at least KINK_MARGIN from every D_e."""
    hi = 2.0 * max(de_values) + 1.0
    while True:
        r = rng.uniform(0.0, hi)
        if all(abs(de - r) > KINK_MARGIN for de in de_values):
            return r


def _vector(rng, n):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v) * rng.uniform(0.5, 2.0)


def _check_loss_op(op, rng, step, alpha, lam):
    d = int(rng.integers(2, 9))
    K = int(rng.integers(2, 9))
    label = int(rng.integers(K))
    if op == "cosine_ce":
        C = d
        h = _vector(rng, C)
        W = np.array([_vector(rng, C) for _ in range(K)])
        _, g = cosine_ce_loss(h, label, W, alpha)
        num_h = numeric_grad(lambda v: ref_cosine_ce(v, label, W.astype(LD), alpha), h, step)
        num_w = numeric_grad(lambda m: ref_cosine_ce(h.astype(LD), label, m, alpha), W, step)
        return {"feature": rel_error(g.feature, num_h), "classifier_weights": rel_error(g.classifier_weights, num_w)}

    protos = _random_protos(rng, d, K)
    f = rng.normal(0.0, 1.0, size=d)
    de = np.sum((f - protos.centers[label]) ** 2) / d
    protos.radius = _radius_off_kink(rng, [de])
    R = LD(protos.radius)

    def ref(fv, cm, r=R):
        if op == "dce":
            return ref_dce(fv, label, cm)
        if op == "osr":
            return ref_osr(fv, label, cm, r)
        return ref_dce(fv, label, cm) + LD(lam) * ref_osr(fv, label, cm, r)

    if op == "dce":
        _, g = dce_loss(f, label, protos)
    elif op == "osr":
        _, g = osr_loss(f, label, protos)
    else:
        _, g = proto_loss(f, label, protos, lam)
    Cl = protos.centers.astype(LD)
    errs = {
        "embedding": rel_error(g.embedding, numeric_grad(lambda v: ref(v, Cl), f, step)),
        "centers": rel_error(g.centers, numeric_grad(lambda m: ref(f.astype(LD), m), protos.centers, step)),
    }
    if op != "dce":
        num_r = numeric_grad(lambda r: ref(f.astype(LD), Cl, r[0]), np.array([protos.radius]), step)
        errs["radius"] = rel_error(g.radius, num_r[0])
    return errs


def random_model(rng, classifier=None, mode=None, alpha=DEFAULT_ALPHA) -> ModelParams:
    in_dim = int(rng.integers(2, 9))
    n_layers = int(rng.integers(1, 3))
    K = int(rng.integers(2, 7))
    d = int(rng.integers(K, 9))
    mode = mode or (LEARNABLE if rng.random() < 0.5 else FIXED)
    classifier = classifier or (COSINE if rng.random() < 0.75 else LINEAR)
    layers = []
    width = in_dim
    for _ in range(n_layers):
        h = int(rng.integers(2, 9))
        layers.append(Layer(rng.normal(0, 1 / np.sqrt(width), (h, width)), rng.normal(0, 0.3, h), LEAKY_RELU))
        width = h
    P = rng.normal(0, 1 / np.sqrt(width), (d, width))
    W = rng.normal(0, 1 / np.sqrt(width), (K, width))
    return ModelParams(layers, P, W, _random_protos(rng, d, K, mode), alpha=alpha, classifier=classifier)


def _pre_activations(params, X):
    a = X
    out = []
    for layer in params.layers:
        z = a @ layer.weight.T + layer.bias
        out.append(z)
        a = np.where(z > 0, z, LEAKY_SLOPE * z)
    return out, a


def _check_backward(rng, step, alpha, lam):
    while True:
        params = random_model(rng, alpha=alpha)
        n = int(rng.integers(1, 4))
        X = rng.normal(0, 1, (n, params.input_dim))
        y = rng.integers(0, params.num_classes, n)
        pre, h = _pre_activations(params, X)
        if any(np.min(np.abs(z)) < KINK_MARGIN for z in pre):
            continue
        if params.classifier == COSINE and np.min(np.linalg.norm(h, axis=1)) < 0.1:
            continue
        emb = h @ params.embed_proj.T
        de = np.sum((emb - params.protos.centers[y]) ** 2, axis=1) / params.embed_dim
        params.protos.radius = _radius_off_kink(rng, list(de))
        break

    _, grads = backward(params, X, y, lam=lam)
    arrays = {k: v.astype(LD) for k, v in params.arrays().items()}
    R = LD(params.protos.radius)
    n_layers = len(params.layers)

    def loss_with(name, value):
        arrs = dict(arrays)
        r = R
        if name == "radius":
            r = value[0]
        else:
            arrs[name] = value
        return ref_model_loss(arrs, r, X, y, n_layers, params.classifier, params.alpha, lam)

    errs = {}
    for name, arr in params.arrays().items():
        if name == "centers" and params.protos.mode == FIXED:
            # fixed centers are not optimized; the analytic gradient is zeroed
            errs[name] = float(np.max(np.abs(grads[name]))) if grads[name].size else 0.0
            continue
        num = numeric_grad(lambda v, name=name: loss_with(name, v), arr, step)
        errs[name] = rel_error(grads[name], num)
    num_r = numeric_grad(lambda v: loss_with("radius", v), np.array([params.protos.radius]), step)
    errs["radius"] = rel_error(grads["radius"], num_r[0])
    return errs


def gradcheck(
    op: str,
    trials: int = 100,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    lam: float = DEFAULT_LAMBDA,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients over random configs.

    ``op`` is one of ``dce``, ``osr``, ``proto``, ``cosine_ce`` or
    ``backward`` (the whole model). The report carries the worst per-entry
    relative error across all trials and parameter groups.
    """
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; choose from {OPS}")
    rng = np.random.default_rng(seed)
    worst, worst_group = 0.0, ""
    for _ in range(trials):
        if op == "backward":
            errs = _check_backward(rng, step, alpha, lam)
        else:
            errs = _check_loss_op(op, rng, step, alpha, lam)
        for group, err in errs.items():
            if err > worst:
                worst, worst_group = err, group
    return GradcheckReport(op, trials, worst, worst_group, tolerance)
