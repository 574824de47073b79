"""Seeded mini-batch SGD with momentum, prototype initialization and refresh."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core_math import pairwise_euclidean_sq_scaled
from .errors import ConfigError, DimensionError, LabelError, NumericalError
from .losses import DEFAULT_ALPHA, DEFAULT_LAMBDA, FIXED, LEARNABLE, PROTO_MODES, PrototypeSet
from .model import ModelParams, backward, forward, infer_batch

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "dce", "osr", "cls", "radius", "mean_intra_de", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    proto_mode: str = FIXED
    finetune_period_epochs: int = 10
    finetune_momentum: float = 0.5
    warmup_epochs: int = 20
    seed: int = 0
    # off during exemplar replay, where class means come from a handful of samples
    finetune_centers: bool = True
    freeze_extractor: bool = False
    # per-tensor gradient norm cap; None disables clipping
    max_grad_norm: float | None = 10.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.lam >= 0:
            raise ConfigError("lambda must be >= 0")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.proto_mode not in PROTO_MODES:
            raise ConfigError(f"proto_mode must be one of {PROTO_MODES}")
        if self.finetune_period_epochs < 1:
            raise ConfigError("finetune_period_epochs must be >= 1")
        if not 0 <= self.finetune_momentum < 1:
            raise ConfigError("finetune_momentum must lie in [0, 1)")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be positive or null")


@dataclass
class EpochRecord:
    epoch: int
    dce: float
    osr: float
    cls: float
    radius: float
    mean_intra_de: float
    class_accuracy: list

    @property
    def accuracy(self) -> float:
        vals = [a for a in self.class_accuracy if a is not None]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    initial_intra_de: float = float("nan")

    @property
    def radii(self) -> np.ndarray:
        return np.array([r.radius for r in self.records])

    @property
    def intra_de(self) -> np.ndarray:
        return np.array([r.mean_intra_de for r in self.records])

    def total_losses(self, lam: float) -> np.ndarray:
        return np.array([r.cls + r.dce + lam * r.osr for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAIN_LOG_COLUMNS)
        for r in self.records:
            writer.writerow(
                [r.epoch]
                + [repr(float(v)) for v in (r.dce, r.osr, r.cls, r.radius, r.mean_intra_de, r.accuracy)]
            )
        return buf.getvalue()


def init_prototypes(num_classes: int, dim: int, mode: str = FIXED, seed: int = 0) -> PrototypeSet:
    """Initial centers: one-hot rows (``fixed``) or N(0, 0.1^2) (``learnable``); radius 0."""
    if mode == FIXED:
        if dim < num_classes:
            raise ConfigError(f"one-hot centers need d >= K (d={dim}, K={num_classes})")
        return PrototypeSet(np.eye(num_classes, dim), 0.0, FIXED)
    if mode == LEARNABLE:
        rng = np.random.default_rng(seed)
        return PrototypeSet(rng.normal(0.0, 0.1, size=(num_classes, dim)), 0.0, LEARNABLE)
    raise ConfigError(f"unknown prototype mode {mode!r}")


def finetune_prototypes(protos: PrototypeSet, class_means, m: float, counts=None) -> PrototypeSet:
    """Blend each center toward its class mean: ``C <- (1 - m) C + m * mean``.

    Rows whose ``counts`` entry is zero (or whose mean is NaN) keep their
    center.
    """
    means = np.asarray(class_means, dtype=np.float64)
    if means.shape != protos.centers.shape:
        raise DimensionError(
            f"class means have shape {means.shape}, centers {protos.centers.shape}"
        )
    has_data = ~np.isnan(means).any(axis=1)
    if counts is not None:
        has_data &= np.asarray(counts) > 0
    centers = protos.centers.copy()
    centers[has_data] = (1.0 - m) * centers[has_data] + m * means[has_data]
    return PrototypeSet(centers, protos.radius, protos.mode)


def compute_class_means(params: ModelParams, dataset):
    """Per-class mean embedding under ``params``.

    Returns ``(means, counts)``; rows of classes with no samples are NaN.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    emb = forward(params, dataset.X).embedding
    K = params.num_classes
    y = dataset.y
    if y.min() < 0 or y.max() >= K:
        raise LabelError(f"labels must lie in [0, {K})")
    counts = np.bincount(y, minlength=K)
    sums = np.zeros((K, emb.shape[1]))
    np.add.at(sums, y, emb)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    means[counts == 0] = np.nan
    return means, counts


def mean_intra_de(params: ModelParams, X, y) -> float:
    emb = forward(params, X).embedding
    de = pairwise_euclidean_sq_scaled(emb, params.protos.centers)
    return float(de[np.arange(len(y)), y].mean())


def _class_accuracy(params: ModelParams, X, y) -> list:
    top = infer_batch(params, X).top_class
    out = []
    for k in range(params.num_classes):
        mask = y == k
        out.append(float((top[mask] == k).mean()) if mask.any() else None)
    return out


def _check_finite(values: dict, epoch: int, batch: int):
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError("non-finite value during training", epoch, batch, name)


def clip_grad(grad, max_norm):
    """Rescale ``grad`` so its Euclidean norm is at most ``max_norm``."""
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def train(params: ModelParams, dataset, cfg: TrainConfig):
    """Train a copy of ``params`` on ``dataset``; returns ``(params, TrainLog)``.

    Objective per batch: classifier cross-entropy + dce + lam * osr. In
    ``fixed`` prototype mode centers are only moved by
    :func:`finetune_prototypes`, applied at the end of every
    ``finetune_period_epochs``-th epoch after warmup. The radius is projected
    back to zero whenever a step would make it negative.
    """
    params = params.copy()
    if params.protos.mode != cfg.proto_mode:
        raise ConfigError(
            f"params use {params.protos.mode!r} prototypes but config asks for {cfg.proto_mode!r}"
        )
    X, y = dataset.X, dataset.y
    K = params.num_classes
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.min() < 0 or y.max() >= K:
        raise LabelError(f"training labels must lie in [0, {K})")
    params.alpha = cfg.alpha

    rng = np.random.default_rng(cfg.seed)
    velocity = {name: np.zeros_like(a) for name, a in params.arrays().items()}
    v_radius = 0.0
    learnable = params.protos.mode == LEARNABLE
    n = len(y)
    trainlog = TrainLog(initial_intra_de=mean_intra_de(params, X, y))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            parts, grads = backward(
                params, X[idx], y[idx], lam=cfg.lam, freeze_extractor=cfg.freeze_extractor
            )
            _check_finite({"dce": parts.dce, "osr": parts.osr, "cls": parts.cls}, epoch, b)
            _check_finite(grads, epoch, b)
            sums += len(idx) * np.array([parts.dce, parts.osr, parts.cls])

            for name, arr in params.arrays().items():
                if name == "centers" and not learnable:
                    continue
                if cfg.freeze_extractor and name.startswith("layers."):
                    continue
                vel = velocity[name]
                vel *= cfg.momentum
                vel += clip_grad(grads[name], cfg.max_grad_norm)
                arr -= cfg.learning_rate * vel
            g_radius = float(clip_grad(np.float64(grads["radius"]), cfg.max_grad_norm))
            v_radius = cfg.momentum * v_radius + g_radius
            params.protos.radius = max(0.0, params.protos.radius - cfg.learning_rate * v_radius)

        if (
            cfg.finetune_centers
            and not learnable
            and epoch > cfg.warmup_epochs
            and (epoch - cfg.warmup_epochs) % cfg.finetune_period_epochs == 0
        ):
            means, counts = compute_class_means(params, dataset)
            params.protos = finetune_prototypes(params.protos, means, cfg.finetune_momentum, counts)

        dce, osr, cls = sums / n
        trainlog.records.append(
            EpochRecord(
                epoch=epoch,
                dce=float(dce),
                osr=float(osr),
                cls=float(cls),
                radius=params.protos.radius,
                mean_intra_de=mean_intra_de(params, X, y),
                class_accuracy=_class_accuracy(params, X, y),
            )
        )
        log.debug("epoch %d: %s", epoch, trainlog.records[-1])
    return params, trainlog


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
