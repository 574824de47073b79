"""Incremental open-world protocol: tasks, staged training, exemplar replay.

Classes are split into tasks. At stage ``i`` the model is grown to cover the
classes of task ``i``, trained on that task's data only, then fine-tuned at a
reduced learning rate on stored exemplars of all classes seen so far. Classes
of later tasks are unknown at evaluation.

Model class indices follow the order in which classes are introduced
(``StageState.class_order``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core_math import pairwise_euclidean_sq_scaled
from .data import FeatureDataset
from .errors import ConfigError, LabelError
from .losses import PrototypeSet
from .metrics import (
    TRUE_UNKNOWN,
    PredictionDump,
    classification_report,
    compactness,
)
from .model import COSINE, InferenceConfig, ModelParams, decide, forward, infer_batch, init_params
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

NEW_ROW_STD = 1e-3
STAGE_SEED_STRIDE = 7919


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple  # tuple of sorted tuples of class labels
    exemplars_per_class: int = 50

    def __post_init__(self):
        seen = set()
        for t in self.tasks:
            if seen & set(t):
                raise ConfigError("tasks must be pairwise disjoint")
            seen |= set(t)
        if self.exemplars_per_class < 1:
            raise ConfigError("exemplars_per_class must be >= 1")

    @property
    def all_classes(self) -> frozenset:
        return frozenset(c for t in self.tasks for c in t)


@dataclass(frozen=True)
class ProtocolConfig:
    num_tasks: int = 4
    exemplars_per_class: int = 50
    finetune_fraction: float = 0.2
    finetune_lr_scale: float = 0.1
    hidden_sizes: tuple = (32,)
    embed_dim: int = 8
    classifier: str = COSINE


@dataclass
class StageState:
    schedule: TaskSchedule
    stage_index: int = 0
    previously_known: frozenset = frozenset()
    currently_known: frozenset = frozenset()
    unknown: frozenset = frozenset()
    exemplar_store: dict = field(default_factory=dict)  # label -> (m, input_dim) array
    params: ModelParams | None = None
    class_order: tuple = ()

    @property
    def known(self) -> frozenset:
        return self.previously_known | self.currently_known

    def label_to_index(self) -> dict:
        return {c: i for i, c in enumerate(self.class_order)}


def split_tasks(class_labels, num_tasks: int, seed: int = 0, exemplars_per_class: int = 50):
    """Seeded partition of the labels into ``num_tasks`` groups of equal size (+-1)."""
    labels = sorted(int(c) for c in set(class_labels))
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    if len(labels) < num_tasks:
        raise ConfigError(f"{len(labels)} classes cannot fill {num_tasks} tasks")
    perm = np.random.default_rng(seed).permutation(labels)
    tasks = tuple(tuple(sorted(int(c) for c in chunk)) for chunk in np.array_split(perm, num_tasks))
    return TaskSchedule(tasks, exemplars_per_class)


def initial_state(schedule: TaskSchedule) -> StageState:
    return StageState(schedule=schedule, unknown=schedule.all_classes)


def grow_model(params: ModelParams, num_new: int, seed: int) -> ModelParams:
    """Add ``num_new`` classes: next unused one-hot centers, tiny random classifier rows."""
    K, d = params.protos.num_classes, params.protos.dim
    if K + num_new > d:
        raise ConfigError(f"embedding dim {d} cannot hold {K + num_new} one-hot centers")
    rng = np.random.default_rng(seed)
    grown = params.copy()
    new_centers = np.eye(d)[K : K + num_new]
    grown.protos = PrototypeSet(
        np.vstack([params.protos.centers, new_centers]), params.protos.radius, params.protos.mode
    )
    new_rows = rng.normal(0.0, NEW_ROW_STD, size=(num_new, params.feature_dim))
    grown.classifier_weights = np.vstack([params.classifier_weights, new_rows])
    return grown


def select_exemplars(params: ModelParams, X: np.ndarray, class_index: int, m: int) -> np.ndarray:
    """The ``m`` rows of ``X`` whose embeddings lie closest to the class center."""
    emb = forward(params, X).embedding
    center = params.protos.centers[class_index : class_index + 1]
    de = pairwise_euclidean_sq_scaled(emb, center)[:, 0]
    order = np.argsort(de, kind="stable")
    return X[order[:m]].copy()


def run_stage(
    state: StageState,
    train_data: FeatureDataset,
    cfg: TrainConfig,
    pcfg: ProtocolConfig = ProtocolConfig(),
    finetune: bool = True,
) -> StageState:
    """Train the next task and return the new stage state.

    ``train_data`` holds original class labels, all from the next task.
    ``finetune=False`` skips exemplar replay (the ablation); the exemplar
    store is still updated.
    """
    k = state.stage_index
    if k >= len(state.schedule.tasks):
        raise ConfigError("all tasks have already been trained")
    new_classes = tuple(state.schedule.tasks[k])
    stray = set(train_data.class_labels) - set(new_classes)
    if stray:
        raise LabelError(f"training data for stage {k + 1} contains labels {sorted(stray)} outside the task")
    stage_seed = cfg.seed + STAGE_SEED_STRIDE * k

    if state.params is None:
        params = init_params(
            train_data.feature_dim,
            len(new_classes),
            pcfg.embed_dim,
            pcfg.hidden_sizes,
            proto_mode=cfg.proto_mode,
            classifier=pcfg.classifier,
            alpha=cfg.alpha,
            seed=stage_seed,
        )
    else:
        params = grow_model(state.params, len(new_classes), stage_seed)
    class_order = state.class_order + new_classes
    index = {c: i for i, c in enumerate(class_order)}

    params, _ = train(params, train_data.relabel(index), replace(cfg, seed=stage_seed))

    store = dict(state.exemplar_store)
    for c in new_classes:
        X_c = train_data.X[train_data.y == c]
        store[c] = select_exemplars(params, X_c, index[c], state.schedule.exemplars_per_class)

    if finetune:
        replay = FeatureDataset(
            np.concatenate([store[c] for c in class_order]),
            np.concatenate([np.full(len(store[c]), index[c]) for c in class_order]),
        )
        ft_epochs = max(1, int(round(pcfg.finetune_fraction * cfg.epochs)))
        ft_cfg = replace(
            cfg,
            epochs=ft_epochs,
            learning_rate=cfg.learning_rate * pcfg.finetune_lr_scale,
            warmup_epochs=0,
            finetune_centers=False,
            seed=stage_seed + 1,
        )
        params, _ = train(params, replay, ft_cfg)

    later = frozenset(c for t in state.schedule.tasks[k + 1 :] for c in t)
    return StageState(
        schedule=state.schedule,
        stage_index=k + 1,
        previously_known=state.known,
        currently_known=frozenset(new_classes),
        unknown=later,
        exemplar_store=store,
        params=params,
        class_order=class_order,
    )


def true_indices(state: StageState, labels) -> np.ndarray:
    index = state.label_to_index()
    return np.array([index.get(int(c), TRUE_UNKNOWN) for c in labels], dtype=np.int64)


def evaluate_stage(state: StageState, test_data: FeatureDataset, infer_cfg: InferenceConfig):
    """Run inference on ``test_data`` (original labels; unseen classes count as
    unknown). Returns ``(MetricsReport, PredictionDump)``."""
    params = state.params
    true = true_indices(state, test_data.y)
    batch = infer_batch(params, test_data.X, infer_cfg)
    dump = PredictionDump.from_batch(true, batch)
    index = state.label_to_index()
    report = classification_report(
        true,
        dump.decisions,
        params.num_classes,
        previous={index[c] for c in state.previously_known},
        current={index[c] for c in state.currently_known},
    )
    known_mask = true != TRUE_UNKNOWN
    if known_mask.any():
        report.mean_intra_de, report.mean_inter_center_dist = compactness(
            params, FeatureDataset(test_data.X[known_mask], true[known_mask])
        )
    return report, dump


def stage_record(stage: int, report, radius: float) -> dict:
    """The JSON-lines row written per stage."""
    return {
        "stage": stage,
        "wi": report.wi,
        "a_ose": report.a_ose,
        "ur": report.ur,
        "acc_previous": report.acc_previous,
        "acc_current": report.acc_current,
        "acc_both": report.acc_both,
        "radius": radius,
        "mean_intra_de": report.mean_intra_de,
    }


def select_xi(params: ModelParams, val_data: FeatureDataset, gamma: float, target_accuracy: float = 0.9) -> float:
    """Largest ``xi`` keeping macro accuracy on known-only validation data at or
    above ``target_accuracy`` (labels are model indices). Returns 0 if even
    ``xi = 0`` misses the target."""
    batch = infer_batch(params, val_data.X, InferenceConfig(gamma=gamma, xi=0.0))
    y = val_data.y
    candidates = np.unique(batch.top_posterior[batch.top_class == y])[::-1]
    for xi in candidates:
        dec = decide(batch.max_class_score, batch.top_posterior, batch.top_class, InferenceConfig(gamma, float(xi)))
        report = classification_report(y, dec, params.num_classes)
        if report.acc_both is not None and report.acc_both >= target_accuracy:
            return float(xi)
    return 0.0
