"""Open-set evaluation metrics computed from prediction dumps.

Ground truth uses model class indices, with :data:`TRUE_UNKNOWN` for samples
of classes the model has not been trained on. Decisions use the codes from
:mod:`protoworld.model` (class index, ``UNKNOWN``, ``FILTERED``).

The confusion matrix has ``K + 1`` rows (true known classes, then unknown)
and ``K + 2`` columns (predicted known classes, then unknown, then filtered).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core_math import pairwise_euclidean_sq_scaled
from .errors import DataFormatError, DimensionError
from .model import FILTERED, UNKNOWN, decide, decision_label, forward, parse_decision

TRUE_UNKNOWN = -1
DUMP_COLUMNS = (
    "sample_id",
    "true_label",
    "decision",
    "top_known_class",
    "top_known_posterior",
    "max_class_score",
)


def confusion_matrix(true_labels, decisions, num_known: int) -> np.ndarray:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    decisions = np.asarray(decisions, dtype=np.int64)
    if true_labels.shape != decisions.shape:
        raise DimensionError("true labels and decisions differ in length")
    K = num_known
    rows = np.where(true_labels == TRUE_UNKNOWN, K, true_labels)
    cols = np.where(decisions == UNKNOWN, K, np.where(decisions == FILTERED, K + 1, decisions))
    if rows.size and (rows.min() < 0 or rows.max() > K):
        raise DimensionError(f"true labels must be class indices < {K} or unknown")
    if cols.size and (cols.min() < 0 or cols.max() > K + 1):
        raise DimensionError(f"decisions must be class indices < {K}, unknown or filtered")
    conf = np.zeros((K + 1, K + 2), dtype=np.int64)
    np.add.at(conf, (rows, cols), 1)
    return conf


def unknown_recall(conf: np.ndarray):
    """Unknown samples flagged unknown over all non-filtered unknown samples."""
    K = conf.shape[0] - 1
    denom = conf[K, : K + 1].sum()
    if denom == 0:
        return None
    return float(conf[K, K] / denom)


def a_ose(conf: np.ndarray) -> int:
    K = conf.shape[0] - 1
    return int(conf[K, :K].sum())


def known_precision(conf: np.ndarray):
    K = conf.shape[0] - 1
    predicted_known = conf[:, :K].sum()
    if predicted_known == 0:
        return None
    return float(np.trace(conf[:K, :K]) / predicted_known)


def closed_set(conf: np.ndarray) -> np.ndarray:
    """The same confusion with the unknown row removed (zeroed)."""
    out = conf.copy()
    out[-1] = 0
    return out


def wildness_impact(closed_conf: np.ndarray, open_conf: np.ndarray):
    """``P_closed / P_open - 1`` for known-class precision.

    ``closed_conf`` comes from the known-only samples, ``open_conf`` from the
    same samples plus unknowns. ``None`` when either pass makes no known-class
    prediction.
    """
    p_closed = known_precision(closed_conf)
    p_open = known_precision(open_conf)
    if p_closed is None or p_open is None or p_open == 0:
        return None
    return p_closed / p_open - 1.0


def class_recalls(conf: np.ndarray) -> list:
    """Per known class: correct over non-filtered samples (None if no samples)."""
    K = conf.shape[0] - 1
    out = []
    for k in range(K):
        denom = conf[k, : K + 1].sum()
        out.append(float(conf[k, k] / denom) if denom else None)
    return out


def grouped_accuracy(conf: np.ndarray, previous, current):
    """Macro recall over the previous, current and combined class groups."""
    previous, current = set(previous), set(current)
    if previous & current:
        raise ValueError("previous and current class groups overlap")
    recalls = class_recalls(conf)

    def macro(group):
        vals = [recalls[k] for k in sorted(group) if recalls[k] is not None]
        # left-to-right sum so the value is reproducible from a dump by hand
        return sum(vals) / len(vals) if vals else None

    return macro(previous), macro(current), macro(previous | current)


def compactness(params, dataset):
    """Mean scaled squared distance of each embedding to its own center, and
    mean over center pairs of the same distance between centers."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    emb = forward(params, dataset.X).embedding
    C = params.protos.centers
    intra = pairwise_euclidean_sq_scaled(emb, C)[np.arange(len(dataset)), dataset.y].mean()
    K = C.shape[0]
    if K < 2:
        return float(intra), 0.0
    between = pairwise_euclidean_sq_scaled(C, C)
    iu = np.triu_indices(K, k=1)
    return float(intra), float(between[iu].mean())


# Reports ------------------------------------------------------------------------


@dataclass
class MetricsReport:
    ur: float | None
    wi: float | None
    a_ose: int
    acc_previous: float | None
    acc_current: float | None
    acc_both: float | None
    mean_intra_de: float | None
    mean_inter_center_dist: float | None
    confusion: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "ur": self.ur,
            "wi": self.wi,
            "a_ose": self.a_ose,
            "acc_previous": self.acc_previous,
            "acc_current": self.acc_current,
            "acc_both": self.acc_both,
            "mean_intra_de": self.mean_intra_de,
            "mean_inter_center_dist": self.mean_inter_center_dist,
            "confusion": self.confusion.tolist(),
        }


def classification_report(true_labels, decisions, num_known, previous=(), current=None):
    """Everything derivable from labels and decisions alone.

    ``current`` defaults to every known class not in ``previous``.
    """
    conf = confusion_matrix(true_labels, decisions, num_known)
    if current is None:
        current = set(range(num_known)) - set(previous)
    acc = grouped_accuracy(conf, previous, current)
    return MetricsReport(
        ur=unknown_recall(conf),
        wi=wildness_impact(closed_set(conf), conf),
        a_ose=a_ose(conf),
        acc_previous=acc[0],
        acc_current=acc[1],
        acc_both=acc[2],
        mean_intra_de=None,
        mean_inter_center_dist=None,
        confusion=conf,
    )


# Prediction dumps ---------------------------------------------------------------


@dataclass
class PredictionDump:
    true_labels: np.ndarray
    decisions: np.ndarray
    top_class: np.ndarray
    top_posterior: np.ndarray
    max_class_score: np.ndarray

    def __len__(self):
        return self.true_labels.shape[0]

    @classmethod
    def from_batch(cls, true_labels, batch) -> "PredictionDump":
        return cls(
            np.asarray(true_labels, dtype=np.int64),
            batch.decisions.copy(),
            batch.top_class.astype(np.int64),
            batch.top_posterior.copy(),
            batch.max_class_score.copy(),
        )

    def redecide(self, cfg) -> np.ndarray:
        """Decisions under other thresholds, from the stored scores alone."""
        return decide(self.max_class_score, self.top_posterior, self.top_class, cfg)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DUMP_COLUMNS)
        for i in range(len(self)):
            t = int(self.true_labels[i])
            w.writerow(
                [
                    i,
                    "unknown" if t == TRUE_UNKNOWN else t,
                    decision_label(int(self.decisions[i])),
                    int(self.top_class[i]),
                    repr(float(self.top_posterior[i])),
                    repr(float(self.max_class_score[i])),
                ]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PredictionDump":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != DUMP_COLUMNS:
            raise DataFormatError(f"dump header must be {','.join(DUMP_COLUMNS)}", line=1)
        cols = [[] for _ in range(5)]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DUMP_COLUMNS):
                raise DataFormatError("wrong number of fields", line=lineno)
            try:
                cols[0].append(TRUE_UNKNOWN if row[1] == "unknown" else int(row[1]))
                cols[1].append(parse_decision(row[2]))
                cols[2].append(int(row[3]))
                cols[3].append(float(row[4]))
                cols[4].append(float(row[5]))
            except ValueError as exc:
                raise DataFormatError(str(exc), line=lineno) from None
        return cls(
            np.array(cols[0], dtype=np.int64),
            np.array(cols[1], dtype=np.int64),
            np.array(cols[2], dtype=np.int64),
            np.array(cols[3], dtype=np.float64),
            np.array(cols[4], dtype=np.float64),
        )
