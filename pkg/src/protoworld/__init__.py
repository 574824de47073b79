"""Prototype learning for open-world recognition on feature vectors.

Distance-based cross-entropy to class prototypes, a learnable-radius hinge
that compresses each class into a hypersphere, a cosine-similarity classifier
and a two-threshold rule that rejects unknown samples.
"""

from .core_math import (
    cosine_similarity,
    dot_similarity,
    euclidean_sq_scaled,
    proto_distance,
    softmax_neg_distance,
)
from .data import FeatureDataset, gen_gaussian_blobs, gen_ring_vs_blob, load_csv, save_csv
from .losses import GradientBundle, LossBreakdown, PrototypeSet, cosine_ce_loss, dce_loss, osr_loss, proto_loss
from .model import FILTERED, UNKNOWN, InferenceConfig, ModelParams, Prediction, infer, init_params
from .trainer import TrainConfig, TrainLog, train

__version__ = "0.1.0"
