"""Feed-forward feature extractor with a prototype head and a classifier head.

The extractor is a stack of dense layers (leaky ReLU on hidden layers). Its
output ``h`` feeds two parallel heads:

* the prototype branch ``e = P h`` (no bias), scored against class centers;
* the classifier ``logits_k = alpha * cos(h, w_k)``, or ``w_k . h`` when the
  cosine classifier is switched off.

Parameters are addressed by group name (``layers.0.weight``, ``embed_proj``,
``classifier``, ``centers``, ``radius``); the same names are used for
gradients and as section names in the parameter file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import pairwise_cosine, pairwise_proto_distance, softmax_rows
from .errors import ConfigError, DimensionError, ParamFileError
from .losses import (
    DEFAULT_ALPHA,
    DEFAULT_LAMBDA,
    FIXED,
    LEARNABLE,
    LossBreakdown,
    PrototypeSet,
    cosine_ce_loss_batch,
    dce_loss_batch,
    linear_ce_loss_batch,
    osr_loss_batch,
)

LEAKY_SLOPE = 0.01
LEAKY_RELU = "leaky_relu"
IDENTITY = "identity"
ACTIVATIONS = (LEAKY_RELU, IDENTITY)

COSINE = "cosine"
LINEAR = "linear"
CLASSIFIERS = (COSINE, LINEAR)

UNKNOWN = -1
FILTERED = -2

DEFAULT_GAMMA = 0.05
DEFAULT_XI = 0.5


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = LEAKY_RELU


@dataclass
class ModelParams:
    layers: list
    embed_proj: np.ndarray  # (d, H)
    classifier_weights: np.ndarray  # (K, H)
    protos: PrototypeSet
    alpha: float = DEFAULT_ALPHA
    classifier: str = COSINE

    def __post_init__(self):
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"unknown classifier kind {self.classifier!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        width = None
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise DimensionError(f"layer {i}: bad weight/bias shapes")
            if width is not None and layer.weight.shape[1] != width:
                raise DimensionError(
                    f"layer {i} expects {layer.weight.shape[1]} inputs, previous layer gives {width}"
                )
            width = layer.weight.shape[0]
        if width is not None and self.embed_proj.shape[1] != width:
            raise DimensionError("embed_proj does not match extractor output width")
        if self.classifier_weights.shape[1] != self.embed_proj.shape[1]:
            raise DimensionError("classifier weights do not match extractor output width")
        if self.embed_proj.shape[0] != self.protos.dim:
            raise DimensionError("embed_proj output does not match prototype dimension")
        if self.classifier_weights.shape[0] != self.protos.num_classes:
            raise DimensionError("classifier rows do not match number of prototypes")

    @property
    def input_dim(self) -> int:
        if self.layers:
            return self.layers[0].weight.shape[1]
        return self.embed_proj.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.embed_proj.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.protos.dim

    @property
    def num_classes(self) -> int:
        return self.protos.num_classes

    def arrays(self) -> dict:
        """Trainable array groups by name (radius excluded; it is a scalar)."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.weight"] = layer.weight
            out[f"layers.{i}.bias"] = layer.bias
        out["embed_proj"] = self.embed_proj
        out["classifier"] = self.classifier_weights
        out["centers"] = self.protos.centers
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            layers=[Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            embed_proj=self.embed_proj.copy(),
            classifier_weights=self.classifier_weights.copy(),
            protos=self.protos.copy(),
            alpha=self.alpha,
            classifier=self.classifier,
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values()) and np.isfinite(
            self.protos.radius
        )


def init_params(
    input_dim: int,
    num_classes: int,
    embed_dim: int,
    hidden_sizes=(32,),
    proto_mode: str = FIXED,
    classifier: str = COSINE,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
) -> ModelParams:
    """Randomly initialized parameters (He-normal hidden layers, zero biases).

    Prototype centers are one-hot in ``fixed`` mode and N(0, 0.1^2) in
    ``learnable`` mode; the radius starts at 0 either way.
    """
    from .trainer import init_prototypes

    rng = np.random.default_rng(seed)
    layers = []
    width = input_dim
    for h in hidden_sizes:
        w = rng.normal(0.0, np.sqrt(2.0 / width), size=(h, width))
        layers.append(Layer(w, np.zeros(h), LEAKY_RELU))
        width = h
    embed_proj = rng.normal(0.0, 1.0 / np.sqrt(width), size=(embed_dim, width))
    cls_w = rng.normal(0.0, 1.0 / np.sqrt(width), size=(num_classes, width))
    protos = init_prototypes(num_classes, embed_dim, proto_mode, seed=int(rng.integers(2**63)))
    return ModelParams(layers, embed_proj, cls_w, protos, alpha=alpha, classifier=classifier)


# Forward / backward -------------------------------------------------------


@dataclass
class ForwardResult:
    feature: np.ndarray
    embedding: np.ndarray
    logits: np.ndarray
    pre_activations: list = field(default_factory=list, repr=False)
    layer_inputs: list = field(default_factory=list, repr=False)


def _activate(z, activation):
    if activation == LEAKY_RELU:
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    return z


def _activate_grad(z, activation):
    if activation == LEAKY_RELU:
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    return np.ones_like(z)


def classifier_logits(params: ModelParams, feature: np.ndarray) -> np.ndarray:
    if params.classifier == COSINE:
        return params.alpha * pairwise_cosine(feature, params.classifier_weights)
    return feature @ params.classifier_weights.T


def forward(params: ModelParams, inputs) -> ForwardResult:
    """Forward pass for a batch ``(n, input_dim)`` or a single vector.

    A single vector input yields 1-D outputs.
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(
            f"input must have {params.input_dim} features, got shape {np.shape(inputs)}"
        )
    a = x
    pre, ins = [], []
    for layer in params.layers:
        ins.append(a)
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = _activate(z, layer.activation)
    emb = a @ params.embed_proj.T
    logits = classifier_logits(params, a)
    if single:
        return ForwardResult(a[0], emb[0], logits[0], pre, ins)
    return ForwardResult(a, emb, logits, pre, ins)


def backward(
    params: ModelParams,
    inputs,
    labels,
    lam: float = DEFAULT_LAMBDA,
    freeze_extractor: bool = False,
):
    """Loss breakdown and gradients of ``cls + dce + lam * osr`` (batch mean).

    Returns ``(LossBreakdown, grads)`` where ``grads`` maps every parameter
    group name, plus ``"radius"``, to its gradient. Center gradients are zero
    for fixed prototypes; extractor gradients are zero when
    ``freeze_extractor`` is set.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.atleast_1d(np.asarray(labels))
    if x.ndim == 1:
        x = x[None, :]
    if y.shape[0] != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    fw = forward(params, x)
    h, emb = fw.feature, fw.embedding
    protos = params.protos

    if params.classifier == COSINE:
        cls, g_h, g_w, cl_c = cosine_ce_loss_batch(h, y, params.classifier_weights, params.alpha)
    else:
        cls, g_h, g_w, cl_c = linear_ce_loss_batch(h, y, params.classifier_weights)
    dce, g_e, g_c, cl_d = dce_loss_batch(emb, y, protos)
    osr, g_e_osr, g_c_osr, g_r = osr_loss_batch(emb, y, protos)
    if lam != 0:
        g_e = g_e + lam * g_e_osr
        g_c = g_c + lam * g_c_osr
        g_r = lam * g_r
    else:
        g_r = 0.0
    if protos.mode != LEARNABLE:
        g_c = np.zeros_like(g_c)

    grads = {}
    grads["embed_proj"] = g_e.T @ h
    grads["classifier"] = g_w
    grads["centers"] = g_c
    grads["radius"] = np.float64(g_r)

    g_a = g_h + g_e @ params.embed_proj
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        g_z = g_a * _activate_grad(fw.pre_activations[i], layer.activation)
        if freeze_extractor:
            grads[f"layers.{i}.weight"] = np.zeros_like(layer.weight)
            grads[f"layers.{i}.bias"] = np.zeros_like(layer.bias)
        else:
            grads[f"layers.{i}.weight"] = g_z.T @ fw.layer_inputs[i]
            grads[f"layers.{i}.bias"] = g_z.sum(axis=0)
        g_a = g_z @ layer.weight

    breakdown = LossBreakdown(dce=dce, osr=osr, cls=cls, lam=lam, clamped=cl_c + cl_d)
    return breakdown, grads


def total_loss(params: ModelParams, inputs, labels, lam: float = DEFAULT_LAMBDA) -> float:
    """Scalar objective matching :func:`backward` (used by finite differences)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    fw = forward(params, x)
    if params.classifier == COSINE:
        cls = cosine_ce_loss_batch(fw.feature, y, params.classifier_weights, params.alpha)[0]
    else:
        cls = linear_ce_loss_batch(fw.feature, y, params.classifier_weights)[0]
    dce = dce_loss_batch(fw.embedding, y, params.protos)[0]
    osr = osr_loss_batch(fw.embedding, y, params.protos)[0]
    return cls + dce + lam * osr


# Inference ------------------------------------------------------------------


@dataclass(frozen=True)
class InferenceConfig:
    gamma: float = DEFAULT_GAMMA
    xi: float = DEFAULT_XI

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.xi <= 1.0:
            raise ConfigError(f"xi must lie in [0, 1], got {self.xi}")


@dataclass
class Prediction:
    """Result of the rejection rule for one sample.

    ``decision`` is a class index, :data:`UNKNOWN` or :data:`FILTERED`.
    """

    decision: int
    class_scores: np.ndarray
    proto_posterior: np.ndarray
    embedding: np.ndarray

    @property
    def is_known(self) -> bool:
        return self.decision >= 0

    @property
    def label(self) -> str:
        return decision_label(self.decision)


def decision_label(decision: int) -> str:
    if decision == UNKNOWN:
        return "unknown"
    if decision == FILTERED:
        return "filtered"
    return str(int(decision))


def parse_decision(text: str) -> int:
    if text == "unknown":
        return UNKNOWN
    if text == "filtered":
        return FILTERED
    return int(text)


def decide(max_class_score, top_posterior, top_class, cfg: InferenceConfig):
    """Apply the two thresholds to precomputed scores (vectorized)."""
    max_class_score = np.asarray(max_class_score)
    top_posterior = np.asarray(top_posterior)
    decision = np.where(top_posterior >= cfg.xi, np.asarray(top_class), UNKNOWN)
    return np.where(max_class_score < cfg.gamma, FILTERED, decision).astype(np.int64)


@dataclass
class BatchPrediction:
    decisions: np.ndarray
    class_scores: np.ndarray
    proto_posterior: np.ndarray
    embeddings: np.ndarray

    def __len__(self):
        return self.decisions.shape[0]

    def __getitem__(self, i) -> Prediction:
        return Prediction(
            int(self.decisions[i]),
            self.class_scores[i],
            self.proto_posterior[i],
            self.embeddings[i],
        )

    @property
    def top_class(self) -> np.ndarray:
        return self.proto_posterior.argmax(axis=1)

    @property
    def top_posterior(self) -> np.ndarray:
        return self.proto_posterior.max(axis=1)

    @property
    def max_class_score(self) -> np.ndarray:
        return self.class_scores.max(axis=1)


def infer_batch(params: ModelParams, inputs, cfg: InferenceConfig = InferenceConfig()) -> BatchPrediction:
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    fw = forward(params, x)
    scores = softmax_rows(fw.logits)
    posterior = softmax_rows(-pairwise_proto_distance(fw.embedding, params.protos.centers))
    top = posterior.argmax(axis=1)
    decisions = decide(scores.max(axis=1), posterior[np.arange(len(top)), top], top, cfg)
    return BatchPrediction(decisions, scores, posterior, fw.embedding)


def infer(params: ModelParams, inputs, cfg: InferenceConfig = InferenceConfig()) -> Prediction:
    """Classify one input as a known class, unknown, or filtered.

    Samples whose best classifier score is below ``gamma`` are filtered.
    Otherwise the class with the highest prototype posterior is chosen and kept
    only if that posterior reaches ``xi``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("infer takes a single input vector; use infer_batch")
    return infer_batch(params, x[None, :], cfg)[0]


# Parameter file --------------------------------------------------------------
#
# Layout (all little-endian):
#   b"OCPL" | u32 version
#   u8 proto_mode | u8 classifier | u16 n_layers | u8 activation * n_layers
#   f64 alpha | f64 radius
#   sections, in order: layers.{i}.weight, layers.{i}.bias, ..., embed_proj,
#   classifier, centers. Each section is
#     u16 name_len | name (utf-8) | u32 ndim | u32 dim * ndim | f64 payload (row-major)

MAGIC = b"OCPL"
FORMAT_VERSION = 1
_MODE_CODES = {FIXED: 0, LEARNABLE: 1}
_CLS_CODES = {COSINE: 0, LINEAR: 1}
_ACT_CODES = {LEAKY_RELU: 0, IDENTITY: 1}


def _section(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def params_to_bytes(params: ModelParams) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack(
        "<BBH",
        _MODE_CODES[params.protos.mode],
        _CLS_CODES[params.classifier],
        len(params.layers),
    )
    out += bytes(_ACT_CODES[l.activation] for l in params.layers)
    out += struct.pack("<dd", params.alpha, params.protos.radius)
    for name, arr in params.arrays().items():
        out += _section(name, arr)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParamFileError(
                f"truncated parameter file: section '{section}' is incomplete", section
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def params_from_bytes(data: bytes) -> ModelParams:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ParamFileError("not a parameter file (bad magic bytes)", "magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise ParamFileError(
            f"unsupported format version {version} (expected {FORMAT_VERSION})", "version"
        )
    mode_c, cls_c, n_layers = r.unpack("<BBH", "header")
    act_codes = r.take(n_layers, "header")
    alpha, radius = r.unpack("<dd", "header")
    try:
        mode = {v: k for k, v in _MODE_CODES.items()}[mode_c]
        classifier = {v: k for k, v in _CLS_CODES.items()}[cls_c]
        acts = [{v: k for k, v in _ACT_CODES.items()}[c] for c in act_codes]
    except KeyError as exc:
        raise ParamFileError(f"unknown code {exc} in header", "header") from None

    names = []
    for i in range(n_layers):
        names += [f"layers.{i}.weight", f"layers.{i}.bias"]
    names += ["embed_proj", "classifier", "centers"]
    arrays = {}
    for expected in names:
        (name_len,) = r.unpack("<H", expected)
        name = r.take(name_len, expected).decode("utf-8", errors="replace")
        if name != expected:
            raise ParamFileError(f"expected section '{expected}', found '{name}'", expected)
        (ndim,) = r.unpack("<I", expected)
        if ndim > 2:
            raise ParamFileError(f"section '{expected}' has {ndim} dimensions", expected)
        shape = r.unpack(f"<{ndim}I", expected)
        count = int(np.prod(shape, dtype=np.int64))
        payload = r.take(8 * count, expected)
        arrays[expected] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise ParamFileError(f"{len(data) - r.pos} trailing bytes after last section", "trailer")

    try:
        layers = [
            Layer(arrays[f"layers.{i}.weight"], arrays[f"layers.{i}.bias"], acts[i])
            for i in range(n_layers)
        ]
        return ModelParams(
            layers,
            arrays["embed_proj"],
            arrays["classifier"],
            PrototypeSet(arrays["centers"], radius, mode),
            alpha=alpha,
            classifier=classifier,
        )
    except (DimensionError, ConfigError, ValueError) as exc:
        raise ParamFileError(f"inconsistent shapes: {exc}", "shapes") from exc


def save_params(params: ModelParams, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, params_to_bytes(params))


def load_params(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
