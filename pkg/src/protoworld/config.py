"""Run configuration: JSON schema, defaults, flag overrides and conversion."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .model import InferenceConfig
from .protocol import ProtocolConfig
from .trainer import TrainConfig

_pos_int = {"type": "integer", "minimum": 1}
_unit = {"type": "number", "minimum": 0, "maximum": 1}


def _obj(props: dict, required=()) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": list(required),
        "additionalProperties": False,
    }


BLOBS_SCHEMA = _obj(
    {
        "kind": {"const": "blobs"},
        "num_classes": _pos_int,
        "samples_per_class": _pos_int,
        "feature_dim": _pos_int,
        "center_spread": {"type": "number", "exclusiveMinimum": 0},
        "cluster_std": {"type": "number", "exclusiveMinimum": 0},
        "min_center_dist": {"type": "number", "minimum": 0},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
    required=["kind"],
)

RING_SCHEMA = _obj(
    {
        "kind": {"const": "ring"},
        "samples_per_class": _pos_int,
        "feature_dim": {"type": "integer", "minimum": 2},
        "r_in": {"type": "number", "exclusiveMinimum": 0},
        "r_out": {"type": "number", "exclusiveMinimum": 0},
        "num_blobs": _pos_int,
        "cluster_std": {"type": "number", "exclusiveMinimum": 0},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
    required=["kind"],
)

CSV_SCHEMA = _obj(
    {
        "kind": {"const": "csv"},
        "path": {"type": "string"},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
    required=["kind", "path"],
)

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "protoworld run configuration",
    **_obj(
        {
            "seed": {"type": "integer", "minimum": 0},
            "out_dir": {"type": "string"},
            "data": {"oneOf": [BLOBS_SCHEMA, RING_SCHEMA, CSV_SCHEMA]},
            "model": _obj(
                {
                    "hidden_sizes": {"type": "array", "items": _pos_int},
                    "embed_dim": _pos_int,
                    "classifier": {"enum": ["cosine", "linear"]},
                }
            ),
            "train": _obj(
                {
                    "epochs": _pos_int,
                    "batch_size": _pos_int,
                    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "lambda": {"type": "number", "minimum": 0},
                    "alpha": {"type": "number", "exclusiveMinimum": 0},
                    "proto_mode": {"enum": ["fixed", "learnable"]},
                    "finetune_period_epochs": _pos_int,
                    "finetune_momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "warmup_epochs": {"type": "integer", "minimum": 0},
                    "max_grad_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
                }
            ),
            "inference": _obj(
                {
                    "gamma": _unit,
                    "xi": {"oneOf": [_unit, {"const": "auto"}]},
                    "target_accuracy": _unit,
                    "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                }
            ),
            "protocol": _obj(
                {
                    "num_tasks": _pos_int,
                    "exemplars_per_class": _pos_int,
                    "finetune_fraction": {"type": "number", "exclusiveMinimum": 0},
                    "finetune_lr_scale": {"type": "number", "exclusiveMinimum": 0},
                    "finetune": {"type": "boolean"},
                }
            ),
            "ablation": _obj(
                {
                    "seeds": {"type": "integer", "minimum": 1},
                    "num_known": _pos_int,
                }
            ),
            "gradcheck": _obj(
                {
                    "trials": _pos_int,
                    "step": {"type": "number", "exclusiveMinimum": 0},
                    "tolerance": {"type": "number", "exclusiveMinimum": 0},
                }
            ),
        }
    ),
}

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "kind": "blobs",
        "num_classes": 8,
        "samples_per_class": 200,
        "feature_dim": 32,
        "center_spread": 1.5,
        "cluster_std": 0.5,
        "test_fraction": 0.3,
    },
    "model": {"hidden_sizes": [32], "embed_dim": 8, "classifier": "cosine"},
    "train": {
        "epochs": 100,
        "batch_size": 32,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "lambda": 0.1,
        "alpha": 16.0,
        "proto_mode": "fixed",
        "finetune_period_epochs": 10,
        "finetune_momentum": 0.5,
        "warmup_epochs": 20,
        "max_grad_norm": 10.0,
    },
    "inference": {"gamma": 0.05, "xi": 0.5, "target_accuracy": 0.95, "val_fraction": 0.25},
    "protocol": {
        "num_tasks": 4,
        "exemplars_per_class": 50,
        "finetune_fraction": 0.2,
        "finetune_lr_scale": 0.1,
        "finetune": True,
    },
    "ablation": {"seeds": 5, "num_known": 5},
    "gradcheck": {"trials": 100, "step": 1e-5, "tolerance": 1e-4},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        nested = isinstance(value, dict) and isinstance(out.get(key), dict)
        if nested and key == "data":
            nested = value.get("kind", out[key].get("kind")) == out[key].get("kind")
        if nested:
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(config: dict) -> None:
    try:
        jsonschema.validate(config, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated.

    Unknown keys survive the merge and are rejected by the schema. A ``data``
    section of a different ``kind`` replaces the default one wholesale.
    """
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        config = _merge(config, user)
    if overrides:
        config = _merge(config, overrides)
    validate(config)
    return config


def train_config(config: dict, **changes) -> TrainConfig:
    t = dict(config["train"])
    t["lam"] = t.pop("lambda")
    t["seed"] = config["seed"]
    t.update(changes)
    try:
        return TrainConfig(**t)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def inference_config(config: dict, xi: float | None = None) -> InferenceConfig:
    inf = config["inference"]
    if xi is None:
        if inf["xi"] == "auto":
            raise ConfigError("xi is 'auto' but no validation data is available here")
        xi = inf["xi"]
    return InferenceConfig(gamma=inf["gamma"], xi=float(xi))


def protocol_config(config: dict) -> ProtocolConfig:
    p, m = config["protocol"], config["model"]
    return ProtocolConfig(
        num_tasks=p["num_tasks"],
        exemplars_per_class=p["exemplars_per_class"],
        finetune_fraction=p["finetune_fraction"],
        finetune_lr_scale=p["finetune_lr_scale"],
        hidden_sizes=tuple(m["hidden_sizes"]),
        embed_dim=m["embed_dim"],
        classifier=m["classifier"],
    )
