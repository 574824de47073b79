"""Command-line front end.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O error.
Failures print one JSON object ``{"error", "message", "exit_code"}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import FeatureDataset, filter_by_labels, holdout_split, load_csv, save_csv
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateVectorError,
    DimensionError,
    EmptyResultError,
    LabelError,
    NumericalError,
    ParamFileError,
)
from .experiments import load_dataset, run_ablation, summarize, summary_csv, summary_markdown
from .gradcheck import OPS, gradcheck
from .io_utils import atomic_write_text
from .metrics import TRUE_UNKNOWN, PredictionDump, classification_report, compactness
from .model import InferenceConfig, infer_batch, init_params, load_params, save_params
from .plot import embedding_svg
from .protocol import evaluate_stage, initial_state, run_stage, select_xi, split_tasks, stage_record
from .trainer import train

log = logging.getLogger("protoworld")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class NumericFailure(Exception):
    """A check ran to completion and failed (e.g. gradient mismatch)."""


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), allow_nan=False)


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out_dir"] = args.out
    put("inference", "xi", args.xi)
    put("inference", "gamma", args.gamma)
    put("train", "lambda", args.lam)
    put("train", "alpha", args.alpha)
    put("train", "proto_mode", args.proto_mode)
    put("protocol", "num_tasks", args.tasks)
    if args.no_esc:
        put("train", "lambda", 0.0)
    if args.no_csc:
        put("model", "classifier", "linear")
    return o


def _xi_value(text: str):
    return text if text == "auto" else float(text)


def _out_dir(config) -> Path:
    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# Commands ----------------------------------------------------------------------


def cmd_gen(config, out_path):
    ds = load_dataset(config)
    save_csv(ds, out_path)
    print(dumps({"samples": len(ds), "classes": ds.class_labels, "path": str(out_path)}))


def cmd_train(config, known=None):
    ds = load_dataset(config)
    if known is not None:
        ds = filter_by_labels(ds, range(known))
    K = int(ds.y.max()) + 1
    cfg = cfgmod.train_config(config)
    m = config["model"]
    params = init_params(
        ds.feature_dim, K, m["embed_dim"], tuple(m["hidden_sizes"]),
        proto_mode=cfg.proto_mode, classifier=m["classifier"], alpha=cfg.alpha, seed=cfg.seed,
    )
    params, trainlog = train(params, ds, cfg)
    out = _out_dir(config)
    save_params(params, out / "params.ocpl")
    atomic_write_text(out / "train_log.csv", trainlog.to_csv())
    last = trainlog.records[-1]
    print(dumps({"epochs": last.epoch, "radius": last.radius, "mean_intra_de": last.mean_intra_de,
                 "accuracy": last.accuracy, "out_dir": str(out)}))


def cmd_openworld(config):
    seed = config["seed"]
    ds = load_dataset(config)
    p = config["protocol"]
    inf = config["inference"]
    train_ds, test_ds = holdout_split(ds, config["data"].get("test_fraction", 0.3), seed)
    val_ds = None
    if inf["xi"] == "auto":
        train_ds, val_ds = holdout_split(train_ds, inf["val_fraction"], seed + 1)
    schedule = split_tasks(ds.class_labels, p["num_tasks"], seed, p["exemplars_per_class"])
    cfg = cfgmod.train_config(config)
    pcfg = cfgmod.protocol_config(config)
    out = _out_dir(config)

    state = initial_state(schedule)
    lines = []
    for i, task in enumerate(schedule.tasks, start=1):
        state = run_stage(state, filter_by_labels(train_ds, task), cfg, pcfg, finetune=p["finetune"])
        if val_ds is not None:
            val = filter_by_labels(val_ds, state.known).relabel(state.label_to_index())
            icfg = InferenceConfig(inf["gamma"], select_xi(state.params, val, inf["gamma"], inf["target_accuracy"]))
        else:
            icfg = cfgmod.inference_config(config)
        report, dump = evaluate_stage(state, test_ds, icfg)
        save_params(state.params, out / f"stage{i}_params.ocpl")
        atomic_write_text(out / f"stage{i}_predictions.csv", dump.to_csv())
        lines.append(dumps(stage_record(i, report, state.params.protos.radius)))
        atomic_write_text(out / "results.jsonl", "\n".join(lines) + "\n")
        print(lines[-1])


def _eval_labels(ds: FeatureDataset, num_known: int) -> np.ndarray:
    return np.where(ds.y < num_known, ds.y, TRUE_UNKNOWN)


def cmd_eval(config, params_path, data_path):
    params = load_params(params_path)
    ds = load_csv(data_path)
    if ds.feature_dim != params.input_dim:
        raise DimensionError(f"data has {ds.feature_dim} features, model expects {params.input_dim}")
    icfg = cfgmod.inference_config(config)
    true = _eval_labels(ds, params.num_classes)
    dump = PredictionDump.from_batch(true, infer_batch(params, ds.X, icfg))
    report = classification_report(true, dump.decisions, params.num_classes)
    known = true != TRUE_UNKNOWN
    if known.any():
        report.mean_intra_de, report.mean_inter_center_dist = compactness(
            params, FeatureDataset(ds.X[known], true[known])
        )
    out = _out_dir(config)
    body = report.to_dict()
    body.update({"gamma": icfg.gamma, "xi": icfg.xi})
    atomic_write_text(out / "metrics.json", dumps(body) + "\n")
    atomic_write_text(out / "predictions.csv", dump.to_csv())
    print(dumps({k: v for k, v in body.items() if k != "confusion"}))


def cmd_gradcheck(config):
    g = config["gradcheck"]
    failed = []
    for op in OPS:
        rep = gradcheck(op, trials=g["trials"], step=g["step"], tolerance=g["tolerance"],
                        seed=config["seed"], alpha=config["train"]["alpha"],
                        lam=config["train"]["lambda"] or 0.1)
        print(dumps(rep.to_dict()))
        if not rep.passed:
            failed.append(op)
    if failed:
        raise NumericFailure(f"gradient check failed for {', '.join(failed)}")


def cmd_ablate(config, jobs=1):
    runs = run_ablation(config, jobs=jobs)
    rows = summarize(runs)
    out = _out_dir(config)
    atomic_write_text(out / "ablation_runs.jsonl", "".join(dumps(r) + "\n" for r in runs))
    atomic_write_text(out / "ablation.csv", summary_csv(rows))
    md = summary_markdown(rows)
    atomic_write_text(out / "ablation.md", md)
    print(md, end="")


def cmd_plot(config, params_path, data_path, out_svg):
    params = load_params(params_path)
    ds = load_csv(data_path)
    icfg = cfgmod.inference_config(config)
    batch = infer_batch(params, ds.X, icfg)
    svg = embedding_svg(
        batch.embeddings, _eval_labels(ds, params.num_classes), batch.decisions,
        params.protos.centers, params.protos.radius,
        title=f"R={params.protos.radius:.4g}, xi={icfg.xi:g}",
    )
    atomic_write_text(out_svg, svg)


# Parser ------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--xi", type=_xi_value, help="prototype-posterior threshold, or 'auto'")
    p.add_argument("--gamma", type=float, help="classifier-score filter threshold")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the radius loss")
    p.add_argument("--alpha", type=float, help="cosine classifier scale")
    p.add_argument("--proto-mode", choices=["fixed", "learnable"])
    p.add_argument("--no-esc", action="store_true", help="disable the radius loss")
    p.add_argument("--no-csc", action="store_true", help="plain inner-product classifier")
    p.add_argument("--tasks", type=int, help="number of incremental tasks")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoworld", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset CSV")
    p.add_argument("out_path", type=Path)
    _add_common(p)

    p = sub.add_parser("train", help="closed-set training")
    p.add_argument("--known", type=int, help="train only on labels below this value")
    _add_common(p)

    p = sub.add_parser("openworld", help="incremental open-world protocol")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate saved parameters on a CSV dataset")
    p.add_argument("params_path", type=Path)
    p.add_argument("data_path", type=Path)
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(p)

    p = sub.add_parser("ablate", help="module ablation grid over several seeds")
    p.add_argument("--jobs", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("plot", help="SVG scatter of embeddings")
    p.add_argument("params_path", type=Path)
    p.add_argument("data_path", type=Path)
    p.add_argument("out_svg", type=Path)
    _add_common(p)

    p = sub.add_parser("schema", help="print the run-configuration JSON schema")
    return parser


def _dispatch(args):
    if args.command == "schema":
        print(json.dumps(cfgmod.RUN_CONFIG_SCHEMA, indent=2))
        return
    config = cfgmod.load_config(args.config, _overrides(args))
    if args.command == "gen":
        cmd_gen(config, args.out_path)
    elif args.command == "train":
        cmd_train(config, args.known)
    elif args.command == "openworld":
        cmd_openworld(config)
    elif args.command == "eval":
        cmd_eval(config, args.params_path, args.data_path)
    elif args.command == "gradcheck":
        cmd_gradcheck(config)
    elif args.command == "ablate":
        cmd_ablate(config, args.jobs)
    elif args.command == "plot":
        cmd_plot(config, args.params_path, args.data_path, args.out_svg)


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING)
    try:
        _dispatch(args)
    except (NumericalError, NumericFailure, DegenerateVectorError, FloatingPointError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (ParamFileError, DataFormatError, OSError) as exc:
        return _fail(exc, EXIT_IO)
    except (ConfigError, LabelError, DimensionError, EmptyResultError, ValueError) as exc:
        return _fail(exc, EXIT_USAGE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
