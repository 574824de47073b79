"""Reference open-set experiment and the module ablation grid.

The reference experiment generates a dataset, keeps the first ``num_known``
classes as known (split into train / validation / test) and holds the rest
out as unknowns that only appear at test time. The rejection threshold is
picked on the validation split.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import train_config
from .data import FeatureDataset, filter_by_labels, generate, holdout_split, load_csv
from .errors import ConfigError
from .metrics import TRUE_UNKNOWN, classification_report
from .model import InferenceConfig, infer_batch, init_params
from .protocol import select_xi
from .trainer import train


@dataclass(frozen=True)
class AblationCell:
    proto_mode: str
    esc: bool
    csc: bool

    @property
    def label(self) -> str:
        mode = "fixed+finetuning" if self.proto_mode == "fixed" else "learnable"
        return f"{mode} PEA{' ESC' if self.esc else ''}{' CSC' if self.csc else ''}"


# PEA (the dce loss) is on in every cell.
ABLATION_GRID = (
    AblationCell("learnable", False, False),
    AblationCell("learnable", True, False),
    AblationCell("learnable", False, True),
    AblationCell("fixed", False, False),
    AblationCell("fixed", True, False),
    AblationCell("fixed", True, True),
)
FULL_CELL = ABLATION_GRID[-1]


def load_dataset(config: dict, seed: int | None = None) -> FeatureDataset:
    data = dict(config["data"])
    if data["kind"] == "csv":
        return load_csv(data["path"])
    data.setdefault("seed", config["seed"] if seed is None else seed)
    return generate(data)


def reference_splits(config: dict, seed: int):
    """Returns ``(train, val, test_known, unknown)``; known labels are 0..num_known-1."""
    ds = load_dataset(config, seed)
    labels = ds.class_labels
    num_known = config["ablation"]["num_known"]
    if num_known >= len(labels):
        raise ConfigError(f"need more than {num_known} classes to hold some out as unknown")
    known, unknown = labels[:num_known], labels[num_known:]
    index = {c: i for i, c in enumerate(known)}
    known_ds = filter_by_labels(ds, known).relabel(index)
    unknown_ds = filter_by_labels(ds, unknown)
    train_val, test = holdout_split(known_ds, config["data"].get("test_fraction", 0.3), seed)
    train_ds, val = holdout_split(train_val, config["inference"]["val_fraction"], seed + 1)
    return train_ds, val, test, unknown_ds


def open_set_run(config: dict, seed: int, cell: AblationCell = FULL_CELL) -> dict:
    """Train one configuration on the reference experiment and score it."""
    train_ds, val, test, unknown = reference_splits(config, seed)
    cfg = train_config(
        config,
        seed=seed,
        proto_mode=cell.proto_mode,
        lam=config["train"]["lambda"] if cell.esc else 0.0,
    )
    m = config["model"]
    params = init_params(
        train_ds.feature_dim,
        len(train_ds.class_labels),
        m["embed_dim"],
        tuple(m["hidden_sizes"]),
        proto_mode=cell.proto_mode,
        classifier="cosine" if cell.csc else "linear",
        alpha=cfg.alpha,
        seed=seed,
    )
    params, trainlog = train(params, train_ds, cfg)
    gamma = config["inference"]["gamma"]
    xi = select_xi(params, val, gamma, config["inference"]["target_accuracy"])
    icfg = InferenceConfig(gamma=gamma, xi=xi)
    X = np.concatenate([test.X, unknown.X])
    true = np.concatenate([test.y, np.full(len(unknown), TRUE_UNKNOWN)])
    report = classification_report(true, infer_batch(params, X, icfg).decisions, params.num_classes)
    return {
        "cell": cell.label,
        "seed": seed,
        "xi": xi,
        "ur": report.ur,
        "wi": report.wi,
        "a_ose": report.a_ose,
        "accuracy": report.acc_both,
        "intra_de": trainlog.records[-1].mean_intra_de,
        "radius": trainlog.records[-1].radius,
    }


def _run_cell(args):
    config, seed, cell = args
    return open_set_run(config, seed, cell)


def run_ablation(config: dict, jobs: int = 1) -> list:
    """Every grid cell for seeds ``seed, seed+1, ...``; results in grid-then-seed order."""
    seeds = [config["seed"] + i for i in range(config["ablation"]["seeds"])]
    tasks = [(config, s, cell) for cell in ABLATION_GRID for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, tasks))
    return [_run_cell(t) for t in tasks]


SUMMARY_METRICS = ("wi", "a_ose", "accuracy", "ur", "intra_de")


def summarize(runs: list) -> list:
    """Mean, std and median per cell and metric (NaN where a metric is absent)."""
    rows = []
    for cell in ABLATION_GRID:
        cell_runs = [r for r in runs if r["cell"] == cell.label]
        row = {
            "prototype": "fixed+finetuning" if cell.proto_mode == "fixed" else "learnable",
            "pea": True,
            "esc": cell.esc,
            "csc": cell.csc,
            "seeds": len(cell_runs),
        }
        for key in SUMMARY_METRICS:
            vals = np.array([np.nan if r[key] is None else r[key] for r in cell_runs], dtype=float)
            row[f"{key}_mean"] = float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else float("nan")
            row[f"{key}_std"] = float(np.nanstd(vals)) if np.any(~np.isnan(vals)) else float("nan")
            row[f"{key}_median"] = float(np.nanmedian(vals)) if np.any(~np.isnan(vals)) else float("nan")
        rows.append(row)
    return rows


def summary_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def summary_markdown(rows: list) -> str:
    mark = {True: "x", False: ""}
    lines = [
        "| Row | Prototype | PEA | ESC | CSC | WI | A-OSE | Accuracy | UR | intra D_e |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    for i, r in enumerate(rows, start=1):
        cells = [
            f"{r[f'{k}_mean']:.4g} ± {r[f'{k}_std']:.2g}" for k in SUMMARY_METRICS
        ]
        lines.append(
            f"| {i} | {r['prototype']} | {mark[r['pea']]} | {mark[r['esc']]} | {mark[r['csc']]} | "
            + " | ".join(cells)
            + " |"
        )
    return "\n".join(lines) + "\n"
