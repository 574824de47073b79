"""Acceptance criteria, one test each.

Every test prints a single ``PASS`` / ``FAIL`` line with the measured values.
Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python3 tests/test_acceptance.py``.
"""

import contextlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

import oracles  # noqa: E402
from protoworld.cli import main as cli_main  # noqa: E402
from protoworld.config import load_config, train_config  # noqa: E402
from protoworld.core_math import softmax_rows  # noqa: E402
from protoworld.data import filter_by_labels, holdout_split  # noqa: E402
from protoworld.experiments import (  # noqa: E402
    ABLATION_GRID,
    FULL_CELL,
    AblationCell,
    load_dataset,
    open_set_run,
    reference_splits,
    run_ablation,
)
from protoworld.gradcheck import random_model  # noqa: E402
from protoworld.metrics import TRUE_UNKNOWN, PredictionDump, a_ose, classification_report, confusion_matrix, unknown_recall  # noqa: E402
from protoworld.model import InferenceConfig, forward, infer, infer_batch, init_params  # noqa: E402
from protoworld.protocol import evaluate_stage, initial_state, run_stage, split_tasks  # noqa: E402
from protoworld.trainer import train  # noqa: E402

SEEDS = range(5)


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}: {name}: {detail}"
    print(line, flush=True)
    assert ok, line


@pytest.fixture(autouse=True)
def _show_lines(request, capsys):
    # let the PASS/FAIL line reach the terminal even when output is captured
    yield
    out = capsys.readouterr().out
    with capsys.disabled():
        for line in out.splitlines():
            if line.startswith(("PASS:", "FAIL:")):
                print("\n" + line, end="")


@pytest.fixture(scope="module")
def reference_config():
    return load_config()


# 1 -----------------------------------------------------------------------------


def test_gradient_fidelity(tmp_path):
    buf = io.StringIO()
    start = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        code = cli_main(["gradcheck", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    rows = [json.loads(l) for l in buf.getvalue().splitlines()]
    ops = {r["op"]: r for r in rows}
    required = {"dce", "osr", "cosine_ce", "backward"}
    ok = (
        code == 0
        and required <= ops.keys()
        and all(r["trials"] >= 100 and r["max_rel_error"] < 1e-4 for r in rows)
        and elapsed < 60
    )
    worst = ", ".join(f"{r['op']}={r['max_rel_error']:.2e}" for r in rows)
    report("gradient fidelity", ok, f"exit={code} max rel err [{worst}] tol 1e-4, {elapsed:.1f}s < 60s")


# 2 -----------------------------------------------------------------------------


def test_oracle_equivalence(reference_config):
    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(1000):
        params = random_model(rng, alpha=float(rng.uniform(1, 20)))
        x = rng.normal(0, 2, params.input_dim)
        cfg = InferenceConfig(gamma=float(rng.uniform(0, 0.6)), xi=float(rng.uniform(0, 1)))
        agree += infer(params, x, cfg).decision == oracles.decide(params, x, cfg.gamma, cfg.xi)

    mismatches = 0
    dumps = 0
    for seed in SEEDS:
        dump, K, prev = _reference_dump(reference_config, seed)
        for xi in (0.0, 0.5, 0.999999):
            dec = dump.redecide(InferenceConfig(0.05, xi))
            d = PredictionDump(dump.true_labels, dec, dump.top_class, dump.top_posterior, dump.max_class_score)
            text = d.to_csv()
            back = PredictionDump.from_csv(text)
            got = classification_report(back.true_labels, back.decisions, K, previous=prev).to_dict()
            want = oracles.report_from_dump_csv(text, K, previous=prev)
            mismatches += sum(got[k] != v for k, v in want.items())
            dumps += 1
    ok = agree == 1000 and mismatches == 0
    report(
        "oracle equivalence",
        ok,
        f"inference agreement {agree}/1000; {dumps} dumps recomputed, {mismatches} metric mismatches",
    )


_dump_cache = {}


def _reference_dump(config, seed):
    """Trained full-configuration model on the reference experiment, scored on
    known test classes (two groups) plus held-out unknowns."""
    if seed in _dump_cache:
        return _dump_cache[seed]
    train_ds, _, test, unknown = reference_splits(config, seed)
    cfg = train_config(config, seed=seed)
    m = config["model"]
    params = init_params(train_ds.feature_dim, len(train_ds.class_labels), m["embed_dim"], tuple(m["hidden_sizes"]), seed=seed)
    params, _ = train(params, train_ds, cfg)
    X = np.concatenate([test.X, unknown.X])
    true = np.concatenate([test.y, np.full(len(unknown), TRUE_UNKNOWN)])
    dump = PredictionDump.from_batch(true, infer_batch(params, X, InferenceConfig(0.05, 0.0)))
    K = params.num_classes
    _dump_cache[seed] = (dump, K, set(range(K // 2)))
    _dump_cache[("params", seed)] = (params, X)
    return _dump_cache[seed]


# 3 -----------------------------------------------------------------------------


def test_normalization_and_monotonicity(reference_config):
    rng = np.random.default_rng(7)
    worst = 0.0
    vectors = 0
    for _ in range(200):
        params = random_model(rng, alpha=float(rng.uniform(1, 30)))
        batch = infer_batch(params, rng.normal(0, 3, (10, params.input_dim)))
        for probs in (batch.class_scores, batch.proto_posterior):
            worst = max(worst, float(np.max(np.abs(probs.sum(axis=1) - 1))))
            vectors += len(probs)

    sweep = np.round(np.arange(0.0, 1.0, 0.1), 1)
    monotone = True
    for seed in SEEDS:
        dump, K, _ = _reference_dump(reference_config, seed)
        params, X = _dump_cache[("params", seed)]
        batch = infer_batch(params, X)
        for probs in (batch.class_scores, batch.proto_posterior):
            worst = max(worst, float(np.max(np.abs(probs.sum(axis=1) - 1))))
            vectors += len(probs)
        dumps = [dump]
        # a perturbed dump with spread-out posteriors exercises the interior of the sweep
        spread = PredictionDump(dump.true_labels, dump.decisions, dump.top_class,
                                np.random.default_rng(seed).uniform(0, 1, len(dump)), dump.max_class_score)
        dumps.append(spread)
        for d in dumps:
            urs, aoses = [], []
            for xi in sweep:
                conf = confusion_matrix(d.true_labels, d.redecide(InferenceConfig(0.05, float(xi))), K)
                urs.append(unknown_recall(conf))
                aoses.append(a_ose(conf))
            monotone &= all(b >= a for a, b in zip(urs, urs[1:]))
            monotone &= all(b <= a for a, b in zip(aoses, aoses[1:]))
    ok = worst <= 1e-9 and monotone
    report(
        "normalization and monotonicity",
        ok,
        f"{vectors} probability vectors, max |sum-1| = {worst:.1e} <= 1e-9; "
        f"UR nondecreasing and A-OSE nonincreasing over xi in 0..0.9 on {2 * len(SEEDS)} dumps: {monotone}",
    )


# 4 -----------------------------------------------------------------------------


def test_hypersphere_convergence(reference_config):
    config = reference_config
    seed = config["seed"]
    ds = load_dataset(config, seed)
    known = filter_by_labels(ds, range(config["ablation"]["num_known"]))
    start = time.perf_counter()
    m = config["model"]
    params = init_params(known.feature_dim, 5, m["embed_dim"], tuple(m["hidden_sizes"]), seed=seed)
    params, log = train(params, known, train_config(config))
    elapsed = time.perf_counter() - start
    r = log.radii
    final = r[-1]
    spread = r[-10:].max() - r[-10:].min()
    emb = forward(params, known.X).embedding
    de = np.sum((emb - params.protos.centers[known.y]) ** 2, axis=1) / params.embed_dim
    inside = float(np.mean(de <= 1.1 * final))
    ok = final > 0 and spread < 0.05 * final and inside >= 0.90 and elapsed < 120 and len(r) == 100
    report(
        "hypersphere convergence",
        ok,
        f"5 classes x {len(known) // 5} samples, d={params.embed_dim}, {len(r)} epochs: final R={final:.4f} > 0, "
        f"last-10 range {spread:.2e} < 5% ({0.05 * final:.2e}), {inside:.1%} inside 1.1R (>= 90%), "
        f"intra D_e {log.initial_intra_de:.3f} -> {log.intra_de[-1]:.3f}, {elapsed:.1f}s < 120s",
    )


# 5 -----------------------------------------------------------------------------


def test_open_set_separation(reference_config):
    runs = [open_set_run(reference_config, s, FULL_CELL) for s in SEEDS]
    ok = all(r["accuracy"] >= 0.90 and r["ur"] >= 0.70 for r in runs)
    detail = "; ".join(f"seed {r['seed']}: acc {r['accuracy']:.3f} UR {r['ur']:.3f}" for r in runs)
    report("open-set separation", ok, f"known acc >= 0.90 and UR >= 0.70 in every seed ({detail})")


# 6 -----------------------------------------------------------------------------


def test_ablation_trend(reference_config):
    runs = run_ablation(reference_config)
    by = {(r["cell"], r["seed"]): r for r in runs}
    seeds = sorted({r["seed"] for r in runs})
    pairs_ok = []
    counts = []
    for mode in ("learnable", "fixed"):
        off = AblationCell(mode, False, False).label
        on = AblationCell(mode, True, False).label
        wins = sum(by[(on, s)]["intra_de"] < by[(off, s)]["intra_de"] for s in seeds)
        counts.append(f"{mode} {wins}/{len(seeds)}")
        pairs_ok.append(wins > len(seeds) / 2)
    medians = {c.label: float(np.median([by[(c.label, s)]["ur"] for s in seeds])) for c in ABLATION_GRID}
    best = max(medians.values())
    full_best = medians[FULL_CELL.label] >= best
    ok = all(pairs_ok) and full_best and len(seeds) >= 5
    med = ", ".join(f"{k}={v:.3f}" for k, v in medians.items())
    report(
        "ablation trend",
        ok,
        f"(a) ESC lowers intra D_e: {', '.join(counts)} seeds; "
        f"(b) full config median UR {medians[FULL_CELL.label]:.3f} vs best {best:.3f} [{med}]",
    )


# 7 -----------------------------------------------------------------------------


def _stage1_accuracy_after_stage2(config, seed, finetune):
    ds = load_dataset(config, seed)
    train_ds, test_ds = holdout_split(ds, config["data"]["test_fraction"], seed)
    schedule = split_tasks(ds.class_labels, 2, seed, config["protocol"]["exemplars_per_class"])
    from protoworld.config import protocol_config

    cfg, pcfg = train_config(config, seed=seed), protocol_config(config)
    state = initial_state(schedule)
    for task in schedule.tasks:
        state = run_stage(state, filter_by_labels(train_ds, task), cfg, pcfg, finetune=finetune)
    # xi = 0: compare classification of stage-1 classes without rejection
    report_, _ = evaluate_stage(state, filter_by_labels(test_ds, state.known), InferenceConfig(0.05, 0.0))
    return report_.acc_previous


def test_incremental_finetune(reference_config):
    pairs = [
        (_stage1_accuracy_after_stage2(reference_config, s, True), _stage1_accuracy_after_stage2(reference_config, s, False))
        for s in SEEDS
    ]
    wins = sum(a > b for a, b in pairs)
    detail = "; ".join(f"{a:.3f} vs {b:.3f}" for a, b in pairs)
    report("incremental fine-tuning", wins >= 4, f"fine-tune beats no-fine-tune in {wins}/5 seeds (>= 4) [{detail}]")


# 8 -----------------------------------------------------------------------------


def test_openworld_determinism(tmp_path):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        with contextlib.redirect_stdout(io.StringIO()):
            code = cli_main(["openworld", "--seed", "3", "--out", str(out)])
        assert code == 0
        outputs.append((out / "results.jsonl").read_bytes())
    n = outputs[0].count(b"\n")
    report("determinism", outputs[0] == outputs[1] and n == 4, f"two openworld runs, {n} stages each, byte-identical: {outputs[0] == outputs[1]}")


if __name__ == "__main__":
    import tempfile

    cfg = load_config()
    tests = [
        lambda: test_gradient_fidelity(Path(tempfile.mkdtemp())),
        lambda: test_oracle_equivalence(cfg),
        lambda: test_normalization_and_monotonicity(cfg),
        lambda: test_hypersphere_convergence(cfg),
        lambda: test_open_set_separation(cfg),
        lambda: test_ablation_trend(cfg),
        lambda: test_incremental_finetune(cfg),
        lambda: test_openworld_determinism(Path(tempfile.mkdtemp())),
    ]
    failed = 0
    for t in tests:
        try:
            t()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
