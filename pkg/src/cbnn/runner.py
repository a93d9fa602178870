"""Pipelines behind the CLI: simulate, train, evaluate, and the repro tables.

Every artifact is deterministic given the config document: data comes
from seeded generators, training threads its own rng, and evaluation
draws from a seed derived from the document seed. Reruns with the same
config must reproduce history logs and metric reports byte for byte,
so nothing here writes timestamps or machine-specific values.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfg
from . import data as datamod
from . import figures, metrics, nets, training
from .autodiff import ContractError
from .constraints import TOL_VIOLATION

EVAL_SEED_OFFSET = 77  # evaluation rng must not replay the training stream


# ---------------------------------------------------------------------------
# serialization helpers

def to_jsonable(obj):
    """Recursively strip numpy types so json.dumps output is canonical."""
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(to_jsonable(doc), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def write_history(path, history):
    """One JSON object per line; float repr round-trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(to_jsonable(row), sort_keys=True))
            fh.write("\n")
    return path


def save_predictions(path, summary, target=None):
    """x, mean, std (and target when known) at 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["x", "mean", "std"] + (["target"] if target is not None else [])
    arrays = [summary.x.ravel(), summary.mean.ravel(), summary.std.ravel()]
    if target is not None:
        arrays.append(np.asarray(target, dtype=np.float64).ravel())
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in zip(*arrays):
            fh.write(",".join("%.17g" % v for v in row) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared plumbing

def resolve_data(doc):
    """Materialize (train, test, constraint specs) from the data block."""
    block = doc["data"]
    if "sim" in block:
        return datamod.generate(cfg.build_sim(doc))
    paths = block["csv"]
    train = datamod.load_csv(paths["train"], split="train")
    test = datamod.load_csv(paths["test"], split="test")
    cpath = paths.get("constraints")
    specs = datamod.load_constraints(cpath) if cpath else []
    return train, test, specs


def run_training(doc):
    """Train per the document; returns (TrainResult, train, test, specs)."""
    net = cfg.build_network(doc)
    tc = cfg.build_train(doc)
    train, test, specs = resolve_data(doc)
    result = training.train(tc, net, train, specs)
    return result, train, test, specs


def evaluate_state(doc, net, state, test, specs):
    """Posterior predictive on the test grid plus the metric record."""
    opts = cfg.eval_options(doc)
    rng = np.random.default_rng(int(doc.get("seed", 0)) + EVAL_SEED_OFFSET)
    summary = nets.predict(state, net, test.x, n_samples=opts["n_samples"],
                           rng=rng)
    h = cfg.config_hash(doc)
    if opts["tol"] == TOL_VIOLATION:
        record = metrics.MetricsRecord.from_summary(
            summary, test.y, specs, config_hash=h,
            per_sample=opts["per_sample"])
    else:
        v, n = metrics.violation_stats(specs, summary, tol=opts["tol"],
                                       per_sample=opts["per_sample"])
        record = metrics.MetricsRecord(
            mse=metrics.mse(summary.mean, test.y),
            std=metrics.epistemic_std(summary),
            crps=metrics.crps_ensemble(summary.samples, test.y),
            v=v, n=n, n_test=int(summary.x.shape[0]), config_hash=h)
    return summary, record


# ---------------------------------------------------------------------------
# commands

def simulate(doc, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, specs = resolve_data(doc)
    datamod.save_csv(train, out / "train.csv")
    datamod.save_csv(test, out / "test.csv")
    datamod.save_constraints(specs, out / "constraints.json")
    meta = {
        "config_hash": cfg.config_hash(doc),
        "n_train": train.n,
        "n_test": test.n,
        "n_constraints": len(specs),
        "files": ["train.csv", "test.csv", "constraints.json"],
    }
    write_json(out / "meta.json", meta)
    figures.dataset_figure(out / "data.png", train, test=test, specs=specs)
    return meta


def train_cmd(doc, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash(doc)
    result, train, test, specs = run_training(doc)
    nets.save_checkpoint(out / "checkpoint.json", result.net, result.state,
                         seed=doc.get("seed"), config_hash=h)
    write_history(out / "history.jsonl", result.history)
    last = result.history[-1] if result.history else {}
    meta = {
        "config_hash": h,
        "mode": doc["train"].get("mode", "unconstrained"),
        "backend": doc["train"].get("backend", "bbb"),
        "epochs": len(result.history),
        "final_loss": last.get("loss"),
        "final_ef": last.get("ef"),
        "final_s": last.get("s"),
        "final_rho": last.get("rho"),
    }
    write_json(out / "train_meta.json", meta)
    figures.history_figure(out / "history.png", result.history)
    return result, meta


def evaluate_cmd(doc, checkpoint_path, out_dir, label=""):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net, state, ck = nets.load_checkpoint(checkpoint_path)
    train, test, specs = resolve_data(doc)
    summary, record = evaluate_state(doc, net, state, test, specs)
    doc_meta = record.to_dict()
    doc_meta["checkpoint_config_hash"] = ck.get("config_hash", "")
    write_json(out / "metrics.json", doc_meta)
    save_predictions(out / "predictions.csv", summary, target=test.y)
    figures.prediction_figure(out / "prediction.png", summary, train=train,
                              truth=test.y, specs=specs, title=label)
    line = record.table_row(label or "eval")
    with open(out / "report.txt", "w") as fh:
        fh.write(line + "\n")
        fh.write(f"config_hash {record.config_hash}\n")
    return record, line


# ---------------------------------------------------------------------------
# repro tables

# fixed row orders; merge order never depends on scheduling
SIM2_C_SWEEP = ((1, 1, 1), (1, 1, 2), (1, 2, 1), (2, 1, 1), (1, 1, 4),
                (1, 1, 8))


def repro_rows(sim):
    """(slug, label, override pairs) per table row, in report order."""
    if sim == "sim2":
        rows = [("bnn", "BNN", ())]
        for c in SIM2_C_SWEEP:
            slug = "ocbnn-" + "-".join(str(v) for v in c)
            rows.append((slug, f"OC-BNN c={list(c)}", (
                ("train.mode", "cocp"),
                ("train.c_weights", list(c)),
                ("train.lr_decay", 0.999),
            )))
        rows.append(("prbnn-hard", "PR-BNN (hard)", (
            ("train.mode", "hard"),
            ("train.lr_decay", 0.999),
            ("train.dual_update_every", 2),
        )))
        return rows
    if sim == "sim1":
        return [
            ("bnn", "BNN", ()),
            ("prbnn-soft", "PR-BNN (soft)", (
                ("train.mode", "soft"),
                ("train.lam", 10.0),
            )),
        ]
    raise ContractError(f"unknown sim {sim!r}")


def apply_pairs(doc, overrides):
    pairs = [f"{key}={json.dumps(val)}" for key, val in overrides]
    return cfg.apply_overrides(doc, pairs) if pairs else doc


def row_document(sim, slug, seed=None):
    """The full config document behind one repro table row."""
    for s, _, overrides in repro_rows(sim):
        if s == slug:
            return apply_pairs(cfg.default_document(sim, seed=seed),
                               overrides)
    raise ContractError(f"unknown {sim} row {slug!r}")


def run_row(task):
    """Train and evaluate one table row; writes that row's artifacts.

    Module-level and fed plain tuples so ProcessPoolExecutor can pickle
    it; returns only json-ready values.
    """
    sim, slug, label, overrides, out_root, seed = task
    doc = apply_pairs(cfg.default_document(sim, seed=seed), overrides)
    row_dir = Path(out_root) / slug
    row_dir.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash(doc)

    result, train, test, specs = run_training(doc)
    nets.save_checkpoint(row_dir / "checkpoint.json", result.net,
                         result.state, seed=doc.get("seed"), config_hash=h)
    write_history(row_dir / "history.jsonl", result.history)
    summary, record = evaluate_state(doc, result.net, result.state, test,
                                     specs)
    write_json(row_dir / "metrics.json", record.to_dict())
    save_predictions(row_dir / "predictions.csv", summary, target=test.y)
    figures.prediction_figure(row_dir / "prediction.png", summary,
                              train=train, truth=test.y, specs=specs,
                              title=label)
    figures.history_figure(row_dir / "history.png", result.history,
                           title=label)

    omap = dict(overrides)
    row = {
        "slug": slug,
        "label": label,
        "mode": doc["train"].get("mode", "unconstrained"),
        "config_hash": h,
        "metrics": record.to_dict(),
        "c_weights": omap.get("train.c_weights"),
        "lam": omap.get("train.lam"),
        "s_final": result.dual.s.tolist() if result.dual else None,
        "ef_final": result.history[-1]["ef"] if result.history else None,
        "curve_x": summary.x.ravel().tolist(),
        "curve_mean": summary.mean.ravel().tolist(),
    }
    return row


def _cs_cell(row):
    if row["c_weights"] is not None:
        return "c=" + json.dumps(row["c_weights"])
    if row["s_final"]:
        vals = ", ".join(f"{v:.1f}" for v in row["s_final"])
        return f"s=[{vals}]"
    if row["lam"] is not None:
        return f"lam={row['lam']:g}"
    return "-"


def markdown_table(sim, rows):
    """Per-model violation/accuracy table in the report layout."""
    k = len(rows[0]["metrics"]["v"]) if rows else 0
    head = (["model", "c / s"] + [f"v{i + 1}" for i in range(k)]
            + [f"n{i + 1}" for i in range(k)] + ["MSE", "STD"])
    lines = [f"# {sim} results", "",
             "| " + " | ".join(head) + " |",
             "|" + "---|" * len(head)]
    for row in rows:
        m = row["metrics"]
        cells = ([row["label"], _cs_cell(row)]
                 + [f"{x:.2g}" for x in m["v"]]
                 + [str(int(x)) for x in m["n"]]
                 + [f"{m['mse']:.1e}", f"{m['std']:.3f}"])
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Config hashes:")
    for row in rows:
        lines.append(f"- {row['slug']}: {row['config_hash']}")
    lines.append("")
    return "\n".join(lines)


def repro(sim, out_dir, threads=None, seed=None):
    """Run every table row for a simulation and assemble the report.

    threads > 1 farms rows out to worker processes; the merge order is
    the fixed row order either way.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if threads is None:
        threads = int(os.environ.get("CBNN_THREADS", "1"))
    if threads < 1:
        raise ContractError("CBNN_THREADS must be >= 1")
    tasks = [(sim, slug, label, overrides, str(out), seed)
             for slug, label, overrides in repro_rows(sim)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_row, tasks))
    else:
        rows = [run_row(t) for t in tasks]

    curves = [(r["label"], r.pop("curve_x"), r.pop("curve_mean"))
              for r in rows]
    _, test, _ = resolve_data(cfg.default_document(sim, seed=seed))
    figures.comparison_figure(out / "comparison.png", curves, truth=test.y,
                              title=f"{sim} posterior means")
    table = markdown_table(sim, rows)
    with open(out / "report.md", "w") as fh:
        fh.write(table)
    write_json(out / "repro.json", {"sim": sim, "rows": rows})
    return rows, table
