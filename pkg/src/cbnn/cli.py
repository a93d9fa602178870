"""Command-line entry point.

Commands: simulate, train, evaluate, gradcheck, repro. Exit codes:
0 success, 1 failed gradient or acceptance verification, 2 config or
I/O error, 3 numerical abort (a diagnostic dump path is printed).
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as cfg
from . import gradcheck as gc
from . import runner
from .autodiff import ContractError, DimensionError, DomainError
from .training import NumericalError

CONFIG_ERRORS = (ContractError, DimensionError, DomainError, OSError,
                 json.JSONDecodeError)


def build_parser():
    p = argparse.ArgumentParser(
        prog="cbnn",
        description="Constrained Bayesian neural network training engine.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("--config", type=str, default=None,
                            help="JSON config document")
            sp.add_argument("--sim", choices=("sim1", "sim2"), default="sim2",
                            help="built-in config to start from when "
                                 "--config is not given")
            sp.add_argument("--set", dest="overrides", action="append",
                            default=[], metavar="KEY=VALUE",
                            help="override a config entry (repeatable; "
                                 "dotted keys, JSON values)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override every seed in the document")
        sp.add_argument("--out", type=str, default=None,
                        help="output directory")

    sp = sub.add_parser("simulate", help="write datasets and constraints")
    common(sp)
    sp = sub.add_parser("train", help="train a model and save a checkpoint")
    common(sp)
    sp = sub.add_parser("evaluate", help="score a checkpoint on test data")
    common(sp)
    sp.add_argument("--checkpoint", type=str, default=None,
                    help="checkpoint path (default: <out>/checkpoint.json)")
    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", type=str, default=None)
    sp = sub.add_parser("repro", help="run every table row for a simulation")
    sp.add_argument("sim", nargs="?", choices=("sim1", "sim2"),
                    default="sim2")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", type=str, default=None)
    return p


def apply_seed(doc, seed):
    """Propagate one seed to the document, training, and data blocks."""
    doc = json.loads(json.dumps(doc))
    doc["seed"] = int(seed)
    doc.setdefault("train", {})["seed"] = int(seed)
    if "sim" in doc.get("data", {}):
        doc["data"]["sim"]["seed"] = int(seed)
    return doc


def load_document(args):
    if args.config is not None:
        with open(args.config) as fh:
            doc = json.load(fh)
    else:
        doc = cfg.default_document(args.sim, seed=args.seed)
    if args.overrides:
        doc = cfg.apply_overrides(doc, args.overrides)
    if args.seed is not None:
        doc = apply_seed(doc, args.seed)
    cfg.validate(doc)
    return doc


def out_dir(args, doc=None, fallback="runs/out"):
    if args.out is not None:
        return args.out
    if doc is not None and doc.get("out_dir"):
        return doc["out_dir"]
    return fallback


def cmd_simulate(args):
    doc = load_document(args)
    out = out_dir(args, doc)
    meta = runner.simulate(doc, out)
    print(f"wrote {meta['n_train']} train / {meta['n_test']} test points "
          f"and {meta['n_constraints']} constraints to {out}")
    print(f"config_hash {meta['config_hash']}")
    return 0


def cmd_train(args):
    doc = load_document(args)
    out = out_dir(args, doc)
    try:
        result, meta = runner.train_cmd(doc, out)
    except NumericalError as err:
        dump = Path(out) / "numerical_dump.json"
        runner.write_json(dump, {"error": str(err),
                                 "diagnostics": err.diagnostics})
        print(f"numerical abort: {err}", file=sys.stderr)
        print(f"diagnostics written to {dump}", file=sys.stderr)
        return 3
    print(f"trained mode={meta['mode']} backend={meta['backend']} "
          f"epochs={meta['epochs']} final_loss={meta['final_loss']:.6g}")
    print(f"checkpoint {Path(out) / 'checkpoint.json'}")
    print(f"config_hash {meta['config_hash']}")
    return 0


def cmd_evaluate(args):
    doc = load_document(args)
    out = out_dir(args, doc)
    ckpt = args.checkpoint or str(Path(out) / "checkpoint.json")
    record, line = runner.evaluate_cmd(doc, ckpt, out)
    print(line)
    print(f"config_hash {record.config_hash}")
    return 0


def cmd_gradcheck(args):
    report = gc.run_all(seed=args.seed if args.seed is not None else 0)
    for line in report.lines():
        print(line)
    if args.out is not None:
        rows = [{"name": r.name, "max_rel_err": r.max_rel_err, "tol": r.tol,
                 "kink_distance": r.kink_distance, "passed": r.passed}
                for r in report.results]
        runner.write_json(Path(args.out) / "gradcheck.json",
                          {"passed": report.passed, "results": rows})
    return 0 if report.passed else 1


def cmd_repro(args):
    out = args.out or f"runs/{args.sim}-repro"
    rows, table = runner.repro(args.sim, out, seed=args.seed)
    print(table)
    print(f"artifacts in {out}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "repro": cmd_repro,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = os.environ.get("CBNN_THREADS")
    if threads is not None:
        try:
            if int(threads) < 1:
                raise ValueError
        except ValueError:
            print(f"error: CBNN_THREADS must be a positive integer, "
                  f"got {threads!r}", file=sys.stderr)
            return 2
    try:
        return COMMANDS[args.command](args)
    except NumericalError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3
    except CONFIG_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
