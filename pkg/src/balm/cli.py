"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error (including missing
input files), 3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .autograd import NumericalError
from .grm import default_branch_problem, verify_lemma1
from .masking import (
    delta_imr, error_bound, generate_masks, iter_pattern_table, read_masks, validate_rates,
)
from .trainer import (
    BalmModel, RunRecord, TrainingAborted, diagnostics_columns, evaluate, load_snapshot, train,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _rate(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"missing rate must lie in [0, 1), got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="balm", description="Missing-modality training lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ms = sub.add_parser("mask-stats", help="pattern distributions, divergence and mask ratios")
    ms.add_argument("--rates", type=_rate, nargs="+", required=True)
    ms.add_argument("--shared", type=_rate, required=True)
    ms.add_argument("--measure", choices=("kl", "js"), default="kl")
    ms.add_argument("--n", type=int, default=1000)
    ms.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="run an experiment config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--parallel", action="store_true", help="run seeds in separate processes")

    ev = sub.add_parser("eval", help="recompute metrics from a run directory")
    ev.add_argument("--run", required=True)
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")

    vl = sub.add_parser("verify-lemma1", help="Monte-Carlo gradient scaling under missingness")
    vl.add_argument("--r", type=_rate, nargs="+", required=True)
    vl.add_argument("--draws", type=int, default=20000)
    vl.add_argument("--seed", type=int, default=0)

    dg = sub.add_parser("diagnose", help="print per-epoch KL / cosine / coefficient curves")
    dg.add_argument("--run", required=True)
    return p


def cmd_mask_stats(args, out) -> None:
    r = validate_rates(args.rates)
    if args.n < 1:
        raise UsageError("--n must be positive")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["pattern", "p_imr", "p_smr"])
    for e, pi, ps in iter_pattern_table(r, args.shared):
        w.writerow(["".join(map(str, e)), f"{pi:.6f}", f"{ps:.6f}"])
    out.write("\n")
    w.writerow(["measure", "delta_imr"])
    w.writerow([args.measure, f"{delta_imr(r, args.shared, args.measure):.6f}"])
    out.write("\n")
    masks = generate_masks(r, args.n, args.seed)
    bound = error_bound(r)
    slack = 2 ** r.size / args.n
    w.writerow(["modality", "target", "realized", "error", "bound", "within_bound"])
    for m in range(r.size):
        err = abs(masks.realized_ratios[m] - r[m])
        w.writerow([m, f"{r[m]:.6f}", f"{masks.realized_ratios[m]:.6f}", f"{err:.6f}",
                    f"{bound:.6f}", str(bool(err <= bound + slack)).lower()])


def run_one(plan: cfgmod.RunPlan, flat: dict) -> dict:
    datasets = cfgmod.load_datasets(flat)
    tc = cfgmod.train_config(flat, plan.seed)
    record, _ = train(tc, datasets, out_dir=plan.run_dir, config_snapshot=plan.snapshot)
    return {"seed": plan.seed, "run_dir": str(plan.run_dir), "best_epoch": record.best_epoch,
            "test_acc": record.test["acc"], "test_wf1": record.test["wf1"]}


def cmd_train(args, out) -> None:
    flat = cfgmod.load(args.config)
    plans = cfgmod.plan_runs(flat)
    if args.parallel and len(plans) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(run_one, plans, [flat] * len(plans)))
    else:
        results = [run_one(p, flat) for p in plans]
    for r in results:
        out.write(json.dumps(r, sort_keys=True) + "\n")


def _run_file(run: Path, name: str) -> Path:
    path = run / name
    if not path.is_file():
        raise FileNotFoundError(f"missing run artifact: {path}")
    return path


def cmd_eval(args, out) -> None:
    run = Path(args.run)
    snapshot = json.loads(_run_file(run, "config.json").read_text(encoding="utf-8"))
    seed = snapshot["seed"]
    flat = cfgmod.resolve({k: v for k, v in snapshot.items() if k != "seed"} | {"seeds": [seed]})
    datasets = cfgmod.load_datasets(flat)
    data = datasets[args.split]
    ids, masks = read_masks(_run_file(run, f"masks_{args.split}.jsonl"))
    if ids != list(data.ids):
        raise cfgmod.ConfigError([f"mask ids in {run} do not match the {args.split} split"])
    model = BalmModel(datasets["train"].dims, datasets["train"].num_classes,
                      cfgmod.train_config(flat, seed))
    load_snapshot(_run_file(run, "model.json"), model)
    res = evaluate(model, data, masks, flat["train.batch_size"])
    out.write(json.dumps({"split": args.split, "acc": res["acc"], "wf1": res["wf1"]},
                         sort_keys=True) + "\n")


def cmd_verify_lemma1(args, out) -> None:
    if args.draws < 1000:
        raise UsageError("--draws must be at least 1000")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["r", "ratio", "expected", "rel_error"])
    for r in args.r:
        ratio = verify_lemma1(default_branch_problem, r, args.draws, args.seed)
        expected = 1.0 - r
        w.writerow([f"{r:.6f}", f"{ratio:.6f}", f"{expected:.6f}",
                    f"{abs(ratio - expected) / expected:.6f}"])


def cmd_diagnose(args, out) -> None:
    run = Path(args.run)
    rec = json.loads(_run_file(run, "run.json").read_text(encoding="utf-8"))
    record = RunRecord(config=rec["config"], modalities=rec["modalities"],
                       diagnostics=rec["diagnostics"])
    cols = diagnostics_columns(record.modalities)
    for row in record.diagnostics:
        if set(row) != set(cols):
            raise cfgmod.ConfigError([f"{run}/run.json: diagnostics rows do not match {cols}"])
    out.write(record.diagnostics_csv())


COMMANDS = {
    "mask-stats": cmd_mask_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-lemma1": cmd_verify_lemma1,
    "diagnose": cmd_diagnose,
}


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, out)
    except cfgmod.ConfigError as exc:
        print("config error:", file=sys.stderr)
        for p in exc.problems:
            print(f"  {p}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
