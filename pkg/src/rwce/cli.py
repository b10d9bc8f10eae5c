"""``rwce`` command line: gen-data, train, calibrate-eval, verify, sweep.

Exit codes: 0 ok, 1 partial sweep failure, 2 bad config or arguments,
3 numeric abort, 4 missing artifact, 5 violated inequality.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .calibration import save_predictor, write_sets_csv
from .data import SyntheticSpec, export_csv, generate_synthetic, load_csv
from .evaluation import compare_methods, evaluate
from .model import IntegrityError, NumericalError
from .scores import KINDS, ConfigError, ScoreSpec
from .theory import (
    ledger_row, ledger_violations, read_ledger, track_loss_vs_apss, write_ledger, write_points,
)
from .trainer import TrainingConfig, load_run, train

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING, EXIT_THEOREM = 0, 1, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "RWCE_OUTPUT_ROOT"

log = logging.getLogger("rwce")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        doc.update(getattr(record, "fields", {}))
        return json.dumps(doc, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("rwce")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CommandError(EXIT_CONFIG, f"config: {path} not found") from None
    except json.JSONDecodeError as exc:
        raise CommandError(EXIT_CONFIG, f"config: {path}: {exc}") from None


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_manifest(out_dir: Path, command: str, config, inputs: dict, outputs: list[str],
                    seeds: dict, started: float) -> None:
    _write_json(out_dir / "manifest.json", {
        "command": command, "config": config, "inputs": inputs, "outputs": sorted(outputs),
        "seeds": seeds, "tool_version": _tool_version(), "duration_s": round(time.time() - started, 3),
    })


def load_data_dir(data_dir: str | Path):
    data_dir = Path(data_dir)
    meta_path = data_dir / "dataset.json"
    if not meta_path.exists():
        raise CommandError(EXIT_MISSING, f"{data_dir}: no dataset.json")
    meta = _read_json(meta_path)
    csv_path = data_dir / meta.get("csv", "data.csv")
    if not csv_path.exists():
        raise CommandError(EXIT_MISSING, f"{csv_path}: missing")
    return load_csv(csv_path, int(meta["n_classes"]), meta.get("fractions"), int(meta.get("split_seed", 0)),
                    standardize_features=meta.get("standardize", True))


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise CommandError(EXIT_CONFIG, f"alpha must lie in (0, 1), got {alpha}")


def cmd_gen_data(args) -> int:
    started = time.time()
    try:
        spec = SyntheticSpec.from_dict(_read_json(args.config))
    except (ConfigError, TypeError) as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    if args.dry_run:
        return EXIT_OK
    out = _out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(spec)
    export_csv(data, out / "data.csv")
    _write_json(out / "dataset.json", {"csv": "data.csv", "n_classes": spec.n_classes,
                                       "standardize": True, "synthetic": spec.to_dict()})
    _write_manifest(out, "gen-data", spec.to_dict(), {"config": str(args.config)},
                    ["data.csv", "dataset.json"], {"seed": spec.seed}, started)
    log.info("wrote dataset", extra={"fields": {"rows": sum(spec.counts.values()), "out": str(out)}})
    return EXIT_OK


def _training_config(path) -> TrainingConfig:
    try:
        return TrainingConfig.from_dict(_read_json(path))
    except (ConfigError, TypeError) as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None


def cmd_train(args) -> int:
    started = time.time()
    config = _training_config(args.config)
    if args.dry_run:
        return EXIT_OK
    data = load_data_dir(args.data_dir)
    out = _out_path(args.out_dir)
    try:
        run = train(config, data, out)
    except NumericalError as exc:
        raise CommandError(EXIT_NUMERIC, f"numeric abort: {exc}") from None
    _write_manifest(out, "train", config.to_dict(), {"config": str(args.config), "data_dir": str(args.data_dir)},
                    ["config.json", "trace.csv", "ledger.csv", "checkpoints/"],
                    {"init": config.init_seed, "shuffle": config.shuffle_seed, "tiebreak": config.tiebreak_seed},
                    started)
    log.info("training finished", extra={"fields": {"epochs": len(run.trace), "final_loss": run.trace[-1]["loss"]}})
    return EXIT_OK


def _load_run_or_fail(run_dir):
    try:
        return load_run(run_dir)
    except FileNotFoundError as exc:
        raise CommandError(EXIT_MISSING, str(exc)) from None
    except IntegrityError as exc:
        raise CommandError(EXIT_MISSING, f"integrity: {exc}") from None


def cmd_calibrate_eval(args) -> int:
    started = time.time()
    _check_alpha(args.alpha)
    kinds = list(KINDS) if args.all_scores else [args.score.upper()]
    if args.dry_run:
        return EXIT_OK
    run = _load_run_or_fail(args.run_dir)
    data = load_data_dir(args.data_dir)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    last = max(run.checkpoints)
    metrics, outputs = {}, ["metrics.json"]
    for kind in kinds:
        spec = ScoreSpec(kind)
        predictor, sets, a, c = evaluate(run.model, data, spec, args.alpha, args.seed)
        predictor.checkpoint = str(Path(args.run_dir) / "checkpoints" / f"epoch_{last:04d}.json")
        predictor.seed = args.seed
        save_predictor(out / f"predictor_{kind}.json", predictor)
        write_sets_csv(out / f"sets_{kind}.csv", sets, data.test.y, data.test.ids)
        outputs += [f"predictor_{kind}.json", f"sets_{kind}.csv"]
        metrics[kind] = {"apss": a, "coverage": c, "threshold": predictor.to_json()["threshold"],
                         "m": predictor.m, "n_test": len(data.test)}
    doc = {"alpha": args.alpha, "epoch": last, "seed": args.seed, "scores": metrics}
    if len(kinds) == 1:
        doc.update(metrics[kinds[0]])
    _write_json(out / "metrics.json", doc)
    _write_manifest(out, "calibrate-eval", {"alpha": args.alpha, "scores": kinds},
                    {"run_dir": str(args.run_dir), "data_dir": str(args.data_dir)}, outputs,
                    {"tiebreak": args.seed}, started)
    return EXIT_OK


def _report_violations(violations: list[str]) -> int:
    for v in violations:
        print(v, file=sys.stderr)
    return EXIT_THEOREM if violations else EXIT_OK


def cmd_verify(args) -> int:
    started = time.time()
    _check_alpha(args.alpha)
    if args.check_ledger:
        path = Path(args.check_ledger)
        if not path.exists():
            raise CommandError(EXIT_MISSING, f"{path}: missing")
        return _report_violations(ledger_violations(read_ledger(path)))
    if args.dry_run:
        return EXIT_OK
    run = _load_run_or_fail(args.run_dir)
    data = load_data_dir(args.data_dir)
    out = _out_path(args.out) if args.out else Path(args.run_dir) / "verify"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for epoch in sorted(run.checkpoints):
        for kind in KINDS:
            rows.append(ledger_row(run.checkpoints[epoch], data, ScoreSpec(kind), args.alpha, epoch,
                                   args.split, args.seed))
    write_ledger(out / "ledger.csv", rows)
    points = track_loss_vs_apss(run.checkpoints, data, ScoreSpec("HPS"), args.alpha, "train", args.seed)
    write_points(out / "loss_vs_apss.csv", points)
    _write_manifest(out, "verify", {"alpha": args.alpha, "split": args.split},
                    {"run_dir": str(args.run_dir), "data_dir": str(args.data_dir)},
                    ["ledger.csv", "loss_vs_apss.csv"], {"tiebreak": args.seed}, started)
    return _report_violations(ledger_violations(rows))


def cmd_sweep(args) -> int:
    started = time.time()
    doc = _read_json(args.sweep_config)
    try:
        base = doc.get("base", {})
        methods = {name: TrainingConfig.from_dict({**base, **over}) for name, over in doc["methods"].items()}
        scores = [ScoreSpec(k) for k in doc.get("scores", ["HPS"])]
        alpha = float(doc.get("alpha", 0.1))
        n_seeds = int(doc.get("n_seeds", 10))
    except (KeyError, TypeError, ConfigError) as exc:
        raise CommandError(EXIT_CONFIG, f"config: {exc}") from None
    _check_alpha(alpha)
    if args.dry_run:
        return EXIT_OK
    data = load_data_dir(args.data_dir)
    out = _out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = compare_methods(methods, data, scores, alpha, n_seeds, int(doc.get("base_seed", 0)))
    table.write_csv(out / "comparison.csv")
    table.write_json(out / "comparison.json")
    _write_manifest(out, "sweep", doc, {"data_dir": str(args.data_dir)}, ["comparison.csv", "comparison.json"],
                    {"seeds": table.seeds}, started)
    if table.failures:
        for f in table.failures:
            print(f"failed: method={f['method']} seed={f['seed']} {f['error']}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwce", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark as CSV")
    g.add_argument("config")
    g.add_argument("out_dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a run directory")
    t.add_argument("config")
    t.add_argument("data_dir")
    t.add_argument("out_dir")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate-eval", help="calibrate the final checkpoint and evaluate on test")
    c.add_argument("run_dir")
    c.add_argument("data_dir")
    c.add_argument("out")
    c.add_argument("--score", default="HPS", choices=[k for k in KINDS] + [k.lower() for k in KINDS])
    c.add_argument("--alpha", type=float, default=0.1)
    c.add_argument("--all-scores", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_calibrate_eval)

    v = sub.add_parser("verify", help="evaluate the inequality monitors on every checkpoint")
    v.add_argument("run_dir", nargs="?")
    v.add_argument("data_dir", nargs="?")
    v.add_argument("--alpha", type=float, default=0.1)
    v.add_argument("--split", default="test")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.add_argument("--check-ledger", help="only check an existing ledger CSV")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="compare methods over seeds and scores")
    s.add_argument("sweep_config")
    s.add_argument("data_dir")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_sweep)

    for sp in (g, t, c, v, s):
        sp.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    if args.command == "verify" and not args.check_ledger and not (args.run_dir and args.data_dir):
        print("verify: run_dir and data_dir are required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"rwce {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"rwce {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IntegrityError) as exc:
        print(f"rwce {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
