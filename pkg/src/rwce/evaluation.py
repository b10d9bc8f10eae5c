"""Set-size and coverage metrics, multi-seed aggregation and method comparison tables."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .calibration import PredictionSets, calibrate
from .scores import ConfigError, ScoreSpec
from .trainer import TrainingConfig, train

log = logging.getLogger(__name__)

# Published reference numbers; the desk-scale benchmark does not reproduce them.
PUBLISHED_REFERENCE = {
    ("CIFAR-100", "ResNet", "HPS", "RWCE"): "2.68 +/- 0.083 (not reproduced)",
    "average_reduction_pct": "21.38 (not reproduced)",
}


def _sizes(sets) -> np.ndarray:
    if isinstance(sets, PredictionSets):
        return sets.sizes
    return np.asarray([len(s) for s in sets])


def apss(sets) -> float:
    """Average prediction-set size."""
    sizes = _sizes(sets)
    if sizes.size == 0:
        raise ConfigError("no prediction sets")
    return float(np.mean(sizes))


def marginal_coverage(sets, labels) -> float:
    labels = np.asarray(labels)
    if isinstance(sets, PredictionSets):
        if len(sets) != len(labels):
            raise ConfigError("sets and labels differ in length")
        return float(np.mean(sets.mask[np.arange(len(labels)), labels]))
    if len(sets) != len(labels):
        raise ConfigError("sets and labels differ in length")
    return float(np.mean([y in s for s, y in zip(sets, labels)]))


@dataclass
class MetricsReport:
    apss_mean: float
    coverage_mean: float
    apss_std: float | None
    coverage_std: float | None
    n_runs: int
    runs: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"apss_mean": self.apss_mean, "apss_std": self.apss_std, "coverage_mean": self.coverage_mean,
                "coverage_std": self.coverage_std, "n_runs": self.n_runs,
                "runs": [{"apss": a, "coverage": c} for a, c in self.runs]}


def aggregate_runs(run_metrics) -> MetricsReport:
    """Mean and sample (n-1) standard deviation of per-run (apss, coverage) pairs."""
    runs = [(float(a), float(c)) for a, c in run_metrics]
    if not runs:
        raise ConfigError("need at least one run")
    arr = np.asarray(runs)
    std = arr.std(axis=0, ddof=1) if len(runs) >= 2 else (None, None)
    return MetricsReport(float(arr[:, 0].mean()), float(arr[:, 1].mean()),
                         None if std[0] is None else float(std[0]),
                         None if std[1] is None else float(std[1]), len(runs), runs)


def evaluate(model, data, score: ScoreSpec, alpha: float, seed: int = 0):
    """Calibrate on ``data.cal`` and return (predictor, test sets, apss, coverage)."""
    rng = np.random.default_rng([seed, 7])
    predictor = calibrate(model, score, data.cal.X, data.cal.y, alpha, rng)
    sets = predictor.predict_sets(data.test.X, rng)
    return predictor, sets, apss(sets), marginal_coverage(sets, data.test.y)


def relative_change(value: float, baseline: float) -> float:
    """Percent change of ``value`` against ``baseline`` (negative = smaller sets)."""
    return 100.0 * (value - baseline) / baseline


def format_change(pct: float) -> str:
    arrow = "↓" if pct < 0 else "↑"
    return f"{arrow}{abs(pct):.1f}%"


@dataclass
class Comparison:
    alpha: float
    seeds: list[int]
    run_rows: list[dict] = field(default_factory=list)
    aggregate_rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    CSV_COLUMNS = ("method", "score", "seed", "apss", "coverage", "apss_std", "coverage_std", "rel_change_pct")

    def cell(self, method: str, score: str) -> dict:
        for r in self.aggregate_rows:
            if r["method"] == method and r["score"] == score:
                return r
        raise KeyError((method, score))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.run_rows + self.aggregate_rows:
                w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in self.CSV_COLUMNS})

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "seeds": self.seeds, "runs": self.run_rows,
                "aggregates": self.aggregate_rows, "failures": self.failures,
                "published_reference": {str(k): v for k, v in PUBLISHED_REFERENCE.items()}}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def seeded(config: TrainingConfig, seed: int) -> TrainingConfig:
    return replace(config, init_seed=seed, shuffle_seed=seed, tiebreak_seed=seed)


def compare_methods(
    methods: dict[str, TrainingConfig],
    data,
    scores: list[ScoreSpec],
    alpha: float,
    n_seeds: int,
    base_seed: int = 0,
) -> Comparison:
    """Train every method under ``n_seeds`` seeds and evaluate each model with every score.

    Training does not depend on the evaluation score, so each (method, seed)
    model is trained once and reused across scores. A method that raises is
    recorded in ``failures`` and the remaining cells still complete.
    """
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    seeds = [base_seed + s for s in range(n_seeds)]
    table = Comparison(alpha, seeds)
    for name, config in methods.items():
        for seed in seeds:
            try:
                run = train(seeded(config, seed), data)
            except Exception as exc:  # isolate failing cells
                log.warning("method %s seed %d failed: %s", name, seed, exc)
                table.failures.append({"method": name, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                continue
            for spec in scores:
                _, _, a, c = evaluate(run.model, data, spec, alpha, seed)
                table.run_rows.append({"method": name, "score": spec.kind, "seed": seed,
                                       "apss": a, "coverage": c})
    baseline_names = [n for n, c in methods.items() if c.loss != "RWCE"]
    for spec in scores:
        means = {}
        for name in methods:
            runs = [(r["apss"], r["coverage"]) for r in table.run_rows
                    if r["method"] == name and r["score"] == spec.kind]
            if not runs:
                continue
            rep = aggregate_runs(runs)
            means[name] = rep.apss_mean
            table.aggregate_rows.append({"method": name, "score": spec.kind, "seed": "all",
                                         "apss": rep.apss_mean, "coverage": rep.coverage_mean,
                                         "apss_std": rep.apss_std, "coverage_std": rep.coverage_std,
                                         "rel_change_pct": None})
        base = [means[n] for n in baseline_names if n in means]
        if base:
            best = min(base)
            for r in table.aggregate_rows:
                if r["score"] == spec.kind and best > 0:
                    r["rel_change_pct"] = relative_change(r["apss"], best)
    return table


def pooled_std(a: float | None, b: float | None) -> float:
    if a is None or b is None:
        return math.nan
    return math.sqrt((a * a + b * b) / 2.0)
