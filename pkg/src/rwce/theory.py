"""Runtime monitors for the set-size/rank and rank/RWCE inequalities.

Each check returns both sides and a margin ``bound - quantity``; whether a
negative margin is an error is decided by the caller (tests, ``rwce verify``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable

import numpy as np

from .calibration import ConformalPredictor, calibrate
from .losses import cross_entropy
from .model import MLP, log_softmax
from .scores import ConfigError, ScoreSpec, label_ranks

LEDGER_COLUMNS = (
    "epoch", "split", "score_kind", "alpha", "E_set_size", "E_rank", "slack", "thm1_margin",
    "rank_minus1", "rwce", "thm2_margin", "assump_lhs", "assump_rhs",
)

# scores covered by the set-size bound's proof; the others are only reported
THM1_ASSERTED = ("HPS", "APS")


@dataclass
class BoundCheck:
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.margin))


def calibration_slack(n_classes: int, alpha: float, m: int) -> float:
    return n_classes * (1.0 - alpha + 1.0 / (m + 1))


def check_theorem1(predictor: ConformalPredictor, X, y, rng=None, u=None) -> BoundCheck:
    """Mean set size versus mean true-label rank plus ``K(1 - alpha + 1/(m+1))``."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ConfigError("evaluation set is empty")
    sets = predictor.predict_sets(X, rng, u)
    probs = predictor.model.predict_proba(X)
    K = probs.shape[1]
    rhs = float(np.mean(label_ranks(probs, y))) + calibration_slack(K, predictor.alpha, predictor.m)
    return BoundCheck(float(np.mean(sets.sizes)), rhs)


def theorem2_from_logits(logits, labels) -> BoundCheck:
    """``mean(R) - 1`` against ``mean(R * CE)`` for scaled logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("evaluation set is empty")
    ranks = label_ranks(np.exp(log_softmax(logits)), labels)
    ce = cross_entropy(logits, labels)
    return BoundCheck(float(np.mean(ranks)) - 1.0, float(np.mean(ranks * ce)))


def check_theorem2(model: MLP, X, y) -> BoundCheck:
    return theorem2_from_logits(model.scaled_logits(X), y)


def assumption_from_logits(logits, labels) -> tuple[float, float, bool]:
    """``E[(R-1)(CE-1)]`` and ``-E[CE]``; the rank/loss interaction condition holds when lhs >= rhs."""
    logits = np.atleast_2d(logits)
    ranks = label_ranks(np.exp(log_softmax(logits)), labels)
    ce = cross_entropy(logits, labels)
    lhs = float(np.mean((ranks - 1) * (ce - 1.0)))
    rhs = -float(np.mean(ce))
    return lhs, rhs, lhs >= rhs


def check_assumption(model: MLP, X, y) -> tuple[float, float, bool]:
    return assumption_from_logits(model.scaled_logits(X), y)


def ledger_row(
    model: MLP,
    data,
    score: ScoreSpec,
    alpha: float,
    epoch: int,
    split: str = "val",
    seed: int = 0,
) -> dict:
    """One ledger row: calibrate on ``data.cal`` and evaluate every monitor on ``split``."""
    rng = np.random.default_rng([seed, epoch])
    part = data.part(split)
    predictor = calibrate(model, score, data.cal.X, data.cal.y, alpha, rng)
    t1 = check_theorem1(predictor, part.X, part.y, rng)
    t2 = check_theorem2(model, part.X, part.y)
    a_lhs, a_rhs, _ = check_assumption(model, part.X, part.y)
    return {
        "epoch": epoch, "split": split, "score_kind": score.kind, "alpha": alpha,
        "E_set_size": t1.lhs, "E_rank": t2.lhs + 1.0,
        "slack": calibration_slack(data.n_classes, alpha, predictor.m), "thm1_margin": t1.margin,
        "rank_minus1": t2.lhs, "rwce": t2.rhs, "thm2_margin": t2.margin,
        "assump_lhs": a_lhs, "assump_rhs": a_rhs,
    }


def ledger_violations(rows: Iterable[dict]) -> list[str]:
    """Messages for every asserted inequality that fails (margins compared to 0 exactly)."""
    out = []
    for r in rows:
        if float(r["thm2_margin"]) < 0:
            out.append(f"theorem2 epoch={r['epoch']} margin={float(r['thm2_margin']):g}")
        if r["score_kind"] in THM1_ASSERTED and float(r["thm1_margin"]) < 0:
            out.append(f"theorem1 epoch={r['epoch']} score={r['score_kind']} margin={float(r['thm1_margin']):g}")
    return out


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_ledger(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in LEDGER_COLUMNS})


def read_ledger(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class LossApssPoint:
    epoch: int
    rwce_plus_1: float
    apss: float


def track_loss_vs_apss(checkpoints: dict[int, MLP], data, score: ScoreSpec, alpha: float,
                       split: str = "train", seed: int = 0) -> list[LossApssPoint]:
    """Pair ``RWCE + 1`` with APSS for every checkpoint, recalibrating each one on ``data.cal``."""
    if not checkpoints:
        raise RuntimeError("no checkpoints to track")
    part = data.part(split)
    out = []
    for epoch in sorted(checkpoints):
        model = checkpoints[epoch]
        rng = np.random.default_rng([seed, epoch])
        predictor = calibrate(model, score, data.cal.X, data.cal.y, alpha, rng)
        apss = float(np.mean(predictor.predict_sets(part.X, rng).sizes))
        rwce = check_theorem2(model, part.X, part.y).rhs
        out.append(LossApssPoint(epoch, rwce + 1.0, apss))
    return out


def write_points(path: str | Path, points: list) -> None:
    if not points:
        Path(path).write_text("")
        return
    cols = list(asdict(points[0]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for p in points:
            w.writerow([_fmt(v) for v in asdict(p).values()])
