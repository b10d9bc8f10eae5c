"""Split-conformal calibration and prediction sets."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MLP
from .scores import ConfigError, ScoreSpec, score_matrix, true_label_scores


def quantile_index(alpha: float, m: int) -> int:
    """1-based order statistic ``ceil((1 - alpha)(m + 1))``.

    The product is rounded to 9 decimals first so that e.g. ``0.9 * 100``
    (which is ``90.00000000000001`` in binary) maps to 90, not 91.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if m < 1:
        raise ConfigError("calibration set is empty")
    return math.ceil(round((1.0 - alpha) * (m + 1), 9))


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """Calibrated threshold: the ``quantile_index``-th smallest score, or +inf past ``m``."""
    scores = np.asarray(scores, dtype=float).ravel()
    k = quantile_index(alpha, scores.size)
    if k > scores.size:
        return math.inf
    # stable sort keeps equal scores in index order
    return float(np.sort(scores, kind="stable")[k - 1])


@dataclass
class PredictionSets:
    """Membership mask for a batch of prediction sets, shape ``(n, K)``."""

    mask: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def members(self, i: int) -> list[int]:
        return np.flatnonzero(self.mask[i]).tolist()

    def __len__(self) -> int:
        return self.mask.shape[0]


@dataclass
class ConformalPredictor:
    model: MLP
    score: ScoreSpec
    alpha: float
    threshold: float
    m: int
    seed: int | None = None
    checkpoint: str | None = None

    def scores(self, X: np.ndarray, rng: np.random.Generator | None = None, u=None) -> np.ndarray:
        probs = self.model.predict_proba(X)
        if u is None:
            u = self.score.draw_u(len(probs), rng)
        return score_matrix(probs, self.score, u)

    def predict_sets(self, X: np.ndarray, rng: np.random.Generator | None = None, u=None) -> PredictionSets:
        return sets_from_scores(self.scores(X, rng, u), self.threshold)

    def to_json(self) -> dict:
        return {
            "score": self.score.to_dict(),
            "alpha": self.alpha,
            "threshold": "inf" if math.isinf(self.threshold) else self.threshold,
            "m": self.m,
            "checkpoint": self.checkpoint,
            "seed": self.seed,
        }


def sets_from_scores(scores: np.ndarray, threshold: float) -> PredictionSets:
    return PredictionSets(np.atleast_2d(scores) <= threshold)


def calibrate(
    model: MLP,
    score: ScoreSpec,
    X_cal: np.ndarray,
    y_cal: np.ndarray,
    alpha: float,
    rng: np.random.Generator | None = None,
    u=None,
) -> ConformalPredictor:
    y_cal = np.asarray(y_cal)
    if len(y_cal) == 0:
        raise ConfigError("calibration set is empty")
    probs = model.predict_proba(X_cal)
    if u is None:
        u = score.draw_u(len(y_cal), rng)
    s = true_label_scores(probs, y_cal, score, u)
    return ConformalPredictor(model, score, alpha, conformal_quantile(s, alpha), len(y_cal))


def coverage_trial(
    model: MLP,
    score: ScoreSpec,
    X: np.ndarray,
    y: np.ndarray,
    alpha: float,
    n_splits: int,
    seed: int,
    m: int | None = None,
) -> np.ndarray:
    """Marginal coverage over ``n_splits`` random calibration/test splits of a pool.

    The model is evaluated once; each split reshuffles the pool, takes the
    first ``m`` points (default: half) for calibration and the rest as test,
    and draws fresh tie-break values for every example.
    """
    y = np.asarray(y)
    n = len(y)
    m = n // 2 if m is None else m
    if m < 1 or n - m < 1:
        raise ConfigError(f"pool of {n} examples cannot be split with m={m}")
    probs = model.predict_proba(X)
    rng = np.random.default_rng(seed)
    out = np.empty(n_splits)
    for t in range(n_splits):
        perm = rng.permutation(n)
        u = score.draw_u(n, rng)
        S = score_matrix(probs[perm], score, u)
        yp = y[perm]
        true_s = S[np.arange(n), yp]
        q = conformal_quantile(true_s[:m], alpha)
        out[t] = np.mean(true_s[m:] <= q)
    return out


def write_sets_csv(path: str | Path, sets: PredictionSets, labels: np.ndarray, ids=None) -> None:
    """Rows: example_id, true_label, set_size, covered, member_labels (1-based, space separated)."""
    labels = np.asarray(labels)
    ids = np.arange(len(labels)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "true_label", "set_size", "covered", "member_labels"])
        for i in range(len(sets)):
            members = sets.members(i)
            w.writerow([int(ids[i]), int(labels[i]) + 1, len(members),
                        int(bool(sets.mask[i, labels[i]])), " ".join(str(k + 1) for k in members)])


def save_predictor(path: str | Path, predictor: ConformalPredictor) -> None:
    Path(path).write_text(json.dumps(predictor.to_json(), indent=1, sort_keys=True) + "\n")
