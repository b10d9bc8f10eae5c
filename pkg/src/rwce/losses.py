"""Training objectives: CE, rank-weighted CE, ConfTr soft set size, CUT uniformity.

Every objective works on temperature-scaled logits ``u`` (probabilities are
``softmax(u)``) and returns its value together with ``dL/du``. Label ranks and
the in-batch ConfTr threshold are constants as far as gradients go.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

from .calibration import quantile_index
from .model import NumericalError, log_softmax
from .scores import ConfigError, ScoreSpec, label_ranks, score_matrix, score_matrix_grad

LOSS_KINDS = ("CE", "RWCE", "ConfTr", "CUT")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logp = log_softmax(np.atleast_2d(logits))
    return -logp[np.arange(len(labels)), labels]


def _softmax_backward(probs: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Map ``dL/dp`` to ``dL/du`` through the softmax Jacobian."""
    return probs * (g - (g * probs).sum(axis=1, keepdims=True))


@dataclass
class BatchLossReport:
    loss: float
    ranks: np.ndarray
    ce: np.ndarray

    @property
    def mean_rank(self) -> float:
        return float(np.mean(self.ranks))

    @property
    def mean_ce(self) -> float:
        return float(np.mean(self.ce))


def rank_weighted_mean(ranks: np.ndarray, ce: np.ndarray) -> float:
    ranks = np.asarray(ranks, dtype=float)
    ce = np.asarray(ce, dtype=float)
    if ranks.size == 0:
        raise ConfigError("empty batch")
    return float(np.mean(ranks * ce))


def rwce_loss(logits: np.ndarray, labels: np.ndarray) -> BatchLossReport:
    """Mean over the batch of ``rank_i * CE_i``."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("empty batch")
    logp = log_softmax(logits)
    ce = -logp[np.arange(len(labels)), labels]
    ranks = label_ranks(np.exp(logp), labels)
    return BatchLossReport(rank_weighted_mean(ranks, ce), ranks, ce)


def _check_finite(ce: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(ce))
    if bad.size:
        raise NumericalError(f"non-finite cross-entropy at example {bad[0]}", int(bad[0]))


def weighted_ce_objective(logits, labels, weights) -> tuple[float, np.ndarray]:
    logp = log_softmax(logits)
    n = len(labels)
    ce = -logp[np.arange(n), labels]
    _check_finite(ce)
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(np.mean(weights * ce)), d * (weights / n)[:, None]


def ce_objective(logits, labels) -> tuple[float, np.ndarray]:
    return weighted_ce_objective(logits, labels, np.ones(len(labels)))


def rwce_objective(logits, labels) -> tuple[float, np.ndarray]:
    # ranks are recomputed from the current logits and act as fixed weights
    ranks = label_ranks(np.exp(log_softmax(logits)), labels).astype(float)
    return weighted_ce_objective(logits, labels, ranks)


@dataclass(frozen=True)
class SmoothIndicator:
    """Smooth stand-in for ``1[s <= q]``: a sigmoid with temperature ``tau`` or a Gaussian CDF."""

    kind: str = "sigmoid"
    tau: float = 0.1
    sigma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("sigmoid", "erf"):
            raise ConfigError(f"unknown smooth indicator {self.kind!r}")
        if not (self.tau > 0 and self.sigma > 0):
            raise ConfigError("smoothing parameters must be positive")

    def __call__(self, s, q):
        x = np.asarray(q, dtype=float) - np.asarray(s, dtype=float)
        if self.kind == "sigmoid":
            return expit(x / self.tau)
        return 0.5 * (1.0 + erf(x / (math.sqrt(2.0) * self.sigma)))

    def grad_s(self, s, q):
        """Derivative w.r.t. the score ``s`` (always <= 0)."""
        x = np.asarray(q, dtype=float) - np.asarray(s, dtype=float)
        if self.kind == "sigmoid":
            v = expit(x / self.tau)
            return -v * (1.0 - v) / self.tau
        z = x / self.sigma
        return -np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * self.sigma)


def smooth_indicator(spec: SmoothIndicator, s, q):
    return spec(s, q)


def _split_batch(n: int) -> int:
    if n < 2:
        raise ConfigError("ConfTr needs a batch of at least 2 examples")
    return n // 2


def conftr_threshold(cal_scores: np.ndarray, alpha: float) -> float:
    """In-batch threshold: the ``ceil((1-alpha)(h+1))``-th smallest score, clamped to ``h``."""
    h = len(cal_scores)
    k = min(quantile_index(alpha, h), h)
    return float(np.sort(cal_scores, kind="stable")[k - 1])


def conftr_loss(
    probs: np.ndarray,
    labels: np.ndarray,
    score: ScoreSpec,
    smooth: SmoothIndicator,
    alpha: float,
    u=None,
    threshold: float | None = None,
) -> float:
    """Soft prediction-set size on the second half of the batch.

    The first half is the calibration half and yields the threshold unless
    ``threshold`` is given.
    """
    return _conftr(np.atleast_2d(probs), np.asarray(labels), score, smooth, alpha, u, threshold)[0]


def _conftr(probs, labels, score, smooth, alpha, u, threshold):
    n, _ = probs.shape
    h = _split_batch(n)
    u = np.zeros(n) if u is None else np.broadcast_to(np.asarray(u, dtype=float), (n,))
    S = score_matrix(probs, score, u)
    if threshold is None:
        threshold = conftr_threshold(S[np.arange(h), labels[:h]], alpha)
    S_pred = S[h:]
    value = float(np.mean(smooth(S_pred, threshold).sum(axis=1)))
    w = np.zeros_like(S)
    w[h:] = smooth.grad_s(S_pred, threshold) / (n - h)
    return value, score_matrix_grad(probs, score, u, w), threshold


def conftr_objective(logits, labels, score, smooth, alpha, u=None, threshold=None):
    """Value, ``dL/du`` and the threshold used."""
    probs = np.exp(log_softmax(logits))
    value, g, q = _conftr(probs, np.asarray(labels), score, smooth, alpha, u, threshold)
    return value, _softmax_backward(probs, g), q


def alpha_grid(size: int) -> np.ndarray:
    if size < 2:
        raise ConfigError("alpha grid needs at least 2 points")
    return np.linspace(0.0, 1.0, size)


def batch_quantile_positions(n: int, levels: np.ndarray) -> np.ndarray:
    """0-based sorted positions of the lower empirical quantile at each level."""
    k = np.ceil(np.round(np.asarray(levels) * n, 9)).astype(int)
    return np.clip(k, 1, n) - 1


def _cut(probs, labels, score, grid_size, u):
    n = len(labels)
    if n == 0:
        raise ConfigError("empty batch")
    u = np.zeros(n) if u is None else np.broadcast_to(np.asarray(u, dtype=float), (n,))
    S = score_matrix(probs, score, u)
    s = S[np.arange(n), labels]
    order = np.argsort(s, kind="stable")
    alphas = alpha_grid(grid_size)
    levels = 1.0 - alphas
    pos = batch_quantile_positions(n, levels)
    dev = levels - s[order][pos]
    j = int(np.argmax(np.abs(dev)))
    value = float(abs(dev[j]))
    w = np.zeros_like(S)
    i = order[pos[j]]
    w[i, labels[i]] = -np.sign(dev[j])
    return value, score_matrix_grad(probs, score, u, w)


def cut_loss(probs, labels, score: ScoreSpec, alpha_grid_size: int = 101, u=None) -> float:
    """``max_alpha |(1 - alpha) - q(alpha)|`` over a uniform grid.

    ``q(alpha)`` is the lower empirical ``(1 - alpha)``-quantile of the batch's
    true-label scores, so a batch whose scores look uniform on [0, 1] scores
    close to zero.
    """
    return _cut(np.atleast_2d(probs), np.asarray(labels), score, alpha_grid_size, u)[0]


def cut_objective(logits, labels, score, grid_size=101, u=None):
    probs = np.exp(log_softmax(logits))
    value, g = _cut(probs, np.asarray(labels), score, grid_size, u)
    return value, _softmax_backward(probs, g)
