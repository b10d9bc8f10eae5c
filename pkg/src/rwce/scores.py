"""Nonconformity scores: HPS, APS, RAPS and SAPS.

All functions take probability rows of shape ``(n, K)`` and 0-based labels.
A single tie-break draw ``u`` is shared by every candidate label of one
example, which is what makes score order agree with rank order for HPS/APS.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

KINDS = ("HPS", "APS", "RAPS", "SAPS")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreSpec:
    kind: str = "HPS"
    raps_lambda: float = 0.01
    k_reg: int = 5
    saps_lambda: float = 0.02
    # None means a fresh uniform draw per example
    fixed_u: float | None = None

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown score kind {self.kind!r}")
        if self.raps_lambda < 0 or self.k_reg < 1:
            raise ConfigError("RAPS needs lambda >= 0 and k_reg >= 1")
        if not self.saps_lambda > 0:
            raise ConfigError("SAPS needs lambda > 0")
        if self.fixed_u is not None and not 0.0 <= self.fixed_u <= 1.0:
            raise ConfigError("fixed tie-break value must lie in [0, 1]")

    @property
    def randomized(self) -> bool:
        return self.kind != "HPS"

    def draw_u(self, n: int, rng: np.random.Generator | None) -> np.ndarray:
        if self.fixed_u is not None:
            return np.full(n, self.fixed_u)
        if not self.randomized:
            return np.zeros(n)
        if rng is None:
            raise ConfigError(f"{self.kind} with randomized tie-break needs an rng")
        return rng.uniform(size=n)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.kind != "RAPS":
            d.pop("raps_lambda"), d.pop("k_reg")
        if self.kind != "SAPS":
            d.pop("saps_lambda")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ScoreSpec:
        return cls(**d)


def _as_batch(probs, labels=None):
    probs = np.asarray(probs, dtype=float)
    single = probs.ndim == 1
    probs = np.atleast_2d(probs)
    if labels is None:
        return probs, None, single
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != probs.shape[0]:
        raise ConfigError("one label per probability row required")
    K = probs.shape[1]
    if np.any((labels < 0) | (labels >= K)):
        raise IndexError(f"label out of range for K={K}")
    return probs, labels.astype(int), single


def sort_order(probs: np.ndarray) -> np.ndarray:
    """Descending order of each row; equal probabilities keep ascending label order."""
    return np.argsort(-probs, axis=1, kind="stable")


def label_ranks(probs, labels) -> np.ndarray | int:
    """``R(x, y) = #{l : p_l >= p_y}``; ties count against ``y``."""
    probs, labels, single = _as_batch(probs, labels)
    py = probs[np.arange(len(labels)), labels]
    r = (probs >= py[:, None]).sum(axis=1)
    return int(r[0]) if single else r


def all_label_ranks(probs) -> np.ndarray:
    probs, _, _ = _as_batch(probs)
    return (probs[:, None, :] >= probs[:, :, None]).sum(axis=2)


def score_matrix(probs, spec: ScoreSpec, u) -> np.ndarray:
    """Scores of every label, shape ``(n, K)``, with one ``u`` per row."""
    probs, _, single = _as_batch(probs)
    n, K = probs.shape
    u = np.broadcast_to(np.asarray(u, dtype=float), (n,))[:, None]
    if spec.kind == "HPS":
        out = 1.0 - probs
    else:
        ranks = all_label_ranks(probs)
        if spec.kind in ("APS", "RAPS"):
            sorted_p = np.take_along_axis(probs, sort_order(probs), axis=1)
            # mass of the r-1 sorted slots above rank r; tied labels share a rank
            r_pos = ranks - 1
            above = np.take_along_axis(np.cumsum(sorted_p, axis=1), np.maximum(r_pos - 1, 0), axis=1)
            above = np.where(r_pos > 0, above, 0.0)
            r_prob = np.take_along_axis(sorted_p, r_pos, axis=1)
            out = above + u * r_prob
            if spec.kind == "RAPS":
                out = out + spec.raps_lambda * np.maximum(ranks - spec.k_reg, 0)
        else:
            top = probs.max(axis=1, keepdims=True)
            out = np.where(ranks == 1, u * top, top + spec.saps_lambda * (ranks - 2 + u))
    return out[0] if single else out


def true_label_scores(probs, labels, spec: ScoreSpec, u) -> np.ndarray:
    probs, labels, single = _as_batch(probs, labels)
    s = np.atleast_2d(score_matrix(probs, spec, u))[np.arange(len(labels)), labels]
    return float(s[0]) if single else s


def score_hps(p, y) -> float:
    return float(true_label_scores(p, y, ScoreSpec("HPS"), 0.0))


def score_aps(p, y, u) -> float:
    return float(true_label_scores(p, y, ScoreSpec("APS"), u))


def score_raps(p, y, u, lam, k_reg) -> float:
    return float(true_label_scores(p, y, ScoreSpec("RAPS", raps_lambda=lam, k_reg=k_reg), u))


def score_saps(p, y, u, lam) -> float:
    return float(true_label_scores(p, y, ScoreSpec("SAPS", saps_lambda=lam), u))


def score_all_labels(p, spec: ScoreSpec, u) -> np.ndarray:
    return score_matrix(p, spec, u)


def score_matrix_grad(probs: np.ndarray, spec: ScoreSpec, u, weights: np.ndarray) -> np.ndarray:
    """Contract ``dS[i, y] / dp[i, l]`` with ``weights[i, y]``.

    Returns ``G[i, l] = sum_y weights[i, y] * dS[i, y]/dp[i, l]``, the
    gradient of ``sum(weights * S)`` w.r.t. the probabilities. Sort order and
    ranks are treated as locally constant (true almost everywhere).
    """
    n, K = probs.shape
    u = np.broadcast_to(np.asarray(u, dtype=float), (n,))
    if spec.kind == "HPS":
        return -weights
    ranks = all_label_ranks(probs)
    if spec.kind == "SAPS":
        coef = np.where(ranks == 1, u[:, None], 1.0)
        G = np.zeros_like(probs)
        G[np.arange(n), np.argmax(probs, axis=1)] = (weights * coef).sum(axis=1)
        return G
    # APS / RAPS: S_y depends on p_l with coefficient 1 if rank_l < rank_y, u if l == y
    strictly_above = ranks[:, :, None] < ranks[:, None, :]  # [i, l, y]
    G = np.einsum("ily,iy->il", strictly_above.astype(float), weights)
    return G + u[:, None] * weights
