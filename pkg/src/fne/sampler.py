"""False-negative posterior, sampling weights and negative selection.

A candidate negative with similarity ``s`` to its anchor is a false negative
with probability

    p f+(s) / (p f+(s) + (1 - p) f-(s))

where f+ and f- are the normal fits of matched and mismatched similarities
and ``p`` is the prior match probability. Candidates are then drawn with
weight ``exp(-posterior)``, except near-certain true negatives (posterior at
or below ``lam``), whose weight is replaced by ``exp(-alpha (s - s_pos)^2)``
so that easy negatives far below the positive are rarely picked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fne.errors import MalformedInputError, NonFiniteError, TrackerNotReady
from fne.stats import TrackerSnapshot

MODES = ("fne", "hardest", "uniform", "semi-hard")


@dataclass(frozen=True)
class FneConfig:
    prior_p: float = 1e-4
    alpha: float = 0.5
    lam: float = 0.01
    mode: str = "fne"

    def __post_init__(self):
        if not 0.0 < self.prior_p < 1.0:
            raise ValueError(f"prior_p must lie in (0, 1), got {self.prior_p}")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class CandidatePool:
    ids: np.ndarray
    similarities: np.ndarray
    positive_similarity: float

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.similarities = np.asarray(self.similarities, dtype=np.float64)
        if self.ids.shape != self.similarities.shape or self.ids.ndim != 1:
            raise MalformedInputError("ids and similarities must be equal-length vectors")
        if self.ids.size == 0:
            raise MalformedInputError("candidate pool is empty")


@dataclass
class WeightReport:
    posterior: np.ndarray
    weight: np.ndarray
    cut_down_mask: np.ndarray


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, overwriting ``x``; saturates cleanly at 0 and 1."""
    np.negative(x, out=x)
    with np.errstate(over="ignore"):
        np.exp(x, out=x)
    x += 1.0
    return np.reciprocal(x, out=x)


def posterior(s, mu_pos, sigma_pos, mu_neg, sigma_neg, prior_p):
    """Probability that a candidate with similarity ``s`` is a false negative.

    Evaluated as a logistic of the log-likelihood ratio so that similarities
    many standard deviations from both means do not produce 0/0. Accepts a
    scalar or an array for ``s`` and returns the same shape.
    """
    params = (mu_pos, sigma_pos, mu_neg, sigma_neg, prior_p)
    if not all(math.isfinite(float(v)) for v in params):
        raise NonFiniteError(f"non-finite distribution parameters {params}")
    if not (sigma_pos > 0 and sigma_neg > 0):
        raise ValueError("standard deviations must be positive")
    if not 0.0 < prior_p < 1.0:
        raise ValueError("prior_p must lie in (0, 1)")
    s_arr = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s_arr)):
        raise NonFiniteError("non-finite similarity passed to posterior")
    # log-odds = log p/(1-p) + log f+(s) - log f-(s); the normalizing
    # constants of the two densities reduce to log(sigma- / sigma+)
    const = math.log(prior_p) - math.log1p(-prior_p) + math.log(sigma_neg) - math.log(sigma_pos)
    s_1d = np.atleast_1d(s_arr)
    z_neg = (s_1d - mu_neg) / sigma_neg
    z_neg *= z_neg
    logit = (s_1d - mu_pos) / sigma_pos
    logit *= logit
    logit -= z_neg
    logit *= -0.5
    logit += const
    out = _sigmoid(logit)
    return float(out[0]) if s_arr.ndim == 0 else out.reshape(s_arr.shape)


def base_weight(post):
    w = np.exp(-np.asarray(post, dtype=np.float64))
    return float(w) if np.ndim(w) == 0 else w


def cutdown_weight(s_neg, s_pos, alpha: float):
    gap = np.asarray(s_neg, dtype=np.float64) - np.asarray(s_pos, dtype=np.float64)
    w = np.exp(-alpha * gap * gap)
    return float(w) if np.ndim(w) == 0 else w


def weight_from_posterior(post, s_neg, s_pos, config: FneConfig):
    """Sampling weight given the posterior; ``post <= lam`` takes the
    cut-down branch. Returns ``(weight, cut_down_mask)``."""
    post = np.asarray(post, dtype=np.float64)
    cut = post <= config.lam
    gap = np.subtract(s_neg, s_pos, dtype=np.float64)
    weight = np.broadcast_to(gap, np.broadcast_shapes(gap.shape, post.shape)).copy()
    weight *= weight
    weight *= -config.alpha
    np.copyto(weight, -post, where=~cut)
    np.exp(weight, out=weight)
    return weight, cut


def fne_weights(sims, s_pos, snap: TrackerSnapshot, config: FneConfig):
    """Posterior, weight and cut-down mask for a (B, M) block of candidates.

    ``s_pos`` holds each row's positive similarity, shape (B,).
    """
    if not snap.ready:
        raise TrackerNotReady("fallback required: similarity tracker not ready")
    sims = np.asarray(sims, dtype=np.float64)
    post = posterior(
        sims, snap.mu_pos, snap.sigma_pos, snap.mu_neg, snap.sigma_neg, config.prior_p
    )
    s_pos = np.asarray(s_pos, dtype=np.float64)
    if sims.ndim == 2:
        s_pos = s_pos.reshape(-1, 1)
    weight, cut = weight_from_posterior(post, sims, s_pos, config)
    return np.asarray(post), weight, cut


def combined_weights(pool: CandidatePool, snap: TrackerSnapshot, config: FneConfig) -> WeightReport:
    post, weight, cut = fne_weights(pool.similarities, pool.positive_similarity, snap, config)
    return WeightReport(post, weight, cut)


def draw_rows(weights, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row, proportional to that row's weights.

    Consumes exactly one uniform variate per row, so streams stay aligned
    across modes and batch layouts.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    cum = np.cumsum(w, axis=1)
    total = cum[:, -1] if w.shape[1] else np.zeros(w.shape[0])
    empty = np.flatnonzero(~(total > 0))
    if empty.size:
        raise ValueError(f"row {int(empty[0])} has no positive weight to sample from")
    u = rng.random(w.shape[0]) * total
    # first column whose running total exceeds u
    idx = np.array([np.searchsorted(c, x, side="right") for c, x in zip(cum, u)], dtype=np.int64)
    return np.minimum(idx, w.shape[1] - 1)


def sample_negative(report: WeightReport, pool: CandidatePool, rng: np.random.Generator):
    """Draw one negative from the pool according to ``report.weight``."""
    i = int(draw_rows(report.weight, rng)[0])
    return pool.ids[i], float(pool.similarities[i])


def _hardest(sims, valid):
    return np.argmax(np.where(valid, sims, -np.inf), axis=1)


def baseline_rows(sims, valid, s_pos, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Row-wise selection for the comparison strategies.

    ``hardest`` takes the argmax (first index on ties); ``uniform`` draws
    uniformly among valid candidates; ``semi-hard`` draws uniformly among
    candidates below the positive and falls back to hardest when there are
    none.
    """
    sims = np.atleast_2d(np.asarray(sims, dtype=np.float64))
    valid = np.atleast_2d(np.asarray(valid, dtype=bool))
    if mode == "hardest":
        return _hardest(sims, valid)
    if mode == "uniform":
        return draw_rows(valid.astype(np.float64), rng)
    if mode == "semi-hard":
        s_pos = np.asarray(s_pos, dtype=np.float64).reshape(-1, 1)
        semi = valid & (sims < s_pos)
        has = semi.any(axis=1)
        # every row consumes a variate, even when it falls back
        w = np.where(has[:, None], semi, valid).astype(np.float64)
        drawn = draw_rows(w, rng)
        return np.where(has, drawn, _hardest(sims, valid))
    raise ValueError(f"unknown baseline mode {mode!r}")


def baseline_select(pool: CandidatePool, mode: str, rng: np.random.Generator):
    valid = np.ones(pool.ids.size, dtype=bool)
    i = int(baseline_rows(pool.similarities, valid, pool.positive_similarity, mode, rng)[0])
    return pool.ids[i], float(pool.similarities[i])


def select_rows(sims, valid, s_pos, snap: TrackerSnapshot, config: FneConfig, rng):
    """Pick one candidate column per row under ``config.mode``.

    In ``fne`` mode, rows fall back to uniform sampling while the tracker is
    still warming up. Returns ``(indices, used_fne)``.
    """
    sims = np.atleast_2d(np.asarray(sims, dtype=np.float64))
    valid = np.atleast_2d(np.asarray(valid, dtype=bool))
    if not valid.any(axis=1).all():
        row = int(np.flatnonzero(~valid.any(axis=1))[0])
        raise MalformedInputError(f"anchor {row} has an empty candidate pool")
    if config.mode != "fne":
        return baseline_rows(sims, valid, s_pos, config.mode, rng), False
    if not snap.ready:
        return baseline_rows(sims, valid, s_pos, "uniform", rng), False
    _, weight, _ = fne_weights(sims, s_pos, snap, config)
    weight[~valid] = 0.0
    return draw_rows(weight, rng), True
