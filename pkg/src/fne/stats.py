"""Streaming Gaussian fits of matched and mismatched similarities.

The tracker keeps two running (count, mean, M2) accumulators, one for the
similarities of annotated pairs and one for all other candidate pairs. A
matched similarity is only admitted when it beats every mismatched
similarity of the same anchor in the same call; mismatched similarities are
always admitted.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from fne.errors import NonFiniteError, TrackerNotReady

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianStats:
    """Running count/mean/M2 with population variance (M2 / count)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, values) -> None:
        """Fold a batch of values in with Chan's pairwise combination."""
        x = np.asarray(values, dtype=np.float64).ravel()
        n = x.size
        if n == 0:
            return
        batch_mean = float(x.mean())
        batch_m2 = float(np.square(x - batch_mean).sum())
        self.merge(GaussianStats(n, batch_mean, batch_m2))

    def merge(self, other: GaussianStats) -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            return
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / total
        self.m2 += other.m2 + delta * delta * self.count * other.count / total
        self.count = total

    def merged(self, other: GaussianStats) -> GaussianStats:
        out = GaussianStats(self.count, self.mean, self.m2)
        out.merge(other)
        return out

    @property
    def variance(self) -> float:
        if self.count < 2:
            raise TrackerNotReady(f"variance needs at least 2 samples, have {self.count}")
        return max(self.m2, 0.0) / self.count

    def std(self, sigma_floor: float = 0.0) -> float:
        return max(math.sqrt(self.variance), sigma_floor)


def log_pdf(s, mean: float, sigma: float):
    """Log normal density; works on scalars and arrays."""
    z = (np.asarray(s, dtype=np.float64) - mean) / sigma
    return -0.5 * z * z - math.log(sigma) - _LOG_SQRT_2PI


def pdf(stats: GaussianStats, s: float, sigma_floor: float = 1e-6) -> float:
    """Normal density of ``s`` under the tracked mean and floored std."""
    if stats.count < 2:
        raise TrackerNotReady(f"tracker not ready: {stats.count} samples")
    sigma = stats.std(sigma_floor)
    return float(np.exp(log_pdf(s, stats.mean, sigma)))


class TrackerSnapshot(NamedTuple):
    mu_pos: float
    sigma_pos: float
    mu_neg: float
    sigma_neg: float
    ready: bool
    n_pos: int = 0
    n_neg: int = 0


@dataclass
class DistributionTracker:
    """Positive/negative similarity statistics for the current epoch.

    ``new_epoch()`` starts fresh accumulators. Until the fresh ones hold
    ``min_ready_count`` samples on a side, that side is served from the
    previous epoch merged with the current one, so the model never falls back
    to cold-start sampling just because an epoch boundary passed.
    """

    min_ready_count: int = 1000
    sigma_floor: float = 1e-6
    positive: GaussianStats = field(default_factory=GaussianStats)
    negative: GaussianStats = field(default_factory=GaussianStats)
    prev_positive: GaussianStats = field(default_factory=GaussianStats)
    prev_negative: GaussianStats = field(default_factory=GaussianStats)

    def __post_init__(self):
        if self.min_ready_count < 2:
            raise ValueError("min_ready_count must be at least 2")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")
        self._lock = threading.Lock()

    def observe_batch(self, positive_sims, negative_sims, mask=None) -> tuple[int, int]:
        """Admit one step's similarities.

        Args:
            positive_sims: (B,) similarity of each anchor to its positive.
            negative_sims: (B, M) similarities of each anchor to its candidate
                negatives.
            mask: optional (B, M) boolean array; False entries are not
                candidates for that anchor (e.g. excluded positives) and are
                ignored entirely.

        Returns:
            Number of admitted positive and negative values.
        """
        pos = np.asarray(positive_sims, dtype=np.float64).ravel()
        neg = np.asarray(negative_sims, dtype=np.float64)
        if neg.ndim == 1:
            neg = neg[None, :]
        if neg.shape[0] != pos.size:
            raise ValueError(f"{pos.size} positives but {neg.shape[0]} negative rows")
        valid = np.ones(neg.shape, dtype=bool) if mask is None else np.asarray(mask, bool)

        bad_pos = ~np.isfinite(pos)
        bad_neg = (~np.isfinite(neg) & valid).any(axis=1)
        bad = np.flatnonzero(bad_pos | bad_neg)
        if bad.size:
            i = int(bad[0])
            raise NonFiniteError(f"non-finite similarity for anchor {i}", index=i)

        row_max = np.where(valid, neg, -np.inf).max(axis=1, initial=-np.inf)
        admitted_pos = pos[pos > row_max]
        admitted_neg = neg[valid]
        with self._lock:
            self.positive.update(admitted_pos)
            self.negative.update(admitted_neg)
        return admitted_pos.size, admitted_neg.size

    def new_epoch(self) -> None:
        with self._lock:
            self.prev_positive = self.positive
            self.prev_negative = self.negative
            self.positive = GaussianStats()
            self.negative = GaussianStats()

    def _served(self, current: GaussianStats, previous: GaussianStats) -> GaussianStats:
        if current.count >= self.min_ready_count:
            return current
        return previous.merged(current)

    def served_stats(self) -> tuple[GaussianStats, GaussianStats]:
        with self._lock:
            return (
                self._served(self.positive, self.prev_positive),
                self._served(self.negative, self.prev_negative),
            )

    def ready(self) -> bool:
        pos, neg = self.served_stats()
        return pos.count >= self.min_ready_count and neg.count >= self.min_ready_count

    def snapshot(self) -> TrackerSnapshot:
        pos, neg = self.served_stats()
        ready = pos.count >= self.min_ready_count and neg.count >= self.min_ready_count

        def params(st: GaussianStats) -> tuple[float, float]:
            if st.count == 0:
                return math.nan, math.nan
            if st.count == 1:
                return st.mean, math.nan
            return st.mean, st.std(self.sigma_floor)

        mu_p, sd_p = params(pos)
        mu_n, sd_n = params(neg)
        return TrackerSnapshot(mu_p, sd_p, mu_n, sd_n, ready, pos.count, neg.count)

    def state(self) -> list[float]:
        """Flat numeric state for checkpointing."""
        with self._lock:
            out = [float(self.min_ready_count), float(self.sigma_floor)]
            for st in (self.positive, self.negative, self.prev_positive, self.prev_negative):
                out += [float(st.count), st.mean, st.m2]
            return out

    @classmethod
    def from_state(cls, values) -> DistributionTracker:
        v = [float(x) for x in values]
        if len(v) != 14:
            raise ValueError(f"tracker state must have 14 values, got {len(v)}")
        stats = [GaussianStats(int(v[i]), v[i + 1], v[i + 2]) for i in range(2, 14, 3)]
        return cls(int(v[0]), v[1], *stats)
