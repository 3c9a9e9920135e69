"""Map per-frequency Q-values to a delivery decision.

``ef_select`` picks the smallest frequency whose Q-value climbs at least a
fraction ``ef`` of the way from the worst to the best Q-value. ``ef = 1``
recovers the greedy choice; ``ef = 0`` always sends the lowest frequency.
Larger ``ef`` never picks a smaller frequency, which is what makes ``ef`` a
monotone knob for total delivery volume.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from freqctl.core import ContractViolation
from freqctl.env import Cohort

log = logging.getLogger(__name__)

# Slack on the threshold comparison so rounding never excludes the argmax.
EF_SLACK = 1e-12


def _clamp_ef(ef: float) -> float:
    if not 0.0 <= ef <= 1.0:
        log.warning("effective factor %r outside [0, 1]; clamping", ef)
        return min(1.0, max(0.0, float(ef)))
    return float(ef)


@dataclass
class EfConfig:
    """Global effective factor with optional per-cohort overrides."""

    ef: float = 1.0
    per_cohort: dict[Cohort, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.ef = _clamp_ef(self.ef)
        self.per_cohort = {Cohort.parse(k): _clamp_ef(v) for k, v in self.per_cohort.items()}

    def for_cohort(self, cohort: Cohort) -> float:
        return self.per_cohort.get(cohort, self.ef)

    def resolve(self, cohorts: np.ndarray) -> np.ndarray:
        """Per-user EF values given integer cohort codes."""
        out = np.full(cohorts.shape, self.ef, dtype=np.float64)
        for c, v in self.per_cohort.items():
            out[cohorts == int(c)] = v
        return out

    def snapshot(self) -> "EfConfig":
        return EfConfig(self.ef, dict(self.per_cohort))

    def to_dict(self) -> dict:
        return {"ef": self.ef, "per_cohort": {c.label: v for c, v in self.per_cohort.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EfConfig":
        return cls(ef=d.get("ef", 1.0), per_cohort=dict(d.get("per_cohort") or {}))


def greedy(qvals: Sequence[float]) -> int:
    q = np.asarray(qvals, dtype=np.float64)
    if q.size == 0:
        raise ContractViolation("greedy needs at least one Q-value")
    return int(np.argmax(q))  # argmax returns the first maximum


def delta_q(qvals: Sequence[float]) -> float:
    q = np.asarray(qvals, dtype=np.float64)
    if q.size == 0:
        raise ContractViolation("delta_q needs at least one Q-value")
    return float(q.max() - q.min())


def ef_select(qvals: Sequence[float], ef: float) -> int:
    """Smallest index whose Q-value reaches ``min(q) + ef * (max(q) - min(q))``."""
    q = np.asarray(qvals, dtype=np.float64)
    if q.ndim != 1 or q.size < 3:
        raise ContractViolation(f"ef_select needs a 1-d vector of >= 3 Q-values, got shape {q.shape}")
    ef = _clamp_ef(ef)
    if ef == 1.0:
        # The slack guards the argmax against rounding; at ef=1 the answer is exactly the argmax.
        return int(np.argmax(q))
    lo = q.min()
    threshold = lo + ef * (q.max() - lo)
    return int(np.argmax(q >= threshold - EF_SLACK))


def ef_select_batch(qvals: np.ndarray, ef: float | np.ndarray) -> np.ndarray:
    """Row-wise ``ef_select`` for a (n, K) matrix; ``ef`` may be per-row."""
    q = np.asarray(qvals, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] < 3:
        raise ContractViolation(f"expected (n, K>=3) Q-values, got shape {q.shape}")
    ef = np.asarray(ef, dtype=np.float64)
    if np.any((ef < 0) | (ef > 1)):
        log.warning("effective factor outside [0, 1]; clamping")
        ef = np.clip(ef, 0.0, 1.0)
    lo = q.min(axis=1)
    threshold = lo + ef * (q.max(axis=1) - lo)
    chosen = np.argmax(q >= (threshold - EF_SLACK)[:, None], axis=1)
    return np.where(ef == 1.0, np.argmax(q, axis=1), chosen)


def greedy_batch(qvals: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(qvals), axis=1)


def explore(qvals: Sequence[float], explore_prob: float, rng: np.random.Generator) -> int:
    """Uniform-random action with probability ``explore_prob``, greedy otherwise."""
    if not 0.0 <= explore_prob <= 1.0:
        raise ContractViolation("explore_prob must be in [0, 1]")
    q = np.asarray(qvals, dtype=np.float64)
    if rng.random() < explore_prob:
        return int(rng.integers(q.size))
    return greedy(q)


def explore_batch(qvals: np.ndarray, explore_prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= explore_prob <= 1.0:
        raise ContractViolation("explore_prob must be in [0, 1]")
    q = np.asarray(qvals)
    n, k = q.shape
    coin = rng.random(n)
    random_actions = rng.integers(k, size=n)
    return np.where(coin < explore_prob, random_actions, np.argmax(q, axis=1))


def ef_q_gap(qvals: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """Q-value given up by a non-greedy choice: ``Q(s, greedy) - Q(s, chosen)`` per row."""
    q = np.asarray(qvals)
    return q.max(axis=1) - q[np.arange(q.shape[0]), chosen]
