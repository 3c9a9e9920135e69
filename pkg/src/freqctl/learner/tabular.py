"""Tabular Q-learning and the value-iteration oracle for small explicit MDPs.

Tabular transitions reuse ``EpisodeRecord``; the state id is carried as the
single entry of ``state_features`` / ``next_state_features``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from freqctl.core import ContractViolation, EpisodeRecord, RewardParams, reward_array
from freqctl.env import EnvParams, Population, _transition


@dataclass(frozen=True)
class FiniteMDP:
    """``transitions[s, a, s']`` probabilities and expected rewards ``rewards[s, a]``."""

    transitions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.transitions, dtype=np.float64)
        r = np.asarray(self.rewards, dtype=np.float64)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise ContractViolation(f"inconsistent MDP shapes {p.shape} / {r.shape}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1.0) > 1e-9):
            raise ContractViolation("every transition row must be a probability distribution")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @classmethod
    def random(cls, n_states: int, n_actions: int, seed: int) -> "FiniteMDP":
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        return cls(p, rng.random((n_states, n_actions)))


class QTable:
    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "QTable":
        return cls(np.zeros((n_states, n_actions)))

    def __getitem__(self, key: tuple[int, int]) -> float:
        return float(self.values[key])

    def copy(self) -> "QTable":
        return QTable(self.values.copy())

    def greedy(self) -> np.ndarray:
        return np.argmax(self.values, axis=1)

    def sup_distance(self, other: "QTable") -> float:
        return float(np.max(np.abs(self.values - other.values)))


def bellman_optimality(mdp: FiniteMDP, q: np.ndarray, gamma: float) -> np.ndarray:
    return mdp.rewards + gamma * mdp.transitions @ q.max(axis=1)


def value_iteration(mdp: FiniteMDP, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000) -> QTable:
    """Iterate the Bellman optimality operator until the sup-norm residual drops below ``tol``."""
    if tol <= 0:
        raise ContractViolation("tol must be > 0")
    if not 0 <= gamma < 1:
        raise ContractViolation("gamma must be in [0, 1)")
    q = np.zeros_like(mdp.rewards)
    for _ in range(max_iter):
        q_next = bellman_optimality(mdp, q, gamma)
        q = q_next
        if np.max(np.abs(bellman_optimality(mdp, q, gamma) - q)) < tol:
            return QTable(q)
    raise RuntimeError(f"value iteration did not reach tol={tol} in {max_iter} sweeps")


def _state_id(features, n_states: int) -> int:
    if len(features) != 1:
        raise ContractViolation("tabular records carry a single state id")
    s = features[0]
    if s != int(s) or not 0 <= int(s) < n_states:
        raise ContractViolation(f"unknown state id {s!r}")
    return int(s)


def tabular_q_update(q: QTable, rec: EpisodeRecord, alpha: float, gamma: float) -> QTable:
    """One Bellman update on the (state, action) pair of ``rec``; returns a new table."""
    n_states, n_actions = q.values.shape
    s = _state_id(rec.state_features, n_states)
    if not 0 <= rec.action_index < n_actions:
        raise ContractViolation(f"unknown action index {rec.action_index}")
    target = rec.reward
    if not rec.terminal:
        s2 = _state_id(rec.next_state_features, n_states)
        target += gamma * q.values[s2].max()
    out = q.copy()
    out.values[s, rec.action_index] = (1 - alpha) * q.values[s, rec.action_index] + alpha * target
    return out


def q_learning(mdp: FiniteMDP, gamma: float, n_updates: int, seed: int = 0) -> QTable:
    """Q-learning from a generative model: uniformly drawn (s, a), step size 1 / visit count."""
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    pairs = rng.integers(S * A, size=n_updates)
    u = rng.random(n_updates)
    cdf = np.cumsum(mdp.transitions, axis=2)
    q = np.zeros((S, A))
    visits = np.zeros((S, A), dtype=np.int64)
    for k in range(n_updates):
        s, a = divmod(int(pairs[k]), A)
        s2 = min(int(np.searchsorted(cdf[s, a], u[k], side="right")), S - 1)
        visits[s, a] += 1
        alpha = 1.0 / visits[s, a]
        q[s, a] += alpha * (mdp.rewards[s, a] + gamma * q[s2].max() - q[s, a])
    return QTable(q)


def sample_episodes(mdp: FiniteMDP, n_episodes: int, length: int, seed: int = 0) -> list[tuple[int, int, float, int]]:
    """Uniform-random-behavior rollouts as flat ``(episode, step, s, a, r, s2)`` tuples."""
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(mdp.transitions, axis=2)
    out = []
    for ep in range(n_episodes):
        s = int(rng.integers(mdp.n_states))
        for t in range(length):
            a = int(rng.integers(mdp.n_actions))
            s2 = min(int(np.searchsorted(cdf[s, a], rng.random(), side="right")), mdp.n_states - 1)
            out.append((ep, t, s, a, float(mdp.rewards[s, a]), s2))
            s = s2
    return out


@dataclass(frozen=True)
class DiscretizedEnv:
    """Fatigue-bucket abstraction of one always-active user of fixed engagement."""

    mdp: FiniteMDP
    edges: np.ndarray

    def features(self, state: int) -> np.ndarray:
        return np.eye(self.mdp.n_states)[state]


def discretize_fatigue(params: EnvParams, reward_params: RewardParams, n_buckets: int = 4,
                       theta: float = 0.8, samples_per_bucket: int = 4000) -> DiscretizedEnv:
    """Build a finite MDP over equal-width fatigue buckets by running the simulator dynamics.

    Within each bucket fatigue is taken uniform on a fine stratified grid; transition
    probabilities are the fraction of next-fatigue values landing in each bucket and
    rewards are their mean. Churn is disabled so the user stays active.
    """
    if n_buckets < 1:
        raise ContractViolation("n_buckets must be >= 1")
    params = EnvParams(**{**params.__dict__, "churn_prob": 0.0, "dormant_fraction": 0.0})
    edges = np.linspace(0.0, 1.0, n_buckets + 1)
    values = np.asarray(params.action_values)
    m = samples_per_bucket
    P = np.zeros((n_buckets, values.size, n_buckets))
    R = np.zeros((n_buckets, values.size))
    for b in range(n_buckets):
        phi = edges[b] + (np.arange(m) + 0.5) / m * (edges[b + 1] - edges[b])
        for a, f in enumerate(values):
            pop = Population(
                user_id=np.arange(m), theta=np.full(m, theta), phi=phi.copy(),
                active=np.ones(m, dtype=bool), credit=np.zeros(m), cohort=np.zeros(m, dtype=np.int64),
                history=np.zeros((m, params.history_window), dtype=np.int64),
                hist_len=np.zeros(m, dtype=np.int64), params=params,
            )
            fv = np.full(m, f)
            metrics = _transition(pop, np.arange(m), fv, 1.0, np.ones(m))
            R[b, a] = reward_array(metrics, reward_params, fv).mean()
            nb = np.clip(np.searchsorted(edges, pop.phi, side="right") - 1, 0, n_buckets - 1)
            P[b, a] = np.bincount(nb, minlength=n_buckets) / m
    return DiscretizedEnv(FiniteMDP(P, R), edges)
