"""Synthetic user-population environment.

Each user carries a hidden engagement propensity ``theta``, a fatigue level
``phi`` and an active/dormant flag. Delivering ``f`` notifications on a day
yields two metric components that saturate in ``f`` and shrink with fatigue;
fatigue accumulates with ``f`` and, when saturated, may churn the user into
dormancy. Dormant users produce nothing but bank activation credit until
enough deliveries wake them up.

The population is stored column-wise (one numpy array per field) so a day of
20k users steps in a handful of array operations. ``step_user`` and
``features`` on a single ``UserState`` route through the same code.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from freqctl.core import (
    DEFAULT_ACTION_VALUES,
    DEFAULT_EPISODE_LENGTH,
    ContractViolation,
    DayOutcome,
    EpisodeRecord,
    FrequencyAction,
    RewardParams,
    action_set,
    reward_array,
)

N_FEATURES = 8
N_METRICS = 2
SNAPSHOT_FORMAT_VERSION = 1


class Cohort(enum.IntEnum):
    HIGH = 0
    MEDIUM = 1
    LOW = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value: "str | int | Cohort") -> "Cohort":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


@dataclass(frozen=True)
class EnvParams:
    """Environment configuration. Serialized with ``lambda`` as the key for ``lam``."""

    lam: float = 0.5
    rho: float = 0.8
    kappa: float = 0.3
    churn_threshold: float = 0.95
    churn_prob: float = 0.5
    activation_threshold: float = 6.0
    population_size: int = 1000
    seed: int = 0
    dormant_fraction: float = 0.2
    history_window: int = 7
    action_values: tuple[int, ...] = DEFAULT_ACTION_VALUES
    # None: every user gets a decision every day. A value p: a user is due
    # with probability min(1, p * day_multiplier), so drift moves traffic.
    due_prob: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "action_values", tuple(int(v) for v in self.action_values))
        action_set(self.action_values)
        if self.lam <= 0:
            raise ContractViolation("lambda must be > 0")
        if not 0 <= self.rho < 1:
            raise ContractViolation("rho must be in [0, 1)")
        if self.kappa < 0:
            raise ContractViolation("kappa must be >= 0")
        if not 0 <= self.churn_prob <= 1:
            raise ContractViolation("churn_prob must be in [0, 1]")
        if self.activation_threshold <= 0:
            raise ContractViolation("activation_threshold must be > 0")
        if not 0 <= self.dormant_fraction <= 1:
            raise ContractViolation("dormant_fraction must be in [0, 1]")
        if self.history_window < 1:
            raise ContractViolation("history_window must be >= 1")
        if self.due_prob is not None and not 0 < self.due_prob <= 1:
            raise ContractViolation("due_prob must be in (0, 1]")

    @property
    def f_max(self) -> int:
        return self.action_values[-1]

    @property
    def actions(self) -> tuple[FrequencyAction, ...]:
        return action_set(self.action_values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["action_values"] = list(self.action_values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvParams":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown env parameters: {sorted(unknown)}")
        if "action_values" in d:
            d["action_values"] = tuple(d["action_values"])
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "EnvParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DriftSpec:
    """Population-wide day multipliers: a weekly cycle times any scheduled windows.

    ``schedule`` entries are ``(first_day, end_day, multiplier)`` with ``end_day``
    exclusive.
    """

    schedule: tuple[tuple[int, int, float], ...] = ()
    weekly_pattern: tuple[float, ...] = (1.0,) * 7

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "schedule", tuple((int(a), int(b), float(m)) for a, b, m in self.schedule)
        )
        object.__setattr__(self, "weekly_pattern", tuple(float(m) for m in self.weekly_pattern))
        if len(self.weekly_pattern) != 7:
            raise ContractViolation("weekly_pattern needs 7 multipliers")
        if any(m <= 0 for m in self.weekly_pattern) or any(m <= 0 for *_, m in self.schedule):
            raise ContractViolation("drift multipliers must be > 0")

    def multiplier(self, day: int) -> float:
        m = self.weekly_pattern[day % 7]
        for start, end, mult in self.schedule:
            if start <= day < end:
                m *= mult
        return m

    @classmethod
    def weekly_swing(cls, amplitude: float) -> "DriftSpec":
        """Sinusoidal weekly cycle ``1 + amplitude * sin(2 pi d / 7)``."""
        days = np.arange(7)
        return cls(weekly_pattern=tuple(1.0 + amplitude * np.sin(2 * np.pi * days / 7)))

    def to_dict(self) -> dict:
        return {"schedule": [list(s) for s in self.schedule], "weekly_pattern": list(self.weekly_pattern)}

    @classmethod
    def from_dict(cls, d: dict) -> "DriftSpec":
        return cls(
            schedule=tuple(tuple(s) for s in d.get("schedule", ())),
            weekly_pattern=tuple(d.get("weekly_pattern", (1.0,) * 7)),
        )


@dataclass(frozen=True)
class UserState:
    theta: float
    phi: float = 0.0
    active: bool = True
    activation_credit: float = 0.0
    cohort: Cohort = Cohort.MEDIUM
    history: tuple[int, ...] = ()


@dataclass
class Population:
    """Column-wise user states. ``history`` is right-aligned; ``hist_len`` counts valid cells."""

    user_id: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    active: np.ndarray
    credit: np.ndarray
    cohort: np.ndarray
    history: np.ndarray
    hist_len: np.ndarray
    params: EnvParams = field(default_factory=EnvParams)

    def __len__(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "Population":
        return Population(
            self.user_id.copy(), self.theta.copy(), self.phi.copy(), self.active.copy(),
            self.credit.copy(), self.cohort.copy(), self.history.copy(), self.hist_len.copy(),
            self.params,
        )

    def user(self, i: int) -> UserState:
        n = int(self.hist_len[i])
        hist = tuple(int(v) for v in self.history[i, self.history.shape[1] - n:]) if n else ()
        return UserState(
            theta=float(self.theta[i]),
            phi=float(self.phi[i]),
            active=bool(self.active[i]),
            activation_credit=float(self.credit[i]),
            cohort=Cohort(int(self.cohort[i])),
            history=hist,
        )

    @classmethod
    def from_users(cls, users: Sequence[UserState], params: EnvParams,
                   user_ids: Sequence[int] | None = None) -> "Population":
        w = params.history_window
        history = np.zeros((len(users), w), dtype=np.int64)
        hist_len = np.zeros(len(users), dtype=np.int64)
        for i, u in enumerate(users):
            h = u.history[-w:]
            if h:
                history[i, w - len(h):] = h
            hist_len[i] = len(h)
        return cls(
            user_id=np.asarray(user_ids if user_ids is not None else range(len(users)), dtype=np.int64),
            theta=np.array([u.theta for u in users], dtype=np.float64),
            phi=np.array([u.phi for u in users], dtype=np.float64),
            active=np.array([u.active for u in users], dtype=bool),
            credit=np.array([u.activation_credit for u in users], dtype=np.float64),
            cohort=np.array([int(u.cohort) for u in users], dtype=np.int64),
            history=history,
            hist_len=hist_len,
            params=params,
        )

    def features(self, idx: np.ndarray | slice | None = None) -> np.ndarray:
        return population_features(self, idx)

    def save_snapshot(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"format_version": SNAPSHOT_FORMAT_VERSION,
                                 "params": self.params.to_dict()}) + "\n")
            for i in range(len(self)):
                u = self.user(i)
                fh.write(json.dumps({
                    "user_id": int(self.user_id[i]),
                    "theta": u.theta,
                    "phi": u.phi,
                    "active": u.active,
                    "activation_credit": u.activation_credit,
                    "cohort": u.cohort.label,
                    "history": list(u.history),
                }, separators=(",", ":")) + "\n")

    @classmethod
    def load_snapshot(cls, path: str | Path) -> "Population":
        with Path(path).open(encoding="utf-8") as fh:
            head = json.loads(fh.readline())
            if head.get("format_version") != SNAPSHOT_FORMAT_VERSION:
                raise ContractViolation(f"{path}: unsupported snapshot format")
            params = EnvParams.from_dict(head["params"])
            users, ids = [], []
            for line in fh:
                d = json.loads(line)
                ids.append(d["user_id"])
                users.append(UserState(
                    theta=d["theta"], phi=d["phi"], active=d["active"],
                    activation_credit=d["activation_credit"],
                    cohort=Cohort.parse(d["cohort"]), history=tuple(d["history"]),
                ))
        return cls.from_users(users, params, ids)


def init_population(params: EnvParams) -> Population:
    """Draw a population; theta ~ U(0, 1), cohorts are rank terciles of theta."""
    n = params.population_size
    if n < 1:
        raise ContractViolation("population_size must be >= 1")
    rng = np.random.default_rng([params.seed, 0xC0])
    theta = rng.random(n)
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(-theta, kind="stable")] = np.arange(n)
    cohort = (3 * ranks) // n
    n_dormant = int(round(params.dormant_fraction * n))
    active = np.ones(n, dtype=bool)
    active[rng.permutation(n)[:n_dormant]] = False
    return Population(
        user_id=np.arange(n, dtype=np.int64),
        theta=theta,
        phi=np.zeros(n),
        active=active,
        credit=np.zeros(n),
        cohort=cohort,
        history=np.zeros((n, params.history_window), dtype=np.int64),
        hist_len=np.zeros(n, dtype=np.int64),
        params=params,
    )


def population_features(pop: Population, idx: np.ndarray | slice | None = None) -> np.ndarray:
    """Observable feature matrix, one row per user (theta is never exposed).

    Columns: fatigue, active flag, recent-frequency mean / f_max, recent-frequency
    std / f_max, cohort one-hot (High, Medium, Low), activation credit / threshold
    capped at 1.
    """
    if idx is None:
        idx = slice(None)
    p = pop.params
    hist = pop.history[idx].astype(np.float64)
    n = np.maximum(pop.hist_len[idx], 1).astype(np.float64)
    mean = hist.sum(axis=1) / n
    var = np.maximum((hist * hist).sum(axis=1) / n - mean * mean, 0.0)
    cohort = pop.cohort[idx]
    out = np.zeros((cohort.shape[0], N_FEATURES))
    out[:, 0] = pop.phi[idx]
    out[:, 1] = pop.active[idx]
    out[:, 2] = mean / p.f_max
    out[:, 3] = np.sqrt(var) / p.f_max
    out[np.arange(cohort.shape[0]), 4 + cohort] = 1.0
    out[:, 7] = np.minimum(pop.credit[idx] / p.activation_threshold, 1.0)
    return out


def features(u: UserState, params: EnvParams | None = None) -> np.ndarray:
    params = params or EnvParams()
    return population_features(Population.from_users([u], params))[0]


def _transition(pop: Population, idx: np.ndarray, fvals: np.ndarray, day_multiplier: float,
                churn_draw: np.ndarray) -> np.ndarray:
    """Step the users at ``idx`` in place; returns their (len(idx), 2) metric components."""
    p = pop.params
    f = fvals.astype(np.float64)
    theta, phi = pop.theta[idx], pop.phi[idx]
    active = pop.active[idx].copy()
    credit = pop.credit[idx].copy()

    exposure = 1.0 - np.exp(-p.lam * f)
    metrics = np.zeros((idx.shape[0], N_METRICS))
    metrics[:, 0] = np.where(active, theta * exposure * (1.0 - phi) * day_multiplier, 0.0)
    metrics[:, 1] = np.where(
        active, theta * np.minimum(1.0, f / p.f_max) * (1.0 - phi * phi) * day_multiplier, 0.0
    )

    dormant = ~active
    credit = np.where(dormant, credit + f, credit)
    woke = dormant & (credit >= p.activation_threshold)
    active |= woke
    credit[woke] = 0.0

    new_phi = np.clip(p.rho * phi + p.kappa * f / p.f_max, 0.0, 1.0)
    # Churn only hits users that are active after this step's activation check.
    churned = active & (new_phi >= p.churn_threshold) & (churn_draw < p.churn_prob)
    active &= ~churned
    credit[churned] = 0.0

    pop.phi[idx] = new_phi
    pop.active[idx] = active
    pop.credit[idx] = credit
    hist = pop.history[idx]
    hist[:, :-1] = hist[:, 1:]
    hist[:, -1] = fvals
    pop.history[idx] = hist
    pop.hist_len[idx] = np.minimum(pop.hist_len[idx] + 1, p.history_window)
    return metrics


def step_user(u: UserState, f: FrequencyAction, params: EnvParams, day_multiplier: float,
              rng: np.random.Generator) -> tuple[UserState, np.ndarray]:
    """Advance one user by one day at frequency ``f``; returns the new state and metrics."""
    if day_multiplier <= 0:
        raise ContractViolation("day_multiplier must be > 0")
    pop = Population.from_users([u], params)
    draw = np.array([rng.random()])
    metrics = _transition(pop, np.array([0]), np.array([f.value]), day_multiplier, draw)
    return replace(pop.user(0), theta=u.theta, cohort=u.cohort), metrics[0]


class DayTrace(NamedTuple):
    """Per-user detail of one simulated day (``actions`` is -1 for users without a decision)."""

    actions: np.ndarray
    metrics: np.ndarray
    rewards: np.ndarray
    tick_volumes: np.ndarray
    multiplier: float


class DayResult(NamedTuple):
    population: Population
    outcome: DayOutcome
    records: list[EpisodeRecord]
    trace: DayTrace


Decider = Callable[[np.ndarray, np.ndarray], np.ndarray]
"""Maps (features of a batch of users, their population indices) to action indices."""


def day_rng(seed: int, day: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, day, stream])


def run_day(
    pop: Population,
    decide: Decider,
    drift: DriftSpec,
    day: int,
    *,
    reward_params: RewardParams | None = None,
    ticks_per_day: int = 1,
    on_tick: Callable[[int, int, np.ndarray, np.ndarray], None] | None = None,
    all_due: bool = False,
    record: bool = False,
    episode_length: int = DEFAULT_EPISODE_LENGTH,
) -> DayResult:
    """Run one scheduling day over the whole population.

    Users are split into ``ticks_per_day`` contiguous slots that are scored and
    stepped in order; ``on_tick(tick, volume, idx, actions)`` is called after each
    slot with the users that got a decision and their action indices, so
    a controller can adjust the decider before the next slot. The input
    population is not modified.
    """
    if day < 0:
        raise ContractViolation("day must be >= 0")
    if ticks_per_day < 1:
        raise ContractViolation("ticks_per_day must be >= 1")
    p = pop.params
    reward_params = reward_params or RewardParams()
    values = np.asarray(p.action_values, dtype=np.int64)
    n = len(pop)
    mult = drift.multiplier(day)
    rng = day_rng(p.seed, day)
    due_draw = rng.random(n)
    churn_draw = rng.random(n)
    if all_due or p.due_prob is None:
        due = np.ones(n, dtype=bool)
    else:
        due = due_draw < min(1.0, p.due_prob * mult)

    new = pop.copy()
    state_before = population_features(pop) if record else None
    actions = np.full(n, -1, dtype=np.int64)
    metrics = np.zeros((n, N_METRICS))
    bounds = (np.arange(ticks_per_day + 1) * n) // ticks_per_day
    tick_volumes = np.zeros(ticks_per_day, dtype=np.int64)
    for t in range(ticks_per_day):
        slot = np.arange(bounds[t], bounds[t + 1])
        chosen = slot[due[slot]]
        if chosen.size:
            a = np.asarray(decide(population_features(pop, chosen), chosen), dtype=np.int64)
            if a.shape != chosen.shape or a.min() < 0 or a.max() >= values.size:
                raise ContractViolation("decider returned invalid action indices")
            actions[chosen] = a
        fvals = np.where(actions[slot] >= 0, values[np.maximum(actions[slot], 0)], 0)
        metrics[slot] = _transition(new, slot, fvals, mult, churn_draw[slot])
        tick_volumes[t] = int(fvals.sum())
        if on_tick is not None:
            on_tick(t, int(tick_volumes[t]), chosen, actions[chosen])

    delivered = np.where(actions >= 0, values[np.maximum(actions, 0)], 0)
    rewards = reward_array(metrics, reward_params, delivered)
    hist = np.bincount(actions[actions >= 0], minlength=values.size)
    outcome = DayOutcome(
        day=day,
        delivery_volume=int(delivered.sum()),
        metric_totals=tuple(float(x) for x in metrics.sum(axis=0)),
        frequency_histogram=tuple(int(c) for c in hist),
    )

    records: list[EpisodeRecord] = []
    if record:
        state_after = population_features(new)
        step = day % episode_length
        terminal = step == episode_length - 1
        for i in np.flatnonzero(actions >= 0):
            records.append(EpisodeRecord(
                user_id=str(int(pop.user_id[i])),
                step=step,
                state_features=tuple(state_before[i].tolist()),
                action_index=int(actions[i]),
                reward=float(rewards[i]),
                next_state_features=tuple(state_after[i].tolist()),
                terminal=terminal,
            ))
    return DayResult(new, outcome, records, DayTrace(actions, metrics, rewards, tick_volumes, mult))
