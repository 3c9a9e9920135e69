"""Domain types shared across the package, the reward function and episode logs.

Episode logs are newline-delimited JSON. The first line is a header object
carrying ``format_version``; every following line is one ``EpisodeRecord``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_ACTION_VALUES: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
DEFAULT_EPISODE_LENGTH = 30
LOG_FORMAT_VERSION = 1


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


@dataclass(frozen=True, slots=True)
class FrequencyAction:
    """One deliverable frequency: its position in the action set and deliveries per day."""

    index: int
    value: int

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ContractViolation(f"action index must be >= 0, got {self.index}")
        if self.value < 0:
            raise ContractViolation(f"frequency value must be >= 0, got {self.value}")


def action_set(values: Sequence[int] = DEFAULT_ACTION_VALUES) -> tuple[FrequencyAction, ...]:
    """Build an ordered action set, enforcing at least three strictly increasing values."""
    values = [int(v) for v in values]
    if len(values) < 3:
        raise ContractViolation(f"action set needs at least 3 frequencies, got {len(values)}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ContractViolation(f"frequencies must be strictly increasing: {values}")
    return tuple(FrequencyAction(i, v) for i, v in enumerate(values))


@dataclass(frozen=True, slots=True)
class RewardParams:
    epsilon: float = 0.005
    metric_weights: tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric_weights", tuple(float(w) for w in self.metric_weights))
        if self.epsilon < 0:
            raise ContractViolation(f"epsilon must be >= 0, got {self.epsilon}")
        if any(w < 0 for w in self.metric_weights):
            raise ContractViolation(f"metric weights must be >= 0, got {self.metric_weights}")


def reward(metric_components: Sequence[float], params: RewardParams, f: FrequencyAction) -> float:
    """Daily metric (weighted sum of components) minus a linear per-delivery penalty."""
    if len(metric_components) != len(params.metric_weights):
        raise ContractViolation(
            f"got {len(metric_components)} metric components for "
            f"{len(params.metric_weights)} weights"
        )
    daily = math.fsum(w * float(c) for w, c in zip(params.metric_weights, metric_components))
    return daily - params.epsilon * f.value


def reward_array(components: np.ndarray, params: RewardParams, values: np.ndarray) -> np.ndarray:
    """Vectorized ``reward``: ``components`` is (n, n_metrics), ``values`` the delivered counts."""
    w = np.asarray(params.metric_weights, dtype=np.float64)
    if components.shape[-1] != w.shape[0]:
        raise ContractViolation(
            f"got {components.shape[-1]} metric components for {w.shape[0]} weights"
        )
    return components @ w - params.epsilon * np.asarray(values, dtype=np.float64)


@dataclass(frozen=True, slots=True)
class EpisodeRecord:
    """One logged transition ``(s, f, R, s')`` of a user's scheduling history."""

    user_id: str
    step: int
    state_features: tuple[float, ...]
    action_index: int
    reward: float
    next_state_features: tuple[float, ...]
    terminal: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "user_id": self.user_id,
                "step": self.step,
                "state_features": list(self.state_features),
                "action_index": self.action_index,
                "reward": self.reward,
                "next_state_features": list(self.next_state_features),
                "terminal": self.terminal,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        try:
            return cls(
                user_id=str(d["user_id"]),
                step=int(d["step"]),
                state_features=tuple(float(x) for x in d["state_features"]),
                action_index=int(d["action_index"]),
                reward=float(d["reward"]),
                next_state_features=tuple(float(x) for x in d["next_state_features"]),
                terminal=bool(d["terminal"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractViolation(f"malformed episode record {d!r}: {exc}") from exc


@dataclass(frozen=True, slots=True)
class DayOutcome:
    day: int
    delivery_volume: int
    metric_totals: tuple[float, ...]
    frequency_histogram: tuple[int, ...]
    decisions: int = field(default=-1)

    def __post_init__(self) -> None:
        if self.decisions < 0:
            object.__setattr__(self, "decisions", int(sum(self.frequency_histogram)))


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_episode(records: Sequence[EpisodeRecord]) -> ValidationResult:
    """Check one user's episode for contiguous steps, a single final terminal, and chaining.

    Violations are returned, not raised.
    """
    problems: list[str] = []
    if not records:
        return ValidationResult(("empty episode",))
    if len({r.user_id for r in records}) > 1:
        problems.append("mixed user ids")
    steps = [r.step for r in records]
    if steps != list(range(len(records))):
        problems.append("non-contiguous steps")
    n_terminal = sum(r.terminal for r in records)
    if n_terminal > 1:
        problems.append("multiple terminals")
    elif n_terminal == 0:
        problems.append("missing terminal")
    elif not records[-1].terminal:
        problems.append("terminal not final")
    for i, (a, b) in enumerate(zip(records, records[1:])):
        if a.next_state_features != b.state_features:
            problems.append(f"broken state chain at step {i}")
            break
    return ValidationResult(tuple(problems))


def split_episodes(records: Iterable[EpisodeRecord]) -> list[list[EpisodeRecord]]:
    """Group a flat record stream into per-episode lists (a terminal closes an episode)."""
    open_eps: dict[str, list[EpisodeRecord]] = {}
    done: list[list[EpisodeRecord]] = []
    for rec in records:
        ep = open_eps.setdefault(rec.user_id, [])
        ep.append(rec)
        if rec.terminal:
            done.append(open_eps.pop(rec.user_id))
    done.extend(open_eps.values())
    return done


def validate_log(records: Iterable[EpisodeRecord]) -> ValidationResult:
    problems: list[str] = []
    for ep in split_episodes(records):
        res = validate_episode(ep)
        problems.extend(f"user {ep[0].user_id}: {v}" for v in res.violations)
    return ValidationResult(tuple(problems))


def write_log_header(fh: IO[str]) -> None:
    fh.write(json.dumps({"format_version": LOG_FORMAT_VERSION}) + "\n")


def write_episode_log(path: str | Path, records: Iterable[EpisodeRecord], append: bool = False) -> None:
    path = Path(path)
    fresh = not append or not path.exists() or path.stat().st_size == 0
    with path.open("a" if append else "w", encoding="utf-8", newline="\n") as fh:
        if fresh:
            write_log_header(fh)
        for rec in records:
            fh.write(rec.to_json() + "\n")


def iter_episode_log(path: str | Path) -> Iterator[EpisodeRecord]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline()
        try:
            version = json.loads(header).get("format_version")
        except (json.JSONDecodeError, AttributeError) as exc:
            raise ContractViolation(f"{path}: missing format_version header") from exc
        if version != LOG_FORMAT_VERSION:
            raise ContractViolation(f"{path}: unsupported format_version {version!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                yield EpisodeRecord.from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ContractViolation(f"{path}:{lineno}: {exc}") from exc


def read_episode_log(path: str | Path) -> list[EpisodeRecord]:
    return list(iter_episode_log(path))
