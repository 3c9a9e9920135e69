"""Delivery-volume monitoring and the PID loop that steers the effective factor.

The controller works in incremental form: each step nudges the previous EF by
the PID terms of the volume error (normalized by the target) and clamps to
[0, 1]. Actual volume above target gives a negative error and lowers EF.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from freqctl.core import ContractViolation
from freqctl.env import Cohort
from freqctl.policy import EfConfig

TICK_CSV_HEADER = ("tick", "target", "actual", "error", "ef")


@dataclass(frozen=True)
class PidParams:
    kp: float = 0.2
    ki: float = 0.05
    kd: float = 0.0
    integral_limit: float = 1.0
    control_interval: int = 1

    def __post_init__(self) -> None:
        if self.integral_limit <= 0:
            raise ContractViolation("integral_limit must be > 0")
        if self.control_interval < 1:
            raise ContractViolation("control_interval must be >= 1")

    def to_dict(self) -> dict:
        return {"kp": self.kp, "ki": self.ki, "kd": self.kd,
                "integral_limit": self.integral_limit, "control_interval": self.control_interval}

    @classmethod
    def from_dict(cls, d: dict) -> "PidParams":
        return cls(**{k: d[k] for k in ("kp", "ki", "kd", "integral_limit", "control_interval") if k in d})


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    last_error: float = 0.0
    last_ef: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.last_ef <= 1.0:
            raise ContractViolation("last_ef must be in [0, 1]")


@dataclass
class VolumeMonitor:
    """Bounded history of ``(tick, volume)``; ``target_volume`` is per tick."""

    target_volume: float
    capacity: int = 10_000
    cohort: Cohort | None = None
    entries: deque = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.target_volume < 0:
            raise ContractViolation("target_volume must be >= 0")
        if self.capacity < 1:
            raise ContractViolation("capacity must be >= 1")
        if self.entries is None:
            self.entries = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def latest(self) -> tuple[int, float]:
        if not self.entries:
            raise ContractViolation("volume monitor is empty")
        return self.entries[-1]

    def recent_mean(self, n: int) -> float:
        vols = [v for _, v in list(self.entries)[-n:]]
        return float(np.mean(vols))


def record_volume(mon: VolumeMonitor, tick: int, volume: float) -> VolumeMonitor:
    if mon.entries and tick <= mon.entries[-1][0]:
        raise ContractViolation(f"tick {tick} is not after last recorded tick {mon.entries[-1][0]}")
    if volume < 0:
        raise ContractViolation("volume must be >= 0")
    mon.entries.append((int(tick), float(volume)))
    return mon


def pid_step(st: PidState, p: PidParams, target: float, actual: float) -> tuple[PidState, float]:
    if target <= 0:
        raise ContractViolation("target must be > 0")
    error = (target - actual) / target
    integral = float(np.clip(st.integral + error, -p.integral_limit, p.integral_limit))
    raw = st.last_ef + p.kp * error + p.ki * integral + p.kd * (error - st.last_error)
    ef = min(1.0, max(0.0, raw))
    return PidState(integral=integral, last_error=error, last_ef=ef), ef


def control_loop_tick(mon: VolumeMonitor, st: PidState, p: PidParams,
                      cfg: EfConfig) -> tuple[PidState, EfConfig]:
    """Run one PID step on the monitor's recent volume and return a new EF config.

    The input config is left untouched so readers holding it never see a
    half-applied update.
    """
    if not mon.entries:
        raise ContractViolation("control loop needs at least one recorded volume")
    actual = mon.recent_mean(p.control_interval)
    st, ef = pid_step(st, p, mon.target_volume, actual)
    if mon.cohort is None:
        return st, EfConfig(ef, dict(cfg.per_cohort))
    return st, EfConfig(cfg.ef, {**cfg.per_cohort, mon.cohort: ef})


@dataclass
class TickRow:
    tick: int
    target: float
    actual: float
    error: float
    ef: float


class VolumeController:
    """Ties monitors, PID state and the EF config together for a running simulation.

    ``observe`` records one tick of volume per monitor and, every
    ``control_interval`` ticks, updates the config. With ``cohort_targets``
    each cohort gets its own monitor, PID state and EF.
    """

    def __init__(self, params: PidParams, target_volume: float | None = None,
                 cohort_targets: dict[Cohort, float] | None = None,
                 initial: EfConfig | None = None):
        if (target_volume is None) == (cohort_targets is None):
            raise ContractViolation("give exactly one of target_volume or cohort_targets")
        self.params = params
        self.config = initial.snapshot() if initial is not None else EfConfig()
        if cohort_targets is None:
            self.monitors = {None: VolumeMonitor(float(target_volume))}
            self.states = {None: PidState(last_ef=self.config.ef)}
        else:
            self.monitors = {Cohort.parse(c): VolumeMonitor(float(t), cohort=Cohort.parse(c))
                             for c, t in cohort_targets.items()}
            self.states = {c: PidState(last_ef=self.config.for_cohort(c)) for c in self.monitors}
        self.rows: list[TickRow] = []
        self._since_update = 0

    @property
    def per_cohort(self) -> bool:
        return None not in self.monitors

    def observe(self, tick: int, volumes: float | dict[Cohort, float]) -> EfConfig:
        if not isinstance(volumes, dict):
            volumes = {None: volumes}
        for key, mon in self.monitors.items():
            record_volume(mon, tick, volumes[key])
        self._since_update += 1
        if self._since_update >= self.params.control_interval:
            self._since_update = 0
            for key, mon in self.monitors.items():
                st, self.config = control_loop_tick(mon, self.states[key], self.params, self.config)
                self.states[key] = st
                self.rows.append(TickRow(tick, mon.target_volume,
                                         mon.recent_mean(self.params.control_interval),
                                         st.last_error, st.last_ef))
        return self.config

    def ef_values(self) -> np.ndarray:
        return np.array([r.ef for r in self.rows])


def write_tick_csv(path: str | Path, rows: Iterable[TickRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TICK_CSV_HEADER)
        for r in rows:
            w.writerow([r.tick, repr(float(r.target)), repr(float(r.actual)),
                        repr(float(r.error)), repr(float(r.ef))])
