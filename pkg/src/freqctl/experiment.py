"""Experiment pipeline: collect logs, train, evaluate policies, and build reports.

Run directory layout (all under ``output_dir``)::

    collect/episodes.jsonl            behavior-policy episode log
    train/checkpoint.json, loss.csv   trained network and loss curve
    evaluation/<mode>/seed_<s>/       daily.csv, users.csv, cohorts.csv,
                                      ticks.csv (ef_pid), report.json
    evaluation/<mode>/report.json     per-seed reports plus aggregate
    report/                           timeseries, freq_dist, per-user std,
                                      cohorts, summary
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from freqctl.core import (
    DEFAULT_EPISODE_LENGTH,
    ContractViolation,
    RewardParams,
    read_episode_log,
    write_log_header,
)
from freqctl.env import (
    Cohort,
    DriftSpec,
    EnvParams,
    init_population,
    run_day,
    day_rng,
)
from freqctl.learner.dqn import Hyperparams, load_checkpoint, save_checkpoint, train_from_log
from freqctl.learner.network import QNetwork
from freqctl.policy import EfConfig, ef_q_gap, ef_select_batch, explore_batch
from freqctl.volume import PidParams, VolumeController, write_tick_csv

log = logging.getLogger(__name__)

BASE_MODES = ("greedy", "ef_fixed", "ef_pid")
# Accumulated reward is also reported at this discount, whatever the learner used.
REPORT_GAMMA = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvParams = field(default_factory=lambda: EnvParams(population_size=20_000))
    reward: RewardParams = field(default_factory=RewardParams)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    ef: EfConfig = field(default_factory=EfConfig)
    pid: PidParams = field(default_factory=PidParams)
    target_volume: float = 20_000.0
    cohort_targets: dict | None = None
    ticks_per_day: int = 1
    drift: DriftSpec = field(default_factory=DriftSpec)
    horizon_days: int = 30
    collection_days: int = 30
    collection_population: int = 5_000
    collection_seed: int = 1_000
    explore_prob: float = 1.0
    episode_length: int = DEFAULT_EPISODE_LENGTH
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.horizon_days < 1:
            raise ContractViolation("horizon_days must be >= 1")
        if not self.seeds:
            raise ContractViolation("seeds must be non-empty")
        if self.collection_days < 1 or self.collection_population < 1:
            raise ContractViolation("collection_days and collection_population must be >= 1")
        if not 0.0 <= self.explore_prob <= 1.0:
            raise ContractViolation("explore_prob must be in [0, 1]")
        if self.target_volume <= 0:
            raise ContractViolation("target_volume must be > 0")
        if self.ticks_per_day < 1 or self.episode_length < 1:
            raise ContractViolation("ticks_per_day and episode_length must be >= 1")

    @property
    def n_actions(self) -> int:
        return len(self.env.action_values)

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "reward": {"epsilon": self.reward.epsilon, "metric_weights": list(self.reward.metric_weights)},
            "hyper": self.hyper.to_dict(),
            "ef": self.ef.to_dict(),
            "target_volume": self.target_volume,
            "cohort_targets": self.cohort_targets,
            "pid": self.pid.to_dict(),
            "ticks_per_day": self.ticks_per_day,
            "drift": self.drift.to_dict(),
            "horizon_days": self.horizon_days,
            "collection_days": self.collection_days,
            "collection_population": self.collection_population,
            "collection_seed": self.collection_seed,
            "explore_prob": self.explore_prob,
            "episode_length": self.episode_length,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kw: dict = {}
        try:
            if "env" in d:
                kw["env"] = EnvParams.from_dict(d.pop("env"))
            if "reward" in d:
                r = d.pop("reward")
                kw["reward"] = RewardParams(r.get("epsilon", 0.005), tuple(r.get("metric_weights", (1.0, 1.0))))
            if "hyper" in d:
                kw["hyper"] = Hyperparams.from_dict(d.pop("hyper"))
            if "ef" in d:
                kw["ef"] = EfConfig.from_dict(d.pop("ef"))
            if "pid" in d:
                kw["pid"] = PidParams.from_dict(d.pop("pid"))
            if "drift" in d:
                kw["drift"] = DriftSpec.from_dict(d.pop("drift"))
            if "seeds" in d:
                kw["seeds"] = tuple(d.pop("seeds"))
            kw.update(d)
            return cls(**kw)
        except TypeError as exc:
            raise ContractViolation(f"bad experiment config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def parse_mode(mode: str) -> tuple[str, int | None]:
    """``greedy``, ``ef_fixed``, ``ef_pid`` or ``fixed_frequency:<k>`` (alias ``fixed:<k>``)."""
    if mode in BASE_MODES:
        return mode, None
    name, _, k = mode.partition(":")
    if name in ("fixed_frequency", "fixed") and k.isdigit():
        return "fixed_frequency", int(k)
    raise ContractViolation(f"unknown evaluation mode {mode!r}")


def mode_label(mode: str) -> str:
    name, k = parse_mode(mode)
    return name if k is None else f"fixed_{k}"


# ---------------------------------------------------------------- collection


def collect(cfg: ExperimentConfig, out_path: str | Path | None = None,
            net: QNetwork | None = None) -> Path:
    """Simulate the logging population under the explore policy and write its episode log.

    Without a network the exploitation branch has all-zero Q-values and picks action 0.
    """
    out_path = Path(out_path or Path(cfg.output_dir) / "collect" / "episodes.jsonl")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    params = replace(cfg.env, population_size=cfg.collection_population, seed=cfg.collection_seed)
    pop = init_population(params)
    n_actions = cfg.n_actions

    def decide(x: np.ndarray, idx: np.ndarray, day: int) -> np.ndarray:
        q = net(x) if net is not None else np.zeros((x.shape[0], n_actions))
        return explore_batch(q, cfg.explore_prob, day_rng(params.seed, day, stream=1))

    with out_path.open("w", encoding="utf-8", newline="\n") as fh:
        write_log_header(fh)
        for day in range(cfg.collection_days):
            res = run_day(pop, lambda x, idx: decide(x, idx, day), cfg.drift, day,
                          reward_params=cfg.reward, all_due=True, record=True,
                          episode_length=cfg.episode_length)
            pop = res.population
            for rec in res.records:
                fh.write(rec.to_json() + "\n")
    return out_path


# ------------------------------------------------------------------ training


def train(cfg: ExperimentConfig, log_path: str | Path, out_dir: str | Path | None = None) -> Path:
    log_path = Path(log_path)
    if not log_path.exists():
        raise FileNotFoundError(f"episode log not found: {log_path}")
    out_dir = Path(out_dir or Path(cfg.output_dir) / "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_episode_log(log_path)
    result = train_from_log(records, cfg.hyper, n_actions=cfg.n_actions)
    ckpt = out_dir / "checkpoint.json"
    save_checkpoint(ckpt, result.network, cfg.hyper)
    with (out_dir / "loss.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss"))
        for i, loss in enumerate(result.losses):
            w.writerow((i, repr(loss)))
    return ckpt


# ---------------------------------------------------------------- evaluation


@dataclass
class SimulationTrace:
    """Everything an evaluation run needs for its report, for one seed and mode."""

    actions: np.ndarray          # (users, days); -1 where no decision was due
    delivered: np.ndarray        # (users, days) deliveries
    metrics: np.ndarray          # (users, days, 2)
    rewards: np.ndarray          # (users, days)
    cohort: np.ndarray           # (users,)
    user_id: np.ndarray
    volume: np.ndarray           # (days,)
    decisions: np.ndarray        # (days,)
    histogram: np.ndarray        # (days, K)
    tick_volume: np.ndarray      # (days * ticks_per_day,)
    multipliers: np.ndarray
    controller: VolumeController | None = None
    q_gap: float | None = None


def simulate(cfg: ExperimentConfig, net: QNetwork | None, mode: str, seed: int,
             population_size: int | None = None) -> SimulationTrace:
    """Run ``horizon_days`` over a fresh evaluation population under one policy mode."""
    name, k = parse_mode(mode)
    if name != "fixed_frequency" and net is None:
        raise ContractViolation(f"mode {mode!r} needs a trained network")
    if k is not None and not 0 <= k < cfg.n_actions:
        raise ContractViolation(f"fixed frequency index {k} outside the action set")
    params = replace(cfg.env, seed=seed, population_size=population_size or cfg.env.population_size)
    pop = init_population(params)
    n, days, tpd = len(pop), cfg.horizon_days, cfg.ticks_per_day
    values = np.asarray(params.action_values)

    controller = None
    if name == "ef_pid":
        if cfg.cohort_targets:
            controller = VolumeController(cfg.pid, cohort_targets={c: t / tpd for c, t in cfg.cohort_targets.items()},
                                          initial=cfg.ef)
        else:
            controller = VolumeController(cfg.pid, target_volume=cfg.target_volume / tpd, initial=cfg.ef)
    gaps: list[np.ndarray] = []

    def decide(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        if name == "fixed_frequency":
            return np.full(idx.shape[0], k)
        q = net(x)
        if name == "greedy":
            return np.argmax(q, axis=1)
        ef_cfg = controller.config if controller is not None else cfg.ef
        chosen = ef_select_batch(q, ef_cfg.resolve(pop.cohort[idx]))
        gaps.append(ef_q_gap(q, chosen))
        return chosen

    actions = np.full((n, days), -1, dtype=np.int64)
    metrics = np.zeros((n, days, 2))
    rewards = np.zeros((n, days))
    volume = np.zeros(days, dtype=np.int64)
    decisions = np.zeros(days, dtype=np.int64)
    histogram = np.zeros((days, values.size), dtype=np.int64)
    tick_volume = np.zeros(days * tpd, dtype=np.int64)
    multipliers = np.zeros(days)
    for day in range(days):
        cohort_codes = pop.cohort

        def on_tick(t: int, vol: int, chosen: np.ndarray, chosen_actions: np.ndarray,
                    day: int = day) -> None:
            tick = day * tpd + t
            tick_volume[tick] = vol
            if controller is None:
                return
            if controller.per_cohort:
                sub = values[chosen_actions]
                by_cohort = {c: float(sub[cohort_codes[chosen] == int(c)].sum()) for c in controller.monitors}
                controller.observe(tick, by_cohort)
            else:
                controller.observe(tick, vol)

        res = run_day(pop, decide, cfg.drift, day, reward_params=cfg.reward,
                      ticks_per_day=tpd, on_tick=on_tick)
        actions[:, day] = res.trace.actions
        metrics[:, day] = res.trace.metrics
        rewards[:, day] = res.trace.rewards
        volume[day] = res.outcome.delivery_volume
        decisions[day] = res.outcome.decisions
        histogram[day] = res.outcome.frequency_histogram
        multipliers[day] = res.trace.multiplier
        pop = res.population
    delivered = np.where(actions >= 0, values[np.maximum(actions, 0)], 0)
    q_gap = float(np.concatenate(gaps).mean()) if gaps else None
    return SimulationTrace(actions, delivered, metrics, rewards, pop.cohort.copy(), pop.user_id.copy(),
                           volume, decisions, histogram, tick_volume, multipliers, controller, q_gap)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """``G[u, t] = sum_{i >= t} gamma^(i - t) r[u, i]`` truncated at the horizon."""
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[0])
    for t in reversed(range(rewards.shape[1])):
        acc = rewards[:, t] + gamma * acc
        out[:, t] = acc
    return out


def per_user_frequency_std(trace: SimulationTrace) -> np.ndarray:
    """Std-dev of delivered frequency per user over the days a decision was due."""
    due = trace.actions >= 0
    n = np.maximum(due.sum(axis=1), 1)
    f = np.where(due, trace.delivered, 0).astype(np.float64)
    mean = f.sum(axis=1) / n
    var = np.where(due, (f - mean[:, None]) ** 2, 0.0).sum(axis=1) / n
    return np.sqrt(var)


def _ratio(metrics: float, volume: float) -> float | None:
    return metrics / volume if volume > 0 else None


def summarize(trace: SimulationTrace, cfg: ExperimentConfig, mode: str, seed: int) -> dict:
    """Per-seed evaluation report as a JSON-ready dict."""
    w = np.asarray(cfg.reward.metric_weights)
    m_tot = trace.metrics.sum(axis=(0, 1))
    weighted = float(m_tot @ w)
    volume = int(trace.volume.sum())
    std = per_user_frequency_std(trace)
    cohorts = {}
    for c in Cohort:
        sel = trace.cohort == int(c)
        cm = trace.metrics[sel].sum(axis=(0, 1))
        cv = int(trace.delivered[sel].sum())
        cohorts[c.label] = {
            "users": int(sel.sum()),
            "volume": cv,
            "metric1": float(cm[0]),
            "metric2": float(cm[1]),
            "efficiency_ratio": _ratio(float(cm @ w), cv),
        }
    report = {
        "mode": mode,
        "seed": seed,
        "population": int(trace.cohort.shape[0]),
        "horizon_days": int(trace.volume.shape[0]),
        "total_volume": volume,
        "total_metrics": [float(x) for x in m_tot],
        "total_weighted_metrics": weighted,
        "efficiency_ratio": _ratio(weighted, volume),
        "mean_discounted_return": float(discounted_returns(trace.rewards, cfg.hyper.gamma).mean()),
        "mean_discounted_return_by_gamma": {
            str(g): float(discounted_returns(trace.rewards, g).mean())
            for g in sorted({REPORT_GAMMA, cfg.hyper.gamma})
        },
        "mean_return_per_user": float(trace.rewards.sum(axis=1).mean()),
        "cohorts": cohorts,
        "constant_frequency_fraction": float(np.mean(std == 0.0)),
        "per_user_std_quantiles": [float(x) for x in np.percentile(std, [10, 25, 50, 75, 90])],
        "daily_volume": [int(v) for v in trace.volume],
    }
    if trace.q_gap is not None:
        report["mean_ef_q_gap"] = trace.q_gap
    if trace.controller is not None:
        report["ef_distribution"] = ef_distribution(trace.controller.ef_values())
    return report


def ef_distribution(values: np.ndarray) -> dict:
    q = np.percentile(values, [0, 25, 50, 75, 100]) if values.size else [float("nan")] * 5
    return {
        "n": int(values.size),
        "min": float(q[0]), "q25": float(q[1]), "median": float(q[2]), "q75": float(q[3]), "max": float(q[4]),
        "iqr": float(q[3] - q[1]),
        "within_unit_interval": bool(values.size and values.min() >= 0.0 and values.max() <= 1.0),
    }


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_trace(trace: SimulationTrace, report: dict, out_dir: Path, values: Sequence[int]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    day_metrics = trace.metrics.sum(axis=0)
    _write_csv(
        out_dir / "daily.csv",
        ["day", "multiplier", "decisions", "volume", "metric1", "metric2", *[f"f{v}" for v in values]],
        ([d, repr(float(trace.multipliers[d])), int(trace.decisions[d]), int(trace.volume[d]),
          repr(float(day_metrics[d, 0])), repr(float(day_metrics[d, 1])), *map(int, trace.histogram[d])]
         for d in range(trace.volume.shape[0])),
    )
    std = per_user_frequency_std(trace)
    _write_csv(
        out_dir / "users.csv",
        ["user_id", "cohort", "decisions", "volume", "freq_std"],
        ([int(trace.user_id[i]), Cohort(int(trace.cohort[i])).label, int((trace.actions[i] >= 0).sum()),
          int(trace.delivered[i].sum()), repr(float(std[i]))] for i in range(std.shape[0])),
    )
    _write_csv(
        out_dir / "cohorts.csv",
        ["cohort", "users", "volume", "metric1", "metric2"],
        ([label, c["users"], c["volume"], repr(c["metric1"]), repr(c["metric2"])]
         for label, c in report["cohorts"].items()),
    )
    if trace.controller is not None:
        write_tick_csv(out_dir / "ticks.csv", trace.controller.rows)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


def aggregate(reports: Sequence[dict]) -> dict:
    vol = sum(r["total_volume"] for r in reports)
    wm = float(np.sum([r["total_weighted_metrics"] for r in reports]))
    return {
        "seeds": [r["seed"] for r in reports],
        "total_volume": vol,
        "total_metrics": [float(x) for x in np.sum([r["total_metrics"] for r in reports], axis=0)],
        "total_weighted_metrics": wm,
        "efficiency_ratio": _ratio(wm, vol),
        "per_seed_efficiency_ratio": [r["efficiency_ratio"] for r in reports],
        "mean_discounted_return": float(np.mean([r["mean_discounted_return"] for r in reports])),
    }


def evaluate(cfg: ExperimentConfig, checkpoint: str | Path | QNetwork | None, mode: str,
             out_dir: str | Path | None = None, seeds: Sequence[int] | None = None) -> dict:
    """Evaluate one policy mode on a fresh population per seed and write its artifacts."""
    name, _ = parse_mode(mode)
    net = None
    if isinstance(checkpoint, QNetwork):
        net = checkpoint
    elif checkpoint is not None:
        net, _ = load_checkpoint(checkpoint)
    if name != "fixed_frequency" and net is None:
        raise ContractViolation(f"mode {mode!r} needs a checkpoint")
    if net is not None and (net.input_dim != 8 or net.n_actions != cfg.n_actions):
        raise ContractViolation("checkpoint architecture does not match the environment")
    label = mode_label(mode)
    base = Path(out_dir or Path(cfg.output_dir) / "evaluation") / label
    reports = []
    for seed in seeds if seeds is not None else cfg.seeds:
        trace = simulate(cfg, net, mode, seed)
        rep = summarize(trace, cfg, label, seed)
        write_trace(trace, rep, base / f"seed_{seed}", cfg.env.action_values)
        reports.append(rep)
    doc = {"mode": label, "per_seed": reports, "aggregate": aggregate(reports)}
    (base / "report.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc


# ------------------------------------------------------------- control demo


def _peak_deviation(v: np.ndarray) -> float | None:
    v = v.astype(np.float64)
    if not v.size or v.mean() <= 0:
        return None
    return float(np.abs(v - v.mean()).max() / v.mean())


def stabilization_summary(closed: SimulationTrace, open_loop: SimulationTrace, cfg: ExperimentConfig,
                          settle_tick: int = 15, band: float = 0.05, steady_day: int = 7) -> dict:
    """Closed-loop daily volume vs target from ``settle_tick`` on, and open-loop fluctuation.

    A day counts once all of its control ticks are at or past ``settle_tick``.
    Open-loop fluctuation is the peak deviation of daily volume from its own mean
    over the same days; the steady variant starts at ``steady_day`` to leave out
    the start-up transient of a fresh population.
    """
    tpd = cfg.ticks_per_day
    first_day = -(-settle_tick // tpd)
    target = cfg.target_volume
    closed_dev = (closed.volume[first_day:] - target) / target
    ov = open_loop.volume[first_day:].astype(np.float64)
    return {
        "settle_tick": settle_tick,
        "first_checked_day": int(first_day),
        "band": band,
        "closed_loop_max_abs_deviation": float(np.abs(closed_dev).max()) if closed_dev.size else None,
        "closed_loop_within_band": bool(closed_dev.size and np.all(np.abs(closed_dev) <= band)),
        "open_loop_peak_deviation": _peak_deviation(ov),
        "open_loop_steady_from_day": steady_day,
        "open_loop_steady_peak_deviation": _peak_deviation(open_loop.volume[max(steady_day, first_day):]),
        "open_loop_peak_deviation_vs_target": float(np.abs((ov - target) / target).max()) if ov.size else None,
        "ef_distribution": ef_distribution(closed.controller.ef_values()) if closed.controller else None,
    }


def control_demo(cfg: ExperimentConfig, checkpoint: str | Path | QNetwork, seed: int,
                 out_dir: str | Path | None = None) -> dict:
    """Run ``ef_pid`` and open-loop greedy side by side; write tick and daily traces."""
    net = checkpoint if isinstance(checkpoint, QNetwork) else load_checkpoint(checkpoint)[0]
    out = Path(out_dir or Path(cfg.output_dir) / "control_demo")
    out.mkdir(parents=True, exist_ok=True)
    closed = simulate(cfg, net, "ef_pid", seed)
    open_loop = simulate(cfg, net, "greedy", seed)
    write_tick_csv(out / "ticks.csv", closed.controller.rows)
    _write_csv(
        out / "daily_volume.csv",
        ["day", "multiplier", "target", "ef_pid_volume", "greedy_volume"],
        ([d, repr(float(closed.multipliers[d])), repr(float(cfg.target_volume)),
          int(closed.volume[d]), int(open_loop.volume[d])] for d in range(cfg.horizon_days)),
    )
    summary = {"seed": seed, **stabilization_summary(closed, open_loop, cfg)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary
