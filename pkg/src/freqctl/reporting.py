"""Turn evaluation outputs into comparison tables against the fixed-frequency baselines."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from freqctl.core import ContractViolation

PRIMARY_PREFERENCE = ("ef_pid", "ef_fixed", "greedy")
REPORT_FILES = ("timeseries.csv", "freq_dist.csv", "per_user_freq_std.csv", "summary.json", "cohorts.csv")


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _pct(new: float | None, old: float | None) -> float | None:
    if new is None or old is None or old == 0:
        return None
    return 100.0 * (new - old) / old


def sign_test(policy: list, baseline: list) -> dict:
    """One-sided sign test that the policy's per-seed ratio beats the baseline's.

    Seeds where the baseline ratio is undefined (zero volume) are not comparable
    and are dropped along with exact ties.
    """
    wins = losses = 0
    for p, b in zip(policy, baseline):
        if b is None:
            continue
        if p is None or p < b:
            losses += 1
        elif p > b:
            wins += 1
    n = wins + losses
    p_value = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return {"wins": wins, "losses": losses, "n": n, "p_value": float(p_value)}


def load_mode_reports(run_dir: Path) -> dict[str, dict]:
    eval_dir = run_dir / "evaluation"
    if not eval_dir.is_dir():
        raise FileNotFoundError(f"missing inputs: {eval_dir}")
    out = {}
    for sub in sorted(eval_dir.iterdir()):
        rep = sub / "report.json"
        if rep.is_file():
            out[sub.name] = json.loads(rep.read_text(encoding="utf-8"))
    if not out:
        raise FileNotFoundError(f"missing inputs: no evaluation/<mode>/report.json under {run_dir}")
    return out


def report(run_dir: str | Path, primary: str | None = None) -> Path:
    """Write timeseries, frequency distribution, per-user std, cohort deltas and a summary."""
    run_dir = Path(run_dir)
    modes = load_mode_reports(run_dir)
    if primary is None:
        primary = next((m for m in PRIMARY_PREFERENCE if m in modes), sorted(modes)[0])
    if primary not in modes:
        raise ContractViolation(f"mode {primary!r} has no evaluation outputs")
    seeds = [r["seed"] for r in modes[primary]["per_seed"]]
    seed_dirs = [run_dir / "evaluation" / primary / f"seed_{s}" for s in seeds]
    missing = [str(d / f) for d in seed_dirs for f in ("daily.csv", "users.csv", "cohorts.csv")
               if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError("missing inputs: " + ", ".join(missing))

    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    daily = [_read_csv(d / "daily.csv") for d in seed_dirs]
    n_days = len(daily[0])
    freq_cols = [c for c in daily[0][0] if c.startswith("f") and c[1:].isdigit()]
    series = []
    for day in range(n_days):
        rows = [dd[day] for dd in daily]
        series.append((
            day,
            sum(int(r["volume"]) for r in rows),
            math.fsum(float(r["metric1"]) for r in rows),
            math.fsum(float(r["metric2"]) for r in rows),
            int(sum(int(r["decisions"]) for r in rows)),
            [sum(int(r[c]) for r in rows) for c in freq_cols],
        ))
    with (out / "timeseries.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("day", "volume", "metric1", "metric2"))
        for day, vol, m1, m2, _, _ in series:
            w.writerow((day, vol, repr(m1), repr(m2)))
    with (out / "freq_dist.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("day", *freq_cols))
        for day, *_, counts in series:
            w.writerow((day, *counts))

    stds = []
    with (out / "per_user_freq_std.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("user_id", "std"))
        for seed, d in zip(seeds, seed_dirs):
            for row in _read_csv(d / "users.csv"):
                w.writerow((f"{seed}:{row['user_id']}", row["freq_std"]))
                stds.append(float(row["freq_std"]))
    stds = np.asarray(stds)

    total_volume = sum(s[1] for s in series)
    total_m1 = math.fsum(s[2] for s in series)
    total_m2 = math.fsum(s[3] for s in series)
    weights = _metric_weights(run_dir)
    weighted = weights[0] * total_m1 + weights[1] * total_m2
    policy_agg = modes[primary]["aggregate"]
    summary = {
        "primary_mode": primary,
        "seeds": seeds,
        "totals": {
            "volume": total_volume,
            "metric1": total_m1,
            "metric2": total_m2,
            "weighted_metrics": weighted,
            "efficiency_ratio": weighted / total_volume if total_volume else None,
        },
        "constant_frequency_fraction": float(np.mean(stds == 0.0)) if stds.size else None,
        "baselines": {},
    }
    ef_dists = [r.get("ef_distribution") for r in modes[primary]["per_seed"] if r.get("ef_distribution")]
    if ef_dists:
        ticks = []
        for d in seed_dirs:
            if (d / "ticks.csv").is_file():
                ticks += [float(r["ef"]) for r in _read_csv(d / "ticks.csv")]
        ticks = np.asarray(ticks)
        summary["ef_distribution"] = {
            "q25": float(np.percentile(ticks, 25)), "median": float(np.median(ticks)),
            "q75": float(np.percentile(ticks, 75)), "min": float(ticks.min()), "max": float(ticks.max()),
            "fraction_in_0.75_1.0": float(np.mean((ticks >= 0.75) & (ticks <= 1.0))),
        }

    cohort_rows = []
    policy_cohorts = _cohort_totals(modes[primary])
    for name, doc in sorted(modes.items()):
        if name == primary:
            continue
        agg = doc["aggregate"]
        common = [s for s in seeds if s in agg["seeds"]]
        p_ratio = [_seed_ratio(modes[primary], s) for s in common]
        b_ratio = [_seed_ratio(doc, s) for s in common]
        summary["baselines"][name] = {
            "volume": agg["total_volume"],
            "weighted_metrics": agg["total_weighted_metrics"],
            "efficiency_ratio": agg["efficiency_ratio"],
            "delta_volume_pct": _pct(policy_agg["total_volume"], agg["total_volume"]),
            "delta_metrics_pct": _pct(policy_agg["total_weighted_metrics"], agg["total_weighted_metrics"]),
            "delta_efficiency_pct": _pct(policy_agg["efficiency_ratio"], agg["efficiency_ratio"]),
            "sign_test": sign_test(p_ratio, b_ratio),
        }
        base_cohorts = _cohort_totals(doc)
        for cohort, pc in policy_cohorts.items():
            bc = base_cohorts[cohort]
            cohort_rows.append((cohort, name,
                                _fmt(_pct(pc["volume"], bc["volume"])),
                                _fmt(_pct(pc["metric1"], bc["metric1"])),
                                _fmt(_pct(pc["metric2"], bc["metric2"]))))
    with (out / "cohorts.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cohort", "baseline", "delta_volume_pct", "delta_metric1_pct", "delta_metric2_pct"))
        w.writerows(cohort_rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return out


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(x)


def _seed_ratio(doc: dict, seed: int) -> float | None:
    for r in doc["per_seed"]:
        if r["seed"] == seed:
            return r["efficiency_ratio"]
    return None


def _cohort_totals(doc: dict) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for r in doc["per_seed"]:
        for cohort, c in r["cohorts"].items():
            t = out.setdefault(cohort, {"volume": 0, "metric1": 0.0, "metric2": 0.0})
            t["volume"] += c["volume"]
            t["metric1"] += c["metric1"]
            t["metric2"] += c["metric2"]
    return out


def _metric_weights(run_dir: Path) -> tuple[float, float]:
    cfg_path = run_dir / "config.json"
    if cfg_path.is_file():
        w = json.loads(cfg_path.read_text(encoding="utf-8")).get("reward", {}).get("metric_weights")
        if w:
            return float(w[0]), float(w[1])
    return 1.0, 1.0
