"""Command line entry point: ``freqctl collect|train|evaluate|control-demo|report``.

Exit codes: 0 success, 1 usage error, 2 data or contract violation, 3 I/O error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from freqctl.core import ContractViolation
from freqctl.experiment import ExperimentConfig, collect, control_demo, evaluate, train
from freqctl.learner.dqn import TrainingDiverged
from freqctl.reporting import report

ALL_MODES = ("greedy", "ef_fixed", "ef_pid", *(f"fixed_frequency:{k}" for k in range(6)))

EXIT_USAGE, EXIT_DATA, EXIT_IO = 1, 2, 3


def _load(config: str | None, seed: int | None, out: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(config) if config else ExperimentConfig()
    if out:
        cfg = cfg.with_overrides(output_dir=out)
    if seed is not None:
        cfg = cfg.with_overrides(seeds=(seed,))
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(cfg.output_dir) / "config.json")
    return cfg


def _common(f):
    f = click.option("--out", type=click.Path(file_okay=False), help="Run directory (overrides output_dir).")(f)
    f = click.option("--seed", type=int, help="Evaluate this seed only.")(f)
    f = click.option("--config", type=click.Path(exists=True, dir_okay=False), help="Experiment config JSON.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def cli(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("collect")
@_common
def collect_cmd(config, seed, out):
    """Write the behavior-policy episode log."""
    cfg = _load(config, seed, out)
    click.echo(str(collect(cfg)))


@cli.command("train")
@_common
@click.option("--log", "log_path", type=click.Path(dir_okay=False), help="Episode log (default: <run>/collect/episodes.jsonl).")
def train_cmd(config, seed, out, log_path):
    """Train the Q-network on a logged episode file."""
    cfg = _load(config, seed, out)
    log_path = log_path or Path(cfg.output_dir) / "collect" / "episodes.jsonl"
    click.echo(str(train(cfg, log_path)))


def _checkpoint(cfg: ExperimentConfig, checkpoint: str | None) -> Path:
    return Path(checkpoint) if checkpoint else Path(cfg.output_dir) / "train" / "checkpoint.json"


@cli.command("evaluate")
@_common
@click.option("--mode", default="all", show_default=True,
              help="greedy, ef_fixed, ef_pid, fixed_frequency:<k>, or all.")
@click.option("--checkpoint", type=click.Path(dir_okay=False))
def evaluate_cmd(config, seed, out, mode, checkpoint):
    """Evaluate one policy mode (or every mode) over the configured seeds."""
    cfg = _load(config, seed, out)
    modes = ALL_MODES if mode == "all" else (mode,)
    ckpt = _checkpoint(cfg, checkpoint)
    for m in modes:
        needs_net = not m.startswith("fixed")
        doc = evaluate(cfg, ckpt if needs_net else None, m)
        agg = doc["aggregate"]
        click.echo(f"{doc['mode']}: volume={agg['total_volume']} efficiency_ratio={agg['efficiency_ratio']}")


@cli.command("control-demo")
@_common
@click.option("--checkpoint", type=click.Path(dir_okay=False))
def control_demo_cmd(config, seed, out, checkpoint):
    """Run closed-loop ef_pid against open-loop greedy under drift."""
    cfg = _load(config, seed, out)
    summary = control_demo(cfg, _checkpoint(cfg, checkpoint), cfg.seeds[0])
    click.echo(json.dumps(summary, indent=2))


@cli.command("report")
@click.option("--out", "run_dir", type=click.Path(file_okay=False), required=True, help="Run directory.")
@click.option("--mode", "primary", default=None, help="Mode to compare against the others.")
def report_cmd(run_dir, primary):
    """Build timeseries, frequency, per-user and cohort tables from evaluation outputs."""
    click.echo(str(report(run_dir, primary)))


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="freqctl", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except (ContractViolation, TrainingDiverged) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except (OSError, click.FileError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
