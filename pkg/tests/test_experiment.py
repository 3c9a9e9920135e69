import csv
import json
import math

import numpy as np
import pytest

from freqctl.cli import main
from freqctl.core import ContractViolation, read_episode_log, split_episodes
from freqctl.env import DriftSpec, EnvParams
from freqctl.experiment import (
    ExperimentConfig,
    collect,
    evaluate,
    parse_mode,
    simulate,
    train,
)
from freqctl.learner.dqn import Hyperparams, load_checkpoint
from freqctl.learner.network import QNetwork
from freqctl.policy import EfConfig
from freqctl.reporting import report


def tiny(tmp_path, **kw):
    base = dict(
        env=EnvParams(population_size=120, due_prob=0.8),
        hyper=Hyperparams(training_steps=20, hidden_sizes=(8,), batch_size=16),
        collection_population=40,
        collection_days=30,
        horizon_days=6,
        ticks_per_day=4,
        target_volume=150.0,
        drift=DriftSpec.weekly_swing(0.25),
        seeds=(0, 1),
        output_dir=str(tmp_path / "run"),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_round_trip(tmp_path):
    cfg = tiny(tmp_path, ef=EfConfig(0.6, {"Low": 0.2}))
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_config_invariants(tmp_path):
    with pytest.raises(ContractViolation):
        tiny(tmp_path, horizon_days=0)
    with pytest.raises(ContractViolation):
        tiny(tmp_path, seeds=())
    with pytest.raises(ContractViolation):
        ExperimentConfig.from_dict({"unknown_field": 1})


def test_parse_mode():
    assert parse_mode("fixed_frequency:3") == ("fixed_frequency", 3)
    assert parse_mode("fixed:0") == ("fixed_frequency", 0)
    with pytest.raises(ContractViolation):
        parse_mode("fixed_frequency:x")


def test_collection_shares(tmp_path):
    cfg = tiny(tmp_path, collection_population=2000, collection_days=30)
    recs = read_episode_log(collect(cfg))
    counts = np.bincount([r.action_index for r in recs], minlength=6) / len(recs)
    assert np.all(np.abs(counts - 1 / 6) <= 0.01)


def test_collection_episode_shape_and_determinism(tmp_path):
    cfg = tiny(tmp_path)
    a = collect(cfg, tmp_path / "a.jsonl")
    b = collect(cfg, tmp_path / "b.jsonl")
    assert a.read_bytes() == b.read_bytes()
    eps = split_episodes(read_episode_log(a))
    assert len(eps) == 40
    assert all(len(ep) == 30 and ep[-1].terminal for ep in eps)


def test_train_outputs(tmp_path):
    cfg = tiny(tmp_path)
    log = collect(cfg)
    ckpt = train(cfg, log)
    assert len(rows(ckpt.parent / "loss.csv")) == cfg.hyper.training_steps
    zero = train(cfg.with_overrides(hyper=Hyperparams(training_steps=0, hidden_sizes=(8,))), log,
                 tmp_path / "zero")
    assert load_checkpoint(zero)[0].equals(QNetwork.init(8, (8,), 6, seed=0))


def test_train_missing_log(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.jsonl"):
        train(tiny(tmp_path), tmp_path / "nope.jsonl")


def test_fixed_zero_mode(tmp_path):
    doc = evaluate(tiny(tmp_path), None, "fixed_frequency:0")
    assert doc["aggregate"]["total_volume"] == 0
    assert doc["aggregate"]["efficiency_ratio"] is None


def test_ef_one_equals_greedy(tmp_path):
    cfg = tiny(tmp_path, ef=EfConfig(1.0))
    net = QNetwork.init(8, (16,), 6, seed=3)
    g = simulate(cfg, net, "greedy", 0)
    e = simulate(cfg, net, "ef_fixed", 0)
    assert np.array_equal(g.actions, e.actions)


def test_ef_pid_keeps_ef_in_range(tmp_path):
    cfg = tiny(tmp_path)
    tr = simulate(cfg, QNetwork.init(8, (16,), 6, seed=3), "ef_pid", 0)
    ef = tr.controller.ef_values()
    assert ef.size == cfg.horizon_days * cfg.ticks_per_day
    assert ef.min() >= 0 and ef.max() <= 1


def test_invalid_checkpoint(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ContractViolation):
        evaluate(tiny(tmp_path), bad, "greedy")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = tiny(tmp)
    ckpt = train(cfg, collect(cfg))
    for m in ("greedy", "ef_pid", "fixed_frequency:0", "fixed_frequency:1", "fixed_frequency:2"):
        evaluate(cfg, ckpt if not m.startswith("fixed") else None, m)
    return cfg, report(cfg.output_dir)


def test_report_files(pipeline):
    _, out = pipeline
    for name in ("timeseries.csv", "freq_dist.csv", "per_user_freq_std.csv", "summary.json", "cohorts.csv"):
        assert (out / name).is_file()


def test_report_conservation(pipeline):
    _, out = pipeline
    ts = rows(out / "timeseries.csv")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["totals"]["volume"] == sum(int(r["volume"]) for r in ts)
    assert summary["totals"]["metric1"] == math.fsum(float(r["metric1"]) for r in ts)
    assert summary["totals"]["metric2"] == math.fsum(float(r["metric2"]) for r in ts)
    assert "constant_frequency_fraction" in summary
    assert set(summary["baselines"]) == {"greedy", "fixed_0", "fixed_1", "fixed_2"}


def test_freq_dist_rows_match_decisions(pipeline):
    cfg, out = pipeline
    fd = rows(out / "freq_dist.csv")
    decisions = np.zeros(cfg.horizon_days, dtype=int)
    for s in cfg.seeds:
        for r in rows(f"{cfg.output_dir}/evaluation/ef_pid/seed_{s}/daily.csv"):
            decisions[int(r["day"])] += int(r["decisions"])
    assert [sum(int(v) for k, v in r.items() if k != "day") for r in fd] == decisions.tolist()


def test_constant_frequency_std_zero(pipeline):
    cfg, _ = pipeline
    out = report(cfg.output_dir, primary="fixed_2")
    assert all(float(r["std"]) == 0.0 for r in rows(out / "per_user_freq_std.csv"))
    assert json.loads((out / "summary.json").read_text())["constant_frequency_fraction"] == 1.0


def test_report_missing_inputs(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing inputs"):
        report(tmp_path)


def test_report_lists_absent_files(pipeline, tmp_path):
    import shutil
    cfg, _ = pipeline
    copy = tmp_path / "copy"
    shutil.copytree(cfg.output_dir, copy)
    (copy / "evaluation/ef_pid/seed_1/users.csv").unlink()
    with pytest.raises(FileNotFoundError, match="seed_1/users.csv"):
        report(copy)


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tiny(tmp_path)
    cfg.save(tmp_path / "c.json")
    assert main(["collect", "--config", str(tmp_path / "c.json")]) == 0
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 0
    assert main(["evaluate", "--config", str(tmp_path / "c.json"), "--mode", "fixed_frequency:1",
                 "--seed", "3"]) == 0
    assert (tmp_path / "run/evaluation/fixed_1/seed_3/report.json").is_file()
    assert main(["report", "--out", str(tmp_path / "run")]) == 0
    assert main(["no-such-command"]) == 1
    assert main(["evaluate", "--config", str(tmp_path / "c.json"), "--mode", "bogus"]) == 2
    assert main(["train", "--config", str(tmp_path / "c.json"), "--log", str(tmp_path / "missing")]) == 3


def test_sign_test_counts():
    from freqctl.reporting import sign_test
    res = sign_test([0.3] * 15 + [0.1] * 5, [0.2] * 20)
    assert (res["wins"], res["losses"], res["n"]) == (15, 5, 20)
    assert res["p_value"] < 0.05
    assert sign_test([0.3, 0.3], [None, 0.3])["n"] == 0
