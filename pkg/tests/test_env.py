import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqctl.core import ContractViolation, FrequencyAction, RewardParams
from freqctl.env import (
    Cohort,
    DriftSpec,
    EnvParams,
    Population,
    UserState,
    features,
    init_population,
    run_day,
    step_user,
)


def rng():
    return np.random.default_rng(0)


def test_init_population_deterministic():
    a = init_population(EnvParams(population_size=500, seed=3))
    b = init_population(EnvParams(population_size=500, seed=3))
    for name in ("theta", "phi", "active", "credit", "cohort"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_three_users_one_per_cohort():
    pop = init_population(EnvParams(population_size=3, dormant_fraction=0.0))
    assert sorted(pop.cohort.tolist()) == [0, 1, 2]
    # High cohort holds the largest theta
    assert pop.theta[pop.cohort == 0][0] == pop.theta.max()


def test_dormant_fraction():
    assert init_population(EnvParams(population_size=100, dormant_fraction=0.0)).active.all()
    pop = init_population(EnvParams(population_size=100, dormant_fraction=0.2))
    assert (~pop.active).sum() == 20


def test_step_user_zero_frequency():
    u, m = step_user(UserState(theta=1.0), FrequencyAction(0, 0), EnvParams(), 1.0, rng())
    assert m.tolist() == [0.0, 0.0]
    assert u.phi == 0.0


def test_step_user_worked_example():
    u, m = step_user(UserState(theta=0.5, phi=0.5), FrequencyAction(2, 2), EnvParams(), 1.0, rng())
    assert m[0] == pytest.approx(0.5 * (1 - math.exp(-1)) * 0.5, abs=1e-12)
    assert m[0] == pytest.approx(0.15803, abs=1e-5)
    assert u.phi == pytest.approx(0.52)
    assert u.history == (2,)


def test_dormant_activation():
    u, m = step_user(UserState(theta=0.9, active=False, activation_credit=5.0),
                     FrequencyAction(2, 2), EnvParams(activation_threshold=6.0), 1.0, rng())
    assert u.active and u.activation_credit == 0.0
    assert m.tolist() == [0.0, 0.0]


def test_dormant_below_threshold_accumulates():
    u, _ = step_user(UserState(theta=0.9, active=False, activation_credit=1.0),
                     FrequencyAction(2, 2), EnvParams(), 1.0, rng())
    assert not u.active and u.activation_credit == 3.0


def test_churn_at_saturation():
    p = EnvParams(churn_prob=1.0)
    u, _ = step_user(UserState(theta=0.5, phi=1.0), FrequencyAction(5, 5), p, 1.0, rng())
    assert u.phi == 1.0 and not u.active


def test_bad_multiplier():
    with pytest.raises(ContractViolation):
        step_user(UserState(theta=0.5), FrequencyAction(1, 1), EnvParams(), 0.0, rng())


@settings(max_examples=200, deadline=None)
@given(theta=st.floats(0, 1), phi=st.floats(0, 1), seq=st.lists(st.integers(0, 5), min_size=1, max_size=40),
       mult=st.floats(0.1, 3.0))
def test_fatigue_bounded_and_metrics_nonnegative(theta, phi, seq, mult):
    p = EnvParams()
    u = UserState(theta=theta, phi=phi)
    r = np.random.default_rng(1)
    for v in seq:
        u, m = step_user(u, FrequencyAction(v, v), p, mult, r)
        assert 0.0 <= u.phi <= 1.0
        assert u.activation_credit >= 0.0
        assert np.all(m >= 0.0)
        assert u.theta == theta


@given(theta=st.floats(0.01, 1), phi=st.floats(0, 0.99))
def test_metric1_concave_in_frequency(theta, phi):
    p = EnvParams()
    m1 = [step_user(UserState(theta=theta, phi=phi), FrequencyAction(v, v), p, 1.0, rng())[1][0]
          for v in range(6)]
    d = np.diff(m1)
    assert np.all(d >= -1e-15)
    assert np.all(np.diff(d) <= 1e-15)


def test_max_frequency_saturates_fatigue():
    p = EnvParams(churn_prob=0.0)
    u = UserState(theta=0.5)
    for _ in range(30):
        u, _ = step_user(u, FrequencyAction(5, 5), p, 1.0, rng())
    assert u.phi == 1.0


def test_features_examples():
    p = EnvParams()
    assert features(UserState(theta=0.5), p).tolist() == [0, 1, 0, 0, 0, 1, 0, 0]
    dormant = UserState(theta=0.5, active=False, activation_credit=3.0)
    assert features(dormant, p)[-1] == 0.5


def test_feature_length():
    pop = init_population(EnvParams(population_size=50))
    assert pop.features().shape == (50, 8)


def test_run_day_zero_action():
    pop = init_population(EnvParams(population_size=200))
    res = run_day(pop, lambda x, idx: np.zeros(len(idx), dtype=int), DriftSpec(), 0)
    assert res.outcome.delivery_volume == 0


def test_run_day_constant_action_volume():
    pop = init_population(EnvParams(population_size=300, dormant_fraction=0.0))
    res = run_day(pop, lambda x, idx: np.full(len(idx), 3), DriftSpec(), 0)
    assert res.outcome.delivery_volume == 300 * 3
    assert sum(res.outcome.frequency_histogram) == res.outcome.decisions == 300


def test_run_day_does_not_mutate_input():
    pop = init_population(EnvParams(population_size=100))
    before = pop.copy()
    run_day(pop, lambda x, idx: np.full(len(idx), 5), DriftSpec(), 0)
    assert np.array_equal(before.phi, pop.phi)


def test_identity_drift():
    d = DriftSpec()
    assert all(d.multiplier(day) == 1.0 for day in range(30))


def test_weekly_swing_and_schedule():
    d = DriftSpec.weekly_swing(0.25)
    vals = [d.multiplier(day) for day in range(7)]
    assert max(vals) <= 1.25 and min(vals) >= 0.75
    assert max(vals) - min(vals) > 0.4
    s = DriftSpec(schedule=((3, 5, 2.0),))
    assert [s.multiplier(day) for day in range(6)] == [1, 1, 1, 2, 2, 1]


def test_traffic_eligibility_follows_drift():
    p = EnvParams(population_size=4000, due_prob=0.5)
    pop = init_population(p)
    lo = run_day(pop, lambda x, idx: np.ones(len(idx), dtype=int), DriftSpec(schedule=((0, 1, 0.5),)), 0)
    hi = run_day(pop, lambda x, idx: np.ones(len(idx), dtype=int), DriftSpec(schedule=((0, 1, 1.5),)), 0)
    assert lo.outcome.decisions / 4000 == pytest.approx(0.25, abs=0.03)
    assert hi.outcome.decisions / 4000 == pytest.approx(0.75, abs=0.03)


def test_run_day_deterministic():
    def run():
        pop = init_population(EnvParams(population_size=500, seed=4))
        out = []
        for day in range(5):
            res = run_day(pop, lambda x, idx: (idx % 6), DriftSpec.weekly_swing(0.2), day,
                          reward_params=RewardParams(), ticks_per_day=4)
            pop = res.population
            out.append(res.outcome)
        return out
    assert run() == run()


def test_records_and_terminal():
    pop = init_population(EnvParams(population_size=10))
    res = run_day(pop, lambda x, idx: np.ones(len(idx), dtype=int), DriftSpec(), 29, all_due=True,
                  record=True, episode_length=30)
    assert len(res.records) == 10
    assert all(r.terminal and r.step == 29 for r in res.records)


def test_snapshot_round_trip(tmp_path):
    pop = init_population(EnvParams(population_size=20))
    pop = run_day(pop, lambda x, idx: np.full(len(idx), 2), DriftSpec(), 0).population
    pop.save_snapshot(tmp_path / "snap.jsonl")
    back = Population.load_snapshot(tmp_path / "snap.jsonl")
    assert np.array_equal(back.phi, pop.phi)
    assert np.array_equal(back.history, pop.history)
    assert back.params == pop.params


def test_cohort_parse():
    assert Cohort.parse("Low") is Cohort.LOW
    assert Cohort.parse(0) is Cohort.HIGH


def test_env_params_json_keys():
    d = EnvParams().to_dict()
    assert "lambda" in d
    assert EnvParams.from_dict(d) == EnvParams()
    with pytest.raises(ContractViolation):
        EnvParams.from_dict({"bogus": 1})
