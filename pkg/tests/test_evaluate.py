from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incident_rl.agents import UnreachableAction, fixed_policy, random_policy
from incident_rl.evaluate import (EmptySample, RewardSample, RolloutBatchConfig,
                                  average_reward, evaluation_report, format_variant, rollout,
                                  top_variants, variants_csv)
from incident_rl.mdp import PAPER_REWARDS, Mdp, RewardTable, expected_episode_reward
from incident_rl.synth import random_mdp

from conftest import TALK

TALK_ALL = fixed_policy({"va": TALK, "pp": TALK}, "talk")
V_TAU = (("va", TALK, "Tau"),)
V_PP = (("va", TALK, "pp"), ("pp", TALK, "Tau"))


def test_point_mass_chain_earns_exactly_one():
    mdp = Mdp(("va", "Tau"), (TALK,), {("va", TALK): {"Tau": 1.0}}, PAPER_REWARDS, {"va": 1.0})
    res = rollout(mdp, TALK_ALL, RolloutBatchConfig(50, 20, seed=3))
    assert set(res.sample.run_means) == {1.0}
    assert res.sample.average == 1.0
    assert res.variants == Counter({V_TAU: 1000})
    assert top_variants(res.variants, 5) == [(V_TAU, 1000)]


def test_two_variant_mean_and_frequencies(two_variant):
    res = rollout(two_variant, TALK_ALL, RolloutBatchConfig(1000, 100, seed=1))
    s = res.sample
    assert abs(s.average - (-1.0)) < 3 * s.standard_error
    assert set(res.variants) == {V_TAU, V_PP}
    n = res.n_episodes
    assert abs(res.variants[V_TAU] - n / 2) < 3 * np.sqrt(n / 4)
    assert s.run_totals[0] == pytest.approx(s.run_means[0] * 100)


def test_rollout_matches_exact_expectation():
    mdp = random_mdp(4)
    pol = random_policy(mdp)
    res = rollout(mdp, pol, RolloutBatchConfig(400, 50, seed=2))
    exact = expected_episode_reward(mdp, pol.probabilities())
    assert abs(res.sample.average - exact) < 4 * res.sample.standard_error


def test_determinism_and_worker_independence(two_variant):
    cfg = RolloutBatchConfig(64, 10, seed=9)
    a = rollout(two_variant, TALK_ALL, cfg, workers=1, keep_episode_rewards=True)
    b = rollout(two_variant, TALK_ALL, cfg, workers=3, keep_episode_rewards=True)
    assert a.sample == b.sample and a.variants == b.variants
    c = rollout(two_variant, TALK_ALL, RolloutBatchConfig(64, 10, seed=10))
    assert c.sample.run_means != a.sample.run_means
    assert len(a.sample.episode_rewards) == 640
    assert np.mean(a.sample.episode_rewards) == pytest.approx(a.sample.average)


def test_more_runs_extend_the_same_stream(two_variant):
    # each run has its own substream, so run i does not depend on n_runs
    short = rollout(two_variant, TALK_ALL, RolloutBatchConfig(10, 5, seed=1))
    long = rollout(two_variant, TALK_ALL, RolloutBatchConfig(30, 5, seed=1))
    assert long.sample.run_means[:10] == short.sample.run_means


def test_missing_state_raises_only_when_visited(two_variant):
    with pytest.raises(UnreachableAction, match="'pp'"):
        rollout(two_variant, fixed_policy({"va": TALK}), RolloutBatchConfig(10, 10))
    bad = fixed_policy({"va": TALK, "pp": "seclusion"})
    with pytest.raises(UnreachableAction):
        rollout(two_variant, bad, RolloutBatchConfig(10, 10))


def test_truncation_keeps_reward_and_counts():
    loop = Mdp(("s", "Tau"), ("B",), {("s", "B"): {"s": 1.0}},
               RewardTable({"s": 0, "Tau": 1}, {"B": -1}), {"s": 1.0})
    res = rollout(loop, fixed_policy({"s": "B"}), RolloutBatchConfig(3, 4, max_steps_per_episode=25))
    assert res.sample.n_truncated == 12
    assert res.sample.run_means == [-25.0] * 3


def test_average_reward_constant_and_empty():
    s = RewardSample("p", [2.5] * 4, [250.0] * 4, 100)
    assert average_reward(s) == 2.5
    with pytest.raises(EmptySample):
        average_reward(RewardSample("p", [], [], 100))


def test_reward_sample_round_trip(tmp_path, two_variant):
    res = rollout(two_variant, TALK_ALL, RolloutBatchConfig(5, 3), keep_episode_rewards=True)
    path = tmp_path / "s.json"
    res.sample.save(path)
    assert RewardSample.load(path) == res.sample


def test_variant_rendering():
    v = (("pp", TALK, "pp"), ("pp", TALK, "Tau"))
    assert format_variant(v) == "(pp, Talk with client, pp)(pp, Talk with client, Tau)"
    assert format_variant((("sib", "no measure taken", "Tau"),)) == "(sib, No measure, Tau)"


def test_top_variants_ranking_and_ties():
    table = Counter({V_PP: 5, V_TAU: 5, (("po", TALK, "Tau"),): 9})
    ranked = top_variants(table, 10)
    assert [c for _, c in ranked] == [9, 5, 5]
    assert ranked[1][0] == min(V_PP, V_TAU)
    assert len(top_variants(table, 2)) == 2
    text = variants_csv(table)
    assert text.splitlines()[1] == "1,\"(po, Talk with client, Tau)\",9"


def test_evaluation_report_mentions_policy_and_variants(two_variant):
    res = rollout(two_variant, TALK_ALL, RolloutBatchConfig(20, 10))
    text = evaluation_report(res, top_k=2)
    assert "Policy: talk" in text and "(va, Talk with client, Tau)" in text


def test_config_validation():
    with pytest.raises(ValueError):
        RolloutBatchConfig(n_runs=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_variant_counts_add_up(seed):
    mdp = random_mdp(seed % 50)
    res = rollout(mdp, random_policy(mdp), RolloutBatchConfig(7, 9, seed=seed))
    assert sum(res.variants.values()) == 63
    for v in res.variants:
        assert v[-1][2] == "Tau"
        assert all(a[2] == b[0] for a, b in zip(v, v[1:]))
