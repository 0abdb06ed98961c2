import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from bychain.consensus import (
    Committee,
    CommitteeConfig,
    DelayObservation,
    elect,
    scheduled_producer,
    tally_rows,
    tally_votes,
    total_delay,
    utility,
    vote_probabilities,
    write_tally_csv,
)


def test_total_delay_sum():
    assert total_delay(DelayObservation(0, 1, 1.0, 0.5, 3.0)) == 4.5
    assert total_delay(DelayObservation(0, 1, 0.0, 0.0, 0.0)) == 0.0


def test_default_final_delay():
    assert DelayObservation(0, 1, 0.1, 0.2).tau_final == 3.0


def test_negative_component_rejected():
    with pytest.raises(ValueError):
        DelayObservation(0, 1, -0.1, 0.0)


@pytest.mark.parametrize("tau,theta,expected", [(5, 3, 0.0), (3, 3, 0.0), (1, 3, math.log(3))])
def test_utility_values(tau, theta, expected):
    assert utility(tau, theta) == pytest.approx(expected, rel=1e-15)
    if expected == 0.0:
        assert utility(tau, theta) == 0.0


def test_utility_negative_inputs_clamped(caplog):
    assert utility(-1.0, 2.0) == pytest.approx(math.log(3))
    assert "clamped" in caplog.text


@settings(max_examples=200)
@given(st.floats(0, 100), st.floats(0, 100))
def test_utility_zero_beyond_threshold(tau, theta):
    u = utility(tau, theta)
    if tau >= theta:
        assert u == 0.0
    else:
        assert u > 0.0


def test_vote_probability_hand_normalisation():
    p = vote_probabilities({"A": 1.0986, "B": 0.6931})
    assert p["A"] == pytest.approx(0.6131, abs=1e-3)
    assert p["B"] == pytest.approx(0.3869, abs=1e-3)


def test_vote_probability_single_and_fallback():
    assert vote_probabilities({"A": 2.0}) == {"A": 1.0}
    assert vote_probabilities({"A": 0.0, "B": 0.0}) == {"A": 0.5, "B": 0.5}


@settings(max_examples=200)
@given(st.dictionaries(st.integers(0, 50), st.floats(0, 1e6), min_size=1, max_size=30))
def test_probability_simplex(utils):
    p = vote_probabilities(utils)
    assert all(v >= 0 for v in p.values())
    assert math.fsum(p.values()) == pytest.approx(1.0, abs=1e-9)


def _observations(n, delay_of, tau_tx=0.2):
    return [DelayObservation(a, b, tau_tx, delay_of(b), 3.0) for a in range(n) for b in range(n) if a != b]


def test_fast_candidate_elected_against_bruteforce():
    n = 10
    compute = {m: 1.5 for m in range(n)}
    compute[6] = 0.75  # half everyone else's compute delay
    obs = _observations(n, compute.get)
    cfg = CommitteeConfig(theta=5.0, size=1)
    # Brute-force expected votes straight from the definitions.
    votes = {m: 0.0 for m in range(n)}
    for a in range(n):
        us = {b: math.log1p(max(5.0 - (0.2 + compute[b] + 3.0), 0)) for b in range(n) if b != a}
        s = sum(us.values())
        for b, u in us.items():
            votes[b] += u / s
    best = max(votes, key=votes.get)
    assert best == 6
    assert elect(obs, cfg).members == [6]
    assert tally_votes(obs, cfg) == pytest.approx(votes)


def test_slow_candidate_never_elected():
    n = 6
    obs = _observations(n, lambda m: 10.0 if m == 2 else 0.5)
    committee = elect(obs, CommitteeConfig(theta=5.0, size=3))
    assert 2 not in committee.members
    assert committee.votes[2] == 0.0


def test_ties_go_to_lower_id():
    obs = _observations(5, lambda m: 0.5)
    assert elect(obs, CommitteeConfig(size=3)).members == [0, 1, 2]


def test_deterministic_mode_repeatable():
    rng = random.Random(0)
    obs = [DelayObservation(a, b, rng.random(), rng.random()) for a in range(7) for b in range(7) if a != b]
    cfg = CommitteeConfig(size=3, vote_budget={i: rng.random() for i in range(7)})
    assert elect(obs, cfg).members == elect(obs, cfg).members


def test_sampled_mode_seeded():
    obs = _observations(6, lambda m: 0.3 * m)
    cfg = CommitteeConfig(size=2, vote_budget={i: 100.0 for i in range(6)}, sampled=True)
    a = elect(obs, cfg, random.Random(5))
    b = elect(obs, cfg, random.Random(5))
    assert a.members == b.members
    assert sum(a.votes.values()) == 600
    with pytest.raises(ValueError):
        elect(obs, cfg)


def test_fewer_candidates_than_seats(caplog):
    obs = _observations(2, lambda m: 0.1)
    committee = elect(obs, CommitteeConfig(size=5))
    assert committee.members == [0, 1]
    assert "only 2 candidates" in caplog.text


def test_scale_invariance_random_instances():
    rng = random.Random(42)
    for _ in range(100):
        n = rng.randint(3, 12)
        obs = [DelayObservation(a, b, rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 3))
               for a in range(n) for b in range(n) if a != b]
        budgets = {i: rng.uniform(0, 10) for i in range(n)}
        size = rng.randint(1, n)
        base = elect(obs, CommitteeConfig(size=size, vote_budget=budgets)).members
        c = rng.choice([1e-3, 0.5, 7.0, 1e4])
        scaled = elect(obs, CommitteeConfig(size=size, vote_budget={k: v * c for k, v in budgets.items()})).members
        assert base == scaled


@pytest.mark.parametrize("height,member", [(0, 0), (3, 0), (4, 1)])
def test_round_robin_examples(height, member):
    c = Committee([10, 11, 12])
    assert scheduled_producer(c, height) == [10, 11, 12][member]


@pytest.mark.parametrize("size,k,start", [(1, 5, 0), (3, 4, 7), (5, 3, 2)])
def test_round_robin_fairness(size, k, start):
    c = Committee(list(range(size)))
    counts = {m: 0 for m in c.members}
    for h in range(start, start + size * k):
        counts[scheduled_producer(c, h)] += 1
    assert set(counts.values()) == {k}


def test_cursor_cycles():
    c = Committee([4, 5, 6])
    assert [c.advance() for _ in range(7)] == [4, 5, 6, 4, 5, 6, 4]
    assert c.finality_depth() == 3


def test_tally_csv_schema():
    c = Committee([1], votes={0: 0.25, 1: 0.75})
    text = write_tally_csv(tally_rows(3, c))
    lines = text.splitlines()
    assert lines[0] == "#schema=committee-tally/1"
    assert lines[1] == "epoch,node,votes,elected"
    assert lines[3] == "3,1,0.750000000,true"
