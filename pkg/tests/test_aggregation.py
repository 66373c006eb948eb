import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signfd.aggregation import (
    CrossoverEstimate,
    FdConfig,
    FederatedDefense,
    LLRWeightTable,
    decode_votes,
    fd_update,
    make_aggregator,
    mv_decode,
    oracle_weights,
    wmv_decode,
)
from signfd.analysis import exact_error_probability, simulate_fd_bsc
from signfd.channel import AttackSpec
from signfd.core import pack, unpack


def vecs(matrix):
    return [pack(row) for row in np.asarray(matrix)]


def col(*votes):
    return vecs([[v] for v in votes])


# ---------------------------------------------------------------- MV / WMV

def test_mv_examples():
    assert unpack(mv_decode(col(1, 1, -1))).tolist() == [1]
    single = pack([1, -1, -1, 1])
    assert mv_decode([single]) == single
    assert unpack(mv_decode(col(1, 1, -1, -1))).tolist() == [1]


def test_mv_rejects_empty():
    with pytest.raises(ValueError):
        mv_decode([])


def test_wmv_examples():
    assert unpack(wmv_decode(col(1, -1, -1), LLRWeightTable(np.array([2.2, 0.1, 0.1])))).tolist() == [1]
    # negative weight flips the adversary's vote: -3(-1) + 1(-1) + 1(-1) = +1
    assert unpack(wmv_decode(col(-1, -1, -1), np.array([-3.0, 1.0, 1.0]))).tolist() == [1]


def test_wmv_dimension_mismatch():
    with pytest.raises(ValueError):
        wmv_decode(col(1, 1, 1), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        wmv_decode(col(1, 1), np.ones((2, 3)))


def test_zero_weights_tie_to_plus_one():
    assert unpack(wmv_decode(col(-1, -1), np.zeros(2))).tolist() == [1]


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5])
def test_exhaustive_reduction_to_mv(m):
    patterns = np.array(list(itertools.product([-1, 1], repeat=m))).T
    for start in range(0, patterns.shape[1], 8):
        block = patterns[:, start:start + 8]
        expected = [1 if s >= 0 else -1 for s in block.sum(axis=0)]
        assert unpack(mv_decode(vecs(block))).tolist() == expected
        for w in (1.0, 0.37, 5.0):
            assert wmv_decode(vecs(block), np.full(m, w)) == mv_decode(vecs(block))


matrices = st.integers(1, 5).flatmap(
    lambda m: st.integers(1, 8).flatmap(
        lambda n: st.tuples(
            st.lists(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n), min_size=m, max_size=m),
            st.lists(st.floats(-5, 5, allow_nan=False), min_size=m, max_size=m),
            st.integers(0, m - 1),
        )
    )
)


@given(matrices)
def test_negative_weight_equivalence(case):
    votes, weights, j = case
    votes = np.array(votes)
    w = np.array(weights)
    w2, v2 = w.copy(), votes.copy()
    w2[j] = -w[j]
    v2[j] = -votes[j]
    assert wmv_decode(vecs(votes), w) == wmv_decode(vecs(v2), w2)


@given(matrices)
def test_decode_votes_matches_weighted_sum(case):
    votes, weights, _ = case
    votes = np.array(votes)
    w = np.array(weights)
    expected = (w @ votes) < 0
    assert decode_votes(votes, w).tolist() == expected.tolist()


# ---------------------------------------------------------------- ML optimality

def pattern_likelihood(pattern, p, u):
    """P[Y = pattern | U = u] for independent BSC workers."""
    out = 1.0
    for y, pm in zip(pattern, p):
        out *= pm if y != u else 1 - pm
    return out


def rule_error(rule, patterns, p):
    err = 0.0
    for pattern, decision in zip(patterns, rule):
        for u in (-1, 1):
            if decision != u:
                err += 0.5 * pattern_likelihood(pattern, p, u)
    return err


@pytest.mark.parametrize("p", [(0.1, 0.25, 0.4), (0.3, 0.3, 0.3), (0.05, 0.35, 0.8), (0.45, 0.2, 0.6)])
def test_oracle_wmv_is_optimal_over_all_decision_rules(p):
    patterns = list(itertools.product([-1, 1], repeat=3))
    best = min(rule_error(rule, patterns, p) for rule in itertools.product([-1, 1], repeat=len(patterns)))
    w = oracle_weights(np.array(p)).weights
    oracle = exact_error_probability(np.array(p), w)
    mv = exact_error_probability(np.array(p))
    assert oracle <= best + 1e-15
    assert oracle <= mv + 1e-15


@settings(max_examples=40)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=5))
def test_oracle_wmv_never_worse_than_mv(p):
    p = np.array(p)
    oracle = exact_error_probability(p, oracle_weights(p).weights)
    patterns = list(itertools.product([-1, 1], repeat=p.size))
    brute = sum(
        min(0.5 * pattern_likelihood(y, p, 1), 0.5 * pattern_likelihood(y, p, -1)) for y in patterns
    )
    assert oracle == pytest.approx(brute, abs=1e-12)
    assert oracle <= exact_error_probability(p) + 1e-12


# ---------------------------------------------------------------- weights

def test_oracle_weight_examples():
    w = oracle_weights(np.array([0.5, 0.1, 0.9])).weights
    assert w[0] == 0.0
    assert w[1] == pytest.approx(math.log(9), abs=1e-12)
    assert w[1] == pytest.approx(2.1972246, abs=1e-7)
    assert w[2] == pytest.approx(-w[1], abs=1e-15)


def test_oracle_weights_clamp_extremes():
    w = oracle_weights(np.array([0.0, 1.0])).weights
    assert np.all(np.isfinite(w))
    assert w[0] > 0 > w[1]


@given(st.floats(1e-9, 1 - 1e-9))
def test_llr_sign(p):
    w = float(LLRWeightTable.from_crossover(np.array([p])).weights[0])
    assert w == pytest.approx(math.log((1 - p) / p), rel=1e-9, abs=1e-12)
    if p > 0.5:
        assert w < 0
    elif p < 0.5:
        assert w > 0


def test_weight_table_validation():
    with pytest.raises(ValueError):
        LLRWeightTable(np.array([1.0, np.inf]))
    table = LLRWeightTable.uniform(3)
    assert np.broadcast_to(table.as_matrix(4), (3, 4)).shape == (3, 4)
    with pytest.raises(ValueError):
        LLRWeightTable(np.ones((3, 5))).as_matrix(4)
    assert not table.per_coordinate


# ---------------------------------------------------------------- federated defense

def test_first_step_equals_mv():
    rng = np.random.default_rng(0)
    votes = np.where(rng.random((7, 50)) < 0.5, -1, 1)
    state = CrossoverEstimate(7, 50)
    decoded, _, _ = fd_update(state, vecs(votes), 1, FdConfig())
    assert decoded == mv_decode(vecs(votes))


def test_negating_worker_gets_negative_weight():
    rng = np.random.default_rng(1)
    n, cfg = 100, FdConfig(initial_phase=50)
    fd = FederatedDefense(3, n, cfg)
    for t in range(1, 101):
        honest = np.where(rng.random(n) < 0.5, -1, 1)
        decision = unpack(mv_decode(vecs([honest, honest, -honest])))
        fd.decode(vecs([honest, honest, -decision]), t)
        counts = fd.state.error_count(cfg)
        if t == 50:
            assert fd.state.pooled_errors[2] == 50 * n
    p_hat = fd.state.estimate(cfg)
    assert np.all(p_hat[2] > 0.99)
    assert np.all(fd.weights.weights[2] < 0)
    assert np.all(fd.weights.weights[:2] > 0)
    assert counts.shape == (3, n)


def replay_estimate(votes_log, decoded_log, t_in):
    """Independent tally of disagreements following the two-phase rule."""
    m, n = votes_log[0].shape
    pooled = np.zeros(m)
    per_coord = np.zeros((m, n))
    for t, (votes, decoded) in enumerate(zip(votes_log, decoded_log), start=1):
        disagree = votes != decoded[None, :]
        if t <= t_in:
            pooled += disagree.sum(axis=1)
        else:
            per_coord += disagree
    t = len(votes_log)
    snapshot = pooled / (n * t_in)
    return (t_in * snapshot[:, None] + per_coord) / t


def test_estimator_matches_replay_oracle():
    p = np.array([0.1, 0.2, 0.3])
    cfg = FdConfig(initial_phase=50)
    votes_log, decoded_log = [], []

    def record(t, truth, votes, decoded, fd):
        votes_log.append(votes.copy())
        decoded_log.append(unpack(decoded))

    fd = simulate_fd_bsc(p, AttackSpec.none(), 64, 5000, cfg, seed=2, on_step=record)
    ref = replay_estimate(votes_log, decoded_log, cfg.initial_phase)
    got = fd.state.estimate(cfg)
    assert np.all(np.abs(got - ref) <= 0.03)
    eps = 1.0 / (2 * 5000 + 2)
    assert np.allclose(got, np.clip(ref, eps, 1 - eps), rtol=0, atol=1e-12)


def test_estimator_consistency_without_attack():
    p = np.array([0.1, 0.15, 0.2, 0.25, 0.3] * 3)
    cfg = FdConfig(initial_phase=50)
    fd = simulate_fd_bsc(p, AttackSpec.none(), 64, 2000, cfg, seed=5)
    assert np.all(np.abs(fd.worker_crossover() - p) < 0.015)


def test_weight_signs_under_sia():
    p = np.full(15, 0.3)
    cfg = FdConfig(initial_phase=50)
    fd = simulate_fd_bsc(p, AttackSpec.first(6, 1.0), 64, 400, cfg, seed=8)
    w = fd.weights.as_matrix(64)
    assert np.all(w[:6] < 0)
    assert np.all(w[6:] > 0)


def test_estimates_stay_inside_unit_interval():
    cfg = FdConfig(initial_phase=2)
    votes = vecs(np.ones((3, 4), dtype=int))
    state = CrossoverEstimate(3, 4)
    for t in range(1, 6):
        _, state, weights = fd_update(state, votes, t, cfg)
        p = state.estimate(cfg)
        assert np.all((p > 0) & (p < 1))
        assert np.all(np.isfinite(weights.weights))
        assert np.all(state.error_count(cfg) <= state.samples_seen(cfg))


def test_update_does_not_mutate_input_state():
    state = CrossoverEstimate(3, 4)
    before = state.dumps()
    fd_update(state, vecs([[1, -1, 1, 1], [1, 1, 1, 1], [-1, -1, -1, 1]]), 1, FdConfig())
    assert state.dumps() == before


def test_update_preconditions():
    state = CrossoverEstimate(3, 4)
    votes = vecs(np.ones((3, 4), dtype=int))
    with pytest.raises(ValueError):
        fd_update(state, votes, 2, FdConfig())
    with pytest.raises(ValueError):
        fd_update(state, votes, 0, FdConfig())
    with pytest.raises(ValueError):
        fd_update(state, vecs(np.ones((2, 4), dtype=int)), 1, FdConfig())


def test_snapshot_frozen_at_end_of_initial_phase():
    cfg = FdConfig(initial_phase=3)
    rng = np.random.default_rng(4)
    state = CrossoverEstimate(4, 10)
    for t in range(1, 7):
        votes = vecs(np.where(rng.random((4, 10)) < 0.3, -1, 1))
        _, state, _ = fd_update(state, votes, t, cfg)
        if t == 3:
            snap = state.snapshot.copy()
            assert np.array_equal(snap, state.pooled_errors / 30)
    assert np.array_equal(state.snapshot, snap)
    assert state.estimate(cfg).shape == (4, 10)


def test_mv_initial_decoder_option():
    cfg = FdConfig(initial_phase=5, initial_decoder="mv")
    rng = np.random.default_rng(6)
    fd = FederatedDefense(5, 20, cfg)
    for t in range(1, 6):
        v = vecs(np.where(rng.random((5, 20)) < np.array([[0.1], [0.1], [0.4], [0.45], [0.45]]), -1, 1))
        assert fd.decode(v, t) == mv_decode(v)


def test_weight_override_drives_decode_but_estimator_runs():
    override = LLRWeightTable(np.array([-1.0, 0.0, 0.0]))
    fd = FederatedDefense(3, 2, FdConfig(), weight_override=override)
    out = fd.decode(vecs([[1, -1], [1, 1], [1, 1]]), 1)
    assert unpack(out).tolist() == [-1, 1]
    assert fd.state.iterations == 1


def test_checkpoint_resume_is_identical():
    cfg = FdConfig(initial_phase=10)
    rng = np.random.default_rng(7)
    stream = [vecs(np.where(rng.random((5, 16)) < 0.25, -1, 1)) for _ in range(40)]
    straight = FederatedDefense(5, 16, cfg)
    ref = [straight.decode(v, t) for t, v in enumerate(stream, start=1)]

    resumed = FederatedDefense(5, 16, cfg)
    out = [resumed.decode(v, t) for t, v in enumerate(stream[:25], start=1)]
    text = resumed.state.dumps()
    resumed = FederatedDefense(5, 16, cfg)
    resumed.state = CrossoverEstimate.loads(text)
    out += [resumed.decode(v, t) for t, v in enumerate(stream[25:], start=26)]
    assert out == ref
    assert resumed.state.dumps() == straight.state.dumps()


def test_snapshot_format_is_checked():
    data = CrossoverEstimate(2, 3).to_dict()
    assert data["format"] == "signfd.crossover-estimate" and data["version"] == 1
    with pytest.raises(ValueError):
        CrossoverEstimate.from_dict({**data, "version": 99})
    with pytest.raises(ValueError):
        CrossoverEstimate.from_dict({**data, "format": "other"})


def test_fd_config_validation():
    with pytest.raises(ValueError):
        FdConfig(initial_phase=0)
    with pytest.raises(ValueError):
        FdConfig(estimator_policy="sliding")
    with pytest.raises(ValueError):
        FdConfig(initial_decoder="median")


def test_make_aggregator():
    assert make_aggregator("mv", 3, 4).name == "mv"
    assert make_aggregator("fd", 3, 4).name == "fd"
    assert make_aggregator("oracle", 2, 4, oracle_p=[0.1, 0.2]).name == "oracle"
    with pytest.raises(ValueError):
        make_aggregator("oracle", 2, 4)
    with pytest.raises(ValueError):
        make_aggregator("krum", 2, 4)
