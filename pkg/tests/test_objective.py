import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfab.model import ModelParams, TaskKind
from dfab.objective import (
    EStats,
    WorkerPartition,
    estep_aggregate,
    estep_penalties,
    fic_aggregate,
    local_estep,
    local_loglik,
    partition_stats,
    refresh_cache,
    responsibilities,
    shrink,
    shrink_decision,
)


def one_expert_model():
    # depth-1 tree with the right expert shrunk away behaves as a single expert
    m = ModelParams.initial(1, 1)
    return m.copy(active=np.array([True, False]))


def make_part(X, y, Q):
    return WorkerPartition(np.asarray(X, float), np.asarray(y, float), np.asarray(Q, float))


def random_setup(rng, n=40, depth=2, D=3):
    E, G = 2**depth, 2**depth - 1
    m = ModelParams(
        depth,
        "regression",
        rng.integers(0, D, G),
        rng.uniform(-1, 1, G),
        rng.uniform(0.1, 0.9, G),
        rng.normal(size=(E, D)) * (rng.random((E, D)) < 0.7),
        rng.normal(size=E),
        rng.uniform(0.3, 2, E),
        np.ones(E, bool),
    )
    X = rng.uniform(-2, 2, size=(n, D))
    y = rng.normal(size=n)
    Q = rng.random((n, E))
    return m, X, y, Q / Q.sum(axis=1, keepdims=True)


# local_loglik / FIC -----------------------------------------------------


def test_local_loglik_single_expert():
    part = make_part([[0.0], [0.0]], [0.0, 0.0], [[1.0, 0.0], [1.0, 0.0]])
    ll = local_loglik(part, one_expert_model())
    assert ll == pytest.approx(-math.log(2 * math.pi))


def test_fic_single_expert_without_features_has_no_penalty():
    m = one_expert_model()
    part = make_part([[0.0], [0.0]], [0.0, 0.0], [[1.0, 0.0], [1.0, 0.0]])
    ll = local_loglik(part, m)
    rep = fic_aggregate([ll], partition_stats(part.Q, part.ell, m), m)
    assert rep.fic == pytest.approx(-math.log(2 * math.pi))
    assert rep.gate_penalty == 0 and rep.expert_penalty == 0


def test_entropy_contributions():
    m = ModelParams.initial(1, 1, g=0.5)
    X, y = [[0.0], [1.0]], [0.0, 0.0]
    onehot = local_loglik(make_part(X, y, [[1, 0], [0, 1]]), m)
    half = local_loglik(make_part(X, y, [[0.5, 0.5], [0.5, 0.5]]), m)
    # both experts are identical, so only the entropy differs: +log 2 per sample
    assert half - onehot == pytest.approx(2 * math.log(2))


def test_gate_penalty_of_e_squared():
    m = ModelParams.initial(1, 1)
    stats = EStats(np.array([1.0, 1.0]), np.array([math.e**2]), np.array([1.0, 1.0]))
    rep = fic_aggregate([0.0], stats, m)
    assert rep.gate_penalty == pytest.approx(1.0)


def test_fic_invariant_to_splitting_workers(rng):
    m, X, y, Q = random_setup(rng)
    whole = make_part(X, y, Q)
    ll = local_loglik(whole, m)
    one = fic_aggregate([ll], partition_stats(whole.Q, whole.ell, m), m)
    halves = [make_part(X[s], y[s], Q[s]) for s in (slice(0, 17), slice(17, None))]
    lls = [local_loglik(p, m) for p in halves]
    two = fic_aggregate(lls, estep_aggregate(partition_stats(p.Q, p.ell, m) for p in halves), m)
    assert two.fic == pytest.approx(one.fic, rel=1e-12)


def test_fic_needs_workers():
    m = ModelParams.initial(1, 1)
    with pytest.raises(ValueError):
        fic_aggregate([], EStats(np.ones(2), np.ones(1), np.ones(2)), m)


# E-step ---------------------------------------------------------------


def test_estep_symmetric_experts_split_evenly():
    m = ModelParams.initial(1, 1, g=0.5)
    part = make_part([[0.1], [0.9]], [0.3, -0.2], np.full((2, 2), 0.5))
    Q, _ = local_estep(part, m, None)
    assert np.allclose(Q, 0.5)


def test_estep_single_expert_gets_everything():
    m = one_expert_model()
    part = make_part([[0.1], [0.9]], [0.3, -0.2], [[1, 0], [1, 0]])
    stats = EStats(np.array([2.0, 0]), np.array([0.0]), np.array([5.0, 0]))
    Q, _ = local_estep(part, m, stats)
    assert np.allclose(Q[:, 0], 1.0) and np.allclose(Q[:, 1], 0.0)


def test_estep_log3_gap():
    L = np.array([[math.log(3), 0.0]])
    Q = responsibilities(L, np.ones((1, 2)), np.array([True, True]), np.zeros(2), np.zeros(2))
    assert Q[0] == pytest.approx([0.75, 0.25], abs=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_estep_rows_normalised(seed):
    rng = np.random.default_rng(seed)
    m, X, y, Q = random_setup(rng)
    part = make_part(X, y, Q)
    stats = partition_stats(Q, np.ones_like(Q), m)
    Qn, _ = local_estep(part, m, stats)
    assert np.all(Qn >= 0)
    assert np.allclose(Qn.sum(axis=1), 1.0, atol=1e-12)


def test_estep_penalties_skipped_without_previous_stats():
    m = ModelParams.initial(2, 2)
    gp, coef = estep_penalties(None, m)
    assert not gp.any() and not coef.any()


def test_estep_does_not_decrease_bound(rng):
    # with theta and penalties fixed, the E-step maximises sum q (L + pen) - q log q
    m, X, y, Q = random_setup(rng, n=60)
    part = make_part(X, y, Q)
    stats = partition_stats(Q, np.ones_like(Q), m)
    refresh_cache(part, m)
    gp, coef = estep_penalties(stats, m)

    def bound(Qm):
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(Qm > 0, Qm * np.log(Qm), 0.0)
        return float(np.sum(Qm * (part.L + gp + coef * part.ell)) - ent.sum())

    before = bound(part.Q)
    Qn, _ = local_estep(part, m, stats)
    assert bound(Qn) >= before - 1e-9


# aggregation ------------------------------------------------------------


def test_estep_aggregate_examples():
    a = EStats(np.array([1.0, 2.0]), np.array([3.0]), np.array([1.0, 1.0]))
    b = EStats(np.array([3.0, 4.0]), np.array([7.0]), np.array([2.0, 2.0]))
    s = estep_aggregate([a, b])
    assert s.Nphi.tolist() == [4.0, 6.0]
    assert estep_aggregate([b, a]).Nphi.tolist() == [4.0, 6.0]
    assert estep_aggregate([a]).Nphi.tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        estep_aggregate([a, EStats(np.ones(4), np.ones(3), np.ones(4))])


def test_estats_array_round_trip():
    s = EStats(np.array([1.0, 2.0]), np.array([3.0]), np.array([4.0, 5.0]))
    back = EStats.from_array(s.to_array(), 2)
    assert back.Nphi.tolist() == [1, 2] and back.Nbeta.tolist() == [3] and back.NphiScaled.tolist() == [4, 5]


# shrinkage --------------------------------------------------------------


def stats_of(nphi):
    nphi = np.asarray(nphi, float)
    return EStats(nphi, np.array([nphi.sum()]), nphi.copy())


def test_shrink_eliminates_small_expert():
    m = ModelParams.initial(1, 1)
    part = make_part([[0.0], [1.0]], [0, 0], [[0.3, 0.7], [0.2, 0.8]])
    eliminated, pruned, parts = shrink(stats_of([0.5, 3.5]), 1.0, m, [part])
    assert eliminated == [0]
    assert np.allclose(parts[0].Q, [[0, 1], [0, 1]])
    assert pruned.active.tolist() == [False, True]


def test_shrink_zero_threshold_is_identity():
    assert shrink_decision(stats_of([0.5, 3.5]), 0.0, ModelParams.initial(1, 1)) == []


def test_shrink_retains_largest():
    assert shrink_decision(stats_of([0.2, 0.3]), 1.0, ModelParams.initial(1, 1)) == [0]


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 12))
def test_shrink_properties(nphi, eps):
    m = ModelParams.initial(2, 1)
    low = shrink_decision(stats_of(nphi), eps, m)
    assert len(low) < 4
    assert all(nphi[j] < eps for j in low)


def test_shrink_renormalises_rows_over_survivors(rng):
    m, X, y, Q = random_setup(rng, n=30)
    part = make_part(X, y, Q)
    _, pruned, _ = shrink(stats_of([0.1, 5, 5, 5]), 1.0, m, [part])
    assert np.allclose(part.Q[:, 0], 0.0)
    assert np.allclose(part.Q.sum(axis=1), 1.0, atol=1e-12)


def test_task_kind_classification_scaling():
    m = ModelParams.initial(1, 1, TaskKind.CLASSIFICATION)
    part = make_part([[0.0]], [1.0], [[0.5, 0.5]])
    refresh_cache(part, m)
    assert np.allclose(part.ell, 0.25)
