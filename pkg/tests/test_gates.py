import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfab.gates import (
    GateStats,
    SplitGrid,
    build_split_grid,
    gate_score,
    local_gate_stats,
    local_gate_stats_all,
    local_minmax,
    select_gate,
)
from dfab.model import GateParams, ModelParams, TreeTopology
from dfab.objective import WorkerPartition


def part_with(X, Q, grid):
    p = WorkerPartition(np.asarray(X, float), np.zeros(len(X)), np.asarray(Q, float))
    p.grid = grid
    return p


def test_local_minmax_examples():
    lo, hi = local_minmax(np.array([[0.3, 2.0]]))
    assert lo.tolist() == [0.3, 2.0] and hi.tolist() == [0.3, 2.0]
    lo, hi = local_minmax(np.array([[0.1], [0.9]]))
    assert (lo[0], hi[0]) == (0.1, 0.9)
    lo, hi = local_minmax(np.array([[1.0], [1.0]]))
    assert lo[0] == hi[0]
    with pytest.raises(ValueError):
        local_minmax(np.zeros((0, 2)))


def test_grid_equal_width_edges():
    grid = build_split_grid([[0.0]], [[1.0]], 4)
    assert grid.candidates(0).tolist() == [0.25, 0.5, 0.75]


def test_grid_degenerate_dimension():
    grid = build_split_grid([[2.0, 0.0]], [[2.0, 1.0]], 4)
    assert grid.candidates(0).size == 0
    assert grid.valid.tolist() == [False, True]


def test_grid_reduces_over_workers():
    grid = build_split_grid([[0.0], [0.5]], [[0.5], [1.0]], 2)
    assert grid.xmin[0] == 0.0 and grid.xmax[0] == 1.0


def test_grid_array_round_trip():
    grid = build_split_grid([[0.0, 3.0]], [[1.0, 3.0]], 5)
    back = SplitGrid.from_array(grid.to_array(), 2, 5)
    assert back.valid.tolist() == [True, False]
    assert np.array_equal(back.thresholds[0], grid.thresholds[0])


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.integers(2, 40))
def test_grid_thresholds_strictly_inside(values, t_max):
    x = np.array(values)
    grid = build_split_grid([[x.min()]], [[x.max()]], t_max)
    c = grid.candidates(0)
    if x.min() == x.max():
        assert c.size == 0
    else:
        assert np.all(np.diff(c) > 0) or c.size == 1
        assert np.all(c > x.min()) and np.all(c <= x.max())


def one_gate_stats(x, left_mass, right_mass, t_max=4):
    grid = build_split_grid([[0.0]], [[1.0]], t_max)
    Q = np.column_stack([left_mass, right_mass])
    return local_gate_stats(part_with(np.reshape(x, (-1, 1)), Q, grid), 0, TreeTopology(1)), grid


def test_single_sample_below_all_thresholds():
    s, _ = one_gate_stats([0.1], [1.0], [0.0])
    assert s.rho_left[0].tolist() == [1, 1, 1] and s.rho_right[0].tolist() == [0, 0, 0]


def test_sample_on_threshold_counts_right():
    s, _ = one_gate_stats([0.5], [0.0], [1.0])
    # thresholds 0.25, 0.5, 0.75: x >= t holds for the first two
    assert s.rho_right[0].tolist() == [1, 1, 0]
    s, _ = one_gate_stats([0.5], [1.0], [0.0])
    assert s.rho_left[0].tolist() == [0, 0, 1]


def test_four_sample_example():
    s, _ = one_gate_stats([0.1, 0.3, 0.6, 0.9], [0.5] * 4, [0.5] * 4)
    assert np.allclose(s.rho_left[0], [0.5, 1.0, 1.5])
    assert np.allclose(s.rho_right[0], [1.5, 1.0, 0.5])


def naive_rho(X, mL, mR, grid):
    D, T1 = grid.thresholds.shape
    rl, rr = np.zeros((D, T1)), np.zeros((D, T1))
    for d in range(D):
        if not grid.valid[d]:
            continue
        for k, t in enumerate(grid.thresholds[d]):
            for n in range(X.shape[0]):
                if X[n, d] < t:
                    rl[d, k] += mL[n]
                else:
                    rr[d, k] += mR[n]
    return rl, rr


@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 5), st.integers(2, 9))
def test_histogram_matches_double_loop(seed, depth, D, t_max):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    X = rng.integers(0, 6, size=(n, D)) / 5.0  # repeated values and exact threshold hits
    E = 2**depth
    active = rng.random(E) < 0.7
    active[0] = True
    Q = rng.random((n, E)) * active
    Q /= Q.sum(axis=1, keepdims=True)
    topo = TreeTopology(depth, active)
    grid = build_split_grid([X.min(axis=0)], [X.max(axis=0)], t_max)
    stats = local_gate_stats_all(part_with(X, Q, grid), topo)
    for i in range(2**depth - 1):
        mL = Q @ topo.left_mask[i].astype(float)
        mR = Q @ topo.right_mask[i].astype(float)
        rl, rr = naive_rho(X, mL, mR, grid)
        assert np.allclose(stats[i].rho_left, rl, atol=1e-10)
        assert np.allclose(stats[i].rho_right, rr, atol=1e-10)
        nb = Q[:, topo.subtree_mask[i]].sum()
        assert np.all(stats[i].rho_left + stats[i].rho_right <= nb + 1e-9)


def test_histogram_on_large_sample_vs_double_loop():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(1000, 5))
    Q = rng.dirichlet(np.ones(4), size=1000)
    topo = TreeTopology(2)
    grid = build_split_grid([X.min(axis=0)], [X.max(axis=0)], 8)
    stats = local_gate_stats_all(part_with(X, Q, grid), topo)
    mL, mR = Q @ topo.left_mask[1].astype(float), Q @ topo.right_mask[1].astype(float)
    rl, rr = naive_rho(X, mL, mR, grid)
    assert np.max(np.abs(stats[1].rho_left - rl)) <= 1e-10


# scoring / selection ---------------------------------------------------


def test_gate_score_minimum_at_half():
    assert gate_score(0.5, 10.0) == pytest.approx(-10 * math.log(2))
    assert gate_score(1.0, 10.0) > gate_score(0.9, 10.0) > gate_score(0.5, 10.0)


def test_select_consistent_split():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(50, 2))
    left = X[:, 0] < 0.5
    Q = np.column_stack([left, ~left]).astype(float)
    grid = build_split_grid([[0.0, 0.0]], [[1.0, 1.0]], 4)
    stats = local_gate_stats(part_with(X, Q, grid), 0, TreeTopology(1))
    sel = select_gate(stats, 50.0, grid)
    assert (sel.gamma, sel.threshold) == (0, 0.5)
    assert sel.g == pytest.approx(1 - 1e-6)


def test_select_uniform_tie_break():
    X = np.random.default_rng(1).uniform(size=(20, 3))
    Q = np.full((20, 2), 0.5)
    grid = build_split_grid([[0.0] * 3], [[1.0] * 3], 4)
    stats = local_gate_stats(part_with(X, Q, grid), 0, TreeTopology(1))
    sel = select_gate(stats, 20.0, grid)
    assert (sel.gamma, sel.threshold) == (0, 0.25)


def test_select_with_swapped_worker_halves():
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(40, 3))
    Q = rng.dirichlet([1, 1], size=40)
    grid = build_split_grid([[0.0] * 3], [[1.0] * 3], 6)
    topo = TreeTopology(1)
    whole = local_gate_stats(part_with(X, Q, grid), 0, topo)
    a = local_gate_stats(part_with(X[:20], Q[:20], grid), 0, topo)
    b = local_gate_stats(part_with(X[20:], Q[20:], grid), 0, topo)
    assert select_gate([b, a], 40.0, grid) == select_gate(whole, 40.0, grid)


def test_select_keeps_previous_without_candidates():
    grid = build_split_grid([[1.0]], [[1.0]], 4)
    prev = GateParams(0, 0.3, 0.8)
    stats = GateStats(np.zeros((1, 3)), np.zeros((1, 3)))
    assert select_gate(stats, 5.0, grid, prev) is prev


def test_swapped_score_variant_differs():
    assert gate_score(0.9, 1.0, swapped=True) != gate_score(0.9, 1.0)


def test_apply_gates():
    from dfab.gates import apply_gates

    m = ModelParams.initial(1, 2)
    out = apply_gates(m, {0: GateParams(1, 0.7, 0.9)})
    assert (out.gamma[0], out.threshold[0], out.g[0]) == (1, 0.7, 0.9)
