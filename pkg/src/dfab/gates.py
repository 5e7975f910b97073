"""Shared split grid and histogram-based Bernoulli gate optimisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PROB_CLAMP, GateParams, ModelParams, TreeTopology


@dataclass(frozen=True)
class SplitGrid:
    """Equal-width interior bin edges per dimension.

    ``thresholds`` is (D, T_max - 1); rows of degenerate dimensions are NaN
    and ``valid`` marks the usable rows.
    """

    t_max: int
    xmin: np.ndarray
    xmax: np.ndarray
    thresholds: np.ndarray
    valid: np.ndarray

    @property
    def n_features(self) -> int:
        return self.xmin.shape[0]

    def candidates(self, d: int) -> np.ndarray:
        return self.thresholds[d] if self.valid[d] else np.empty(0)

    def bin_indices(self, X: np.ndarray) -> np.ndarray:
        """(n, D) number of thresholds <= x for every value; 0 for degenerate dimensions."""
        X = np.atleast_2d(X)
        out = np.zeros(X.shape, dtype=np.int64)
        for d in np.flatnonzero(self.valid):
            out[:, d] = np.searchsorted(self.thresholds[d], X[:, d], side="right")
        return out

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.xmin, self.xmax, self.thresholds.ravel()])

    @classmethod
    def from_array(cls, arr, n_features: int, t_max: int) -> "SplitGrid":
        arr = np.asarray(arr, dtype=float)
        D = n_features
        thr = arr[2 * D :].reshape(D, t_max - 1)
        return cls(t_max, arr[:D].copy(), arr[D : 2 * D].copy(), thr.copy(), ~np.isnan(thr[:, 0]))


@dataclass(frozen=True)
class GateStats:
    """Left/right consistent-routing masses, each (D, T_max - 1)."""

    rho_left: np.ndarray
    rho_right: np.ndarray

    def __add__(self, other: "GateStats") -> "GateStats":
        return GateStats(self.rho_left + other.rho_left, self.rho_right + other.rho_right)


def local_minmax(part) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(part.X if hasattr(part, "X") else part)
    if X.shape[0] == 0:
        raise ValueError("empty partition")
    return X.min(axis=0), X.max(axis=0)


def build_split_grid(mins, maxes, t_max: int) -> SplitGrid:
    if t_max < 2:
        raise ValueError("t_max must be >= 2")
    mins = np.atleast_2d(np.asarray(mins, dtype=float))
    maxes = np.atleast_2d(np.asarray(maxes, dtype=float))
    if mins.shape[0] == 0:
        raise ValueError("no worker reported a range")
    lo = mins.min(axis=0)
    hi = maxes.max(axis=0)
    k = np.arange(1, t_max)
    thr = lo[:, None] + k[None, :] * (hi - lo)[:, None] / t_max
    valid = hi > lo
    thr[~valid] = np.nan
    return SplitGrid(t_max, lo, hi, thr, valid)


def branch_masses(Q: np.ndarray, topology: TreeTopology) -> tuple[np.ndarray, np.ndarray]:
    """(n, G) responsibility mass of every gate's left and right subtree."""
    return Q @ topology.left_mask.T.astype(float), Q @ topology.right_mask.T.astype(float)


def _histogram_rho(bins_d, m_left, m_right, n_thr):
    """Prefix/suffix sums of per-bin masses; ``m_left``/``m_right`` may be (n,) or (n, k)."""
    n_bins = n_thr + 1
    M = np.concatenate([np.atleast_2d(m_left.T).T, np.atleast_2d(m_right.T).T], axis=1)
    k = M.shape[1]
    flat = (bins_d[:, None] * k + np.arange(k)).ravel()
    H = np.bincount(flat, weights=M.ravel(), minlength=n_bins * k).reshape(n_bins, k)
    half = k // 2
    # x < t_k  <=>  bin <= k
    rho_l = np.cumsum(H[:, :half], axis=0)[:n_thr]
    rho_r = np.cumsum(H[::-1, half:], axis=0)[::-1][1:]
    if np.ndim(m_left) == 1:
        return rho_l[:, 0], rho_r[:, 0]
    return rho_l, rho_r


def local_gate_stats_all(part, topology: TreeTopology) -> list[GateStats]:
    """Histogram statistics for every gate in one pass over the partition."""
    grid: SplitGrid = part.grid
    n_thr = grid.t_max - 1
    D = grid.n_features
    G = topology.n_gates
    out = [GateStats(np.zeros((D, n_thr)), np.zeros((D, n_thr))) for _ in range(G)]
    live = np.flatnonzero(~topology.passthrough)
    if live.size == 0:
        return out
    mL, mR = branch_masses(part.Q, topology)
    mL, mR = mL[:, live], mR[:, live]
    bins = part.bins()
    for d in np.flatnonzero(grid.valid):
        rl, rr = _histogram_rho(bins[:, d], mL, mR, n_thr)
        for k, i in enumerate(live):
            out[i].rho_left[d] = rl[:, k]
            out[i].rho_right[d] = rr[:, k]
    return out


def local_gate_stats(part, i: int, topology: TreeTopology) -> GateStats:
    return local_gate_stats_all(part, topology)[i]


def gate_score(g, n_beta: float, swapped: bool = False):
    g = np.clip(g, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if swapped:
        return n_beta * (g * np.log1p(-g) + (1 - g) * np.log(g))
    return n_beta * (g * np.log(g) + (1 - g) * np.log1p(-g))


def select_gate(stats, n_beta: float, grid: SplitGrid, previous: GateParams | None = None, *, swapped: bool = False):
    """Best (feature, threshold) by the optimised gate log-likelihood.

    ``stats`` is one GateStats or a list of per-worker GateStats.  Ties go to
    the lower feature index, then the lower threshold.  Returns ``previous``
    when the grid has no candidates.
    """
    if not isinstance(stats, GateStats):
        stats = list(stats)
        total = stats[0]
        for s in stats[1:]:
            total = total + s
        stats = total
    if not grid.valid.any():
        return previous
    if n_beta <= 0:
        raise ValueError("gate has no responsibility mass")
    g = (stats.rho_left + stats.rho_right) / n_beta
    xi = gate_score(g, n_beta, swapped)
    xi = np.where(grid.valid[:, None], xi, -np.inf)
    flat = int(np.argmax(xi))  # first maximum in row-major order = lowest (gamma, t)
    d, k = divmod(flat, xi.shape[1])
    d_beta = previous.d_beta if previous is not None else 1.0
    return GateParams(int(d), float(grid.thresholds[d, k]), float(np.clip(g[d, k], PROB_CLAMP, 1 - PROB_CLAMP)), d_beta)


def apply_gates(model: ModelParams, gates: dict[int, GateParams]) -> ModelParams:
    gamma, thr, gv = model.gamma.copy(), model.threshold.copy(), model.g.copy()
    for i, p in gates.items():
        gamma[i], thr[i], gv[i] = p.gamma, p.threshold, p.g
    return model.copy(gamma=gamma, threshold=thr, g=gv)
