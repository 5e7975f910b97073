"""FIC evaluation, the penalised E-step and expert shrinkage.

Every quantity is split into a per-partition part (run on a worker, touches
only that worker's rows) and a coordinator-side aggregation over small
per-worker summaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, expert_log_likelihoods, path_log_probs, prune_topology, scaling_factors

LOG_FLOOR = 1e-12


class NumericalFailure(RuntimeError):
    pass


@dataclass
class WorkerPartition:
    """One worker's slice of the data and its variational state."""

    X: np.ndarray
    y: np.ndarray
    Q: np.ndarray
    index: np.ndarray | None = None  # global sample ids
    grid: object | None = None
    L: np.ndarray | None = None
    ell: np.ndarray | None = None
    _bins: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.Q = np.asarray(self.Q, dtype=float)
        if self.index is None:
            self.index = np.arange(self.X.shape[0])

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def bins(self) -> np.ndarray:
        """(n, D) bin index of every value against the grid (cached; the grid is fixed)."""
        if self._bins is None:
            self._bins = self.grid.bin_indices(self.X)
        return self._bins


@dataclass(frozen=True)
class EStats:
    Nphi: np.ndarray
    Nbeta: np.ndarray
    NphiScaled: np.ndarray

    @property
    def total(self) -> float:
        return float(self.Nphi.sum())

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.Nphi, self.Nbeta, self.NphiScaled])

    @classmethod
    def from_array(cls, arr: np.ndarray, n_experts: int) -> "EStats":
        E = n_experts
        arr = np.asarray(arr, dtype=float)
        return cls(arr[:E].copy(), arr[E : 2 * E - 1].copy(), arr[2 * E - 1 :].copy())


@dataclass(frozen=True)
class FicReport:
    fic: float
    loglik: float
    gate_penalty: float
    expert_penalty: float


def partition_stats(Q: np.ndarray, ell: np.ndarray, model: ModelParams) -> EStats:
    Nphi = Q.sum(axis=0)
    Nbeta = model.topology.subtree_mask.astype(float) @ Nphi
    NphiScaled = (ell * Q).sum(axis=0)
    return EStats(Nphi, Nbeta, NphiScaled)


def refresh_cache(part: WorkerPartition, model: ModelParams) -> None:
    """Recompute the log path-likelihood and scaling-factor caches from ``model``."""
    L = path_log_probs(part.X, model) + expert_log_likelihoods(part.X, part.y, model)
    L[:, ~model.active] = 0.0
    part.L = L
    part.ell = scaling_factors(part.X, part.y, model)
    part.ell[:, ~model.active] = 0.0


def _entropy_terms(Q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(Q > 0, Q * np.log(np.where(Q > 0, Q, 1.0)), 0.0)


def local_loglik(part: WorkerPartition, model: ModelParams) -> float:
    """Expected complete log-likelihood plus entropy over this partition.

    Refreshes ``part.L`` and ``part.ell`` from ``model`` first.
    """
    refresh_cache(part, model)
    Q = part.Q[:, model.active]
    return float(np.sum(Q * part.L[:, model.active]) - np.sum(_entropy_terms(Q)))


def penalty_terms(stats: EStats, model: ModelParams) -> tuple[float, float]:
    topo = model.topology
    live = ~topo.passthrough
    gate_pen = float(np.sum(model.d_beta / 2 * np.log(np.maximum(stats.Nbeta[live], LOG_FLOOR))))
    card = model.cardinality.astype(float)
    use = model.active & (card > 0)
    expert_pen = float(np.sum(card[use] / 2 * np.log(np.maximum(stats.NphiScaled[use], LOG_FLOOR))))
    return gate_pen, expert_pen


def fic_aggregate(ll, stats: EStats, model: ModelParams) -> FicReport:
    ll = list(ll)
    if not ll:
        raise ValueError("fic_aggregate needs at least one worker log-likelihood")
    total = float(np.sum(ll))
    gate_pen, expert_pen = penalty_terms(stats, model)
    return FicReport(total - gate_pen - expert_pen, total, gate_pen, expert_pen)


def estep_penalties(stats_prev: EStats | None, model: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert additive gate penalty and per-expert coefficient on the scaling factor.

    The log-responsibility of expert j on sample n is shifted by
    ``gate_pen[j] + coef[j] * ell[n, j]``.
    """
    E = model.n_experts
    if stats_prev is None:
        return np.zeros(E), np.zeros(E)
    topo = model.topology
    live = ~topo.passthrough
    per_gate = np.where(live, -model.d_beta / (2 * np.maximum(stats_prev.Nbeta, LOG_FLOOR)), 0.0)
    gate_pen = topo.subtree_mask.astype(float).T @ per_gate
    coef = -model.cardinality / (2 * np.maximum(stats_prev.NphiScaled, LOG_FLOOR))
    gate_pen[~model.active] = 0.0
    coef = np.where(model.active, coef, 0.0)
    return gate_pen, coef


def responsibilities(L, ell, active, gate_pen, coef) -> np.ndarray:
    """Row-normalised softmax over active experts, computed in log space."""
    logits = L + gate_pen[None, :] + coef[None, :] * ell
    logits = np.where(active[None, :], logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    Q = np.exp(logits)
    s = Q.sum(axis=1, keepdims=True)
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise NumericalFailure("responsibility row vanished after exponentiation")
    return Q / s


def local_estep_with(part: WorkerPartition, model: ModelParams, gate_pen, coef) -> EStats:
    """E-step on one partition given already-reduced penalty vectors; updates ``part.Q``."""
    if part.L is None:
        refresh_cache(part, model)
    part.Q = responsibilities(part.L, part.ell, model.active, gate_pen, coef)
    return partition_stats(part.Q, part.ell, model)


def local_estep(part: WorkerPartition, model: ModelParams, stats_prev: EStats | None):
    """Returns ``(Q, local EStats)``; ``stats_prev=None`` skips the penalties."""
    refresh_cache(part, model)
    gate_pen, coef = estep_penalties(stats_prev, model)
    stats = local_estep_with(part, model, gate_pen, coef)
    return part.Q, stats


def estep_aggregate(locals_) -> EStats:
    locals_ = list(locals_)
    if not locals_:
        raise ValueError("no worker statistics to aggregate")
    shapes = {(s.Nphi.shape, s.Nbeta.shape, s.NphiScaled.shape) for s in locals_}
    if len(shapes) != 1:
        raise ValueError("worker statistics have mismatched dimensions")
    return EStats(
        np.sum([s.Nphi for s in locals_], axis=0),
        np.sum([s.Nbeta for s in locals_], axis=0),
        np.sum([s.NphiScaled for s in locals_], axis=0),
    )


def shrink_decision(stats: EStats, eps_shrink: float, model: ModelParams) -> list[int]:
    """Active experts whose unscaled mass falls below ``eps_shrink``.

    If that would remove every active expert, the heaviest one is kept.
    """
    if eps_shrink < 0:
        raise ValueError("eps_shrink must be >= 0")
    act = np.flatnonzero(model.active)
    low = [int(j) for j in act if stats.Nphi[j] < eps_shrink]
    if len(low) == len(act):
        keep = int(act[np.argmax(stats.Nphi[act])])
        low.remove(keep)
    return low


def renormalize(part: WorkerPartition, eliminated, survivors: np.ndarray) -> None:
    """Zero the eliminated columns and renormalise every row over ``survivors``."""
    eliminated = list(eliminated)
    if not eliminated:
        return
    Q = part.Q.copy()
    Q[:, ~survivors] = 0.0
    s = Q.sum(axis=1)
    # a row whose whole mass sat on eliminated experts falls back to uniform
    dead = s <= 0
    if dead.any():
        Q[np.ix_(dead, survivors)] = 1.0
        s = Q.sum(axis=1)
    part.Q = Q / s[:, None]


def shrink(stats: EStats, eps_shrink: float, model: ModelParams, partitions):
    eliminated = shrink_decision(stats, eps_shrink, model)
    pruned = prune_topology(model, eliminated)
    for part in partitions:
        renormalize(part, eliminated, pruned.active)
    return eliminated, pruned, partitions
