"""L0-sparse expert fitting: weighted fits, FoBa selection, voting and averaging.

Regression problems are reduced once to q-weighted centred second moments, so
every candidate support is scored with a (|S| x |S|) solve instead of a data
pass.  Logistic problems need the data and use damped Newton steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import ExpertParams, TaskKind

log = logging.getLogger(__name__)

RIDGE = 1e-8
SIGMA2_FLOOR = 1e-6
WEIGHT_CAP = 30.0
GAIN_TOL = 1e-10
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class PenalizedObjective:
    """Per-feature L0 price of the distributed FIC expert objective."""

    n_workers: int
    nphi_scaled: float

    @property
    def per_feature(self) -> float:
        return (self.n_workers - 1) + 0.5 * math.log(max(self.nphi_scaled, LOG_FLOOR))

    def value(self, loglik: float, size: int) -> float:
        return self.n_workers * loglik - (size * self.per_feature if size else 0.0)


@dataclass(frozen=True)
class Fit:
    weights: np.ndarray  # length D, zero outside the support
    intercept: float
    sigma2: float
    loglik: float
    converged: bool = True

    def params(self) -> ExpertParams:
        return ExpertParams(self.weights.copy(), float(self.intercept), float(self.sigma2))


class RegressionProblem:
    """q-weighted Gaussian linear fit over any feature subset (plus intercept)."""

    def __init__(self, X, y, q):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).reshape(-1)
        q = np.asarray(q, dtype=float).reshape(-1)
        self.n_features = X.shape[1]
        self.n_samples = int(np.count_nonzero(q > 0))
        self.mass = float(q.sum())
        if self.mass <= 0:
            raise ZeroDivisionError("no responsibility mass")
        self.xbar = q @ X / self.mass
        self.ybar = float(q @ y / self.mass)
        sq = np.sqrt(q)
        A = (X - self.xbar) * sq[:, None]
        r = (y - self.ybar) * sq
        self.Sxx = A.T @ A
        self.Sxy = A.T @ r
        self.Syy = float(r @ r)
        self._cache: dict[tuple, Fit] = {}

    def fit(self, support) -> Fit:
        key = tuple(sorted(map(int, support)))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        w = np.zeros(self.n_features)
        rss = self.Syy
        if key:
            idx = np.array(key)
            S = self.Sxx[idx[:, None], idx]
            C = S.copy()
            C.flat[:: len(idx) + 1] += RIDGE
            c = self.Sxy[idx]
            ws = np.linalg.solve(C, c)
            rss = self.Syy - 2 * ws @ c + ws @ S @ ws
            w[idx] = ws
        rss = max(rss, 0.0)
        sigma2 = max(rss / self.mass, SIGMA2_FLOOR)
        b = self.ybar - float(w @ self.xbar)
        ll = -0.5 * self.mass * math.log(2 * math.pi * sigma2) - rss / (2 * sigma2)
        out = Fit(w, b, sigma2, ll)
        self._cache[key] = out
        return out

    def screen(self, fit: Fit, candidates) -> list[int]:
        return list(candidates)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


class LogisticProblem:
    """q-weighted logistic fit over a feature subset (plus intercept), labels in {-1, +1}."""

    max_iter = 100
    tol = 1e-8
    n_screen = 5

    def __init__(self, X, y, q):
        q = np.asarray(q, dtype=float).reshape(-1)
        keep = q > 0
        self.X = np.asarray(X, dtype=float)[keep]
        self.y = np.asarray(y, dtype=float).reshape(-1)[keep]
        self.q = q[keep]
        self.n_features = self.X.shape[1]
        self.n_samples = int(keep.sum())
        self.mass = float(self.q.sum())
        if self.mass <= 0:
            raise ZeroDivisionError("no responsibility mass")
        self._cache: dict[tuple, Fit] = {}

    def _design(self, idx):
        return np.column_stack([np.ones(self.X.shape[0]), self.X[:, idx]])

    def objective(self, beta, Z) -> float:
        return float(self.q @ _log_sigmoid(self.y * (Z @ beta)))

    def gradient(self, beta, Z) -> np.ndarray:
        m = self.y * (Z @ beta)
        return Z.T @ (self.q * self.y * np.exp(_log_sigmoid(-m)))

    def newton(self, Z, beta0=None):
        k = Z.shape[1]
        beta = np.zeros(k) if beta0 is None else beta0.copy()
        f = self.objective(beta, Z)
        converged = False
        for _ in range(self.max_iter):
            m = self.y * (Z @ beta)
            s = np.exp(_log_sigmoid(-m))  # 1 - sigma(m)
            grad = Z.T @ (self.q * self.y * s)
            if np.linalg.norm(grad) <= self.tol:
                converged = True
                break
            h = self.q * s * (1 - s)
            H = (Z * h[:, None]).T @ Z + RIDGE * np.eye(k)
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                step = grad / max(np.abs(np.diag(H)).max(), 1.0)
            t = 1.0
            while t > 1e-10:
                cand = beta + t * step
                cand[1:] = np.clip(cand[1:], -WEIGHT_CAP, WEIGHT_CAP)
                fc = self.objective(cand, Z)
                if fc >= f:
                    break
                t *= 0.5
            else:
                break
            moved = np.max(np.abs(cand - beta))
            beta, f = cand, fc
            if moved == 0.0:
                break
        return beta, f, converged

    def fit(self, support) -> Fit:
        key = tuple(sorted(int(d) for d in support))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        idx = np.array(key, dtype=np.int64)
        beta, f, ok = self.newton(self._design(idx))
        if not ok:
            log.debug("logistic fit on %d features stopped without meeting tolerance", len(idx))
        w = np.zeros(self.n_features)
        w[idx] = beta[1:]
        out = Fit(w, float(beta[0]), 1.0, f, ok)
        self._cache[key] = out
        return out

    def screen(self, fit: Fit, candidates) -> list[int]:
        """Inactive features with the largest |gradient| at the current fit."""
        candidates = list(candidates)
        if len(candidates) <= self.n_screen:
            return candidates
        f = self.X @ fit.weights + fit.intercept
        m = self.y * f
        r = self.q * self.y * np.exp(_log_sigmoid(-m))
        g = np.abs(self.X[:, candidates].T @ r)
        order = np.argsort(-g, kind="stable")[: self.n_screen]
        return [candidates[i] for i in sorted(order)]


def make_problem(X, y, q, task: TaskKind | str):
    if TaskKind(task) is TaskKind.REGRESSION:
        return RegressionProblem(X, y, q)
    return LogisticProblem(X, y, q)


def _column(part, j, q):
    return part.Q[:, j] if q is None else np.asarray(q, dtype=float)


def weighted_ls_fit(part, j: int, features, q=None) -> ExpertParams | None:
    """Weighted least squares on ``features``; ``None`` means the worker abstains."""
    q = _column(part, j, q)
    if q.sum() <= 0:
        return None
    return RegressionProblem(part.X, part.y, q).fit(features).params()


def weighted_logistic_fit(part, j: int, features, q=None) -> ExpertParams | None:
    q = _column(part, j, q)
    if q.sum() <= 0:
        return None
    fit = LogisticProblem(part.X, part.y, q).fit(features)
    return fit.params()


def foba(problem, objective: PenalizedObjective, max_features: int | None = None) -> Fit:
    """Forward-backward greedy maximisation of the penalised log-likelihood."""
    D = problem.n_features
    limit = min(D, max(problem.n_samples - 1, 0))
    if max_features is not None:
        limit = min(limit, max_features)

    def J(s):
        return objective.value(problem.fit(s).loglik, len(s))

    support: set[int] = set()
    current = J(support)
    for _ in range(4 * D + 4):
        if len(support) >= limit:
            break
        inactive = [d for d in range(D) if d not in support]
        best_d, best_val = None, -math.inf
        for d in problem.screen(problem.fit(support), inactive):
            val = J(support | {d})
            if val > best_val:
                best_d, best_val = d, val
        gain = best_val - current
        if best_d is None or not gain > GAIN_TOL:
            break
        support.add(best_d)
        current = best_val
        while len(support) > 1:
            drops = {d: current - J(support - {d}) for d in sorted(support)}
            d_min = min(drops, key=lambda d: (drops[d], d))
            if drops[d_min] >= gain / 2:
                break
            support.discard(d_min)
            current -= drops[d_min]
    return problem.fit(support)


def foba_select(part, j: int, penalty: PenalizedObjective, task=TaskKind.REGRESSION, q=None, problem=None):
    """Candidate sparse expert for this worker, or ``None`` to abstain."""
    q = _column(part, j, q)
    if problem is None:
        if q.sum() <= 0:
            return None
        problem = make_problem(part.X, part.y, q, task)
    return foba(problem, penalty).params()


def support_of(params: ExpertParams | None, n_features: int) -> np.ndarray:
    if params is None:
        return np.zeros(n_features, dtype=bool)
    return params.weights != 0


def majority_vote(supports, n_workers: int) -> np.ndarray:
    """Boolean feature mask selected by at least half of all workers."""
    supports = np.atleast_2d(np.asarray(supports, dtype=bool))
    counts = supports.sum(axis=0)
    return counts >= n_workers / 2


def average_weights(fits) -> ExpertParams | None:
    """Mean of the contributing workers' fits; ``None`` when every worker abstained."""
    fits = [f for f in fits if f is not None]
    if not fits:
        return None
    return ExpertParams(
        np.mean([f.weights for f in fits], axis=0),
        float(np.mean([f.intercept for f in fits])),
        float(np.mean([f.sigma2 for f in fits])),
    )
