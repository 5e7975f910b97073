"""Single-process FAB-EM reference used as an oracle by the tests.

Everything here works on the full dataset at once and is written without the
package's histogram, messaging and caching machinery: path probabilities are
built by walking each expert's path, gate selection is a brute-force scan over
every (feature, threshold) pair, and the E-step is a dense softmax.  The
sparse expert search reuses ``dfab.experts.foba`` (which has its own
exhaustive-search oracle), since with one worker the vote and averaging steps
are identities.
"""

from __future__ import annotations

import numpy as np

from dfab.experts import PenalizedObjective, RegressionProblem, foba

CLAMP = 1e-6
FLOOR = 1e-12


def children(i):
    return 2 * i + 1, 2 * i + 2


def leaves_below(node, n_gates):
    if node >= n_gates:
        return [node - n_gates]
    a, b = children(node)
    return leaves_below(a, n_gates) + leaves_below(b, n_gates)


def expert_path(j, n_gates):
    """[(gate, went_left)] from the root to expert j."""
    node, out = n_gates + j, []
    while node > 0:
        parent = (node - 1) // 2
        out.append((parent, node == 2 * parent + 1))
        node = parent
    return out[::-1]


def live_gates(active, n_gates):
    live = np.zeros(n_gates, dtype=bool)
    for i in range(n_gates):
        a, b = children(i)
        live[i] = any(active[leaves_below(a, n_gates)]) and any(active[leaves_below(b, n_gates)])
    return live


class ReferenceFAB:
    def __init__(self, X, y, depth, t_max, eps, delta, seed=0, g0=0.8, d_beta=1.0):
        self.X = np.asarray(X, float)
        self.y = np.asarray(y, float)
        self.N, self.D = self.X.shape
        self.E = 2**depth
        self.G = self.E - 1
        self.eps, self.delta, self.d_beta = eps, delta, d_beta

        lo, hi = self.X.min(axis=0), self.X.max(axis=0)
        self.valid = hi > lo
        self.thr = [
            [lo[d] + k * (hi[d] - lo[d]) / t_max for k in range(1, t_max)] if self.valid[d] else []
            for d in range(self.D)
        ]

        rng = np.random.default_rng([seed, 0x9A7E])
        dims = np.flatnonzero(self.valid)
        self.gamma = rng.choice(dims, size=self.G)
        self.t = np.array([rng.choice(self.thr[d]) for d in self.gamma])
        self.g = np.full(self.G, g0)
        self.W = np.zeros((self.E, self.D))
        self.b = np.full(self.E, self.y.mean())
        self.s2 = np.ones(self.E)
        self.active = np.ones(self.E, dtype=bool)

        jit = np.random.default_rng([seed, 0x51]).uniform(0.0, 0.01, size=(self.N, self.E))
        self.Q = (1.0 + jit) / (1.0 + jit).sum(axis=1, keepdims=True)

    # model quantities -------------------------------------------------
    def log_path(self):
        live = live_gates(self.active, self.G)
        out = np.full((self.N, self.E), -np.inf)
        for j in np.flatnonzero(self.active):
            acc = np.zeros(self.N)
            for i, left in expert_path(j, self.G):
                if not live[i]:
                    continue
                p = np.where(self.X[:, self.gamma[i]] < self.t[i], self.g[i], 1 - self.g[i])
                p = np.clip(p, CLAMP, 1 - CLAMP)
                acc += np.log(p if left else 1 - p)
            out[:, j] = acc
        return out

    def log_lik(self):
        f = self.X @ self.W.T + self.b
        return -0.5 * np.log(2 * np.pi * self.s2) - (self.y[:, None] - f) ** 2 / (2 * self.s2)

    def stats(self, Q):
        live = live_gates(self.active, self.G)
        nphi = Q.sum(axis=0)
        nbeta = np.array([nphi[leaves_below(i, self.G)].sum() if live[i] else 0.0 for i in range(self.G)])
        ell = np.where(self.active, 1.0 / self.s2, 0.0)
        return nphi, nbeta, (Q * ell).sum(axis=0), live

    def fic(self):
        a = self.active
        L = self.log_path()[:, a] + self.log_lik()[:, a]
        Q = self.Q[:, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(Q > 0, Q * np.log(np.where(Q > 0, Q, 1)), 0.0)
        ll = float((Q * L).sum() - ent.sum())
        nphi, nbeta, nsc, live = self.stats(self.Q)
        gate_pen = sum(self.d_beta / 2 * np.log(max(nbeta[i], FLOOR)) for i in np.flatnonzero(live))
        card = np.count_nonzero(self.W, axis=1)
        exp_pen = sum(card[j] / 2 * np.log(max(nsc[j], FLOOR)) for j in np.flatnonzero(a) if card[j] > 0)
        return ll - gate_pen - exp_pen, (nphi, nbeta, nsc, live)

    # one iteration ----------------------------------------------------
    def estep(self, prev):
        logits = self.log_path() + self.log_lik()
        if prev is not None:
            _, nbeta, nsc, live = prev
            card = np.count_nonzero(self.W, axis=1)
            for j in np.flatnonzero(self.active):
                pen = sum(-self.d_beta / (2 * max(nbeta[i], FLOOR)) for i, _ in expert_path(j, self.G) if live[i])
                logits[:, j] += pen - card[j] / (2 * max(nsc[j], FLOOR)) / self.s2[j]
        logits[:, ~self.active] = -np.inf
        logits -= logits.max(axis=1, keepdims=True)
        Q = np.exp(logits)
        self.Q = Q / Q.sum(axis=1, keepdims=True)

    def shrink(self):
        nphi = self.Q.sum(axis=0)
        act = np.flatnonzero(self.active)
        low = [j for j in act if nphi[j] < self.eps]
        if len(low) == len(act):
            low.remove(act[np.argmax(nphi[act])])
        if low:
            self.active[low] = False
            Q = self.Q.copy()
            Q[:, ~self.active] = 0
            s = Q.sum(axis=1)
            dead = s <= 0
            Q[np.ix_(dead, self.active)] = 1.0
            self.Q = Q / Q.sum(axis=1, keepdims=True)
        return low

    def gate_mstep(self, nbeta, live):
        for i in np.flatnonzero(live):
            if nbeta[i] <= 0:
                continue
            a, b = children(i)
            mL = self.Q[:, leaves_below(a, self.G)].sum(axis=1)
            mR = self.Q[:, leaves_below(b, self.G)].sum(axis=1)
            best = None
            for d in range(self.D):
                if not self.thr[d]:
                    continue
                T = np.array(self.thr[d])
                left = self.X[:, d][:, None] < T[None, :]
                g = (mL @ left + mR @ ~left) / nbeta[i]
                g = np.clip(g, CLAMP, 1 - CLAMP)
                xi = nbeta[i] * (g * np.log(g) + (1 - g) * np.log(1 - g))
                for k in range(len(T)):  # strict '>' keeps the earliest (feature, threshold)
                    if best is None or xi[k] > best[0]:
                        best = (xi[k], d, T[k], g[k])
            if best is not None:
                _, self.gamma[i], self.t[i], self.g[i] = best

    def expert_mstep(self, nsc):
        for j in np.flatnonzero(self.active):
            q = self.Q[:, j]
            if q.sum() <= 0:
                continue
            fit = foba(RegressionProblem(self.X, self.y, q), PenalizedObjective(1, float(nsc[j])))
            self.W[j], self.b[j], self.s2[j] = fit.weights, fit.intercept, fit.sigma2

    def run(self, max_iters):
        traj, prev_fic = [], None
        for it in range(1, max_iters + 1):
            fic, st = self.fic()
            traj.append(fic)
            if prev_fic is not None and abs(fic - prev_fic) < self.delta * abs(prev_fic):
                break
            prev_fic = fic
            self.estep(None if it == 1 else st)
            self.shrink()
            _, nbeta, nsc, live = self.stats(self.Q)
            self.gate_mstep(nbeta, live)
            self.expert_mstep(nsc)
        return traj
