"""Pure-Python (numpy) reference implementation of the feature kernels.

Mirrors ``_ckernels.pyx`` operation for operation; used when the compiled
extension is unavailable or ``BAILOUT_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np
from scipy.special import erfc

_SQRT1_2 = math.sqrt(0.5)


def _pd(W, E, mu, sigma, floor):
    out = np.ones(W.shape)
    live = E > 0
    full = live & (E >= W)
    mid = live & ~full
    if mid.any():
        s = sigma[mid]
        d = (np.log(W[mid] / (W[mid] - E[mid])) + mu[mid] - 0.5 * s * s) / s
        out[mid] = np.minimum(np.maximum(0.5 * erfc(d * _SQRT1_2), floor[mid]), 1.0)
    out[full] = floor[full]
    return out


class _Node:
    __slots__ = ("W", "E", "J", "alive", "mu", "sigma", "floor", "alpha", "lgd", "w", "gamma")

    def __init__(self, W, E, J, alive, mu, sigma, floor, alpha, lgd, w, gamma):
        self.W, self.E, self.J, self.alive = W, E, J, alive
        self.mu, self.sigma, self.floor = mu, sigma, floor
        self.alpha, self.lgd, self.w, self.gamma = alpha, lgd, w, gamma

    def advance(self, I, Jc, S, dJ):
        """One offset of the recursion; returns (Jc_k, z_k, I_{k+1}, S_k)."""
        Jn = Jc + dJ
        Wk = self.W + Jn - I
        Ek = self.E + Jn - I
        pd = np.where(self.alive, _pd(Wk, Ek, self.mu, self.sigma, self.floor), 0.0)
        loss = self.alpha * Wk + (self.J + Jn) * self.lgd
        z = pd * loss * S
        I_next = I + self.w @ (pd * S)
        return Jn, z, I_next, S * (1.0 - pd)

    def suffix_loss(self, I, Jc, S, dJ, j, m):
        total = 0.0
        g = self.gamma ** (j - 1)
        zero = np.zeros_like(dJ)
        for k in range(j, m + 1):
            Jc, z, I, S = self.advance(I, Jc, S, dJ if k == j else zero)
            total += g * z.sum()
            g *= self.gamma
        return total


def _candidates(Wp, risky, levels, mode):
    """Yield (scope, node, level index, dJ) in enumeration order."""
    n = len(Wp)
    yield 0, -1, -1, np.zeros(n)
    idx = np.flatnonzero(risky)
    if len(idx) == 0:
        return
    if mode == 0:
        for i in idx:
            for li, lv in enumerate(levels):
                dJ = np.zeros(n)
                dJ[i] = lv * Wp[i]
                yield 1, int(i), li, dJ
        if len(idx) == 1:
            return
    for li, lv in enumerate(levels):
        dJ = np.where(risky, lv * Wp, 0.0)
        yield 2, -1, li, dJ


def _greedy_one(node, m, levels, threshold, mode):
    n = len(node.W)
    I = np.zeros(n)
    Jc = np.zeros(n)
    S = np.ones(n)
    Z = np.zeros((n, m))
    dJ_seq = np.zeros((m, n))
    choice = np.full((m, 3), -1, dtype=np.int64)
    g = 1.0
    for j in range(1, m + 1):
        Wp = node.W + Jc - I
        Ep = node.E + Jc - I
        pdp = _pd(Wp, Ep, node.mu, node.sigma, node.floor)
        risky = node.alive & (Ep > 0) & (pdp > threshold)
        best = None
        for scope, i, li, dJ in _candidates(Wp, risky, levels, mode):
            if best is None and scope == 0 and not risky.any():
                best = (0.0, 0.0, scope, i, li, dJ)
                break
            tl = node.suffix_loss(I, Jc, S, dJ, j, m)
            tot = dJ.sum()
            if best is None:
                best = (tl, tot, scope, i, li, dJ)
                continue
            tol = 1e-12 + 1e-10 * abs(best[0])
            if tl < best[0] - tol or (abs(tl - best[0]) <= tol and tot < best[1] - 1e-12):
                best = (tl, tot, scope, i, li, dJ)
        _, _, scope, i, li, dJ = best
        Jc, z, I, S = node.advance(I, Jc, S, dJ)
        Z[:, j - 1] = g * z
        dJ_seq[j - 1] = dJ
        choice[j - 1] = (scope, i, li)
        g *= node.gamma
    return Z, dJ_seq, choice


def greedy_zbar_batch(W, E, J, alive, mu, sigma, floor, alpha, lgd, w, gamma,
                      m, levels, threshold, mode):
    """Greedy action sequence and its Z matrix for a batch of states.

    ``W, E, J, alive`` have shape (P, n); the remaining node parameters are
    shared. Returns ``Z`` (P, n, m), injections (P, m, n) and the chosen
    candidate descriptors (P, m, 3) as (scope, node, level index).
    """
    W = np.asarray(W, float)
    P, n = W.shape
    E = np.asarray(E, float)
    J = np.asarray(J, float)
    alive = np.asarray(alive, bool)
    mu, sigma, floor = (np.asarray(a, float) for a in (mu, sigma, floor))
    alpha, lgd, w = (np.asarray(a, float) for a in (alpha, lgd, w))
    levels = np.asarray(levels, float)
    Z = np.zeros((P, n, m))
    dJ = np.zeros((P, m, n))
    choice = np.zeros((P, m, 3), dtype=np.int64)
    for p in range(P):
        node = _Node(W[p], E[p], J[p], alive[p], mu, sigma, floor, alpha, lgd, w, gamma)
        Z[p], dJ[p], choice[p] = _greedy_one(node, m, levels, threshold, mode)
    return Z, dJ, choice


def z_path(W, E, J, alive, mu, sigma, floor, alpha, lgd, w, gamma, dJ_seq):
    """Z matrix (n, m) for one state and an explicit injection sequence (m, n)."""
    dJ_seq = np.asarray(dJ_seq, float)
    m, n = dJ_seq.shape
    node = _Node(np.asarray(W, float), np.asarray(E, float), np.asarray(J, float),
                 np.asarray(alive, bool), np.asarray(mu, float), np.asarray(sigma, float),
                 np.asarray(floor, float), np.asarray(alpha, float), np.asarray(lgd, float),
                 np.asarray(w, float), gamma)
    I = np.zeros(n)
    Jc = np.zeros(n)
    S = np.ones(n)
    Z = np.zeros((n, m))
    g = 1.0
    for k in range(m):
        Jc, z, I, S = node.advance(I, Jc, S, dJ_seq[k])
        Z[:, k] = g * z
        g *= gamma
    return Z
