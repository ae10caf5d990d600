"""Exact backward induction over every reachable state of a tiny network.

Transition probabilities are exact Gaussian rectangle probabilities, so the
solver is restricted to at most three alive nodes and a horizon of five.
It exists to validate the fitted value iteration solver.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .copula import EXACT_MAX_DIM, default_thresholds, stream
from .fvi import argmax_action
from .mdp import MdpConfig, MdpState, enumerate_actions, invest, transition_outcomes

MAX_HORIZON = 5


class SizeLimitError(ValueError):
    pass


@dataclass
class StateEntry:
    state: MdpState
    actions: tuple
    q: np.ndarray
    best: int
    # per action: list of (prob, defaults, reward, successor key)
    outcomes: list = field(default_factory=list)

    @property
    def value(self) -> float:
        return float(self.q[self.best]) if len(self.q) else 0.0


@dataclass
class ExactSolution:
    root: tuple
    entries: dict
    gamma: float
    horizon: int

    @property
    def n_states(self) -> int:
        return len(self.entries)

    @property
    def v0(self) -> float:
        return self.entries[self.root].value

    def entry(self, s: MdpState) -> StateEntry:
        return self.entries[s.key()]

    def value(self, s: MdpState) -> float:
        if s.t >= s.horizon:
            return 0.0
        return self.entry(s).value

    def q_table(self, s: MdpState | None = None) -> dict:
        e = self.entries[self.root] if s is None else self.entry(s)
        return {a.label: float(q) for a, q in zip(e.actions, e.q)}

    def policy(self, s: MdpState):
        e = self.entry(s)
        return e.actions[e.best]

    def write_csv(self, path):
        """One row per (state, action): t, defaulted ids, W, E, J, action, Q, best, V."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "defaulted", "W", "E", "J", "action", "q", "best", "value"])
            rows = []
            for e in self.entries.values():
                s = e.state
                net = s.network
                for i, a in enumerate(e.actions):
                    rows.append([
                        s.t,
                        " ".join(str(j + 1) for j in sorted(s.defaulted)),
                        " ".join(repr(float(x)) for x in net.W),
                        " ".join(repr(float(x)) for x in net.E),
                        " ".join(repr(float(x)) for x in net.J),
                        a.label, repr(float(e.q[i])), int(i == e.best), repr(e.value),
                    ])
            rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
            w.writerows(rows)


def solve_exact(s0: MdpState, cfg: MdpConfig) -> ExactSolution:
    """V* and Q* on every state reachable from ``s0`` under every action path."""
    if len(s0.alive_idx) > EXACT_MAX_DIM:
        raise SizeLimitError(f"exact solution limited to {EXACT_MAX_DIM} alive nodes")
    if s0.horizon > MAX_HORIZON:
        raise SizeLimitError(f"exact solution limited to horizon {MAX_HORIZON}")
    entries: dict = {}
    gamma = cfg.gamma

    def solve(s: MdpState) -> float:
        if s.t >= s.horizon:
            return 0.0
        key = s.key()
        hit = entries.get(key)
        if hit is not None:
            return hit.value
        actions = tuple(enumerate_actions(s, cfg))
        q = np.empty(len(actions))
        outs = []
        for k, a in enumerate(actions):
            total = 0.0
            rec = []
            for p, D, r, nxt in transition_outcomes(s, a):
                v = solve(nxt)
                total += p * (r + gamma * v)
                rec.append((p, D, r, nxt.key() if nxt.t < nxt.horizon else None))
            q[k] = total
            outs.append(rec)
        e = StateEntry(s, actions, q, argmax_action(q, actions), outs)
        entries[key] = e
        return e.value

    solve(s0)
    return ExactSolution(s0.key(), entries, gamma, s0.horizon)


def simulate_policy(sol: ExactSolution, n_episodes: int, seed: int = 0,
                    chunk: int = 1_000_000):
    """Mean discounted reward (and its standard error) of the oracle policy.

    Episodes are simulated in vectorised chunks: episodes sitting in the same
    state share one action and draw their latent vectors together.
    """
    total = 0.0
    total_sq = 0.0
    done = 0
    c = 0
    while done < n_episodes:
        n = min(chunk, n_episodes - done)
        rng = stream(seed, 21, c)
        cr = _simulate_chunk(sol, n, rng)
        total += float(cr.sum())
        total_sq += float(np.dot(cr, cr))
        done += n
        c += 1
    mean = total / n_episodes
    var = max(total_sq / n_episodes - mean * mean, 0.0) * n_episodes / max(n_episodes - 1, 1)
    return mean, math.sqrt(var / n_episodes)


def _simulate_chunk(sol: ExactSolution, n: int, rng: np.random.Generator) -> np.ndarray:
    keys = [sol.root]
    where = np.zeros(n, dtype=np.int64)
    cr = np.zeros(n)
    disc = 1.0
    for _ in range(sol.horizon - sol.entries[sol.root].state.t):
        next_keys: list = []
        index: dict = {}
        new_where = np.full(n, -1, dtype=np.int64)
        order = np.argsort(where, kind="stable")
        bounds = np.searchsorted(where[order], np.arange(len(keys) + 1))
        for sid, key in enumerate(keys):
            members = order[bounds[sid]:bounds[sid + 1]]
            if key is None or len(members) == 0:
                continue
            e = sol.entries[key]
            a_i = e.best
            s = e.state
            bar = invest(s, e.actions[a_i])
            idx = bar.alive_idx
            outs = e.outcomes[a_i]
            if len(idx) == 0:
                patterns = np.zeros(len(members), dtype=np.int64)
                lookup = {0: outs[0]}
            else:
                thr = default_thresholds(bar.network.pds()[idx])
                L = bar.network.factor(idx).L
                x = rng.standard_normal((len(members), len(idx))) @ L.T
                bits = (x < thr) @ (1 << np.arange(len(idx)))
                patterns = bits
                pos = {int(j): k for k, j in enumerate(idx)}
                lookup = {}
                for rec in outs:
                    code = sum(1 << pos[j] for j in rec[1])
                    lookup[code] = rec
            for code in np.unique(patterns):
                _, _, r, nkey = lookup[int(code)]
                sel = members[patterns == code]
                cr[sel] += disc * r
                if nkey not in index:
                    index[nkey] = len(next_keys)
                    next_keys.append(nkey)
                new_where[sel] = index[nkey]
        keys = next_keys
        where = new_where
        disc *= sol.gamma
    return cr


def random_toy(seed: int, n_nodes: int, horizon: int, *, levels_bp=(0, 100, 200),
               risky_threshold: float = 0.009, gamma: float = 0.98):
    """A small random network in the kite experiment's regime, plus its config.

    Node 1 is risky (PD in [0.01, 0.03]); the others are risky or safe
    (PD in [0.0005, 0.003]) with equal odds. Exposures are 0 or 1 per
    directed pair, alpha is log-uniform on [1e-4, 1e-2]. Returns ``(s0, cfg)``.
    """
    from .harness import homogeneous_correlation
    from .network import BankNode, FinancialNetwork, calibrate_sigma

    rng = stream(seed, 31)
    alpha = float(10 ** rng.uniform(-4, -2))
    lgd = float(rng.choice([0.6, 1.0]))
    nodes = []
    for i in range(n_nodes):
        W = 100.0
        E = float(rng.uniform(2.0, 5.0))
        risky = i == 0 or rng.random() < 0.5
        pd0 = float(rng.uniform(0.01, 0.03) if risky else rng.uniform(0.0005, 0.003))
        nodes.append(BankNode(id=i + 1, label=str(i + 1), W=W, E=E,
                              sigma=calibrate_sigma(W, E, 0.0, pd0), lgd=lgd,
                              alpha=alpha, pd_floor=0.00021))
    w = (rng.random((n_nodes, n_nodes)) < 0.6).astype(float)
    np.fill_diagonal(w, 0.0)
    net = FinancialNetwork.from_nodes(nodes, w, homogeneous_correlation(
        n_nodes, float(rng.uniform(0.0, 0.8))))
    cfg = MdpConfig(horizon=horizon, gamma=gamma, levels_bp=levels_bp,
                    risky_threshold=risky_threshold, seed=seed)
    return MdpState(net, frozenset(), 0, horizon), cfg


@dataclass(frozen=True)
class Comparison:
    label: str
    q_fvi: float
    se: float
    q_exact: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return abs(self.q_fvi - self.q_exact) <= self.tolerance


def compare_with_fvi(s0: MdpState, cfg: MdpConfig, solver, n_samples: int | None = None,
                     rel_tol: float = 0.02, z: float = 3.0):
    """FVI Q estimates at ``s0`` against exact ones.

    Returns ``(comparisons, argmax_ok, solution)``. The argmax check only
    applies when the exact gap between the two best actions exceeds four
    standard errors of the FVI difference.
    """
    from .fvi import PolicyFit, fit_policy, q_values

    sol = solve_exact(s0, cfg)
    M = s0.horizon
    if s0.t + 2 < M:
        fit = fit_policy(s0, cfg, solver, down_to=s0.t + 1)
    else:
        fit = PolicyFit(M, s0.network.n, seed=solver.seed)
    table = q_values(s0, fit, cfg, solver, stream(solver.seed, 41), n_samples)
    exact = sol.q_table(s0)
    v = abs(sol.v0)
    rows = [Comparison(a.label, float(table.q[i]), float(table.se[i]), exact[a.label],
                       max(z * float(table.se[i]), rel_tol * v + 1e-6))
            for i, a in enumerate(table.actions)]
    order = sorted(range(len(rows)), key=lambda i: -rows[i].q_exact)
    argmax_ok = True
    if len(order) > 1:
        top, second = order[0], order[1]
        gap = rows[top].q_exact - rows[second].q_exact
        if gap > 4 * table.diff_se(top, second):
            argmax_ok = table.best() == sol.entry(s0).best
    return rows, argmax_ok, sol
