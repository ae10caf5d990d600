"""Fitted value iteration for the bailout MDP.

The value of a state is approximated by ``-sum_ik beta_ik(t) * Zbar_ik(s)``
where ``Zbar`` holds deterministic per-node, per-step expected direct losses
along a greedy investment path. ``beta`` is fitted backwards in time by ridge
regression on Monte Carlo Bellman backups over a representative portfolio of
states.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from itertools import combinations
from math import comb

import numpy as np

from . import kernels
from .copula import default_thresholds, stream
from .mdp import (
    InvestmentAction,
    MdpConfig,
    MdpState,
    action_label,
    enumerate_actions,
    expected_one_step_reward,
    force_defaults,
    invest,
)

log = logging.getLogger(__name__)

FIT_FORMAT = "bailout-policy-fit"
FIT_VERSION = 1
_SCOPES = ("none", "single", "all")


@dataclass(frozen=True)
class SolverConfig:
    n_bellman: int = 20_000
    n_multi: int | None = None
    max_multi_size: int = 4
    n_action_variants: int | None = None
    cross_action_defaults: bool = False
    shrink_to: str = "ones"
    lambda_rule: str = "1se"
    row_weights: str = "relative"
    ridge_grid: tuple = tuple(float(x) for x in np.logspace(-4, 2, 13))
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_bellman < 1000:
            raise ValueError("n_bellman must be at least 1000")
        if self.folds != 5:
            raise ValueError("cross-validation uses 5 folds")
        if self.shrink_to not in ("ones", "zero"):
            raise ValueError("shrink_to must be 'ones' or 'zero'")
        if self.lambda_rule not in ("min", "1se"):
            raise ValueError("lambda_rule must be 'min' or '1se'")
        if self.row_weights not in ("relative", "none"):
            raise ValueError("row_weights must be 'relative' or 'none'")
        if not self.ridge_grid or min(self.ridge_grid) <= 0:
            raise ValueError("ridge grid must hold positive penalties")
        object.__setattr__(self, "ridge_grid", tuple(float(x) for x in self.ridge_grid))


@dataclass(frozen=True, eq=False)
class ZMatrix:
    values: np.ndarray
    actions: tuple

    @property
    def total(self) -> float:
        return float(self.values.sum())


# ---------------------------------------------------------------- features

def _batch_features(net, W, E, J, alive, m, cfg: MdpConfig):
    return kernels.greedy_zbar_batch(
        W, E, J, alive, net.mu, net.sigma, net.pd_floor, net.alpha, net.lgd, net.w,
        cfg.gamma, m, cfg.nonzero_levels, cfg.risky_threshold, cfg.mode_code)


def _decode_action(n, dJ, choice, cfg: MdpConfig) -> InvestmentAction:
    scope = _SCOPES[int(choice[0])]
    levels = [lv for lv in cfg.levels_bp if lv > 0]
    if scope == "none":
        return InvestmentAction(np.zeros(n))
    bp = levels[int(choice[2])]
    node = int(choice[1]) if scope == "single" else None
    return InvestmentAction(np.array(dJ, dtype=float), action_label(scope, node, bp),
                            scope, node, bp)


def greedy_action_sequence(s: MdpState, cfg: MdpConfig, m: int | None = None):
    """Sequentially greedy injections minimising total expected direct loss.

    Returns the actions for offsets 1..m and the matrix Zbar they induce.
    """
    m = s.m if m is None else m
    net = s.network
    Z, dJ, ch = _batch_features(net, net.W[None], net.E[None], net.J[None],
                                s.alive[None], m, cfg)
    acts = tuple(_decode_action(net.n, dJ[0, k], ch[0, k], cfg) for k in range(m))
    return acts, ZMatrix(Z[0], acts)


def z_matrix(s: MdpState, actions, gamma: float) -> ZMatrix:
    """Expected direct losses per node and offset for an explicit action path."""
    net = s.network
    seq = np.array([a.deltaJ for a in actions], dtype=float).reshape(len(actions), net.n)
    Z = kernels.z_path(net.W, net.E, net.J, s.alive, net.mu, net.sigma, net.pd_floor,
                       net.alpha, net.lgd, net.w, gamma, seq)
    return ZMatrix(Z, tuple(actions))


def value_approx(s: MdpState, beta_t, cfg: MdpConfig) -> float:
    beta_t = np.asarray(beta_t, dtype=float)
    if beta_t.shape != (s.network.n, s.m):
        raise ValueError(f"beta has shape {beta_t.shape}, expected {(s.network.n, s.m)}")
    if s.m == 0:
        return 0.0
    _, Z = greedy_action_sequence(s, cfg)
    return -float(np.sum(beta_t * Z.values))


# ------------------------------------------------------- Bellman backups

def _pattern_codes(D):
    k = D.shape[1]
    if k <= 62:
        return D @ (np.int64(1) << np.arange(k, dtype=np.int64))
    _, codes = np.unique(D, axis=0, return_inverse=True)
    return codes.ravel()


def _successor_values(bar: MdpState, idx, D, beta, cfg: MdpConfig):
    """Approximate values of the successors reached by default patterns ``D``."""
    net = bar.network
    P = D.shape[0]
    full = np.zeros((P, net.n), dtype=bool)
    full[:, idx] = D
    alive = bar.alive[None, :] & ~full
    impact = full.astype(float) @ net.w.T
    impact[~alive] = 0.0
    m = beta.shape[1]
    Z, _, _ = _batch_features(net, net.W - impact, net.E - impact,
                              np.broadcast_to(net.J, (P, net.n)), alive, m, cfg)
    return -np.einsum("pnm,nm->p", Z, beta)


@dataclass(frozen=True, eq=False)
class QTable:
    actions: tuple
    q: np.ndarray
    se: np.ndarray
    tails: np.ndarray | None = None
    gamma: float = 0.0

    @property
    def labels(self) -> list:
        return [a.label for a in self.actions]

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def value(self, label: str) -> float:
        return float(self.q[self.index(label)])

    def diff_se(self, i: int, j: int) -> float:
        """Standard error of q[i] - q[j] under common random numbers."""
        if self.tails is None or i == j:
            return 0.0
        d = self.tails[:, i] - self.tails[:, j]
        return self.gamma * float(d.std(ddof=1)) / math.sqrt(len(d))

    def best(self) -> int:
        return argmax_action(self.q, self.actions)


def argmax_action(q, actions) -> int:
    """Index of the best action: larger q, then smaller total injection, then order."""
    best = 0
    for i in range(1, len(actions)):
        tol = 1e-12 + 1e-10 * abs(q[best])
        if q[i] > q[best] + tol:
            best = i
        elif abs(q[i] - q[best]) <= tol and actions[i].total < actions[best].total - 1e-12:
            best = i
    return best


def action_values(s: MdpState, actions, beta_next, cfg: MdpConfig, n_samples: int,
                  rng: np.random.Generator) -> QTable:
    """Q estimates for ``actions`` with one shared set of latent draws.

    ``beta_next`` is the fitted coefficient matrix of time ``t+1``, or None
    when ``t+1`` is the last decision step, whose value is exact.
    """
    actions = tuple(actions)
    one = np.array([expected_one_step_reward(s, a) for a in actions])
    idx = s.alive_idx
    m_next = s.m - 1
    if m_next <= 0 or len(idx) == 0:
        return QTable(actions, one, np.zeros(len(actions)), None, cfg.gamma)
    n = s.network.n
    if beta_next is None:
        if m_next != 1:
            raise ValueError("exact continuation only available one step before maturity")
        beta = np.ones((n, 1))
    else:
        beta = np.asarray(beta_next, dtype=float)
        if beta.shape != (n, m_next):
            raise ValueError(f"beta has shape {beta.shape}, expected {(n, m_next)}")
    L = s.network.factor(idx).L
    x = rng.standard_normal((n_samples, len(idx))) @ L.T
    tails = np.empty((n_samples, len(actions)))
    for k, a in enumerate(actions):
        bar = invest(s, a)
        thr = default_thresholds(bar.network.pds()[idx])
        D = x < thr
        codes = _pattern_codes(D)
        _, first, inv = np.unique(codes, return_index=True, return_inverse=True)
        vals = _successor_values(bar, idx, D[first], beta, cfg)
        tails[:, k] = vals[inv.ravel()]
    q = one + cfg.gamma * tails.mean(axis=0)
    se = cfg.gamma * tails.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return QTable(actions, q, se, tails, cfg.gamma)


@dataclass(frozen=True, eq=False)
class BellmanResult:
    value: float
    action: InvestmentAction
    table: QTable


def bellman_value(s: MdpState, beta_next, cfg: MdpConfig, solver: SolverConfig,
                  rng: np.random.Generator) -> BellmanResult:
    """One-step lookahead maximum over the admissible actions."""
    table = action_values(s, enumerate_actions(s, cfg), beta_next, cfg, solver.n_bellman, rng)
    i = table.best()
    return BellmanResult(float(table.q[i]), table.actions[i], table)


# ------------------------------------------------ representative portfolio

def _multi_sets(alive_idx, count, max_size, rng):
    """Distinct default sets with |U| >= 2, each drawn with weight exp(-|U|)."""
    n = len(alive_idx)
    sizes = np.arange(2, min(max_size, n) + 1)
    if count <= 0 or len(sizes) == 0:
        return []
    w = np.array([comb(n, k) * math.exp(-k) for k in sizes])
    space = int(sum(comb(n, k) for k in sizes))
    out = []
    seen = set()
    attempts = 0
    while len(out) < min(count, space) and attempts < 50 * count:
        attempts += 1
        k = int(rng.choice(sizes, p=w / w.sum()))
        U = frozenset(int(i) for i in rng.choice(alive_idx, size=k, replace=False))
        if U not in seen:
            seen.add(U)
            out.append(U)
    return out


def sample_default_set(alive_idx, max_size, rng):
    """One default set of size >= 2 with probability proportional to exp(-|U|)."""
    return _multi_sets(alive_idx, 1, max_size, rng)[0]


def representative_portfolio(s0: MdpState, t: int, cfg: MdpConfig, solver: SolverConfig,
                             rng: np.random.Generator) -> list:
    """Regression states for time ``t`` built from ``s0``.

    ``s0`` moved to time ``t`` with forced default sets: none, every single
    node, and random multi-node sets; plus states where an admissible action
    at ``s0`` was applied first (with and without forced defaults).
    """
    if not 0 <= t <= s0.horizon - 1:
        raise ValueError(f"t={t} outside [0, {s0.horizon - 1}]")
    idx = s0.alive_idx
    n = len(idx)
    base = s0.moved_to(t)
    n_multi = 2 * n if solver.n_multi is None else solver.n_multi
    sets = [frozenset()] + [frozenset([int(i)]) for i in idx]
    sets += _multi_sets(idx, n_multi, solver.max_multi_size, rng)
    states = [force_defaults(base, U) for U in sets]

    acts = [a for a in enumerate_actions(s0, cfg) if not a.is_zero]
    n_var = n if solver.n_action_variants is None else solver.n_action_variants
    if n_var > 0 and acts:
        if n_var >= len(acts):
            chosen = acts
        else:
            pick = np.unique(np.linspace(0, len(acts) - 1, n_var).round().astype(int))
            chosen = [acts[i] for i in pick]
        for a in chosen:
            moved = invest(s0, a).moved_to(t)
            if solver.cross_action_defaults:
                states += [force_defaults(moved, U) for U in sets]
            else:
                states.append(moved)
                k = int(rng.integers(0, len(sets) - 1)) + 1 if len(sets) > 1 else 0
                states.append(force_defaults(moved, sets[k]))

    out = []
    seen = set()
    for st in states:
        key = st.key()
        if key not in seen:
            seen.add(key)
            out.append(st)
    return out


# ------------------------------------------------------------ ridge fit

def relative_weights(y, rel_floor: float = 0.1):
    """Row weights 1/|y|, with |y| floored at ``rel_floor`` times its median."""
    a = np.abs(np.asarray(y, dtype=float))
    if not a.any():
        return np.ones_like(a)
    floor = rel_floor * np.median(a[a > 0])
    return 1.0 / np.maximum(a, floor)


def ridge_cv(X, y, lambdas, folds: int, rng: np.random.Generator, prior=None,
             rule: str = "1se", weights=None):
    """Intercept-free ridge on RMS-scaled columns, penalty chosen by k-fold CV.

    The penalty pulls the coefficients towards ``prior`` (zero by default).
    ``rule="min"`` takes the lambda with the lowest CV error; ``"1se"`` the
    largest lambda within one standard error of that minimum. Row
    ``weights`` multiply the residuals (weighted least squares).
    Columns that vanish on every row get coefficient 0. Returns
    (coefficients on the original scale, chosen lambda, CV R^2, CV MSE per
    lambda).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    rows, p = X.shape
    scale = np.sqrt(np.mean(X * X, axis=0)) if rows else np.zeros(p)
    dead = scale == 0
    scale[dead] = 1.0
    base = np.zeros(p) if prior is None else np.where(dead, 0.0, prior)
    y = y - X @ base
    y_orig = y + X @ base
    wr = np.ones(rows) if weights is None else np.asarray(weights, dtype=float)
    X = X * wr[:, None]
    y = y * wr
    Xs = X / scale
    lambdas = np.asarray(lambdas, dtype=float)
    k = min(folds, rows)
    parts = np.array_split(rng.permutation(rows), k) if rows else []
    if rows and min(rows - len(f) for f in parts) < p:
        warnings.warn(f"ridge fit with {rows} rows and {p} features is underdetermined "
                      "in some folds; relying on the penalty", RuntimeWarning, stacklevel=2)
    pred = np.zeros((len(lambdas), rows))
    for f in parts:
        train = np.setdiff1d(np.arange(rows), f)
        U, sv, Vt = np.linalg.svd(Xs[train], full_matrices=False)
        uty = U.T @ y[train]
        for li, lam in enumerate(lambdas):
            b = Vt.T @ (sv / (sv * sv + lam) * uty)
            pred[li, f] = Xs[f] @ b
    err = (pred - y) ** 2
    mse = err.mean(axis=1) if rows else np.zeros(len(lambdas))
    li = int(np.argmin(mse))
    if rule == "1se" and rows > 1:
        cut = mse[li] + err[li].std(ddof=1) / math.sqrt(rows)
        li = max(i for i in range(len(lambdas)) if mse[i] <= cut and lambdas[i] >= lambdas[li])
    U, sv, Vt = np.linalg.svd(Xs, full_matrices=False)
    b = Vt.T @ (sv / (sv * sv + lambdas[li]) * (U.T @ y))
    sst = float(np.sum((y_orig - y_orig.mean()) ** 2)) if rows else 0.0
    sse = float(np.sum(err[li] / (wr * wr))) if rows else 0.0
    r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse <= 1e-30 else 0.0)
    return base + b / scale, float(lambdas[li]), r2, mse


# ------------------------------------------------------------- policy fit

@dataclass
class PolicyFit:
    horizon: int
    n_nodes: int
    betas: dict = field(default_factory=dict)
    lambdas: dict = field(default_factory=dict)
    cv_r2: dict = field(default_factory=dict)
    portfolio_sizes: dict = field(default_factory=dict)
    negative_betas: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    def beta(self, t: int) -> np.ndarray:
        if t not in self.betas:
            raise KeyError(f"no fitted coefficients for t={t}")
        return self.betas[t]

    def continuation(self, t: int):
        """Coefficients used for the value of states at time ``t`` (None = exact)."""
        if t >= self.horizon - 1:
            return None
        return self.beta(t)

    def to_dict(self) -> dict:
        return {
            "format": FIT_FORMAT,
            "version": FIT_VERSION,
            "horizon": self.horizon,
            "n_nodes": self.n_nodes,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "steps": [
                {
                    "t": t,
                    "beta": self.betas[t].tolist(),
                    "lambda": self.lambdas[t],
                    "cv_r2": self.cv_r2[t],
                    "portfolio_size": self.portfolio_sizes[t],
                    "negative_betas": self.negative_betas[t],
                }
                for t in sorted(self.betas)
            ],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyFit":
        if d.get("format") != FIT_FORMAT:
            raise ValueError("not a policy fit file")
        if d.get("version") != FIT_VERSION:
            raise ValueError(f"unsupported policy fit version {d.get('version')}")
        fit = cls(horizon=d["horizon"], n_nodes=d["n_nodes"], seed=d["seed"],
                  config_hash=d["config_hash"])
        for rec in d["steps"]:
            t = rec["t"]
            fit.betas[t] = np.array(rec["beta"], dtype=float).reshape(d["n_nodes"], -1)
            fit.lambdas[t] = rec["lambda"]
            fit.cv_r2[t] = rec["cv_r2"]
            fit.portfolio_sizes[t] = rec["portfolio_size"]
            fit.negative_betas[t] = rec["negative_betas"]
        return fit

    @classmethod
    def load(cls, path) -> "PolicyFit":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_hash(s0: MdpState, cfg: MdpConfig, solver: SolverConfig) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"mdp": asdict(cfg), "solver": asdict(solver),
                         "t": s0.t, "horizon": s0.horizon,
                         "defaulted": sorted(s0.defaulted)}, sort_keys=True).encode())
    net = s0.network
    for name in ("W", "E", "mu", "sigma", "lgd", "alpha", "J", "pd_floor", "w", "Sigma"):
        h.update(np.ascontiguousarray(getattr(net, name)).tobytes())
    return h.hexdigest()[:16]


def state_features(states, m: int, cfg: MdpConfig) -> np.ndarray:
    """Zbar of every state stacked as (P, n, m)."""
    net = states[0].network
    W = np.array([s.network.W for s in states])
    E = np.array([s.network.E for s in states])
    J = np.array([s.network.J for s in states])
    alive = np.array([s.alive for s in states])
    Z, _, _ = kernels.greedy_zbar_batch(
        W, E, J, alive, net.mu, net.sigma, net.pd_floor, net.alpha, net.lgd, net.w,
        cfg.gamma, m, cfg.nonzero_levels, cfg.risky_threshold, cfg.mode_code)
    return Z


def fit_policy(s0: MdpState, cfg: MdpConfig, solver: SolverConfig,
               down_to: int = 0) -> PolicyFit:
    """Fit beta_t for t = M-2 down to ``down_to``, one backward pass.

    Q at time t only needs beta_{t+1}, so evaluating at t=0 can stop at 1.
    """
    M = s0.horizon
    if M < 2:
        raise ValueError("fitting needs a horizon of at least 2")
    if s0.t != 0:
        raise ValueError("fit from the initial state (t=0)")
    n = s0.network.n
    fit = PolicyFit(horizon=M, n_nodes=n, seed=solver.seed,
                    config_hash=fit_hash(s0, cfg, solver))
    for t in range(M - 2, down_to - 1, -1):
        states = representative_portfolio(s0, t, cfg, solver, stream(solver.seed, 1, t))
        cont = fit.continuation(t + 1)
        targets = np.array([
            bellman_value(st, cont, cfg, solver, stream(solver.seed, 2, t, k)).value
            for k, st in enumerate(states)
        ])
        m = M - t
        X = -state_features(states, m, cfg).reshape(len(states), n * m)
        prior = np.ones(n * m) if solver.shrink_to == "ones" else None
        b, lam, r2, _ = ridge_cv(X, targets, solver.ridge_grid, solver.folds,
                                 stream(solver.seed, 3, t), prior, solver.lambda_rule,
                                 relative_weights(targets) if solver.row_weights == "relative"
                                 else None)
        fit.betas[t] = b.reshape(n, m)
        fit.lambdas[t] = lam
        fit.cv_r2[t] = r2
        fit.portfolio_sizes[t] = len(states)
        fit.negative_betas[t] = int(np.sum(b < 0))
        log.info("t=%d: %d states, lambda=%.3g, CV R2=%.4f", t, len(states), lam, r2)
    return fit


# --------------------------------------------------------- using the fit

def _check_fit(s: MdpState, fit: PolicyFit):
    if fit.horizon != s.horizon or fit.n_nodes != s.network.n:
        raise ValueError("policy fit does not match the state's horizon or size")


def q_values(s: MdpState, fit: PolicyFit, cfg: MdpConfig, solver: SolverConfig,
             rng: np.random.Generator, n_samples: int | None = None) -> QTable:
    """Q* estimates of every admissible action at ``s`` (common random numbers)."""
    _check_fit(s, fit)
    n = solver.n_bellman if n_samples is None else n_samples
    cont = fit.continuation(s.t + 1) if s.t + 1 < s.horizon else None
    return action_values(s, enumerate_actions(s, cfg), cont, cfg, n, rng)


def q_star(s: MdpState, a: InvestmentAction, fit: PolicyFit, cfg: MdpConfig,
           solver: SolverConfig, rng: np.random.Generator, n_samples: int | None = None):
    """(Q*, standard error) of a single action."""
    _check_fit(s, fit)
    n = solver.n_bellman if n_samples is None else n_samples
    cont = fit.continuation(s.t + 1) if s.t + 1 < s.horizon else None
    table = action_values(s, (a,), cont, cfg, n, rng)
    return float(table.q[0]), float(table.se[0])


def optimal_action(s: MdpState, fit: PolicyFit, cfg: MdpConfig, solver: SolverConfig,
                   rng: np.random.Generator, n_samples: int | None = None):
    table = q_values(s, fit, cfg, solver, rng, n_samples)
    return table.actions[table.best()], table


def convenience_from_table(table: QTable):
    """(best non-zero Q minus zero-action Q, its CRN standard error, best label)."""
    nonzero = [i for i, a in enumerate(table.actions) if not a.is_zero]
    zero = next(i for i, a in enumerate(table.actions) if a.is_zero)
    if not nonzero:
        return 0.0, 0.0, None
    sub = [table.actions[i] for i in nonzero]
    b = nonzero[argmax_action(table.q[nonzero], sub)]
    return float(table.q[b] - table.q[zero]), table.diff_se(b, zero), table.actions[b].label


def convenience(s: MdpState, fit: PolicyFit, cfg: MdpConfig, solver: SolverConfig,
                rng: np.random.Generator, n_samples: int | None = None):
    return convenience_from_table(q_values(s, fit, cfg, solver, rng, n_samples))
