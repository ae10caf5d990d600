"""The bailout MDP: states, investment actions, dynamics and rewards."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .copula import EXACT_MAX_DIM, DimensionError, LatentDraw, partition_probs, sample_defaults
from .network import FinancialNetwork, apply_impacts, apply_investment, merton_pd_vec

TARGETING_MODES = ("single-or-all", "all-risky-uniform")


class EpisodeOver(RuntimeError):
    pass


@dataclass(frozen=True)
class MdpConfig:
    horizon: int = 7
    gamma: float = 0.98
    levels_bp: tuple = (0, 50, 100, 150, 200)
    targeting: str = "single-or-all"
    risky_threshold: float = 0.009
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")
        if 0 not in self.levels_bp:
            raise ValueError("investment levels must include 0")
        if any(lv < 0 for lv in self.levels_bp):
            raise ValueError("investment levels must be non-negative")
        if self.targeting not in TARGETING_MODES:
            raise ValueError(f"targeting must be one of {TARGETING_MODES}")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        object.__setattr__(self, "levels_bp", tuple(sorted(set(self.levels_bp))))

    @property
    def nonzero_levels(self) -> np.ndarray:
        """Non-zero investment levels as fractions of total asset."""
        return np.array([lv / 1e4 for lv in self.levels_bp if lv > 0])

    @property
    def mode_code(self) -> int:
        return TARGETING_MODES.index(self.targeting)


@dataclass(frozen=True, eq=False)
class MdpState:
    network: FinancialNetwork
    defaulted: frozenset = frozenset()
    t: int = 0
    horizon: int = 7

    def __post_init__(self):
        object.__setattr__(self, "defaulted", frozenset(int(i) for i in self.defaulted))
        if not 0 <= self.t <= self.horizon:
            raise ValueError(f"time {self.t} outside [0, {self.horizon}]")

    @property
    def m(self) -> int:
        """Time to maturity."""
        return self.horizon - self.t

    @property
    def alive(self) -> np.ndarray:
        mask = np.ones(self.network.n, dtype=bool)
        if self.defaulted:
            mask[list(self.defaulted)] = False
        return mask

    @property
    def alive_idx(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    @property
    def active(self) -> np.ndarray:
        """Alive and not doomed by a wiped-out buffer; only these can be funded."""
        return self.alive & ~self.network.forced

    def pds(self) -> np.ndarray:
        """Current PDs; defaulted nodes report 0."""
        return np.where(self.alive, self.network.pds(), 0.0)

    def moved_to(self, t: int) -> "MdpState":
        return MdpState(self.network, self.defaulted, t, self.horizon)

    def key(self, quantum: float = 1e-9) -> tuple:
        """Hashable identity up to ``quantum`` on the balance sheets."""
        net = self.network
        q = lambda a: tuple(np.round(a / quantum).astype(np.int64).tolist())
        return (tuple(sorted(self.defaulted)), q(net.W), q(net.E), q(net.J), self.t)


@dataclass(frozen=True, eq=False)
class InvestmentAction:
    deltaJ: np.ndarray
    label: str = "0@0"
    scope: str = "none"
    node: int | None = None
    level_bp: float = 0

    @property
    def total(self) -> float:
        return float(np.sum(self.deltaJ))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.deltaJ)


class StepOutcome(NamedTuple):
    next_state: MdpState
    reward: float
    defaults_this_step: frozenset
    latent_draw: LatentDraw | None


def _level_tag(bp) -> str:
    tenths = bp / 10
    if float(tenths).is_integer():
        return f"{int(tenths):02d}"
    return f"{tenths:g}"


def action_label(scope: str, node: int | None, bp) -> str:
    if scope == "none":
        return "0@0"
    who = 0 if scope == "all" else node + 1
    return f"{who}@{_level_tag(bp)}"


def zero_action(n: int) -> InvestmentAction:
    return InvestmentAction(np.zeros(n))


def risky_nodes(s: MdpState, cfg: MdpConfig) -> np.ndarray:
    return np.flatnonzero(s.active & (s.network.pds() > cfg.risky_threshold))


def enumerate_actions(s: MdpState, cfg: MdpConfig) -> list:
    """Admissible injections at ``s``; the zero action always comes first.

    Amounts are basis points of each node's current total asset. Ordering is
    zero, single-node actions by (node, level), then all-risky actions by
    level. An all-risky action identical to a single-node one is dropped.
    """
    n = s.network.n
    W = s.network.W
    out = [zero_action(n)]
    risky = risky_nodes(s, cfg)
    if len(risky) == 0 or s.t >= s.horizon:
        return out
    levels = [lv for lv in cfg.levels_bp if lv > 0]
    if cfg.targeting == "single-or-all":
        for i in risky:
            for lv in levels:
                dJ = np.zeros(n)
                dJ[i] = lv / 1e4 * W[i]
                out.append(InvestmentAction(dJ, action_label("single", int(i), lv),
                                            "single", int(i), lv))
        if len(risky) == 1:
            return out
    for lv in levels:
        dJ = np.zeros(n)
        dJ[risky] = lv / 1e4 * W[risky]
        out.append(InvestmentAction(dJ, action_label("all", None, lv), "all", None, lv))
    return out


def invest(s: MdpState, a: InvestmentAction) -> MdpState:
    """Intermediate state: the injection applied, time not yet advanced."""
    net = apply_investment(s.network, a.deltaJ, frozen=s.defaulted)
    return MdpState(net, s.defaulted, s.t, s.horizon)


def force_defaults(s: MdpState, U) -> MdpState:
    """Default the nodes in ``U`` at once and propagate their impacts."""
    U = frozenset(int(i) for i in U) - s.defaulted
    if not U:
        return s
    net = apply_impacts(s.network, U, frozen=s.defaulted)
    return MdpState(net, s.defaulted | U, s.t, s.horizon)


def _check_open(s: MdpState):
    if s.t >= s.horizon:
        raise EpisodeOver(f"episode over at t={s.t}")


def _reward(bar: MdpState, defaults) -> float:
    if not defaults:
        return 0.0
    idx = list(defaults)
    return -float(np.sum(bar.network.losses()[idx]))


def _advance(bar: MdpState, defaults) -> MdpState:
    net = apply_impacts(bar.network, defaults, frozen=bar.defaulted)
    return MdpState(net, bar.defaulted | frozenset(defaults), bar.t + 1, bar.horizon)


def step(s: MdpState, a: InvestmentAction, rng: np.random.Generator) -> StepOutcome:
    """Invest, draw correlated defaults among alive nodes, charge losses, propagate."""
    _check_open(s)
    bar = invest(s, a)
    idx = bar.alive_idx
    if len(idx) == 0:
        return StepOutcome(_advance(bar, ()), 0.0, frozenset(), None)
    draw = sample_defaults(bar.network.pds()[idx], bar.network.factor(idx), rng)
    defaults = frozenset(int(i) for i in idx[draw.defaults])
    return StepOutcome(_advance(bar, defaults), _reward(bar, defaults), defaults, draw)


def transition_outcomes(s: MdpState, a: InvestmentAction) -> list:
    """Every successor with its exact probability: (prob, defaults, reward, next_state).

    Limited to three alive nodes (exact rectangle probabilities).
    """
    _check_open(s)
    bar = invest(s, a)
    idx = bar.alive_idx
    if len(idx) > EXACT_MAX_DIM:
        raise DimensionError(f"exact transitions limited to {EXACT_MAX_DIM} alive nodes")
    if len(idx) == 0:
        return [(1.0, frozenset(), 0.0, _advance(bar, ()))]
    pds = bar.network.pds()[idx]
    probs = partition_probs(pds, bar.network.Sigma[np.ix_(idx, idx)])
    out = []
    for pattern in sorted(probs, key=lambda D: (len(D), sorted(D))):
        D = frozenset(int(idx[k]) for k in pattern)
        out.append((probs[pattern], D, _reward(bar, D), _advance(bar, D)))
    return out


def transition_prob(s: MdpState, a: InvestmentAction, s_next: MdpState,
                    tol: float = 1e-9) -> float:
    """Exact P_a(s, s_next); zero for unreachable successors."""
    if s_next.t != s.t + 1 or s_next.horizon != s.horizon:
        return 0.0
    if not s.defaulted <= s_next.defaulted:
        return 0.0
    new = s_next.defaulted - s.defaulted
    for prob, D, _, nxt in transition_outcomes(s, a):
        if D == new:
            a_net, b_net = nxt.network, s_next.network
            same = all(np.allclose(getattr(a_net, f), getattr(b_net, f), rtol=0, atol=tol)
                       for f in ("W", "E", "J"))
            return prob if same else 0.0
    return 0.0


def expected_one_step_reward(s: MdpState, a: InvestmentAction) -> float:
    """Closed form: minus the sum of post-injection PD times loss over alive nodes."""
    net = s.network
    dJ = np.asarray(a.deltaJ, dtype=float)
    Wb = net.W + dJ
    Eb = net.E + dJ
    pd = merton_pd_vec(Wb, Eb, net.mu, net.sigma, net.pd_floor)
    loss = net.alpha * Wb + (net.J + dJ) * net.lgd
    return -float(np.sum((pd * loss)[s.alive]))


def cumulative_reward(rewards, gamma: float) -> float:
    total = 0.0
    g = 1.0
    for r in rewards:
        total += g * r
        g *= gamma
    return total


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    gamma: float = 1.0

    @property
    def rewards(self) -> list:
        return [rec["reward"] for rec in self.steps]

    @property
    def cumulative_reward(self) -> float:
        return cumulative_reward(self.rewards, self.gamma)

    def records(self) -> list:
        return list(self.steps)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def simulate_episode(s0: MdpState, policy: Callable, rng: np.random.Generator,
                     gamma: float = 0.98):
    """Roll ``policy`` (state -> action) forward to the horizon.

    Returns the trajectory audit log and the discounted cumulative reward.
    """
    traj = Trajectory(gamma=gamma)
    s = s0
    while s.t < s.horizon:
        a = policy(s)
        out = step(s, a, rng)
        traj.steps.append({
            "step": s.t,
            "action": a.label,
            "defaults": sorted(s.network.labels[i] for i in out.defaults_this_step),
            "reward": out.reward,
        })
        s = out.next_state
    return traj, traj.cumulative_reward
