"""Balance sheets of the financial network.

Merton default probabilities, volatility calibration, contagion impacts,
taxpayer losses and government capital injections. Every operation returns a
new network; arrays held by a :class:`FinancialNetwork` are read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from scipy.special import ndtr, ndtri


class CalibrationError(ValueError):
    """No positive volatility reproduces the requested default probability."""


class InvestmentError(ValueError):
    """A capital injection violates the action preconditions."""


@dataclass(frozen=True)
class BankNode:
    id: int
    label: str
    W: float
    E: float
    mu: float = 0.0
    sigma: float = 0.01
    lgd: float = 1.0
    alpha: float = 0.0
    J: float = 0.0
    pd_floor: float = 0.00021
    forced_default: bool = False

    @property
    def B(self) -> float:
        return self.W - self.E


def merton_pd(W, E, mu, sigma, pd_floor):
    """Floored Merton probability of default for one balance sheet.

    ``E <= 0`` means the buffer is gone and the node defaults for sure.
    ``E == W`` (no liabilities) sends the log-leverage to infinity, so only
    the floor is left.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if W <= 0:
        raise ValueError(f"total asset must be positive, got {W}")
    if E <= 0:
        return 1.0
    if E >= W:
        return float(pd_floor)
    d = (math.log(W / (W - E)) + mu - 0.5 * sigma * sigma) / sigma
    p = 0.5 * math.erfc(d / math.sqrt(2.0))
    return min(max(p, float(pd_floor)), 1.0)


def merton_pd_vec(W, E, mu, sigma, pd_floor):
    """Vectorised :func:`merton_pd` (no domain checks)."""
    W, E = np.broadcast_arrays(np.asarray(W, float), np.asarray(E, float))
    out = np.ones(W.shape)
    live = E > 0
    full = live & (E >= W)
    mid = live & ~full
    mu = np.broadcast_to(mu, W.shape)
    sigma = np.broadcast_to(sigma, W.shape)
    floor = np.broadcast_to(pd_floor, W.shape)
    if mid.any():
        s = sigma[mid]
        d = (np.log(W[mid] / (W[mid] - E[mid])) + mu[mid] - 0.5 * s * s) / s
        out[mid] = np.maximum(ndtr(-d), floor[mid])
    out[full] = floor[full]
    return np.minimum(out, 1.0)


def calibrate_sigma(W, E, mu, pd0):
    """Asset volatility that makes the (unfloored) Merton PD equal ``pd0``.

    Solves ``sigma**2/2 + q*sigma - c = 0`` with ``q = Phi^-1(1 - pd0)`` and
    ``c = log(W/(W-E)) + mu``; the positive root exists iff ``c > 0``.
    """
    if not 0 < E < W:
        raise CalibrationError(f"need 0 < E < W, got E={E}, W={W}")
    if not 0 < pd0 < 1:
        raise CalibrationError(f"pd0 must lie in (0, 1), got {pd0}")
    c = math.log(W / (W - E)) + mu
    if c <= 0:
        raise CalibrationError(
            f"pd0={pd0} unreachable: log-leverage plus drift is {c:.3g} <= 0")
    q = float(ndtri(1.0 - pd0))
    # -q + sqrt(q^2 + 2c) written to avoid cancellation when q >> c
    return 2.0 * c / (q + math.sqrt(q * q + 2.0 * c))


def taxpayer_loss(node: BankNode) -> float:
    return node.alpha * node.W + node.J * node.lgd


@dataclass(frozen=True, eq=False)
class FinancialNetwork:
    """Struct-of-arrays view of the nodes plus exposures and correlations.

    ``w[i, j]`` is the exposure of node ``i`` to the default of node ``j``.
    Node ids are 1-based (``id = index + 1``); all sets of nodes passed to
    functions in this package are 0-based indices.
    """

    labels: tuple
    W: np.ndarray
    E: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    lgd: np.ndarray
    alpha: np.ndarray
    J: np.ndarray
    pd_floor: np.ndarray
    w: np.ndarray
    Sigma: np.ndarray
    _factors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.labels)
        for name in ("W", "E", "mu", "sigma", "lgd", "alpha", "J", "pd_floor"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        for name in ("w", "Sigma"):
            arr = getattr(self, name)
            if not (isinstance(arr, np.ndarray) and not arr.flags.writeable):
                arr = np.array(arr, dtype=float)
                arr.flags.writeable = False
            if arr.shape != (n, n):
                raise ValueError(f"{name} must have shape ({n}, {n}), got {arr.shape}")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_nodes(cls, nodes: Iterable[BankNode], w, Sigma) -> "FinancialNetwork":
        nodes = list(nodes)
        net = cls(
            labels=tuple(nd.label for nd in nodes),
            W=[nd.W for nd in nodes],
            E=[nd.E for nd in nodes],
            mu=[nd.mu for nd in nodes],
            sigma=[nd.sigma for nd in nodes],
            lgd=[nd.lgd for nd in nodes],
            alpha=[nd.alpha for nd in nodes],
            J=[nd.J for nd in nodes],
            pd_floor=[nd.pd_floor for nd in nodes],
            w=w,
            Sigma=Sigma,
        )
        net.validate()
        return net

    def validate(self):
        """Load-time checks: exposures, correlation matrix and node ranges."""
        from .copula import cholesky_factor

        if np.any(np.diag(self.w) != 0):
            raise ValueError("exposure matrix must have a zero diagonal")
        if np.any(self.w < 0):
            raise ValueError("exposures must be non-negative")
        S = self.Sigma
        if not np.allclose(S, S.T, atol=1e-12):
            raise ValueError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(S), 1.0, atol=1e-12):
            raise ValueError("correlation matrix must have a unit diagonal")
        if np.any(np.abs(S) > 1 + 1e-12):
            raise ValueError("correlations must lie in [-1, 1]")
        cholesky_factor(S)  # raises on non-PSD
        if np.any(self.sigma <= 0):
            raise ValueError("asset volatilities must be positive")
        if np.any(self.W <= 0):
            raise ValueError("total assets must be positive")
        if np.any(self.E > self.W):
            raise ValueError("equity cannot exceed total asset")
        if np.any(self.J < 0):
            raise ValueError("government investment must be non-negative")
        for name in ("lgd", "alpha"):
            v = getattr(self, name)
            if np.any((v < 0) | (v > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")
        if np.any((self.pd_floor <= 0) | (self.pd_floor >= 1)):
            raise ValueError("PD floor must lie in (0, 1)")
        return self

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def B(self) -> np.ndarray:
        return self.W - self.E

    @property
    def forced(self) -> np.ndarray:
        """Nodes whose equity was wiped out; they default at the next draw."""
        return self.E <= 0

    @property
    def nodes(self) -> list:
        forced = self.forced
        return [
            BankNode(
                id=i + 1, label=self.labels[i], W=float(self.W[i]), E=float(self.E[i]),
                mu=float(self.mu[i]), sigma=float(self.sigma[i]), lgd=float(self.lgd[i]),
                alpha=float(self.alpha[i]), J=float(self.J[i]),
                pd_floor=float(self.pd_floor[i]), forced_default=bool(forced[i]),
            )
            for i in range(self.n)
        ]

    def pds(self) -> np.ndarray:
        return merton_pd_vec(self.W, self.E, self.mu, self.sigma, self.pd_floor)

    def losses(self) -> np.ndarray:
        """Taxpayer loss of every node if it defaulted now."""
        return self.alpha * self.W + self.J * self.lgd

    def index_of(self, label: str) -> int:
        return self.labels.index(label)

    def derive(self, **changes) -> "FinancialNetwork":
        """Copy with some arrays replaced; the Cholesky cache is shared."""
        return replace(self, **changes)

    def factor(self, idx):
        """Cached Cholesky factor of the correlation sub-matrix on ``idx``."""
        from .copula import cholesky_factor

        key = tuple(int(i) for i in idx)
        f = self._factors.get(key)
        if f is None:
            sub = self.Sigma[np.ix_(key, key)]
            f = cholesky_factor(sub, index=key)
            self._factors[key] = f
        return f


def _as_mask(n, nodes) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    idx = list(nodes)
    if idx:
        mask[idx] = True
    return mask


def apply_impacts(net: FinancialNetwork, defaults_now, frozen=()) -> FinancialNetwork:
    """Charge the exposures to the nodes defaulting now to every survivor.

    ``frozen`` lists nodes that defaulted earlier; they neither emit nor
    receive impacts. Liabilities ``W - E`` are conserved for survivors.
    """
    n = net.n
    now = _as_mask(n, defaults_now)
    if not now.any():
        return net
    dead = _as_mask(n, frozen)
    if np.any(now & dead):
        raise ValueError("a node cannot default twice")
    impact = net.w[:, now].sum(axis=1)
    impact[now | dead] = 0.0
    return net.derive(W=net.W - impact, E=net.E - impact)


def apply_investment(net: FinancialNetwork, deltaJ, frozen=()) -> FinancialNetwork:
    """Intermediate state after an injection: W, E and J all grow by deltaJ."""
    dJ = np.asarray(deltaJ, dtype=float)
    if dJ.shape != (net.n,):
        raise InvestmentError(f"deltaJ must have shape ({net.n},), got {dJ.shape}")
    if np.any(dJ < 0):
        raise InvestmentError("capital injections must be non-negative")
    dead = _as_mask(net.n, frozen)
    if np.any(dJ[dead] != 0):
        bad = [net.labels[i] for i in np.flatnonzero(dead & (dJ != 0))]
        raise InvestmentError(f"cannot invest in defaulted nodes {bad}")
    if not dJ.any():
        return net
    return net.derive(W=net.W + dJ, E=net.E + dJ, J=net.J + dJ)
