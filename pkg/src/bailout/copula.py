"""Gaussian latent-variable model for correlated defaults.

Node ``i`` defaults when its latent normal ``x_i`` falls below
``Phi^-1(PD_i)``. Sampling draws ``x = L z`` from a Cholesky factor; exact
rectangle probabilities are available up to three dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple

import numpy as np
from scipy import integrate
from scipy.special import ndtr, ndtri

EXACT_MAX_DIM = 3
_SQRT1_2 = math.sqrt(0.5)
_TWO_PI = 2.0 * math.pi


class NotPositiveSemidefinite(ValueError):
    pass


class DimensionError(ValueError):
    pass


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent random stream fixed by a 64-bit seed and an index path."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class CorrelationFactor:
    L: np.ndarray
    index: tuple

    @property
    def dim(self) -> int:
        return self.L.shape[0]


@dataclass(frozen=True)
class LatentDraw:
    x: np.ndarray
    defaults: np.ndarray


def cholesky_factor(Sigma_sub, index=None, tol: float = 1e-10) -> CorrelationFactor:
    """Lower-triangular ``L`` with ``L @ L.T == Sigma_sub``.

    Zero pivots are accepted (singular but PSD matrices such as perfect
    correlation); a pivot below ``-tol`` is an error, never repaired.
    """
    S = np.asarray(Sigma_sub, dtype=float)
    n = S.shape[0]
    if S.shape != (n, n):
        raise ValueError("correlation matrix must be square")
    if not np.allclose(S, S.T, atol=1e-12) or not np.allclose(np.diag(S), 1.0, atol=1e-12):
        raise ValueError("correlation matrix must be symmetric with unit diagonal")
    L = np.zeros((n, n))
    for j in range(n):
        piv = S[j, j] - L[j, :j] @ L[j, :j]
        if piv < -tol:
            raise NotPositiveSemidefinite(f"pivot {j} is {piv:.3g}")
        d = math.sqrt(max(piv, 0.0))
        L[j, j] = d
        rest = S[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]
        if d > tol:
            L[j + 1:, j] = rest / d
        elif np.any(np.abs(rest) > math.sqrt(tol)):
            raise NotPositiveSemidefinite(f"zero pivot {j} with non-zero coupling")
    if np.linalg.norm(L @ L.T - S) > 1e-10 * max(1, n):
        raise NotPositiveSemidefinite("factor does not reproduce the matrix")
    L.flags.writeable = False
    if index is None:
        index = tuple(range(n))
    if len(set(index)) != len(index) or len(index) != n:
        raise ValueError("index map must be injective and match the dimension")
    return CorrelationFactor(L=L, index=tuple(index))


def default_thresholds(pds) -> np.ndarray:
    p = np.asarray(pds, dtype=float)
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("default probabilities must lie in (0, 1]")
    out = np.full(p.shape, np.inf)
    part = p < 1
    out[part] = ndtri(p[part])
    return out


def sample_defaults(pds, factor: CorrelationFactor, rng: np.random.Generator,
                    size: int | None = None) -> LatentDraw:
    """Correlated latent draw(s) and the implied default indicators.

    With ``size`` the result holds ``size`` independent rows.
    """
    thr = default_thresholds(pds)
    if thr.shape != (factor.dim,):
        raise DimensionError(f"{thr.shape[0]} PDs for a {factor.dim}-dim factor")
    z = rng.standard_normal((1 if size is None else size, factor.dim))
    x = z @ factor.L.T
    d = x < thr
    if size is None:
        return LatentDraw(x=x[0], defaults=d[0])
    return LatentDraw(x=x, defaults=d)


# Gauss-Legendre half-rules used by Genz's BVN algorithm
_GL = {
    6: (np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
        np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970])),
    12: (np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                   0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
         np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                   0.5873179542866171, 0.3678314989981802, 0.1252334085114692])),
    20: (np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                   0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
                   0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
                   0.1527533871307259]),
         np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                   0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                   0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                   0.07652652113349733])),
}
_GL_FULL = {k: (np.concatenate([w, w]), np.concatenate([1 - x, 1 + x]))
            for k, (w, x) in _GL.items()}


def _phi(x: float) -> float:
    return 0.5 * math.erfc(-x * _SQRT1_2)


def _bvnu(h: float, k: float, r: float) -> float:
    """P(X > h, Y > k) for a standard bivariate normal with correlation r.

    Genz (2004) algorithm: Gauss-Legendre on the Plackett integral for
    |r| < 0.925 and an asymptotic expansion plus correction otherwise.
    """
    if h == math.inf or k == math.inf:
        return 0.0
    if h == -math.inf:
        return 1.0 if k == -math.inf else _phi(-k)
    if k == -math.inf:
        return _phi(-h)
    if r == 0:
        return _phi(-h) * _phi(-k)
    ar = abs(r)
    w, x = _GL_FULL[6 if ar < 0.3 else 12 if ar < 0.75 else 20]
    hk = h * k
    if ar < 0.925:
        hs = (h * h + k * k) / 2
        asr = math.asin(r) / 2
        sn = np.sin(asr * x)
        bvn = float(np.exp((sn * hk - hs) / (1 - sn * sn)) @ w)
        bvn = bvn * asr / _TWO_PI + _phi(-h) * _phi(-k)
    else:
        if r < 0:
            k = -k
            hk = -hk
        bvn = 0.0
        if ar < 1:
            a_s = 1 - r * r
            a = math.sqrt(a_s)
            bs = (h - k) ** 2
            asr = -(bs / a_s + hk) / 2
            c = (4 - hk) / 8
            d = (12 - hk) / 80
            if asr > -100:
                bvn = a * math.exp(asr) * (1 - c * (bs - a_s) * (1 - d * bs) / 3 + c * d * a_s * a_s)
            if hk > -100:
                b = math.sqrt(bs)
                sp = math.sqrt(_TWO_PI) * _phi(-b / a)
                bvn -= math.exp(-hk / 2) * sp * b * (1 - c * bs * (1 - d * bs) / 3)
            a = a / 2
            xs = (a * x) ** 2
            asr_v = -(bs / xs + hk) / 2
            keep = asr_v > -100
            xs = xs[keep]
            sp = 1 + c * xs * (1 + 5 * d * xs)
            rs = np.sqrt(1 - xs)
            ep = np.exp(-(hk / 2) * xs / (1 + rs) ** 2) / rs
            bvn = (a * float((np.exp(asr_v[keep]) * (sp - ep)) @ w[keep]) - bvn) / _TWO_PI
        if r > 0:
            bvn += _phi(-max(h, k))
        elif h >= k:
            bvn = -bvn
        else:
            if h < 0:
                lo = _phi(k) - _phi(h)
            else:
                lo = _phi(-h) - _phi(-k)
            bvn = lo - bvn
    return min(1.0, max(0.0, bvn))


def bvn_cdf(h: float, k: float, rho: float) -> float:
    """P(X < h, Y < k) for a standard bivariate normal."""
    return _bvnu(-h, -k, rho)


def _cond_bvn(a: float, b: float, sa: float, sb: float, cov: float) -> float:
    """P(Ya < a, Yb < b) for centred normals with sds sa, sb and covariance cov."""
    if sa <= 1e-12 and sb <= 1e-12:
        return float(a > 0 and b > 0)
    if sa <= 1e-12:
        return _phi(b / sb) if a > 0 else 0.0
    if sb <= 1e-12:
        return _phi(a / sa) if b > 0 else 0.0
    r = min(1.0, max(-1.0, cov / (sa * sb)))
    return bvn_cdf(a / sa, b / sb, r)


def _tvn_cdf(h, R) -> float:
    # condition on the coordinate least correlated with the other two
    worst = [max(abs(R[c, o]) for o in range(3) if o != c) for c in range(3)]
    c = int(np.argmin(worst))
    a, b = [o for o in range(3) if o != c]
    rca, rcb = R[c, a], R[c, b]
    sa = math.sqrt(max(0.0, 1 - rca * rca))
    sb = math.sqrt(max(0.0, 1 - rcb * rcb))
    cov = R[a, b] - rca * rcb
    ha, hb, hc = h[a], h[b], h[c]

    def integrand(u):
        x = float(ndtri(u))
        return _cond_bvn(ha - rca * x, hb - rcb * x, sa, sb, cov)

    top = float(ndtr(hc))
    if top <= 0:
        return 0.0
    val, _ = integrate.quad(integrand, 0.0, top, epsabs=1e-14, epsrel=1e-12, limit=200)
    return min(1.0, max(0.0, val))


def mvn_cdf(h, R) -> float:
    """P(X < h) for a standard normal vector with correlation R, dim <= 3.

    Infinite upper bounds are marginalised out; a ``-inf`` bound gives 0.
    """
    h = np.asarray(h, dtype=float)
    R = np.asarray(R, dtype=float)
    if np.any(h == -np.inf):
        return 0.0
    keep = np.flatnonzero(h < np.inf)
    h = h[keep]
    R = R[np.ix_(keep, keep)]
    n = len(h)
    if n > EXACT_MAX_DIM:
        raise DimensionError(f"exact CDF limited to {EXACT_MAX_DIM} dims, got {n}")
    if n == 0:
        return 1.0
    if n == 1:
        return _phi(h[0])
    if n == 2:
        return bvn_cdf(h[0], h[1], R[0, 1])
    return _tvn_cdf(h, R)


def _orthant(pds, default_set, survive_set, Sigma):
    """Signed thresholds and correlations turning the rectangle into an orthant."""
    thr = default_thresholds(pds)
    d = sorted(default_set)
    s = sorted(survive_set)
    if set(d) & set(s):
        raise ValueError("a node cannot both default and survive")
    idx = d + s
    sign = np.array([1.0] * len(d) + [-1.0] * len(s))
    h = sign * thr[idx]
    R = np.asarray(Sigma, dtype=float)[np.ix_(idx, idx)] * np.outer(sign, sign)
    return h, R


class Estimate(NamedTuple):
    value: float
    stderr: float


def joint_default_prob(pds, default_set, survive_set=(), Sigma_sub=None,
                       method: str = "exact", n_samples: int = 100_000,
                       rng: np.random.Generator | None = None):
    """Probability that ``default_set`` defaults while ``survive_set`` survives.

    Nodes in neither set are integrated out. ``method="exact"`` uses the
    closed form (1 dim), Genz BVN (2 dims) or adaptive quadrature (3 dims)
    and returns a float. ``method="mc"`` returns an :class:`Estimate` from
    ``n_samples`` correlated latent draws.
    """
    pds = np.asarray(pds, dtype=float)
    n = len(pds)
    Sigma = np.eye(n) if Sigma_sub is None else np.asarray(Sigma_sub, dtype=float)
    if method == "exact":
        h, R = _orthant(pds, default_set, survive_set, Sigma)
        if len(h) > EXACT_MAX_DIM:
            raise DimensionError(f"exact method limited to {EXACT_MAX_DIM} nodes")
        return mvn_cdf(h, R)
    if method == "mc":
        rng = rng if rng is not None else stream(0)
        draw = sample_defaults(pds, cholesky_factor(Sigma), rng, size=n_samples)
        hit = np.ones(n_samples, dtype=bool)
        for i in default_set:
            hit &= draw.defaults[:, i]
        for i in survive_set:
            hit &= ~draw.defaults[:, i]
        p = hit.mean()
        return Estimate(float(p), float(math.sqrt(p * (1 - p) / n_samples)))
    raise ValueError(f"unknown method {method!r}")


def partition_probs(pds, Sigma) -> dict:
    """Exact probability of every default pattern of up to three nodes.

    Keys are frozensets of defaulting positions. Orthant CDFs of every subset
    are computed once and combined by inclusion-exclusion, so a 3-node call
    costs a single trivariate integral.
    """
    pds = np.asarray(pds, dtype=float)
    n = len(pds)
    if n > EXACT_MAX_DIM:
        raise DimensionError(f"exact partition limited to {EXACT_MAX_DIM} nodes")
    thr = default_thresholds(pds)
    Sigma = np.asarray(Sigma, dtype=float)
    cdf = {}
    for size in range(n + 1):
        for T in combinations(range(n), size):
            cdf[frozenset(T)] = mvn_cdf(thr[list(T)], Sigma[np.ix_(T, T)]) if T else 1.0
    out = {}
    for D in cdf:
        rest = [i for i in range(n) if i not in D]
        acc = 0.0
        for size in range(len(rest) + 1):
            sgn = -1.0 if size % 2 else 1.0
            for extra in combinations(rest, size):
                acc += sgn * cdf[D | frozenset(extra)]
        out[D] = min(1.0, max(0.0, acc))
    return out
