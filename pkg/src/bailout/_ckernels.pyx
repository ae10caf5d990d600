# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled feature kernels; same contract as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, erfc, fabs
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset

cnp.import_array()

cdef double SQRT1_2 = 0.70710678118654752440


cdef inline double _pd(double W, double E, double mu, double sigma, double floor) noexcept nogil:
    cdef double d, p
    if E <= 0.0:
        return 1.0
    if E >= W:
        return floor
    d = (log(W / (W - E)) + mu - 0.5 * sigma * sigma) / sigma
    p = 0.5 * erfc(d * SQRT1_2)
    if p < floor:
        p = floor
    if p > 1.0:
        p = 1.0
    return p


cdef struct Net:
    int n
    const double* W
    const double* E
    const double* J
    const unsigned char* alive
    const double* mu
    const double* sigma
    const double* floor
    const double* alpha
    const double* lgd
    const double* w
    double gamma


cdef inline double _advance(Net* net, double* I, double* Jc, double* S,
                            const double* dJ, double* z, double* pdS) noexcept nogil:
    """In-place offset step; returns sum(z). pdS is scratch of length n."""
    cdef int i, j, n = net.n
    cdef double Wk, Ek, pd, tot = 0.0, acc
    for i in range(n):
        Jc[i] += dJ[i]
        if not net.alive[i]:
            z[i] = 0.0
            pdS[i] = 0.0
            continue
        Wk = net.W[i] + Jc[i] - I[i]
        Ek = net.E[i] + Jc[i] - I[i]
        pd = _pd(Wk, Ek, net.mu[i], net.sigma[i], net.floor[i])
        z[i] = pd * (net.alpha[i] * Wk + (net.J[i] + Jc[i]) * net.lgd[i]) * S[i]
        tot += z[i]
        pdS[i] = pd * S[i]
        S[i] *= 1.0 - pd
    for i in range(n):
        if not net.alive[i]:
            continue
        acc = 0.0
        for j in range(n):
            acc += net.w[i * n + j] * pdS[j]
        I[i] += acc
    return tot


cdef double _suffix(Net* net, const double* I0, const double* Jc0, const double* S0,
                    const double* dJ, int j, int m, double* buf) noexcept nogil:
    cdef int n = net.n, k
    cdef double* I = buf
    cdef double* Jc = buf + n
    cdef double* S = buf + 2 * n
    cdef double* z = buf + 3 * n
    cdef double* pdS = buf + 4 * n
    cdef double* zero = buf + 5 * n
    cdef double g = 1.0, total = 0.0
    memcpy(I, I0, n * sizeof(double))
    memcpy(Jc, Jc0, n * sizeof(double))
    memcpy(S, S0, n * sizeof(double))
    memset(zero, 0, n * sizeof(double))
    for k in range(1, j):
        g *= net.gamma
    for k in range(j, m + 1):
        total += g * _advance(net, I, Jc, S, dJ if k == j else zero, z, pdS)
        g *= net.gamma
    return total


cdef void _greedy_one(Net* net, int m, const double* levels, int nlev, double threshold,
                      int mode, double* Zout, double* dJout, long* chout,
                      double* buf) noexcept nogil:
    cdef int n = net.n
    cdef double* I = buf
    cdef double* Jc = buf + n
    cdef double* S = buf + 2 * n
    cdef double* z = buf + 3 * n
    cdef double* pdS = buf + 4 * n
    cdef double* Wp = buf + 5 * n
    cdef double* cand = buf + 6 * n
    cdef double* bestdJ = buf + 7 * n
    cdef unsigned char* risky = <unsigned char*> (buf + 8 * n)
    cdef double* sbuf = buf + 9 * n
    cdef int i, j, li, nrisky, ci, scope, bscope, bnode, blev
    cdef double Ep, pdp, g = 1.0, tl, tot, btl, btot, tol
    cdef bint have
    for i in range(n):
        I[i] = 0.0
        Jc[i] = 0.0
        S[i] = 1.0
    for j in range(1, m + 1):
        nrisky = 0
        for i in range(n):
            Wp[i] = net.W[i] + Jc[i] - I[i]
            Ep = net.E[i] + Jc[i] - I[i]
            risky[i] = 0
            if net.alive[i] and Ep > 0.0:
                pdp = _pd(Wp[i], Ep, net.mu[i], net.sigma[i], net.floor[i])
                if pdp > threshold:
                    risky[i] = 1
                    nrisky += 1
        memset(bestdJ, 0, n * sizeof(double))
        bscope = 0
        bnode = -1
        blev = -1
        if nrisky > 0:
            btl = _suffix(net, I, Jc, S, bestdJ, j, m, sbuf)
            btot = 0.0
            if mode == 0:
                for ci in range(n):
                    if not risky[ci]:
                        continue
                    for li in range(nlev):
                        memset(cand, 0, n * sizeof(double))
                        cand[ci] = levels[li] * Wp[ci]
                        tl = _suffix(net, I, Jc, S, cand, j, m, sbuf)
                        tot = cand[ci]
                        tol = 1e-12 + 1e-10 * fabs(btl)
                        if tl < btl - tol or (fabs(tl - btl) <= tol and tot < btot - 1e-12):
                            btl = tl
                            btot = tot
                            memcpy(bestdJ, cand, n * sizeof(double))
                            bscope = 1
                            bnode = ci
                            blev = li
            if mode != 0 or nrisky > 1:
                for li in range(nlev):
                    tot = 0.0
                    for i in range(n):
                        if risky[i]:
                            cand[i] = levels[li] * Wp[i]
                        else:
                            cand[i] = 0.0
                        tot += cand[i]
                    tl = _suffix(net, I, Jc, S, cand, j, m, sbuf)
                    tol = 1e-12 + 1e-10 * fabs(btl)
                    if tl < btl - tol or (fabs(tl - btl) <= tol and tot < btot - 1e-12):
                        btl = tl
                        btot = tot
                        memcpy(bestdJ, cand, n * sizeof(double))
                        bscope = 2
                        bnode = -1
                        blev = li
        _advance(net, I, Jc, S, bestdJ, z, pdS)
        for i in range(n):
            Zout[i * m + (j - 1)] = g * z[i]
            dJout[(j - 1) * n + i] = bestdJ[i]
        chout[(j - 1) * 3] = bscope
        chout[(j - 1) * 3 + 1] = bnode
        chout[(j - 1) * 3 + 2] = blev
        g *= net.gamma


def greedy_zbar_batch(W, E, J, alive, mu, sigma, floor, alpha, lgd, w, double gamma,
                      int m, levels, double threshold, int mode):
    cdef cnp.ndarray[double, ndim=2, mode="c"] cW = np.ascontiguousarray(W, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] cE = np.ascontiguousarray(E, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] cJ = np.ascontiguousarray(J, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2, mode="c"] cA = np.ascontiguousarray(alive, dtype=np.uint8)
    cdef cnp.ndarray[double, ndim=1, mode="c"] cmu = np.ascontiguousarray(mu, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] csig = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] cfl = np.ascontiguousarray(floor, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] cal = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] clgd = np.ascontiguousarray(lgd, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] cw = np.ascontiguousarray(w, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] clev = np.ascontiguousarray(levels, dtype=np.float64)
    cdef int P = cW.shape[0], n = cW.shape[1], p
    cdef cnp.ndarray[double, ndim=3, mode="c"] Z = np.zeros((P, n, m))
    cdef cnp.ndarray[double, ndim=3, mode="c"] dJ = np.zeros((P, m, n))
    cdef cnp.ndarray[long, ndim=3, mode="c"] ch = np.zeros((P, m, 3), dtype=np.int_)
    cdef Net net
    cdef double* buf = <double*> malloc(16 * max(n, 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    net.n = n
    net.mu = &cmu[0]
    net.sigma = &csig[0]
    net.floor = &cfl[0]
    net.alpha = &cal[0]
    net.lgd = &clgd[0]
    net.w = &cw[0, 0]
    net.gamma = gamma
    try:
        with nogil:
            for p in range(P):
                net.W = &cW[p, 0]
                net.E = &cE[p, 0]
                net.J = &cJ[p, 0]
                net.alive = &cA[p, 0]
                _greedy_one(&net, m, &clev[0] if clev.shape[0] > 0 else NULL,
                            clev.shape[0], threshold, mode,
                            &Z[p, 0, 0], &dJ[p, 0, 0], &ch[p, 0, 0], buf)
    finally:
        free(buf)
    return Z, dJ, ch.astype(np.int64)


def z_path(W, E, J, alive, mu, sigma, floor, alpha, lgd, w, double gamma, dJ_seq):
    cdef cnp.ndarray[double, ndim=2, mode="c"] cd = np.ascontiguousarray(dJ_seq, dtype=np.float64)
    cdef int m = cd.shape[0], n = cd.shape[1], k, i
    cdef cnp.ndarray[double, ndim=1, mode="c"] cW = np.ascontiguousarray(W, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] cE = np.ascontiguousarray(E, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] cJ = np.ascontiguousarray(J, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1, mode="c"] cA = np.ascontiguousarray(alive, dtype=np.uint8)
    cdef cnp.ndarray[double, ndim=1, mode="c"] cmu = np.ascontiguousarray(mu, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] csig = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] cfl = np.ascontiguousarray(floor, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] cal = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] clgd = np.ascontiguousarray(lgd, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] cw = np.ascontiguousarray(w, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] Z = np.zeros((n, m))
    cdef cnp.ndarray[double, ndim=1, mode="c"] work = np.zeros(5 * max(n, 1))
    cdef Net net
    cdef double g = 1.0
    net.n = n
    net.W = &cW[0]
    net.E = &cE[0]
    net.J = &cJ[0]
    net.alive = &cA[0]
    net.mu = &cmu[0]
    net.sigma = &csig[0]
    net.floor = &cfl[0]
    net.alpha = &cal[0]
    net.lgd = &clgd[0]
    net.w = &cw[0, 0]
    net.gamma = gamma
    cdef double* I = &work[0]
    cdef double* Jc = &work[n]
    cdef double* S = &work[2 * n]
    cdef double* z = &work[3 * n]
    cdef double* pdS = &work[4 * n]
    for i in range(n):
        S[i] = 1.0
    for k in range(m):
        _advance(&net, I, Jc, S, &cd[k, 0], z, pdS)
        for i in range(n):
            Z[i, k] = g * z[i]
        g *= gamma
    return Z
