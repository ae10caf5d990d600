"""Compiled vs pure-Python feature kernels.

Usage: python3 benchmarks/bench_kernels.py [--batch 64] [--repeat 3]
"""

import argparse
import time

import numpy as np

from bailout import _pykernels
from bailout.harness import build_eba_network, build_kk_network
from bailout.mdp import MdpConfig

try:
    from bailout import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _batch(net, P, rng):
    hit = rng.random((P, net.n)) < 0.1
    impact = hit.astype(float) @ net.w.T * 0.5
    W = net.W - impact
    E = net.E - impact
    J = np.broadcast_to(net.J, (P, net.n)).copy()
    alive = np.ones((P, net.n), dtype=bool)
    return W, E, J, alive


def _time(mod, net, batch, cfg, m, repeat):
    W, E, J, alive = batch
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = mod.greedy_zbar_batch(W, E, J, alive, net.mu, net.sigma, net.pd_floor,
                                    net.alpha, net.lgd, net.w, cfg.gamma, m,
                                    cfg.nonzero_levels, cfg.risky_threshold, cfg.mode_code)
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = [
        ("kite N=10 m=7", build_kk_network(0.01), MdpConfig(), 7),
        ("EBA N=35 m=7", build_eba_network(alpha=0.003),
         MdpConfig(levels_bp=(0, 50, 100, 150, 200, 250, 300),
                   targeting="all-risky-uniform"), 7),
    ]
    print(f"{'case':16s} {'python ms/state':>16s} {'cython ms/state':>16s} {'speedup':>8s}")
    for name, net, cfg, m in cases:
        batch = _batch(net, args.batch, rng)
        tp, outp = _time(_pykernels, net, batch, cfg, m, args.repeat)
        if _ckernels is None:
            print(f"{name:16s} {1e3 * tp / args.batch:16.3f} {'n/a':>16s}")
            continue
        tc, outc = _time(_ckernels, net, batch, cfg, m, args.repeat)
        err = float(np.max(np.abs(outp[0] - outc[0])))
        print(f"{name:16s} {1e3 * tp / args.batch:16.3f} {1e3 * tc / args.batch:16.3f} "
              f"{tp / tc:8.1f}x   max |dZ| {err:.1e}")


if __name__ == "__main__":
    main()
