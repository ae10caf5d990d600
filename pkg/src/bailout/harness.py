"""Networks, data fixtures and experiment drivers.

Builds the Krackhardt kite and EBA GSII networks, loads user network files,
reconstructs interbank exposures by iterative proportional fitting, and runs
the experiments that write CSV result files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .copula import stream
from .fvi import SolverConfig, convenience_from_table, fit_policy, q_values
from .mdp import MdpConfig, MdpState
from .network import BankNode, FinancialNetwork, calibrate_sigma

log = logging.getLogger(__name__)

# Krackhardt kite, 0-based node pairs
KK_EDGES = (
    (0, 1), (0, 2), (0, 3), (0, 5), (1, 3), (1, 4), (1, 6), (2, 3), (2, 5),
    (3, 4), (3, 5), (3, 6), (4, 6), (5, 6), (5, 7), (6, 7), (7, 8), (8, 9),
)
KK_RISKY = (4, 8, 10)
SCENARIOS = ("baseline", "half-equity")


class ConfigError(ValueError):
    """Invalid experiment or network configuration."""


class ReconstructionError(RuntimeError):
    pass


def homogeneous_correlation(n: int, rho: float) -> np.ndarray:
    S = np.full((n, n), float(rho))
    np.fill_diagonal(S, 1.0)
    return S


def _correlation(n, spec) -> np.ndarray:
    if np.isscalar(spec):
        return homogeneous_correlation(n, float(spec))
    S = np.asarray(spec, dtype=float)
    if S.shape != (n, n):
        raise ConfigError(f"correlation matrix must be {n}x{n}")
    return S


def build_kk_network(alpha: float = 0.01, J=None, *, literal_exposures: bool = False,
                     rho: float = 0.5, pd_floor: float = 0.00021, W: float = 100.0,
                     E: float = 3.0, risky_pd: float = 0.01, safe_pd: float = 0.001,
                     lgd: float = 1.0, scenario: str = "baseline") -> FinancialNetwork:
    """Ten homogeneous banks on the Krackhardt kite.

    ``J`` optionally presets the government stake, as a mapping from 1-based
    node id to amount. With ``literal_exposures`` every ordered pair has
    exposure 1 instead of the kite edges only.
    """
    n = 10
    w = np.ones((n, n)) if literal_exposures else np.zeros((n, n))
    for i, j in KK_EDGES:
        w[i, j] = w[j, i] = 1.0
    np.fill_diagonal(w, 0.0)
    stake = np.zeros(n)
    for node_id, amount in (J or {}).items():
        stake[int(node_id) - 1] = float(amount)
    Eeff = _scenario_equity(E, scenario)
    nodes = []
    for i in range(n):
        pd0 = risky_pd if i + 1 in KK_RISKY else safe_pd
        nodes.append(BankNode(id=i + 1, label=str(i + 1), W=W, E=Eeff,
                              sigma=calibrate_sigma(W, E, 0.0, pd0), lgd=lgd,
                              alpha=alpha, J=stake[i], pd_floor=pd_floor))
    return FinancialNetwork.from_nodes(nodes, w, homogeneous_correlation(n, rho))


def _scenario_equity(E, scenario):
    """Capital after the scenario shock. Sigma is always calibrated on the
    unshocked balance sheet, so a capital shock raises the initial PDs."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return E / 2 if scenario == "half-equity" else E


# ------------------------------------------------------------------ EBA

@dataclass(frozen=True)
class EbaRecord:
    symbol: str
    name: str
    W: float
    E: float
    pd0: float

    def __post_init__(self):
        if not self.W > self.E > 0:
            raise ValueError(f"{self.symbol}: need W > E > 0")
        if not 0 < self.pd0 < 1:
            raise ValueError(f"{self.symbol}: PD must lie in (0, 1)")


def eba_fixture_path() -> Path:
    return Path(str(resources.files("bailout") / "data" / "eba_2014.csv"))


def load_eba(path=None) -> list:
    """Parse the GSII table (symbol, name, W, E, PD; W and E in EUR billions)."""
    path = eba_fixture_path() if path is None else Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"symbol", "name", "W", "E", "PD"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(EbaRecord(row["symbol"].strip(), row["name"].strip(),
                                     float(row["W"]), float(row["E"]), float(row["PD"])))
            except (TypeError, ValueError, AttributeError) as exc:
                raise ValueError(f"{path}, line {lineno} ({row.get('symbol')!r}): {exc}") from exc
    return out


def _support(n, density, rng):
    mask = ~np.eye(n, dtype=bool)
    if density >= 1 or n < 2:
        return mask
    keep = (rng.random((n, n)) < density) & mask
    # every row and column keeps at least one partner
    for i in range(n):
        if not keep[i].any():
            keep[i, (i + 1 + rng.integers(n - 1)) % n] = True
        if not keep[:, i].any():
            keep[(i + 1 + rng.integers(n - 1)) % n, i] = True
    return keep


def ipf(rows, cols, support, tol: float = 1e-6, max_sweeps: int = 10_000) -> np.ndarray:
    """Scale a 0/1 support matrix to the given row and column sums."""
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    X = support.astype(float)
    X[rows == 0, :] = 0.0
    X[:, cols == 0] = 0.0
    if not X.any():
        if rows.any() or cols.any():
            raise ReconstructionError("no admissible support for non-zero margins")
        return X
    if not math.isclose(rows.sum(), cols.sum(), rel_tol=1e-12):
        raise ReconstructionError("row and column margins must have equal totals")
    resid = np.inf
    for _ in range(max_sweeps):
        r = X.sum(axis=1)
        X *= np.divide(rows, r, out=np.zeros_like(r), where=r > 0)[:, None]
        c = X.sum(axis=0)
        X *= np.divide(cols, c, out=np.zeros_like(c), where=c > 0)[None, :]
        r = X.sum(axis=1)
        scale = np.maximum(rows, 1e-300)
        resid = float(np.max(np.abs(r - rows) / scale))
        if resid <= tol:
            return X
    raise ReconstructionError(f"IPF did not converge after {max_sweeps} sweeps "
                              f"(max relative row residual {resid:.3g})")


def reconstruct_exposures(records=None, interbank_fraction: float = 0.25,
                          target_density: float = 1.0, *, margins=None, seed: int = 0,
                          tol: float = 1e-6, max_sweeps: int = 10_000) -> np.ndarray:
    """Exposure matrix with zero diagonal matching interbank margins.

    Margins default to ``interbank_fraction * W`` for both the interbank
    assets (rows) and liabilities (columns) of each bank. ``margins`` may be
    given explicitly as ``(rows, cols)``.
    """
    if margins is None:
        W = np.array([r.W for r in records], dtype=float)
        rows = cols = interbank_fraction * W
    else:
        rows, cols = (np.asarray(m, dtype=float) for m in margins)
    n = len(rows)
    if not 0 < target_density <= 1:
        raise ConfigError("target_density must lie in (0, 1]")
    support = _support(n, target_density, stream(seed, 7))
    return ipf(rows, cols, support, tol=tol, max_sweeps=max_sweeps)


def build_eba_network(records=None, alpha: float = 0.001, *, scenario: str = "baseline",
                      interbank_fraction: float = 0.25, target_density: float = 1.0,
                      rho: float = 0.5, pd_floor: float = 0.00021, lgd: float = 0.6,
                      seed: int = 0) -> FinancialNetwork:
    """GSII network; under ``half-equity`` every E is halved after calibration."""
    records = load_eba() if records is None else records
    w = reconstruct_exposures(records, interbank_fraction, target_density, seed=seed)
    nodes = []
    for i, r in enumerate(records):
        E = _scenario_equity(r.E, scenario)
        nodes.append(BankNode(id=i + 1, label=r.symbol, W=r.W, E=E,
                              sigma=calibrate_sigma(r.W, r.E, 0.0, r.pd0), lgd=lgd,
                              alpha=alpha, pd_floor=pd_floor))
    return FinancialNetwork.from_nodes(nodes, w, homogeneous_correlation(len(nodes), rho))


# ------------------------------------------------------- network files

def _exposures_from(spec, labels):
    n = len(labels)
    if isinstance(spec, dict):
        w = np.zeros((n, n))
        for edge in spec.get("edges", []):
            i, j, v = edge
            w[_node_index(i, labels), _node_index(j, labels)] = float(v)
        return w
    w = np.asarray(spec, dtype=float)
    if w.shape != (n, n):
        raise ConfigError(f"exposure matrix must be {n}x{n}")
    return w


def _node_index(ref, labels):
    if isinstance(ref, str):
        if ref not in labels:
            raise ConfigError(f"unknown node {ref!r}")
        return labels.index(ref)
    if not 1 <= int(ref) <= len(labels):
        raise ConfigError(f"node id {ref} out of range")
    return int(ref) - 1


def network_from_dict(d: dict, alpha=None, scenario: str = "baseline") -> FinancialNetwork:
    """Network from the structured file layout (nodes, exposures, correlation).

    Nodes carry W, E and ``pd0``; sigma is calibrated from them. ``alpha``,
    when given, overrides every node's value.
    """
    try:
        raw = d["nodes"]
        labels = [str(nd.get("label", k + 1)) for k, nd in enumerate(raw)]
        nodes = []
        for k, nd in enumerate(raw):
            E0 = float(nd["E"])
            E = _scenario_equity(E0, scenario)
            W = float(nd["W"])
            mu = float(nd.get("mu", 0.0))
            nodes.append(BankNode(
                id=k + 1, label=labels[k], W=W, E=E, mu=mu,
                sigma=calibrate_sigma(W, E0, mu, float(nd["pd0"])),
                lgd=float(nd.get("lgd", 1.0)),
                alpha=float(nd.get("alpha", 0.0) if alpha is None else alpha),
                J=float(nd.get("J", 0.0)),
                pd_floor=float(nd.get("pd_floor", 0.00021))))
        w = _exposures_from(d["exposures"], labels)
        S = _correlation(len(nodes), d.get("correlation", 0.0))
    except KeyError as exc:
        raise ConfigError(f"network file is missing field {exc}") from exc
    return FinancialNetwork.from_nodes(nodes, w, S)


def load_network_file(path, alpha=None, scenario: str = "baseline") -> FinancialNetwork:
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return network_from_dict(d, alpha, scenario)


# ------------------------------------------------------------ experiments

OUTPUTS = ("q_t0", "q_vs_time", "convenience_vs_time", "alpha_c")


@dataclass
class ExperimentConfig:
    network: str = "builtin:kk"
    network_options: dict = field(default_factory=dict)
    scenario: str = "baseline"
    mdp: MdpConfig = field(default_factory=MdpConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    alphas: list = field(default_factory=lambda: [0.0001, 0.001, 0.01])
    eval_samples: int | None = None
    outputs: tuple = ("q_t0", "q_vs_time", "convenience_vs_time")
    alpha_c_bracket: tuple = (1e-4, 1e-1)
    alpha_c_iters: int = 6
    out: str = "results"
    seed: int = 0

    def __post_init__(self):
        if not self.alphas:
            raise ConfigError("the alpha sweep must not be empty")
        if any(not 0 < a < 1 for a in self.alphas):
            raise ConfigError("alpha values must lie in (0, 1)")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        bad = set(self.outputs) - set(OUTPUTS)
        if bad:
            raise ConfigError(f"unknown outputs {sorted(bad)}")
        lo, hi = self.alpha_c_bracket
        if not 0 < lo < hi < 1:
            raise ConfigError("alpha_c bracket must satisfy 0 < lo < hi < 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "mdp" in d:
                d["mdp"] = MdpConfig(**{**d["mdp"], "levels_bp": tuple(d["mdp"].get(
                    "levels_bp", MdpConfig.levels_bp))})
            if "solver" in d:
                sv = dict(d["solver"])
                if "ridge_grid" in sv:
                    sv["ridge_grid"] = tuple(sv["ridge_grid"])
                d["solver"] = SolverConfig(**sv)
            for key in ("outputs", "alpha_c_bracket"):
                if key in d:
                    d[key] = tuple(d[key])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            d = yaml.safe_load(fh)
        if d is not None and not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mdp"]["levels_bp"] = list(d["mdp"]["levels_bp"])
        d["solver"]["ridge_grid"] = list(d["solver"]["ridge_grid"])
        d["outputs"] = list(self.outputs)
        d["alpha_c_bracket"] = list(self.alpha_c_bracket)
        return d

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_network(cfg: ExperimentConfig, alpha: float, scenario: str | None = None):
    scenario = cfg.scenario if scenario is None else scenario
    opts = dict(cfg.network_options)
    src = cfg.network
    try:
        if src == "builtin:kk":
            return build_kk_network(alpha, scenario=scenario, **opts)
        if src == "builtin:eba":
            records = load_eba(opts.pop("table", None))
            return build_eba_network(records, alpha, scenario=scenario, **opts)
    except TypeError as exc:
        raise ConfigError(f"bad network option: {exc}") from exc
    if src.startswith("builtin:"):
        raise ConfigError(f"unknown builtin network {src!r}")
    return load_network_file(src, alpha, scenario)


def _writer(path, cfg: ExperimentConfig, header):
    fh = open(path, "w", newline="")
    fh.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return fh, w


def _f(x) -> str:
    return repr(float(x))


@dataclass
class AlphaRun:
    alpha: float
    fit: object
    s0: MdpState


def _solver_for(cfg: ExperimentConfig, salt: int) -> SolverConfig:
    d = asdict(cfg.solver)
    d["seed"] = int(np.random.SeedSequence([cfg.seed, cfg.solver.seed, salt])
                    .generate_state(1)[0])
    d["ridge_grid"] = tuple(d["ridge_grid"])
    return SolverConfig(**d)


def fit_for_alpha(cfg: ExperimentConfig, alpha: float, scenario: str | None = None,
                  salt: int = 0, down_to: int = 0) -> AlphaRun:
    net = build_network(cfg, alpha, scenario)
    s0 = MdpState(net, frozenset(), 0, cfg.mdp.horizon)
    fit = fit_policy(s0, cfg.mdp, _solver_for(cfg, salt), down_to=down_to)
    return AlphaRun(alpha, fit, s0)


def evaluate_q(run: AlphaRun, cfg: ExperimentConfig, t: int = 0, key: int = 0,
               n_samples: int | None = None):
    n = n_samples or cfg.eval_samples or cfg.solver.n_bellman
    s = run.s0.moved_to(t)
    return q_values(s, run.fit, cfg.mdp, cfg.solver, stream(cfg.seed, 11, key, t), n)


ALPHA_MIN, ALPHA_MAX = 1e-8, 0.999


def estimate_alpha_c(conv, lo: float, hi: float, iters: int, z: float = 3.0,
                     max_factor: int = 8):
    """Bracket the sign change of convenience by log bisection.

    ``conv(alpha, factor) -> (value, se)`` evaluates the convenience with
    ``factor`` times the base sample count. An unresolved probe (within
    ``z`` standard errors of zero) is re-evaluated with doubled samples up
    to ``max_factor``; if it stays unresolved the search stops there.
    The starting bracket is widened by factors of ten when both ends favour
    the same decision. Returns ``(lo, hi, history)`` where abstention is
    significantly better at ``lo`` and intervention at ``hi``; ``lo = 0`` or
    ``hi = 1`` means the sign change lies beyond the widening limits.
    """
    history = []
    done = {}

    def probe(a):
        if a in done:
            return done[a]
        done[a] = _probe(a)
        return done[a]

    def _probe(a):
        factor = 1
        while True:
            c, se = conv(a, factor)
            history.append((a, c, se))
            if abs(c) > z * se or factor >= max_factor:
                return c, se
            factor *= 2

    # widen the bracket by decades until its ends have the required signs
    c, se = probe(lo)
    while c > z * se:
        hi, lo = lo, lo / 10
        if lo < ALPHA_MIN:
            return 0.0, hi, history
        c, se = probe(lo)
    if not c < -z * se:
        raise RuntimeError(f"convenience sign unresolved at alpha={lo:g}")
    c, se = probe(hi)
    while c < -z * se:
        lo, hi = hi, min(hi * 10, ALPHA_MAX)
        if lo >= ALPHA_MAX:
            return lo, 1.0, history
        c, se = probe(hi)
    if not c > z * se:
        raise RuntimeError(f"convenience sign unresolved at alpha={hi:g}")
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        c, se = probe(mid)
        if c > z * se:
            hi = mid
        elif c < -z * se:
            lo = mid
        else:
            break
    return lo, hi, history


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the configured outputs and write CSV files under ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    M = cfg.mdp.horizon
    want = set(cfg.outputs)
    runs = []
    if want & {"q_t0", "q_vs_time", "convenience_vs_time"}:
        runs = [fit_for_alpha(cfg, a, salt=k) for k, a in enumerate(cfg.alphas)]

    summary = []
    if "q_t0" in want:
        fh, w = _writer(out / "q_t0.csv", cfg, ["alpha", "action", "q", "se", "best"])
        with fh:
            for k, run in enumerate(runs):
                table = evaluate_q(run, cfg, 0, key=k)
                b = table.best()
                for i, a in enumerate(table.actions):
                    w.writerow([_f(run.alpha), a.label, _f(table.q[i]), _f(table.se[i]),
                                int(i == b)])
        paths["q_t0"] = out / "q_t0.csv"

    if want & {"q_vs_time", "convenience_vs_time"}:
        qf = cf = None
        if "q_vs_time" in want:
            qf, qw = _writer(out / "q_vs_time.csv", cfg,
                             ["alpha", "time_to_end", "action", "q", "se"])
            paths["q_vs_time"] = out / "q_vs_time.csv"
        if "convenience_vs_time" in want:
            cf, cw = _writer(out / "convenience_vs_time.csv", cfg,
                             ["alpha", "time_to_end", "convenience", "se", "best_nonzero"])
            paths["convenience_vs_time"] = out / "convenience_vs_time.csv"
        for k, run in enumerate(runs):
            for t in range(M):
                table = evaluate_q(run, cfg, t, key=k)
                b = table.best()
                summary.append(["best", _f(run.alpha), M - t, table.actions[b].label,
                                _f(table.q[b]), _f(table.se[b]), "", ""])
                if qf:
                    for i, a in enumerate(table.actions):
                        qw.writerow([_f(run.alpha), M - t, a.label, _f(table.q[i]),
                                     _f(table.se[i])])
                if cf:
                    c, se, lab = convenience_from_table(table)
                    cw.writerow([_f(run.alpha), M - t, _f(c), _f(se), lab or ""])
        for fh in (qf, cf):
            if fh:
                fh.close()
    elif runs:
        for k, run in enumerate(runs):
            table = evaluate_q(run, cfg, 0, key=k)
            b = table.best()
            summary.append(["best", _f(run.alpha), M, table.actions[b].label,
                            _f(table.q[b]), _f(table.se[b]), "", ""])

    if "alpha_c" in want:
        fh, w = _writer(out / "alpha_c.csv", cfg,
                        ["scenario", "alpha", "convenience", "se", "alpha_c_lo", "alpha_c_hi"])
        with fh:
            lo, hi, hist = alpha_c_search(cfg)
            for a, c, se in hist:
                w.writerow([cfg.scenario, _f(a), _f(c), _f(se), _f(lo), _f(hi)])
        paths["alpha_c"] = out / "alpha_c.csv"
        # convenience and its error at the two bracket ends
        ends = {a: (c, se) for a, c, se in hist}
        for a in (lo, hi):
            summary.append(["alpha_c", _f(a), M, "", _f(ends[a][0]), _f(ends[a][1]),
                            _f(lo), _f(hi)])

    if summary:
        fh, w = _writer(out / "summary.csv", cfg, ["record", "alpha", "time_to_end",
                                                   "best_action", "q", "se",
                                                   "alpha_c_lo", "alpha_c_hi"])
        with fh:
            w.writerows(summary)
        paths["summary"] = out / "summary.csv"
    return paths


def alpha_c_search(cfg: ExperimentConfig, scenario: str | None = None, z: float = 3.0):
    """alpha_c interval at t=0 for one scenario (one policy fit per probed alpha)."""
    runs = {}

    def conv(alpha, factor):
        if alpha not in runs:
            key = 1000 + len(runs)
            runs[alpha] = (key, fit_for_alpha(cfg, alpha, scenario, salt=key,
                                              down_to=min(1, cfg.mdp.horizon - 2)))
        key, run = runs[alpha]
        base = cfg.eval_samples or cfg.solver.n_bellman
        table = q_values(run.s0, run.fit, cfg.mdp, cfg.solver,
                         stream(cfg.seed, 11, key, factor), base * factor)
        c, se, _ = convenience_from_table(table)
        log.info("alpha=%.6g convenience=%.6g (se %.2g, x%d samples)", alpha, c, se, factor)
        return c, se

    lo, hi = cfg.alpha_c_bracket
    return estimate_alpha_c(conv, lo, hi, cfg.alpha_c_iters, z)
