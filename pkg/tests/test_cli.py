import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from bailout.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _config(tmp_path, **kw):
    d = {"network": str(CONFIGS / "two_banks.yaml"), "alphas": [0.01],
         "mdp": {"horizon": 3, "levels_bp": [0, 100, 200]},
         "solver": {"n_bellman": 1000}, "eval_samples": 2000, "out": str(tmp_path / "out")}
    d.update(kw)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(d))
    return str(p)


def test_fit_writes_policy_file(tmp_path, capsys):
    assert main(["fit", "--config", _config(tmp_path)]) == EXIT_OK
    fit = json.loads((tmp_path / "out" / "policy_fit_alpha_0.01.json").read_text())
    assert fit["format"] == "bailout-policy-fit" and fit["horizon"] == 3
    assert [s["t"] for s in fit["steps"]] == [0, 1]


def test_evaluate_with_overrides(tmp_path):
    out = tmp_path / "elsewhere"
    code = main(["evaluate", "--config", _config(tmp_path), "--out", str(out), "--seed", "7",
                 "--samples", "1500", "--scenario", "half-equity"])
    assert code == EXIT_OK
    head = (out / "q_t0.csv").read_text().splitlines()[0]
    assert head.endswith("seed=7")
    assert (out / "summary.csv").exists()


def test_sweep_alpha(tmp_path, capsys):
    cfg = _config(tmp_path, alpha_c_bracket=[1e-4, 0.5], alpha_c_iters=2,
                  mdp={"horizon": 2, "levels_bp": [0, 100]})
    code = main(["sweep-alpha", "--config", cfg])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "alpha_c in" in out
    rows = (tmp_path / "out" / "alpha_c.csv").read_text().splitlines()
    lo, hi = (float(x) for x in rows[2].split(",")[4:6])
    assert 1e-4 < lo < hi < 0.5
    summary = (tmp_path / "out" / "summary.csv").read_text().splitlines()
    ends = [r.split(",") for r in summary[2:] if r.startswith("alpha_c,")]
    assert [float(r[1]) for r in ends] == [lo, hi]
    assert float(ends[0][4]) < 0 < float(ends[1][4])


def test_oracle_check_on_network_file(tmp_path, capsys):
    code = main(["oracle-check", "--config", _config(tmp_path),
                 "--network", str(CONFIGS / "two_banks.yaml")])
    assert code in (EXIT_OK, EXIT_CHECK)
    assert (tmp_path / "out" / "oracle_check.csv").exists()
    assert (tmp_path / "out" / "oracle_table.csv").exists()


def test_config_errors(tmp_path, capsys):
    assert main(["evaluate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("alphas: [\n")
    assert main(["evaluate", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text("alphas: []\n")
    assert main(["fit", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["fit", "--config", _config(tmp_path), "--samples", "5"]) == EXIT_CONFIG
    assert main(["fit", "--config", _config(tmp_path), "--seed", "-1"]) == EXIT_CONFIG
    assert main(["fit", "--config", _config(tmp_path), "--network", "builtin:moon"]) \
        == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_numerical_failure(tmp_path, capsys):
    net = tmp_path / "net.yaml"
    net.write_text(yaml.safe_dump({
        "nodes": [{"W": 100, "E": 3, "pd0": 0.5, "mu": -0.0305}], "exposures": [[0]]}))
    assert main(["fit", "--config", _config(tmp_path), "--network", str(net)]) == EXIT_NUMERIC
    net.write_text(yaml.safe_dump({
        "nodes": [{"W": 100, "E": 3, "pd0": 0.01}] * 2, "exposures": [[0, 0], [0, 0]],
        "correlation": [[1, 0.5], [0.9, 1]]}))
    assert main(["fit", "--config", _config(tmp_path), "--network", str(net)]) \
        in (EXIT_CONFIG, EXIT_NUMERIC)


def test_help_runs_as_module():
    out = subprocess.run([sys.executable, "-m", "bailout.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0
    for cmd in ("fit", "evaluate", "sweep-alpha", "oracle-check"):
        assert cmd in out.stdout


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 2
