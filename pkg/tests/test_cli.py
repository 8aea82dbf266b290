import os

import pytest

from stoclaw import cli

CONFIG = """
[experiment]
replicas = 2

[solver]
N = 40
T = 0.05
n_snapshots = 5
"""


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(CONFIG)
    return str(p)


def test_simulate_exit_zero(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    code = cli.main(["simulate", "--config", config_file, "--seed", "5", "--out-dir", str(out), "--threads", "2"])
    assert code == 0
    assert {"series.csv", "snapshots.bin", "snapshots.txt", "manifest.txt"} <= set(os.listdir(out))
    assert "simulate: PASS" in capsys.readouterr().out


def test_command_line_overrides_file(tmp_path, config_file):
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", config_file, "--replicas", "3", "--out-dir", str(out)]) == 0
    text = (out / "manifest.txt").read_text()
    assert "replicas = 3" in text


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[solver]\nN = 4\n")
    assert cli.main(["simulate", "--config", str(bad)]) == cli.EXIT_USAGE
    assert "line 2" in capsys.readouterr().err


def test_usage_errors():
    with pytest.raises(SystemExit) as err:
        cli.main(["simulate", "--replicas", "0"])
    assert err.value.code == 2
    with pytest.raises(SystemExit):
        cli.main(["not_an_experiment"])


def test_experiment_error_exit_code(tmp_path, capsys):
    code = cli.main(["symbol", "--points", "3", "--out-dir", str(tmp_path)])
    assert code == cli.EXIT_ERROR
    assert "symbol_scan" in capsys.readouterr().err


def test_failed_check_exit_code(tmp_path, capsys):
    # the two-component symbol exponent falls short of its target, so the scan reports failure
    code = cli.main(["symbol", "--points", "8", "--out-dir", str(tmp_path / "o"), "--out", str(tmp_path / "s.csv")])
    assert code == cli.EXIT_FAILED
    assert "FAIL alpha_hat" in capsys.readouterr().out
    assert (tmp_path / "s.csv").read_text().startswith("delta,sup_measure,argmax_tau,argmax_kappa")
