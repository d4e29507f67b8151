from __future__ import annotations

import json

import pytest

from svpic import cli, verify
from svpic.verify import CriterionResult

LB = """
seed = 3
collision = "lenard_bernstein"
[particles]
n = 500
distribution = "cold_beam"
[particles.params]
velocity = [1.0, 0.0, 0.0]
[integrator]
dt = 0.1
n_steps = 10
"""


@pytest.fixture
def lb_config(tmp_path):
    path = tmp_path / "lb.toml"
    path.write_text(LB)
    return path


def test_run_success(lb_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", str(lb_config), "--out-dir", str(out)]) == 0
    assert (out / "manifest.json").exists() and (out / "diagnostics.csv").exists()
    assert json.loads(capsys.readouterr().out)["n_steps"] == 10


def test_run_respects_environment_output(lb_config, tmp_path, monkeypatch):
    monkeypatch.setenv("SVPIC_OUT", str(tmp_path / "env"))
    assert cli.main(["run", "--config", str(lb_config), "--steps", "2"]) == 0
    assert (tmp_path / "env" / "final.svpm").exists()


def test_run_invalid_config(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text(LB.replace("n = 500", "n = 0\ncolour = 1"))
    assert cli.main(["run", str(path)]) == 2
    err = capsys.readouterr().err
    assert "particles.n" in err and "colour" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_numerical_abort(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text(LB.replace('collision = "lenard_bernstein"', 'collision = "coulomb"')
                    .replace("cold_beam", "maxwellian").replace("velocity = [1.0, 0.0, 0.0]", ""))
    code = cli.main(["run", str(path), "--dt", "1e300", "--out-dir", str(tmp_path / "o")])
    assert code == 3
    assert "step" in capsys.readouterr().err


def test_missing_config_is_invalid(capsys):
    assert cli.main(["run"]) == 2


def test_convergence(lb_config, capsys):
    assert cli.main(["convergence", str(lb_config), "--levels", "3"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert len(rep["observables"]["mean_sq_speed"]["values"]) == 3
    assert cli.main(["convergence", str(lb_config), "--levels", "1"]) == 2


def test_inspect(lb_config, tmp_path, capsys):
    out = tmp_path / "o"
    cli.main(["run", str(lb_config), "--out-dir", str(out)])
    capsys.readouterr()
    assert cli.main(["inspect", str(out / "final.svpm")]) == 0
    assert json.loads(capsys.readouterr().out)["n_particles"] == 500
    assert cli.main(["inspect", str(out / "diagnostics.csv")]) == 0
    assert cli.main(["inspect", str(lb_config)]) == 0
    assert cli.main(["inspect", str(out / "manifest.json")]) == 2


def _fake(passed):
    def fn(seed):
        return CriterionResult(99, "fake", passed, {"x": 1.0}, {"x": 2.0})
    return fn


def test_verify_output_and_exit_code(monkeypatch, capsys):
    monkeypatch.setitem(verify.SUITES, "lb", (_fake(True), _fake(True)))
    assert cli.main(["verify", "lb"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [json.loads(ln)["passed"] for ln in lines] == [True, True]
    monkeypatch.setitem(verify.SUITES, "lb", (_fake(True), _fake(False)))
    assert cli.main(["verify", "lb"]) == 1


def test_verify_rejects_unknown_suite():
    with pytest.raises(SystemExit):
        cli.main(["verify", "everything"])


def test_threads_flag(lb_config, tmp_path):
    assert cli.main(["run", str(lb_config), "--threads", "2", "--out-dir", str(tmp_path / "t")]) == 0
    with pytest.raises(SystemExit):
        cli.main(["run", str(lb_config), "--threads", "0"])
