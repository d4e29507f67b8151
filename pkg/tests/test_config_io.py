from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from svpic.collision import Coulomb, LenardBernstein, Lorentz, PowerLawFrequency
from svpic.config_io import (ConfigError, SnapshotError, execute, load_config, parse_config,
                             read_diagnostics_csv, read_snapshot, write_snapshot)
from svpic.ensemble import ParticleEnsemble
from svpic.fields import AnalyticExternal, SelfConsistentCoulomb

BASE = """
seed = 5
collision = "lenard_bernstein"
[particles]
n = 200
distribution = "maxwellian"
[integrator]
dt = 0.01
n_steps = 20
"""


def test_parse_minimal():
    cfg = parse_config(BASE)
    assert cfg.n_particles == 200 and cfg.seed == 5
    assert isinstance(cfg.build_collision(), LenardBernstein)
    assert cfg.integrator.scheme == "ito_euler"


def test_all_errors_reported_with_suggestion():
    bad = BASE.replace("n = 200", "n = -3\nditribution = 1").replace("dt = 0.01", "dt = 'x'")
    with pytest.raises(ConfigError) as info:
        parse_config(bad)
    errs = "\n".join(info.value.errors)
    assert "did you mean 'distribution'" in errs
    assert "integrator.dt" in errs
    assert len(info.value.errors) >= 3


def test_syntax_error():
    with pytest.raises(ConfigError, match="syntax"):
        parse_config("[particles\n")


def test_overrides_applied():
    cfg = parse_config(BASE, {"integrator.dt": 0.5, "seed": 9, "collision.nu": 2.0})
    assert cfg.integrator.dt == 0.5 and cfg.seed == 9
    assert cfg.build_collision().nu == 2.0


def test_seed_derived_from_hash_when_absent():
    a = parse_config(BASE.replace("seed = 5", ""))
    b = parse_config(BASE.replace("seed = 5", "").replace("n_steps = 20", "n_steps = 30"))
    assert a.seed is None
    # the step count is not physics, so the derived seed is shared
    assert a.effective_seed() == b.effective_seed()
    c = parse_config(BASE.replace("seed = 5", "").replace("dt = 0.01", "dt = 0.02"))
    assert c.effective_seed() != a.effective_seed()


def test_collision_and_field_sections():
    text = BASE.replace('collision = "lenard_bernstein"', "") + """
[collision]
kind = "lorentz"
frequency = "power_law"
nu0 = 2.0
[fields]
kind = "external"
external = "uniform_b"
b0 = [0.0, 0.0, 1.0]
"""
    cfg = parse_config(text)
    col = cfg.build_collision()
    assert isinstance(col, Lorentz) and isinstance(col.frequency, PowerLawFrequency)
    assert isinstance(cfg.build_fields(), AnalyticExternal)
    text2 = BASE.replace('collision = "lenard_bernstein"',
                         'collision = "coulomb"\nfields = "self_consistent"')
    cfg2 = parse_config(text2)
    assert isinstance(cfg2.build_collision(), Coulomb)
    assert isinstance(cfg2.build_fields(), SelfConsistentCoulomb)


def test_cross_checks():
    with pytest.raises(ConfigError, match="lorentz"):
        parse_config(BASE.replace("dt = 0.01", 'dt = 0.01\nscheme = "lorentz_rotation"'))
    with pytest.raises(ConfigError):
        parse_config(BASE + "[output]\nmomentum_diagnostics = true\n")


@given(arrays(float, (7, 3), elements=st.floats(-1e6, 1e6)),
       arrays(float, (7, 3), elements=st.floats(-1e6, 1e6)), st.booleans())
def test_snapshot_round_trip(tmp_path_factory, x, v, with_p):
    path = tmp_path_factory.mktemp("snap") / "s.svpm"
    e = ParticleEnsemble(x, v, x + v if with_p else None, 0.25)
    write_snapshot(path, e, {"t": 1.5, "step": 3})
    back, meta = read_snapshot(path)
    assert np.array_equal(back.positions, x) and np.array_equal(back.velocities, v)
    assert (back.momenta is None) == (not with_p)
    assert meta["t"] == 1.5 and back.weight == 0.25


def test_corrupt_snapshots_rejected(tmp_path):
    e = ParticleEnsemble(np.zeros((3, 3)), np.ones((3, 3)))
    path = write_snapshot(tmp_path / "a.svpm", e, {})
    data = path.read_bytes()
    for bad in (b"XXXX" + data[4:], data[:-8], data[:10], data + b"\0" * 8):
        p = tmp_path / "bad.svpm"
        p.write_bytes(bad)
        with pytest.raises(SnapshotError):
            read_snapshot(p)


def test_execute_writes_outputs_and_restart_continues(tmp_path):
    full = load_config_text(tmp_path, BASE, "full")
    execute(full)
    half = load_config_text(tmp_path, BASE.replace("n_steps = 20", "n_steps = 10"), "half")
    execute(half)
    rest_text = BASE.replace("n_steps = 20", "n_steps = 10").replace(
        "[particles]", f"[particles]\nrestart = '{tmp_path / 'half' / 'final.svpm'}'")
    rest = load_config_text(tmp_path, rest_text, "rest")
    execute(rest)
    a, meta_a = read_snapshot(tmp_path / "full" / "final.svpm")
    b, meta_b = read_snapshot(tmp_path / "rest" / "final.svpm")
    assert np.array_equal(a.velocities, b.velocities)
    assert meta_a["step"] == meta_b["step"] == 20
    rows = read_diagnostics_csv(tmp_path / "full" / "diagnostics.csv")
    assert rows[0]["step"] == 0 and rows[-1]["step"] == 20
    manifest = json.loads((tmp_path / "full" / "manifest.json").read_text())
    assert manifest["seed"] == 5 and {f["name"] for f in manifest["files"]} >= {
        "final.svpm", "diagnostics.csv", "summary.json"}
    # timing lives only in the manifest
    summary = json.loads((tmp_path / "full" / "summary.json").read_text())
    assert "wall_time_s" not in json.dumps(summary)


def test_restart_hash_mismatch_warns(tmp_path):
    execute(load_config_text(tmp_path, BASE, "one"))
    other = BASE.replace("dt = 0.01", "dt = 0.02").replace(
        "[particles]", f"[particles]\nrestart = '{tmp_path / 'one' / 'final.svpm'}'")
    execute(load_config_text(tmp_path, other, "two"))
    manifest = json.loads((tmp_path / "two" / "manifest.json").read_text())
    assert any("different configuration" in w for w in manifest["warnings"])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.toml")


def load_config_text(tmp_path, text, name):
    path = tmp_path / f"{name}.toml"
    path.write_text(text + f"\n[output]\ndir = '{tmp_path / name}'\n")
    return load_config(path)
