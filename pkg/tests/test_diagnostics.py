from __future__ import annotations

import numpy as np
import pytest

from svpic.collision import CollisionModel, LenardBernstein
from svpic.diagnostics import (ConservationLedger, compare_to_maxwellian, gauss_residual,
                               ks_critical_value, speed_conservation_report,
                               track_conjugate_momentum)
from svpic.ensemble import (DepositionGrid, InitialDistribution, ParticleEnsemble, SpeciesParams,
                            init_ensemble)
from svpic.fields import AnalyticExternal, ExternalField
from svpic.sde import IntegratorSpec, simulate
from svpic.verify import gauss_refinement, momentum_residuals


def test_ledger_records_and_orders():
    e = init_ensemble(10, InitialDistribution("maxwellian"), 0)
    led = ConservationLedger()
    led.record(0.0, 0, e, SpeciesParams())
    led.record(0.1, 1, e, SpeciesParams(), 2.5)
    assert list(led.column("fe")) == [0.0, 2.5]
    with pytest.raises(ValueError):
        led.record(0.1, 2, e, SpeciesParams())
    with pytest.raises(KeyError):
        led.column("nope")


def test_maxwellian_comparison():
    good = init_ensemble(20_000, InitialDistribution("maxwellian", {"vth": 1.5}), 1)
    rep = compare_to_maxwellian(good, 2.25)
    assert rep.passes(0.01)
    bad = compare_to_maxwellian(good, 1.0)
    assert not bad.passes(0.05)
    assert ks_critical_value(100, 0.05) == pytest.approx(1.3581 / 10, rel=1e-3)


def _run_with_record(collision, field, scheme="ito_euler", dt=0.01, n=20, steps=10):
    sp = SpeciesParams(charge=1.0, mass=2.0)
    e = init_ensemble(n, InitialDistribution("maxwellian", {"position_sigma": 1.0}), 3, sp,
                      field.vector_potential)
    res = simulate(e, sp, collision, field, IntegratorSpec(scheme, dt, steps), 5, record_stride=1)
    return res, sp


def test_momentum_identity_trivial_cases():
    # A = 0 and LB collisions: P = m V, so dP - m dV vanishes identically
    field = AnalyticExternal(name="none")
    res, sp = _run_with_record(LenardBernstein(), field)
    np.testing.assert_array_equal(res.ensemble.momenta, sp.mass * res.ensemble.velocities)
    rep = track_conjugate_momentum(res.trajectory, field, sp, LenardBernstein())
    assert rep.rhs_decomposition["vector_potential"] == 0.0
    assert rep.rhs_decomposition["noise"] > 0
    # what remains is the trapezoidal average of the drift, which sees the noise
    # in V(t + dt): O(dt dW) = O(dt^1.5) per step
    assert rep.max_residual < 10 * 0.01 ** 1.5


def test_momentum_residual_second_order():
    dts = [0.04, 0.02, 0.01]
    res = momentum_residuals(dts, horizon=0.4, n=30)
    assert np.log(res[0] / res[-1]) / np.log(4) == pytest.approx(2.0, abs=0.1)


def test_momentum_check_needs_potentials():
    res, sp = _run_with_record(CollisionModel(), AnalyticExternal(b0=(0, 0, 1.0)))
    with pytest.raises(ValueError):
        track_conjugate_momentum(res.trajectory, ExternalField(e_func=lambda x, t: 0 * x), sp)


def test_gauss_residual_zero_charge():
    e = init_ensemble(10, InitialDistribution("maxwellian", {"position_sigma": 1.0}), 0)
    grid = DepositionGrid([-5] * 3, [5] * 3, (4, 4, 4))
    assert gauss_residual(e, SpeciesParams(charge=0.0), grid, 0.1) == 0.0


def test_gauss_residual_single_particle():
    e = ParticleEnsemble(np.array([[0.1, 0.2, 0.3]]), np.zeros((1, 3)))
    grid = DepositionGrid([-1] * 3, [1] * 3, (4, 4, 4))
    assert gauss_residual(e, SpeciesParams(), grid, 1e-3) < 0.1


def test_gauss_residual_rejects_bad_grids():
    e = init_ensemble(10, InitialDistribution("maxwellian", {"position_sigma": 1.0}), 0)
    with pytest.raises(ValueError):
        gauss_residual(e, SpeciesParams(), DepositionGrid([-5] * 3, [5] * 3, (4, 4, 4),
                                                          coords=("v1", "v2", "v3")), 0.1)
    with pytest.raises(ValueError, match="does not cover"):
        gauss_residual(e, SpeciesParams(), DepositionGrid([50] * 3, [60] * 3, (2, 2, 2)), 0.1)


def test_gauss_refinement_decreases():
    res = gauss_refinement(n=300, seed=2)
    assert res[0] > res[1] > res[2]


def test_speed_report_from_trajectory():
    res, _ = _run_with_record(CollisionModel(), AnalyticExternal(b0=(0, 0, 1.0)), dt=0.05)
    rep = speed_conservation_report(res.trajectory)
    # explicit Euler in a magnetic field grows speeds by O(dt^2) per step
    assert 0 < rep.max_rel_drift < 0.05
    assert rep.n_excluded == 0
