from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from svpic.ensemble import InitialDistribution, ParticleEnsemble, SpeciesParams, init_ensemble
from svpic.fields import (AnalyticExternal, ExternalField, FieldModel, SelfConsistentCoulomb,
                          check_potentials, coupling, default_softening, efield_at, make_external,
                          potential_at, self_field_batch, self_potential_batch)

UNIT = SpeciesParams(charge=1.0, n_total=4 * np.pi)


def _single(pos=(0.0, 0.0, 0.0)):
    return ParticleEnsemble(np.array([pos], dtype=float), np.zeros((1, 3)))


def test_single_particle_exact():
    e = _single()
    assert potential_at([0, 2, 0], 0.0, e, UNIT, 0.0) == 0.5
    np.testing.assert_array_equal(efield_at([2, 0, 0], 0.0, e, UNIT, 0.0), [0.25, 0, 0])


def test_softened_single_particle():
    e = _single()
    eps = 0.5
    r = np.array([0.0, 0.0, 1.0])
    assert potential_at(r, 0.0, e, UNIT, eps) == pytest.approx(1 / np.sqrt(1 + eps ** 2))
    np.testing.assert_allclose(efield_at(r, 0.0, e, UNIT, eps), r / (1 + eps ** 2) ** 1.5)


def test_coincident_point_without_softening_rejected():
    with pytest.raises(ValueError):
        efield_at([0, 0, 0], 0.0, _single(), UNIT, 0.0)
    pair = ParticleEnsemble(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="coincide"):
        self_field_batch(pair, UNIT, 0.0)
    with pytest.raises(ValueError):
        efield_at([1, 0, 0], 0.0, _single(), UNIT, -1.0)


def test_coupling_scales_with_weight():
    assert coupling(SpeciesParams(charge=2.0, n_total=8.0), 4) == pytest.approx(2 * 8 / (16 * np.pi))


@given(st.integers(2, 60), st.integers(0, 2 ** 31), st.floats(0.01, 1.0))
def test_pairwise_antisymmetry(n, seed, eps):
    x = np.random.default_rng(seed).standard_normal((n, 3))
    e = ParticleEnsemble(x, np.zeros_like(x))
    f = self_field_batch(e, UNIT, eps)
    assert np.linalg.norm(f.sum(axis=0)) <= 1e-12 * max(1.0, np.abs(f).max()) * n


def test_self_field_matches_pointwise_sum():
    cloud = init_ensemble(40, InitialDistribution("maxwellian", {"position_sigma": 1.0}), 1)
    f = self_field_batch(cloud, UNIT, 0.1)
    others = ParticleEnsemble(np.delete(cloud.positions, 7, 0), np.zeros((39, 3)))
    # rescale the 39-particle sum to the 40-particle coupling
    ref = efield_at(cloud.positions[7], 0.0, others, UNIT, 0.1) * 39 / 40
    np.testing.assert_allclose(f[7], ref, rtol=1e-12)
    incl = self_field_batch(cloud, UNIT, 0.1, exclude_self=False)
    np.testing.assert_allclose(incl, f, atol=1e-13)  # own softened term is exactly zero
    phi = self_potential_batch(cloud, UNIT, 0.1)
    assert phi.shape == (40,)


def test_gradient_consistency():
    cloud = init_ensemble(200, InitialDistribution("maxwellian", {"position_sigma": 1.0}), 2)
    eps = default_softening(cloud.positions)
    x = np.array([0.3, -0.4, 0.8])
    h = 1e-5
    grad = [(potential_at(x + h * e, 0, cloud, UNIT, eps) - potential_at(x - h * e, 0, cloud, UNIT, eps))
            / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(efield_at(x, 0, cloud, UNIT, eps), -np.array(grad), rtol=1e-7)


def test_default_softening_fallbacks():
    assert default_softening(np.zeros((5, 3))) == pytest.approx(0.05)
    flat = np.array([[0, 0, 0], [2, 0, 0]], dtype=float)
    assert default_softening(flat) > 0


def test_analytic_potentials_consistent():
    f = AnalyticExternal(e0=(1, 0, -2), b0=(0.3, 0.0, 1.0), k=0.7)
    pts = np.random.default_rng(0).standard_normal((20, 3))
    res_e, res_b = check_potentials(f, pts)
    assert res_e < 1e-8 and res_b < 1e-8
    e, b = f.eb(pts, 0.0)
    np.testing.assert_allclose(e, np.array([1, 0, -2]) - 0.7 * pts)
    np.testing.assert_allclose(b, np.tile([0.3, 0, 1.0], (20, 1)))


def test_make_external_validation():
    assert make_external("uniform_b", {"b0": [0, 0, 2]}).b0[2] == 2
    with pytest.raises(ValueError, match="unknown external"):
        make_external("dipole")
    with pytest.raises(ValueError, match="does not accept"):
        make_external("uniform_e", {"b0": [0, 0, 1]})


def test_external_field_without_potentials():
    f = ExternalField(e_func=lambda x, t: np.ones_like(x))
    assert not f.has_potentials
    with pytest.raises(ValueError):
        f.potentials(np.zeros((1, 3)), 0.0)


def test_vacuum_has_no_fields():
    e, b = FieldModel().eb(np.zeros((2, 3)), 0.0)
    assert e is None and b is None


def test_self_consistent_resolves_softening_once():
    cloud = init_ensemble(30, InitialDistribution("maxwellian", {"position_sigma": 1.0}), 3)
    model = SelfConsistentCoulomb(external=AnalyticExternal(e0=(1, 0, 0)))
    e, b = model.particle_fields(cloud, UNIT, 0.0)
    assert model.softening == pytest.approx(default_softening(cloud.positions))
    np.testing.assert_allclose(e - 1.0 * np.array([1, 0, 0]),
                               self_field_batch(cloud, UNIT, model.softening), atol=1e-14)
    with pytest.raises(TypeError):
        model.eb(np.zeros((1, 3)), 0.0)


def test_far_field_monopole():
    cloud = init_ensemble(300, InitialDistribution("maxwellian", {"position_sigma": 0.5}), 4)
    sp = SpeciesParams(charge=-1.0, n_total=3.0)
    r = 50.0
    e = efield_at([r, 0, 0], 0.0, cloud, sp, 0.01)
    assert e[0] == pytest.approx(-3.0 / (4 * np.pi * r * r), rel=0.05)
