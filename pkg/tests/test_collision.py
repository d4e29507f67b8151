from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from svpic.collision import (ConstantFrequency, Coulomb, CustomDK, LenardBernstein, LocalitySpec,
                             Lorentz, NoCollisions, PowerLawFrequency, decompose_dk,
                             eval_coulomb, eval_lenard_bernstein, eval_lorentz, sqrt_psd)
from svpic.ensemble import InitialDistribution, ParticleEnsemble, SpeciesParams, init_ensemble
from svpic.oracle import fd_strat_correction
from svpic.verify import _fd_correction_sqrtm, random_dk_family

finite = st.floats(-3, 3, allow_nan=False)
vec3 = arrays(float, 3, elements=finite)


def test_lenard_bernstein_values():
    f = eval_lenard_bernstein(LenardBernstein(2.0, 0.5, 3.0), np.zeros(3), [1.0, -2.0, 0.5])
    np.testing.assert_allclose(f.drift_g, [-1.0, 2.0, -0.5])
    np.testing.assert_allclose(f.diffusion_g, np.sqrt(2.0) * 3.0 * np.eye(3))
    np.testing.assert_allclose(f.stratonovich_correction, 0.0)
    np.testing.assert_allclose(f.diffusion_matrix, 18.0 * np.eye(3))


def test_lenard_bernstein_rejects_negative():
    with pytest.raises(ValueError):
        LenardBernstein(nu=-1.0)


@given(vec3)
def test_lorentz_noise_orthogonal_to_velocity(v):
    f = eval_lorentz(ConstantFrequency(1.5), np.zeros(3), v)
    np.testing.assert_allclose(f.diffusion_g @ v, 0.0, atol=1e-12)
    np.testing.assert_allclose(f.drift_g, 0.0)
    np.testing.assert_allclose(f.ito_drift_k, -1.5 * v, atol=1e-14)
    d_ref = 1.5 * (np.dot(v, v) * np.eye(3) - np.outer(v, v))
    np.testing.assert_allclose(f.diffusion_matrix, d_ref, atol=1e-12)


@given(vec3.filter(lambda v: np.linalg.norm(v) > 0.1))
def test_lorentz_ito_drift_matches_fd_correction(v):
    op = Lorentz(PowerLawFrequency(1.0, -3.0))
    f = op.forcing(np.zeros(3), v)[0]
    fd = fd_strat_correction(lambda vv: op.forcing(np.zeros(3), vv)[0].diffusion_g, v)
    np.testing.assert_allclose(f.stratonovich_correction, fd, atol=1e-6 * (1 + np.abs(fd).max()))


def test_power_law_cutoff():
    nu = PowerLawFrequency(2.0, -3.0, v_min=0.5)
    assert nu(0.0) == pytest.approx(2.0 * 0.5 ** -3)
    assert nu(2.0) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        PowerLawFrequency(v_min=0.0)


@given(st.integers(0, 2 ** 32 - 1))
def test_decompose_random_psd(seed):
    rng = np.random.default_rng(seed)
    d_of_v, dd_of_v, k = random_dk_family(rng)
    v = rng.standard_normal(3)
    f = decompose_dk(d_of_v(v), k, dd_of_v(v))
    np.testing.assert_allclose(f.diffusion_matrix, d_of_v(v), atol=1e-10 * np.abs(d_of_v(v)).max())
    np.testing.assert_allclose(f.stratonovich_correction, _fd_correction_sqrtm(d_of_v, v),
                               atol=1e-6)
    # the finite-difference path agrees with the analytic derivative
    g = decompose_dk(d_of_v(v), k, d_of_v=d_of_v, v=v)
    np.testing.assert_allclose(g.drift_g, f.drift_g, atol=1e-6)


def test_decompose_without_derivative_is_constant_d():
    f = decompose_dk(np.diag([1.0, 4.0, 9.0]), np.ones(3))
    np.testing.assert_allclose(f.diffusion_g, np.diag([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(f.drift_g, 1.0)


def test_decompose_rejects_asymmetric_and_indefinite():
    with pytest.raises(ValueError, match="symmetric"):
        decompose_dk(np.array([[1.0, 0.5, 0], [0, 1, 0], [0, 0, 1]]), np.zeros(3))
    with pytest.raises(ValueError):
        decompose_dk(np.diag([1.0, -0.1, 1.0]), np.zeros(3))


def test_tiny_negative_eigenvalue_clipped():
    s = sqrt_psd(np.diag([1.0, -1e-14, 4.0]))
    np.testing.assert_allclose(s, np.diag([1.0, 0.0, 2.0]))


def _brute_coulomb(v, field_v, softening, scale):
    d = np.zeros((3, 3))
    k = np.zeros(3)
    for u in field_v:
        w = v - u
        s = np.sqrt(w @ w + softening ** 2)
        d += (np.dot(w, w) * np.eye(3) - np.outer(w, w)) / s ** 3
        k += -2.0 * w / s ** 3
    return scale * d, scale * k


def test_coulomb_matches_direct_loop():
    sp = SpeciesParams(n_total=5.0)
    cloud = init_ensemble(60, InitialDistribution("maxwellian"), 3, sp)
    v = np.array([0.3, -0.2, 1.1])
    f = eval_coulomb(2.0, 1e-2, np.zeros(3), v, cloud, sp)
    d_ref, k_ref = _brute_coulomb(v, cloud.velocities, 1e-2, 2.0 * 5.0 / 60)
    np.testing.assert_allclose(f.diffusion_matrix, d_ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(f.ito_drift_k, k_ref, rtol=1e-10)


def test_coulomb_self_exclusion():
    sp = SpeciesParams()
    cloud = init_ensemble(30, InitialDistribution("maxwellian"), 5, sp)
    f = eval_coulomb(1.0, 0.0, cloud.positions[4], cloud.velocities[4], cloud, sp,
                     exclude_index=4)
    others = np.delete(cloud.velocities, 4, axis=0)
    d_ref, k_ref = _brute_coulomb(cloud.velocities[4], others, 0.0, 1.0 / 29)
    np.testing.assert_allclose(f.diffusion_matrix, d_ref, rtol=1e-10)
    np.testing.assert_allclose(f.ito_drift_k, k_ref, rtol=1e-10)


def test_coulomb_singular_without_softening():
    x = np.zeros((1, 3))
    e = ParticleEnsemble(x, np.ones((1, 3)))
    snap = Coulomb(1.0, 0.0).bind(e, SpeciesParams())
    with pytest.raises(ValueError, match="singular"):
        snap.dk(x, np.ones((1, 3)))


def test_coulomb_requires_bind():
    with pytest.raises(TypeError):
        Coulomb().forcing(np.zeros(3), np.zeros(3))


def test_cell_locality_restricts_sum():
    loc = LocalitySpec("cell", (-1, -1, -1), (1, 1, 1), (2, 1, 1))
    x = np.array([[-0.5, 0, 0], [-0.4, 0, 0], [0.5, 0, 0]])
    v = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 3.0, 0]])
    snap = Coulomb(1.0, 0.0, loc).bind(ParticleEnsemble(x, v), SpeciesParams())
    d, k, _ = snap.dk(x[:1], v[:1], index=[0])
    # only particle 1 (same left cell) contributes, with prefactor 1/(N-1)
    d_ref, k_ref = _brute_coulomb(v[0], v[1:2], 0.0, 1.0 / 2)
    np.testing.assert_allclose(d[0], d_ref)
    np.testing.assert_allclose(k[0], k_ref)


def test_coulomb_d_symmetric_psd_property():
    sp = SpeciesParams()
    cloud = init_ensemble(200, InitialDistribution("maxwellian"), 8, sp)
    snap = Coulomb(1.0, 1e-3).bind(cloud, sp)
    d, _, _ = snap.dk(cloud.positions, cloud.velocities, np.arange(200))
    np.testing.assert_allclose(d, np.swapaxes(d, 1, 2), atol=1e-13)
    assert np.linalg.eigvalsh(d).min() > -1e-12


def test_custom_dk_round_trip():
    d_func = lambda x, v: np.broadcast_to(np.diag([1.0, 2.0, 3.0]), (len(v), 3, 3)) * (
        1 + (v ** 2).sum(1))[:, None, None]
    k_func = lambda x, v: -v
    model = CustomDK(d_func, k_func)
    v = np.array([[0.3, 0.1, -0.2]])
    f = model.forcing(np.zeros((1, 3)), v)
    np.testing.assert_allclose(f.diffusion_matrix, d_func(None, v), rtol=1e-12)
    fd = fd_strat_correction(lambda vv: sqrt_psd(d_func(None, vv[None])[0]), v[0])
    np.testing.assert_allclose(f.stratonovich_correction[0], fd, atol=1e-6)
    with pytest.raises(ValueError):
        CustomDK(None, k_func)


def test_step_terms_return_fresh_arrays():
    for model in (NoCollisions(), LenardBernstein(), Lorentz()):
        v = np.ones((4, 3))
        dw = np.ones((4, model.n_channels))
        a, b = model.step_terms(np.zeros((4, 3)), v, dw)
        assert a is not b
        a += 1.0
        assert not np.shares_memory(a, b)
