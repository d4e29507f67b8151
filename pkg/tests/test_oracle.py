from __future__ import annotations

import numpy as np
import pytest

from svpic.collision import LenardBernstein, Lorentz
from svpic.oracle import fd_strat_correction, fp_solve_1d, ou_moments, ou_second_moment


def _gauss(mean, var):
    return lambda v: np.exp(-0.5 * (v - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)


def test_ou_moments_closed_form():
    mean, var = ou_moments(1.0, 1.0, 1.0, [1.0, 0.0, 0.0], 1.0)
    np.testing.assert_allclose(mean, [np.exp(-1), 0, 0])
    assert var == pytest.approx(0.5 * (1 - np.exp(-2)))
    mean, var = ou_moments(2.0, 0.5, 3.0, [2.0, 0, 0], 0.0)
    assert var == 0.0 and mean[0] == 2.0
    with pytest.raises(ValueError):
        ou_moments(1, 1, 1, [0, 0, 0], -1.0)


def test_ou_second_moment_frozen():
    # cold beam |v0| = 1 with nu = mu = gamma = 1 at T = 1
    assert ou_second_moment(1, 1, 1, 1.0, 1.0) == pytest.approx(1.4323323583816938, rel=1e-14)
    assert ou_second_moment(1, 1, 1, 1.5, 3.0) == pytest.approx(1.5)


def test_fp_stationary_gaussian_stays_put():
    lb = LenardBernstein(1.0, 1.0, 1.0)
    init = _gauss(0.0, 0.5)
    res = fp_solve_1d(lb, init, 1.0, n_cells=400)
    f0 = init(res.centers)
    assert np.abs(res.values - f0).sum() * res.dv < 1e-3  # discretization only
    assert res.max_mass_error < 1e-12


def test_fp_shifted_gaussian_tracks_ou():
    lb = LenardBernstein(1.0, 1.0, 1.0)
    for method in ("explicit", "implicit"):
        res = fp_solve_1d(lb, _gauss(1.0, 0.1), 1.0, n_cells=600, method=method,
                          dt=None if method == "explicit" else 1e-3)
        mean, var = ou_moments(1, 1, 1, [1.0, 0, 0], 1.0)
        assert res.mean == pytest.approx(mean[0], abs=2e-3)
        assert res.variance == pytest.approx(var + 0.1 * np.exp(-2), abs=3e-3)
        assert res.mass == pytest.approx(1.0, abs=1e-10)


def test_fp_cfl_violation_rejected():
    with pytest.raises(ValueError, match="CFL"):
        fp_solve_1d(LenardBernstein(), _gauss(0, 0.5), 1.0, n_cells=600, dt=0.1)
    # implicit is stable at the same step
    res = fp_solve_1d(LenardBernstein(), _gauss(0, 0.5), 1.0, n_cells=600, dt=0.1,
                      method="implicit")
    assert res.min_value > -1e-12


def test_fp_custom_operator_and_cell_masses():
    res = fp_solve_1d((lambda v: np.full_like(v, 0.5), lambda v: -v), _gauss(0, 0.5), 0.5)
    edges = np.linspace(-6, 6, 13)
    assert res.cell_masses(edges).sum() == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ValueError):
        fp_solve_1d(LenardBernstein(), np.ones(5), 1.0, n_cells=10)


def test_fd_correction_lorentz():
    v = np.array([0.4, -1.0, 0.3])
    g = lambda vv: Lorentz().forcing(np.zeros(3), vv)[0].diffusion_g
    np.testing.assert_allclose(fd_strat_correction(g, v), -v, atol=1e-8)
    np.testing.assert_allclose(fd_strat_correction(lambda vv: np.eye(3), v), 0.0)
    with pytest.raises(ValueError):
        fd_strat_correction(g, v, h=0.0)
