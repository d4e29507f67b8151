"""Independent reference solutions for testing.

Nothing here is used by the simulation itself.  The oracles are closed-form
Ornstein-Uhlenbeck moments, a conservative finite-difference solver for the
one-dimensional Fokker-Planck equation

    df/dt = 1/2 d^2/dv^2 [D(v) f] - d/dv [K(v) f],

and a brute-force central-difference evaluation of the noise-induced drift
``1/2 sum_nu (dg_nu/dv) g_nu``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded


def ou_moments(nu: float, mu: float, gamma: float, v0, t: float):
    """Mean and per-component variance of the Lenard-Bernstein velocity process.

    Starting from the deterministic velocity ``v0``:
    ``mean = v0 exp(-nu mu t)`` and
    ``var = gamma^2 / (2 mu) (1 - exp(-2 nu mu t))``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    decay = np.exp(-nu * mu * t)
    mean = np.asarray(v0, dtype=float) * decay
    var = gamma * gamma / (2.0 * mu) * (1.0 - decay * decay)
    return mean, float(var)


def ou_second_moment(nu: float, mu: float, gamma: float, mean_sq0: float, t: float) -> float:
    """``E|V(t)|^2`` for three independent OU components with ``E|V(0)|^2 = mean_sq0``."""
    decay2 = np.exp(-2.0 * nu * mu * t)
    return float(decay2 * mean_sq0 + 3.0 * gamma * gamma / (2.0 * mu) * (1.0 - decay2))


@dataclass
class FokkerPlanckGrid1D:
    """Cell-centred density on ``[v_lo, v_hi]`` after a Fokker-Planck solve.

    ``max_mass_error`` is the largest relative change of total mass over any
    single step and ``min_value`` the most negative density encountered
    (positivity is monitored, not enforced).
    """

    v_lo: float
    v_hi: float
    n_cells: int
    values: np.ndarray
    dt: float
    t: float = 0.0
    n_steps: int = 0
    max_mass_error: float = 0.0
    min_value: float = 0.0

    @property
    def dv(self) -> float:
        return (self.v_hi - self.v_lo) / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return self.v_lo + self.dv * (np.arange(self.n_cells) + 0.5)

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.dv)

    @property
    def mean(self) -> float:
        return float((self.centers * self.values).sum() * self.dv / self.mass)

    @property
    def variance(self) -> float:
        c = self.centers - self.mean
        return float((c * c * self.values).sum() * self.dv / self.mass)

    def cell_masses(self, edges: np.ndarray) -> np.ndarray:
        """Mass of the solution inside each bin of ``edges`` (piecewise-constant integration)."""
        cdf_edges = np.concatenate([[self.v_lo], self.v_lo + self.dv * np.arange(1, self.n_cells + 1)])
        cdf = np.concatenate([[0.0], np.cumsum(self.values) * self.dv])
        return np.diff(np.interp(edges, cdf_edges, cdf))


def _lb_coefficients(op):
    d = op.nu * op.gamma ** 2
    return (lambda v: np.full_like(v, d)), (lambda v: -op.nu * op.mu * v)


def _operator_bands(d_func, k_func, centers, dv):
    """Tridiagonal generator ``L`` with ``df/dt = L f``, in ``solve_banded`` layout.

    Interface flux ``F = K_face (f_i + f_{i+1}) / 2 - ((D f)_{i+1} - (D f)_i) / (2 dv)``,
    zero at both boundaries, so every column of ``L`` sums to zero.
    """
    n = len(centers)
    d = np.asarray(d_func(centers), dtype=float)
    faces = centers[:-1] + 0.5 * dv
    k = np.asarray(k_func(faces), dtype=float)
    a = 0.5 * k + d[:-1] / (2.0 * dv)   # coefficient of f_i in F_{i+1/2}
    b = 0.5 * k - d[1:] / (2.0 * dv)    # coefficient of f_{i+1}
    upper = np.zeros(n)
    diag = np.zeros(n)
    lower = np.zeros(n)
    diag[:-1] -= a / dv
    diag[1:] += b / dv
    upper[1:] = -b / dv      # L[i, i+1]
    lower[:-1] = a / dv      # L[i+1, i]
    return np.vstack([upper, diag, lower]), d, k


def _apply_bands(bands, f):
    out = bands[1] * f
    out[:-1] += bands[0][1:] * f[1:]
    out[1:] += bands[2][:-1] * f[:-1]
    return out


def fp_solve_1d(operator, initial, horizon: float, v_bounds=(-6.0, 6.0), n_cells: int = 600,
                dt: float | None = None, method: str = "explicit") -> FokkerPlanckGrid1D:
    """Evolve a 1D Fokker-Planck equation with zero-flux boundaries.

    ``operator`` is either a ``collision.LenardBernstein`` (one velocity
    component) or a pair ``(D, K)`` of vectorized callables of ``v``.
    ``initial`` is a density callable or an array of cell values.

    ``method = "explicit"`` is forward Euler and raises on a CFL violation
    (``dt max D / dv^2 > 1/2`` or ``dt max|K| / dv > 1``); the default ``dt``
    is 80% of the limit.  ``method = "implicit"`` is backward Euler, stable for
    any ``dt`` (default ``dv``).  Both conserve mass to round-off.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if method not in ("explicit", "implicit"):
        raise ValueError(f"unknown method {method!r}")
    if isinstance(operator, tuple):
        d_func, k_func = operator
    else:
        d_func, k_func = _lb_coefficients(operator)
    v_lo, v_hi = map(float, v_bounds)
    dv = (v_hi - v_lo) / n_cells
    centers = v_lo + dv * (np.arange(n_cells) + 0.5)
    f = np.array(initial(centers) if callable(initial) else initial, dtype=float)
    if f.shape != (n_cells,):
        raise ValueError(f"initial density has shape {f.shape}, expected ({n_cells},)")
    bands, d, k = _operator_bands(d_func, k_func, centers, dv)
    if np.any(d < 0):
        raise ValueError("diffusion coefficient must be non-negative")

    d_max = float(d.max(initial=0.0))
    k_max = float(np.abs(k).max(initial=0.0))
    limit = np.inf
    if d_max > 0:
        limit = min(limit, 0.5 * dv * dv / d_max)
    if k_max > 0:
        limit = min(limit, dv / k_max)
    if dt is None:
        dt = 0.8 * limit if method == "explicit" else dv
        if not np.isfinite(dt):
            dt = max(horizon, 1.0)
    if method == "explicit" and dt > limit * (1 + 1e-12):
        raise ValueError(f"CFL violation: dt = {dt:g} exceeds the stable limit {limit:g}")

    n_steps = int(np.ceil(horizon / dt - 1e-12)) if horizon > 0 else 0
    step_dt = horizon / n_steps if n_steps else dt
    if method == "implicit":
        system = -step_dt * bands
        system[1] += 1.0
    mass_err = 0.0
    min_val = float(f.min())
    for _ in range(n_steps):
        m0 = f.sum()
        if method == "explicit":
            f = f + step_dt * _apply_bands(bands, f)
        else:
            f = solve_banded((1, 1), system, f)
        if m0 != 0:
            mass_err = max(mass_err, abs(f.sum() - m0) / abs(m0))
        min_val = min(min_val, float(f.min()))
    return FokkerPlanckGrid1D(v_lo, v_hi, n_cells, f, step_dt, horizon, n_steps, mass_err, min_val)


def fd_strat_correction(g_field: Callable[[np.ndarray], np.ndarray], v, h: float | None = None):
    """Central-difference value of ``1/2 sum_nu sum_j (d g_nu^i / d v^j) g_nu^j``.

    ``g_field(v)`` returns the ``(M, 3)`` diffusion vectors at one velocity.
    The default step is ``max(1e-5, 1e-5 |v|)``.
    """
    v = np.asarray(v, dtype=float)
    if h is None:
        h = max(1e-5, 1e-5 * float(np.linalg.norm(v)))
    if not h > 0:
        raise ValueError("h must be positive")
    g0 = np.asarray(g_field(v), dtype=float)
    corr = np.zeros(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        dg = (np.asarray(g_field(v + e)) - np.asarray(g_field(v - e))) / (2 * h)
        corr += dg.T @ g0[:, j]
    return 0.5 * corr
