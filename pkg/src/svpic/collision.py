"""Collision operators expressed as SDE forcing terms.

A Fokker-Planck collision operator with diffusion matrix ``D`` and drift ``K``

    C[f] = 1/2 d_i d_j (D_ij f) - d_i (K_i f)

is realized by a Stratonovich drift ``G`` and diffusion vector fields
``g_1 .. g_M`` with

    D_ij = sum_nu g_nu^i g_nu^j,
    K_i  = G^i + 1/2 sum_nu sum_j (d g_nu^i / d v^j) g_nu^j.

``K`` is the Ito drift of the same process.  All evaluations are batched over
particles: ``x`` and ``v`` are ``(n, 3)`` arrays, diffusion fields come back as
``(n, M, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _parallel
from .ensemble import ParticleEnsemble, SpeciesParams

DEFAULT_COULOMB_SOFTENING = 1e-3
DEFAULT_LORENTZ_VMIN = 1e-6
SYMMETRY_TOL = 1e-10
EIGENVALUE_TOL = 1e-12

_COULOMB_CHUNK = 64


def fd_step(v: np.ndarray) -> np.ndarray:
    """Central-difference step ``max(1e-5, 1e-5 |v|)`` for Stratonovich corrections."""
    v = np.asarray(v, dtype=float)
    return np.maximum(1e-5, 1e-5 * np.linalg.norm(v, axis=-1))


@dataclass
class ForcingEval:
    """Forcing terms at one or many phase-space points.

    ``drift_g`` is the Stratonovich drift ``G``, ``diffusion_g[..., nu, :]`` the
    vector ``g_nu`` and ``ito_drift_k`` the Ito drift ``K``.
    """

    drift_g: np.ndarray
    diffusion_g: np.ndarray
    ito_drift_k: np.ndarray

    @property
    def diffusion_matrix(self) -> np.ndarray:
        return np.einsum("...ni,...nj->...ij", self.diffusion_g, self.diffusion_g)

    @property
    def stratonovich_correction(self) -> np.ndarray:
        return self.ito_drift_k - self.drift_g

    def __getitem__(self, i) -> ForcingEval:
        return ForcingEval(self.drift_g[i], self.diffusion_g[i], self.ito_drift_k[i])


def _as_batch(x, v):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    return x, v


# --------------------------------------------------------------------------
# decomposition of (D, K)
# --------------------------------------------------------------------------

class NonFiniteForcing(ValueError):
    """A diffusion matrix contains NaN or infinity; ``particle`` is the first bad row."""

    def __init__(self, particle: int):
        super().__init__(f"non-finite diffusion matrix for particle {particle}")
        self.particle = particle


def _check_symmetric(d: np.ndarray) -> None:
    finite = np.isfinite(d).all(axis=(-1, -2))
    if not np.all(finite):
        raise NonFiniteForcing(int(np.flatnonzero(~np.atleast_1d(finite))[0]))
    scale = np.maximum(1.0, np.abs(d).max(axis=(-1, -2)))
    asym = np.abs(d - np.swapaxes(d, -1, -2)).max(axis=(-1, -2))
    if np.any(asym > SYMMETRY_TOL * scale):
        raise ValueError(f"diffusion matrix is not symmetric (max asymmetry {asym.max():.3e})")


def _sqrt_psd(d: np.ndarray):
    lam, q = np.linalg.eigh(d)
    scale = np.maximum(1.0, np.abs(lam).max(axis=-1, keepdims=True))
    if np.any(lam < -EIGENVALUE_TOL * scale):
        raise ValueError(f"diffusion matrix has a negative eigenvalue ({lam.min():.3e})")
    root = np.sqrt(np.clip(lam, 0.0, None))
    s = np.einsum("...ik,...k,...jk->...ij", q, root, q)
    return s, root, q


def sqrt_psd(d: np.ndarray) -> np.ndarray:
    """Symmetric positive semi-definite square root via eigendecomposition.

    Eigenvalues are clipped at zero; values below ``-1e-12`` (relative to the
    largest eigenvalue magnitude, floor 1) are rejected.
    """
    d = np.asarray(d, dtype=float)
    _check_symmetric(d)
    return _sqrt_psd(0.5 * (d + np.swapaxes(d, -1, -2)))[0]


def _sqrt_derivative(root, q, dd):
    """Derivative of the PSD square root along each ``dd[..., :, :, k]``.

    Solves ``S dS + dS S = dD`` in the eigenbasis of ``D``.  Returns an array
    indexed ``[..., k, i, j]``.
    """
    denom = root[..., :, None] + root[..., None, :]
    safe = np.where(denom > 0, denom, 1.0)
    dd_k = np.moveaxis(dd, -1, -3)
    rot = np.einsum("...ai,...kab,...bj->...kij", q, dd_k, q)
    rot = np.where(denom[..., None, :, :] > 0, rot / safe[..., None, :, :], 0.0)
    return np.einsum("...ia,...kab,...jb->...kij", q, rot, q)


def _correction_from_ds(ds, s):
    # 1/2 sum_nu sum_j (d S[nu, i] / d v_j) S[nu, j]
    return 0.5 * np.einsum("...jni,...nj->...i", ds, s)


def decompose_dk(D: np.ndarray, K: np.ndarray, dD_dv: np.ndarray | None = None, *,
                 d_of_v: Callable[[np.ndarray], np.ndarray] | None = None,
                 v: np.ndarray | None = None, h: float | np.ndarray | None = None) -> ForcingEval:
    """Forcing terms (``M = 3``) for a given diffusion matrix and Ito drift.

    The diffusion fields are the rows of the symmetric square root of ``D``.
    The Stratonovich drift is ``G = K - 1/2 sum (d g / d v) g``, where the
    velocity derivative of the root comes from ``dD_dv`` (indexed
    ``[..., i, j, k]`` for ``d D_ij / d v_k``) when given, otherwise from
    central differences of ``sqrt(d_of_v(v +- h e_k))``.  With neither, ``D``
    is treated as locally constant and ``G = K``.
    """
    D = np.asarray(D, dtype=float)
    K = np.asarray(K, dtype=float)
    _check_symmetric(D)
    s, root, q = _sqrt_psd(0.5 * (D + np.swapaxes(D, -1, -2)))
    if dD_dv is not None:
        ds = _sqrt_derivative(root, q, np.asarray(dD_dv, dtype=float))
        corr = _correction_from_ds(ds, s)
    elif d_of_v is not None:
        if v is None:
            raise ValueError("finite-difference correction needs the velocity v")
        v = np.asarray(v, dtype=float)
        hh = fd_step(v) if h is None else np.asarray(h, dtype=float)
        hh = np.asarray(hh)[..., None]
        ds = []
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            plus = sqrt_psd(d_of_v(v + hh * e))
            minus = sqrt_psd(d_of_v(v - hh * e))
            ds.append((plus - minus) / (2.0 * hh[..., None]))
        corr = _correction_from_ds(np.stack(ds, axis=-3), s)
    else:
        corr = np.zeros_like(K)
    return ForcingEval(drift_g=K - corr, diffusion_g=s, ito_drift_k=K)


# --------------------------------------------------------------------------
# operator models
# --------------------------------------------------------------------------

class CollisionModel:
    """Base class: no collisions.

    Subclasses that depend on the ensemble override ``bind``; everything the
    steppers need is reached through the bound object.
    """

    kind = "none"
    n_channels = 0
    additive = True

    def bind(self, ensemble: ParticleEnsemble, species: SpeciesParams) -> CollisionModel:
        return self

    def forcing(self, x, v, index=None) -> ForcingEval:
        x, v = _as_batch(x, v)
        n = len(v)
        return ForcingEval(np.zeros((n, 3)), np.zeros((n, self.n_channels, 3)), np.zeros((n, 3)))

    def drift(self, x, v, index=None, ito: bool = True) -> np.ndarray:
        f = self.forcing(x, v, index)
        return f.ito_drift_k if ito else f.drift_g

    def noise_increment(self, x, v, dw, index=None) -> np.ndarray:
        """``sum_nu g_nu(x, v) dW^nu`` for each particle."""
        if self.n_channels == 0:
            return np.zeros_like(np.atleast_2d(v))
        g = self.forcing(x, v, index).diffusion_g
        return np.einsum("ani,an->ai", g, dw)

    def step_terms(self, x, v, dw, index=None, ito: bool = True):
        """Drift (Ito or Stratonovich) and noise increment at one state.

        Both arrays are freshly allocated; callers may update them in place.
        """
        if self.n_channels == 0:
            v = np.atleast_2d(v)
            return np.zeros_like(v), np.zeros_like(v)
        f = self.forcing(x, v, index)
        return (f.ito_drift_k if ito else f.drift_g,
                np.einsum("ani,an->ai", f.diffusion_g, dw))

    def describe(self) -> dict:
        return {"kind": self.kind}


NoCollisions = CollisionModel


@dataclass
class LenardBernstein(CollisionModel):
    """Linear drag plus isotropic velocity diffusion (an Ornstein-Uhlenbeck process).

    ``G = -nu mu v`` and ``g_k = sqrt(nu) gamma e_k``; since ``g`` is constant,
    ``K = G``.
    """

    nu: float = 1.0
    mu: float = 1.0
    gamma: float = 1.0

    kind = "lenard_bernstein"
    n_channels = 3
    additive = True

    def __post_init__(self):
        for name in ("nu", "mu", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"Lenard-Bernstein {name} must be positive")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.nu) * self.gamma)

    def forcing(self, x, v, index=None) -> ForcingEval:
        x, v = _as_batch(x, v)
        g = np.broadcast_to(self.sigma * np.eye(3), (len(v), 3, 3)).copy()
        drift = -self.nu * self.mu * v
        return ForcingEval(drift, g, drift.copy())

    def drift(self, x, v, index=None, ito: bool = True) -> np.ndarray:
        return (-self.nu * self.mu) * v

    def noise_increment(self, x, v, dw, index=None) -> np.ndarray:
        return self.sigma * dw

    def step_terms(self, x, v, dw, index=None, ito: bool = True):
        return (-self.nu * self.mu) * v, self.sigma * dw

    def describe(self) -> dict:
        return {"kind": self.kind, "nu": self.nu, "mu": self.mu, "gamma": self.gamma}


@dataclass
class ConstantFrequency:
    nu: float = 1.0

    def __post_init__(self):
        if not self.nu >= 0:
            raise ValueError("collision frequency must be non-negative")

    def __call__(self, speed):
        return np.full_like(np.asarray(speed, dtype=float), self.nu)

    def describe(self) -> dict:
        return {"frequency": "constant", "nu": self.nu}


@dataclass
class PowerLawFrequency:
    """``nu0 * max(|v|, v_min) ** exponent``; the cutoff keeps slow particles finite."""

    nu0: float = 1.0
    exponent: float = -3.0
    v_min: float = DEFAULT_LORENTZ_VMIN

    def __post_init__(self):
        if not self.nu0 >= 0:
            raise ValueError("nu0 must be non-negative")
        if not self.v_min > 0:
            raise ValueError("v_min must be positive")

    def __call__(self, speed):
        return self.nu0 * np.maximum(np.asarray(speed, dtype=float), self.v_min) ** self.exponent

    def describe(self) -> dict:
        return {"frequency": "power_law", "nu0": self.nu0, "exponent": self.exponent,
                "v_min": self.v_min}


@dataclass
class Lorentz(CollisionModel):
    """Pitch-angle scattering: ``g_k = sqrt(nu(|v|)) e_k x v`` and ``G = 0``.

    Each ``g_k`` is orthogonal to ``v``.  The Ito drift is ``K = -nu(|v|) v``;
    the term from the speed dependence of ``nu`` drops out because
    ``grad |v|`` is parallel to ``v``.
    """

    frequency: Callable = field(default_factory=ConstantFrequency)

    kind = "lorentz"
    n_channels = 3
    additive = False

    def rate(self, v) -> np.ndarray:
        return self.frequency(np.linalg.norm(v, axis=-1))

    def forcing(self, x, v, index=None) -> ForcingEval:
        x, v = _as_batch(x, v)
        root = np.sqrt(self.rate(v))[:, None]
        z = np.zeros(len(v))
        v1, v2, v3 = v[:, 0], v[:, 1], v[:, 2]
        g = np.stack([
            np.stack([z, -v3, v2], axis=1),
            np.stack([v3, z, -v1], axis=1),
            np.stack([-v2, v1, z], axis=1),
        ], axis=1) * root[:, :, None]
        return ForcingEval(np.zeros_like(v), g, -(root ** 2) * v)

    def drift(self, x, v, index=None, ito: bool = True) -> np.ndarray:
        if not ito:
            return np.zeros_like(v)
        return -self.rate(v)[:, None] * v

    def noise_increment(self, x, v, dw, index=None) -> np.ndarray:
        # sum_k sqrt(nu) (e_k x v) dW^k = (sqrt(nu) dW) x v
        return np.cross(np.sqrt(self.rate(v))[:, None] * dw, v)

    def step_terms(self, x, v, dw, index=None, ito: bool = True):
        nu = self.rate(v)
        drift = -nu[:, None] * v if ito else np.zeros_like(v)
        return drift, np.cross(np.sqrt(nu)[:, None] * dw, v)

    def describe(self) -> dict:
        d = {"kind": self.kind}
        d.update(self.frequency.describe() if hasattr(self.frequency, "describe") else {})
        return d


@dataclass
class LocalitySpec:
    """Which field particles enter the empirical Coulomb averages.

    ``homogeneous`` uses the whole ensemble; ``cell`` uses only particles in
    the same cell of the spatial grid ``[lo, hi]`` split into ``cells``
    (positions outside the box are assigned to the nearest edge cell).
    """

    kind: str = "homogeneous"
    lo: tuple = (-1.0, -1.0, -1.0)
    hi: tuple = (1.0, 1.0, 1.0)
    cells: tuple = (1, 1, 1)

    def __post_init__(self):
        if self.kind not in ("homogeneous", "cell"):
            raise ValueError(f"unknown locality {self.kind!r}; expected 'homogeneous' or 'cell'")
        if self.kind == "cell":
            lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
            if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
                raise ValueError("cell locality needs a non-degenerate box")
            if len(self.cells) != 3 or min(self.cells) < 1:
                raise ValueError("cell locality needs three positive cell counts")

    def cell_ids(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "homogeneous":
            return np.zeros(len(x), dtype=np.int64)
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        cells = np.asarray(self.cells)
        idx = np.floor((x - lo) / (hi - lo) * cells).astype(np.int64)
        idx = np.clip(idx, 0, cells - 1)
        return np.ravel_multi_index(idx.T, tuple(cells))


def coulomb_sums(v: np.ndarray, field_v: np.ndarray, softening: float,
                 mask: np.ndarray | None = None, derivative: bool = False):
    """Raw pair sums of the regularized Landau kernel.

    For test velocities ``v`` (``(n, 3)``) against field velocities
    ``field_v`` (``(m, 3)``), with ``w = v - u`` and ``s = sqrt(|w|^2 + delta^2)``:

    * ``D_ij = sum_u mask (|w|^2 delta_ij - w_i w_j) / s^3``
    * ``A_i  = sum_u mask w_i / s^3``           (``K = -2 A`` up to scale)
    * ``dD_ijk = d D_ij / d v_k``               (only when ``derivative``)
    * ``count`` of field particles with ``s > 0``

    Pairs with ``s == 0`` (coincident velocities, no softening) contribute
    nothing.
    """
    w = v[:, None, :] - field_v[None, :, :]
    w2 = np.einsum("abi,abi->ab", w, w)
    s2 = w2 + softening * softening
    live = s2 > 0
    if mask is not None:
        live &= mask
    inv_s = np.zeros_like(s2)
    np.divide(1.0, np.sqrt(s2, where=live, out=np.ones_like(s2)), where=live, out=inv_s)
    a = inv_s ** 3
    eye = np.eye(3)
    a_w = np.einsum("ab,abi->ai", a, w)
    d = (np.einsum("ab,ab->a", a, w2)[:, None, None] * eye
         - np.einsum("ab,abi,abj->aij", a, w, w))
    dd = None
    if derivative:
        b = a * inv_s * inv_s
        b_w2_w = np.einsum("ab,ab,abk->ak", b, w2, w)
        t = np.einsum("ab,abi,abj,abk->aijk", b, w, w, w)
        dd = (2.0 * eye[None, :, :, None] * a_w[:, None, None, :]
              - eye[None, :, None, :] * a_w[:, None, :, None]
              - eye[None, None, :, :] * a_w[:, :, None, None]
              - 3.0 * eye[None, :, :, None] * b_w2_w[:, None, None, :]
              + 3.0 * t)
    return d, a_w, dd, live.sum(axis=1)


@dataclass
class Coulomb(CollisionModel):
    """Landau/Coulomb operator with ensemble-dependent ``D`` and ``K``.

    The expectations over the field distribution are replaced by averages over
    a frozen ensemble snapshot (see ``bind``), with prefactor
    ``n_total * gamma / N_eff`` where ``N_eff`` is the snapshot size minus the
    test particle itself when it is excluded.  Under cell locality only
    particles from the test particle's cell enter the sum, which scales the
    average by the cell's share of the ensemble.
    """

    gamma: float = 1.0
    softening: float = DEFAULT_COULOMB_SOFTENING
    locality: LocalitySpec = field(default_factory=LocalitySpec)

    kind = "coulomb"
    n_channels = 3
    additive = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("Coulomb gamma must be positive")
        if not self.softening >= 0:
            raise ValueError("Coulomb velocity softening must be non-negative")

    def bind(self, ensemble: ParticleEnsemble, species: SpeciesParams) -> CoulombSnapshot:
        return CoulombSnapshot(self, ensemble.positions.copy(), ensemble.velocities.copy(),
                               species.n_total)

    def forcing(self, x, v, index=None) -> ForcingEval:
        raise TypeError("Coulomb forcing depends on the ensemble; call bind() first")

    def describe(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "softening": self.softening,
                "locality": self.locality.kind}


class CoulombSnapshot(CollisionModel):
    """Coulomb forcing against a frozen copy of the field particles."""

    kind = "coulomb"
    n_channels = 3
    additive = False

    def __init__(self, model: Coulomb, positions: np.ndarray, velocities: np.ndarray,
                 n_total: float):
        self.model = model
        self.positions = positions
        self.velocities = velocities
        self.n_total = n_total
        self.cells = model.locality.cell_ids(positions)

    def dk(self, x, v, index=None, derivative: bool = False):
        """Empirical ``D``, ``K`` and optionally ``dD/dv`` at the given states.

        ``index[a]`` names the snapshot particle that test point ``a`` stands
        for; it is left out of its own average.
        """
        x, v = _as_batch(x, v)
        n = len(v)
        m = len(self.velocities)
        n_eff = m - (1 if index is not None else 0)
        idx = None if index is None else np.asarray(index)
        cells_t = self.model.locality.cell_ids(x)
        homogeneous = self.model.locality.kind == "homogeneous"
        delta = self.model.softening

        def work(lo, hi):
            mask = None
            if not homogeneous:
                mask = cells_t[lo:hi, None] == self.cells[None, :]
            if idx is not None:
                own = np.zeros((hi - lo, m), dtype=bool)
                own[np.arange(hi - lo), idx[lo:hi]] = True
                mask = ~own if mask is None else mask & ~own
            return coulomb_sums(v[lo:hi], self.velocities, delta, mask, derivative)

        parts = _parallel.map_chunks(work, n, _COULOMB_CHUNK)
        d = np.concatenate([p[0] for p in parts])
        a_w = np.concatenate([p[1] for p in parts])
        count = np.concatenate([p[3] for p in parts])
        if delta == 0 and np.any(count == 0) and n_eff > 0:
            bad = int(np.flatnonzero(count == 0)[0])
            raise ValueError(f"Coulomb kernel singular at test point {bad}: every field "
                             "particle coincides with it and the velocity softening is zero")
        scale = self.model.gamma * self.n_total / n_eff if n_eff > 0 else 0.0
        dd = np.concatenate([p[2] for p in parts]) * scale if derivative else None
        return scale * d, -2.0 * scale * a_w, dd

    def forcing(self, x, v, index=None) -> ForcingEval:
        d, k, dd = self.dk(x, v, index, derivative=True)
        return decompose_dk(d, k, dd)

    def drift(self, x, v, index=None, ito: bool = True) -> np.ndarray:
        if ito:
            return self.dk(x, v, index)[1]
        return self.forcing(x, v, index).drift_g

    def noise_increment(self, x, v, dw, index=None) -> np.ndarray:
        d = self.dk(x, v, index)[0]
        return np.einsum("ani,an->ai", sqrt_psd(d), dw)

    def step_terms(self, x, v, dw, index=None, ito: bool = True):
        if ito:
            d, k, _ = self.dk(x, v, index)
            return k, np.einsum("ani,an->ai", sqrt_psd(d), dw)
        f = self.forcing(x, v, index)
        return f.drift_g, np.einsum("ani,an->ai", f.diffusion_g, dw)

    def describe(self) -> dict:
        return self.model.describe()


@dataclass
class CustomDK(CollisionModel):
    """User-supplied ``D(x, v)`` and ``K(x, v)``.

    Both callables take batched ``(n, 3)`` positions and velocities and return
    ``(n, 3, 3)`` and ``(n, 3)`` arrays.  ``G`` uses finite differences of the
    square root of ``D`` in velocity.
    """

    d_func: Callable = None
    k_func: Callable = None

    kind = "custom"
    n_channels = 3
    additive = False

    def __post_init__(self):
        if not callable(self.d_func) or not callable(self.k_func):
            raise ValueError("custom collision model needs callables d_func and k_func")

    def forcing(self, x, v, index=None) -> ForcingEval:
        x, v = _as_batch(x, v)
        d = np.asarray(self.d_func(x, v), dtype=float)
        k = np.asarray(self.k_func(x, v), dtype=float)
        return decompose_dk(d, k, d_of_v=lambda vv: self.d_func(x, vv), v=v)

    def drift(self, x, v, index=None, ito: bool = True) -> np.ndarray:
        if ito:
            return np.asarray(self.k_func(*_as_batch(x, v)), dtype=float)
        return self.forcing(x, v, index).drift_g

    def noise_increment(self, x, v, dw, index=None) -> np.ndarray:
        x, v = _as_batch(x, v)
        g = sqrt_psd(np.asarray(self.d_func(x, v), dtype=float))
        return np.einsum("ani,an->ai", g, dw)

    def step_terms(self, x, v, dw, index=None, ito: bool = True):
        if ito:
            x, v = _as_batch(x, v)
            g = sqrt_psd(np.asarray(self.d_func(x, v), dtype=float))
            return (np.array(self.k_func(x, v), dtype=float),
                    np.einsum("ani,an->ai", g, dw))
        f = self.forcing(x, v, index)
        return f.drift_g, np.einsum("ani,an->ai", f.diffusion_g, dw)


# --------------------------------------------------------------------------
# single-point conveniences
# --------------------------------------------------------------------------

def eval_lenard_bernstein(params: LenardBernstein, x, v) -> ForcingEval:
    return params.forcing(x, v)[0]


def eval_lorentz(freq: Callable, x, v) -> ForcingEval:
    return Lorentz(freq).forcing(x, v)[0]


def eval_coulomb(gamma: float, softening: float, x, v, ensemble: ParticleEnsemble,
                 species: SpeciesParams, locality: LocalitySpec | None = None,
                 exclude_index: int | None = None) -> ForcingEval:
    """Coulomb forcing at one state against ``ensemble``.

    ``exclude_index`` drops that ensemble member from the average, as when the
    test state belongs to the ensemble itself.
    """
    model = Coulomb(gamma, softening, locality or LocalitySpec())
    snap = model.bind(ensemble, species)
    index = None if exclude_index is None else [exclude_index]
    return snap.forcing(x, v, index)[0]
