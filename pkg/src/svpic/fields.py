"""Electric and magnetic field sources.

Three kinds of field model are provided:

* ``Vacuum``: no fields.
* ``ExternalField``: prescribed ``E(x, t)`` and ``B(x, t)``, optionally with
  potentials ``phi``, ``A``, ``dA/dt`` and the Jacobian ``dA^i/dx^j``.
  ``AnalyticExternal`` is the built-in closed form
  ``phi = -E0 . x + k |x|^2 / 2`` and ``A = B0 x x / 2``.
* ``SelfConsistentCoulomb``: the electrostatic field of the ensemble itself,
  from the Green's function of the Laplacian with Plummer softening, plus an
  optional external part.

Units are rationalized (vacuum permittivity 1).  The field of ``N``
simulation particles carrying a total charge ``q N_tot`` is

    phi(x) = q N_tot / (4 pi N) sum_a 1 / sqrt(|x - X_a|^2 + eps^2)
    E(x)   = q N_tot / (4 pi N) sum_a (x - X_a) / (|x - X_a|^2 + eps^2)^(3/2)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _parallel
from .ensemble import ParticleEnsemble, SpeciesParams

_PAIR_BUDGET = 1 << 20  # target pairs per chunk


def _chunk_for(n_sources: int) -> int:
    return max(1, _PAIR_BUDGET // max(1, n_sources))


def _points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def coupling(species: SpeciesParams, n_particles: int) -> float:
    """Prefactor ``q N_tot / (4 pi N)`` of the empirical Green's-function sums."""
    return species.charge * species.n_total / (4.0 * np.pi * n_particles)


def default_softening(positions: np.ndarray, fraction: float = 0.05) -> float:
    """``fraction`` times the mean interparticle spacing ``(V / N)^(1/3)``.

    ``V`` is the volume of the bounding box of the cloud; flat or point-like
    clouds fall back to the largest extent (or 1 when every particle sits at
    the same place).
    """
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    extent = np.ptp(positions, axis=0) if n > 1 else np.zeros(3)
    if np.all(extent > 0):
        spacing = (np.prod(extent) / n) ** (1.0 / 3.0)
    elif extent.max() > 0:
        spacing = extent.max() / n ** (1.0 / 3.0)
    else:
        spacing = 1.0
    return float(fraction * spacing)


def _check_coincident(x: np.ndarray, sources: np.ndarray, softening: float) -> None:
    if softening > 0:
        return
    for lo, hi in _parallel.chunk_bounds(len(x), _chunk_for(len(sources))):
        d2 = ((x[lo:hi, None, :] - sources[None, :, :]) ** 2).sum(axis=-1)
        hit = np.argwhere(d2 == 0)
        if len(hit):
            a, b = hit[0]
            raise ValueError(f"evaluation point {lo + a} coincides with particle {b} "
                             "and the softening is zero")


def _pair_sums(x, sources, softening, exclude=None, potential=False):
    """Sum the softened kernel over sources for every target in ``x``.

    ``exclude[a]`` is a source index skipped for target ``a``.  Returns the
    field sums ``(n, 3)`` or the potential sums ``(n,)``.
    """
    eps2 = softening * softening
    n = len(x)

    def work(lo, hi):
        r = x[lo:hi, None, :] - sources[None, :, :]
        s2 = np.einsum("abi,abi->ab", r, r) + eps2
        inv = np.zeros_like(s2)
        np.divide(1.0, np.sqrt(s2), where=s2 > 0, out=inv)
        if exclude is not None:
            inv[np.arange(hi - lo), exclude[lo:hi]] = 0.0
        if potential:
            return inv.sum(axis=1)
        return np.einsum("ab,abi->ai", inv * inv * inv, r)

    parts = _parallel.map_chunks(work, n, _chunk_for(len(sources)))
    if not parts:
        return np.zeros(0) if potential else np.zeros((0, 3))
    return np.concatenate(parts)


def potential_at(x, t: float, ensemble: ParticleEnsemble, species: SpeciesParams,
                 softening: float):
    """Empirical Coulomb potential of ``ensemble`` at ``x`` (one point or ``(n, 3)``)."""
    if softening < 0:
        raise ValueError("softening must be non-negative")
    pts, single = _points(x)
    _check_coincident(pts, ensemble.positions, softening)
    phi = coupling(species, ensemble.n_particles) * _pair_sums(
        pts, ensemble.positions, softening, potential=True)
    return float(phi[0]) if single else phi


def efield_at(x, t: float, ensemble: ParticleEnsemble, species: SpeciesParams,
              softening: float):
    """Empirical Coulomb field of ``ensemble`` at ``x`` (one point or ``(n, 3)``)."""
    if softening < 0:
        raise ValueError("softening must be non-negative")
    pts, single = _points(x)
    _check_coincident(pts, ensemble.positions, softening)
    e = coupling(species, ensemble.n_particles) * _pair_sums(pts, ensemble.positions, softening)
    return e[0] if single else e


def self_field_batch(ensemble: ParticleEnsemble, species: SpeciesParams, softening: float,
                     exclude_self: bool = True) -> np.ndarray:
    """Field at every particle position, ``(N, 3)``.

    With ``exclude_self`` particle ``a``'s own term is left out of its sum.
    Targets are processed in fixed chunks and each target's source sum runs
    in a fixed order, so the result does not depend on the thread count.
    """
    if softening < 0:
        raise ValueError("softening must be non-negative")
    pos = ensemble.positions
    n = len(pos)
    exclude = np.arange(n) if exclude_self else None
    if softening == 0:
        # coincident pairs other than the excluded self term are singular
        d2_zero = []
        for lo, hi in _parallel.chunk_bounds(n, _chunk_for(n)):
            d2 = ((pos[lo:hi, None, :] - pos[None, :, :]) ** 2).sum(axis=-1)
            if exclude_self:
                d2[np.arange(hi - lo), np.arange(lo, hi)] = 1.0
            hit = np.argwhere(d2 == 0)
            if len(hit):
                d2_zero.append((lo + hit[0][0], hit[0][1]))
                break
        if d2_zero:
            a, b = d2_zero[0]
            raise ValueError(f"particles {a} and {b} coincide and the softening is zero")
    return coupling(species, n) * _pair_sums(pos, pos, softening, exclude)


def self_potential_batch(ensemble: ParticleEnsemble, species: SpeciesParams, softening: float,
                         exclude_self: bool = True) -> np.ndarray:
    """Potential at every particle position, ``(N,)``."""
    pos = ensemble.positions
    n = len(pos)
    exclude = np.arange(n) if exclude_self else None
    return coupling(species, n) * _pair_sums(pos, pos, softening, exclude, potential=True)


# --------------------------------------------------------------------------
# field models
# --------------------------------------------------------------------------

@dataclass
class Potentials:
    """Potentials at a batch of points.

    ``grad_a[a, i, j]`` is ``dA^i / dx^j`` at point ``a``.
    """

    phi: np.ndarray
    a: np.ndarray
    dadt: np.ndarray
    grad_a: np.ndarray


class FieldModel:
    """Base class: vacuum (no fields)."""

    kind = "vacuum"
    has_potentials = True

    def eb(self, x, t: float):
        """``(E, B)`` at the points ``x``; ``None`` stands for an identically zero field."""
        return None, None

    def particle_fields(self, ensemble: ParticleEnsemble, species: SpeciesParams, t: float):
        """``(E, B)`` acting on the particles of ``ensemble`` at time ``t``."""
        return self.eb(ensemble.positions, t)

    def potentials(self, x, t: float) -> Potentials:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = len(x)
        return Potentials(np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3, 3)))

    def vector_potential(self, x, t: float):
        return self.potentials(x, t).a

    def describe(self) -> dict:
        return {"kind": self.kind}


Vacuum = FieldModel


@dataclass
class ExternalField(FieldModel):
    """Prescribed fields from batched callables ``f(x, t)`` with ``x`` of shape ``(n, 3)``.

    ``e_func`` and ``b_func`` return ``(n, 3)`` arrays (``None`` means zero).
    The potentials are optional; momentum diagnostics need all of ``phi``,
    ``a``, ``dadt`` and ``grad_a`` (the last returning ``(n, 3, 3)`` with
    ``[.., i, j] = dA^i/dx^j``).
    """

    e_func: Callable | None = None
    b_func: Callable | None = None
    phi: Callable | None = None
    a: Callable | None = None
    dadt: Callable | None = None
    grad_a: Callable | None = None
    name: str = "custom"

    kind = "external"

    @property
    def has_potentials(self) -> bool:
        return None not in (self.phi, self.a, self.dadt, self.grad_a)

    def eb(self, x, t: float):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        e = None if self.e_func is None else np.asarray(self.e_func(x, t), dtype=float)
        b = None if self.b_func is None else np.asarray(self.b_func(x, t), dtype=float)
        return e, b

    def potentials(self, x, t: float) -> Potentials:
        if not self.has_potentials:
            raise ValueError(f"external field {self.name!r} does not provide phi, A, dA/dt "
                             "and grad A")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return Potentials(np.asarray(self.phi(x, t), dtype=float),
                          np.asarray(self.a(x, t), dtype=float),
                          np.asarray(self.dadt(x, t), dtype=float),
                          np.asarray(self.grad_a(x, t), dtype=float))

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name}


class AnalyticExternal(ExternalField):
    """Uniform ``E0``, uniform ``B0`` and a harmonic trap of stiffness ``k``.

    ``phi = -E0 . x + k |x|^2 / 2`` and ``A = B0 x x / 2``, so that
    ``E = E0 - k x`` and ``B = B0``; ``A`` is static.
    """

    def __init__(self, e0=(0.0, 0.0, 0.0), b0=(0.0, 0.0, 0.0), k: float = 0.0,
                 name: str = "analytic"):
        self.e0 = np.asarray(e0, dtype=float).reshape(3)
        self.b0 = np.asarray(b0, dtype=float).reshape(3)
        self.k = float(k)
        if not (np.all(np.isfinite(self.e0)) and np.all(np.isfinite(self.b0))
                and np.isfinite(self.k)):
            raise ValueError("external field parameters must be finite")
        bx = np.array([[0.0, -self.b0[2], self.b0[1]],
                       [self.b0[2], 0.0, -self.b0[0]],
                       [-self.b0[1], self.b0[0], 0.0]])
        self._grad_a = 0.5 * bx
        super().__init__(e_func=self._e, b_func=self._b if np.any(self.b0) else None,
                         phi=self._phi, a=self._a, dadt=self._dadt, grad_a=self._grad,
                         name=name)

    def _e(self, x, t):
        return self.e0 - self.k * x

    def _b(self, x, t):
        return np.broadcast_to(self.b0, x.shape).copy()

    def _phi(self, x, t):
        return -x @ self.e0 + 0.5 * self.k * np.einsum("ai,ai->a", x, x)

    def _a(self, x, t):
        return 0.5 * np.cross(self.b0, x)

    def _dadt(self, x, t):
        return np.zeros_like(x)

    def _grad(self, x, t):
        return np.broadcast_to(self._grad_a, (len(x), 3, 3)).copy()

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name, "e0": self.e0.tolist(),
                "b0": self.b0.tolist(), "k": self.k}


BUILTIN_EXTERNAL = ("uniform_e", "uniform_b", "harmonic_trap", "analytic")


def make_external(name: str, params: dict | None = None) -> ExternalField:
    """Build one of the closed-form external fields by name.

    ``uniform_e`` takes ``e0``; ``uniform_b`` takes ``b0``; ``harmonic_trap``
    takes ``k``; ``analytic`` accepts any combination of the three.
    """
    params = dict(params or {})
    allowed = {"uniform_e": {"e0"}, "uniform_b": {"b0"}, "harmonic_trap": {"k"},
               "analytic": {"e0", "b0", "k"}}
    if name not in allowed:
        raise ValueError(f"unknown external field {name!r}; expected one of "
                         f"{', '.join(BUILTIN_EXTERNAL)}")
    extra = set(params) - allowed[name]
    if extra:
        raise ValueError(f"external field {name!r} does not accept {sorted(extra)}")
    return AnalyticExternal(name=name, **params)


@dataclass
class SelfConsistentCoulomb(FieldModel):
    """Self-field of the ensemble plus an optional external field.

    ``softening = None`` selects ``default_softening`` of the initial cloud
    when the model is first used.
    """

    softening: float | None = None
    exclude_self: bool = True
    external: ExternalField | None = None

    kind = "self_consistent"

    def __post_init__(self):
        if self.softening is not None and not self.softening >= 0:
            raise ValueError("softening must be non-negative")

    @property
    def has_potentials(self) -> bool:
        return False

    def resolve_softening(self, ensemble: ParticleEnsemble) -> float:
        if self.softening is None:
            self.softening = default_softening(ensemble.positions)
        return self.softening

    def eb(self, x, t: float):
        raise TypeError("the self-consistent field depends on the ensemble; "
                        "use particle_fields or efield_at")

    def particle_fields(self, ensemble: ParticleEnsemble, species: SpeciesParams, t: float):
        eps = self.resolve_softening(ensemble)
        e = self_field_batch(ensemble, species, eps, self.exclude_self)
        b = None
        if self.external is not None:
            e_ext, b = self.external.eb(ensemble.positions, t)
            if e_ext is not None:
                e = e + e_ext
        return e, b

    def describe(self) -> dict:
        d = {"kind": self.kind, "softening": self.softening, "exclude_self": self.exclude_self}
        if self.external is not None:
            d["external"] = self.external.describe()
        return d


def external_field_at(model: FieldModel, x, t: float):
    """``(E, B)`` of an external or vacuum model at one point or a batch.

    Zero fields are returned as explicit zero arrays.
    """
    if isinstance(model, SelfConsistentCoulomb):
        raise ValueError("external_field_at needs an external or vacuum field model")
    pts, single = _points(x)
    e, b = model.eb(pts, t)
    e = np.zeros_like(pts) if e is None else e
    b = np.zeros_like(pts) if b is None else b
    return (e[0], b[0]) if single else (e, b)


def curl_fd(func: Callable, x: np.ndarray, t: float, h: float) -> np.ndarray:
    """Central-difference curl of a batched vector field."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    jac = np.empty((len(x), 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        jac[:, :, j] = (func(x + e, t) - func(x - e, t)) / (2 * h)
    return np.stack([jac[:, 2, 1] - jac[:, 1, 2],
                     jac[:, 0, 2] - jac[:, 2, 0],
                     jac[:, 1, 0] - jac[:, 0, 1]], axis=1)


def gradient_fd(func: Callable, x: np.ndarray, t: float, h: float) -> np.ndarray:
    """Central-difference gradient of a batched scalar field."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        out[:, j] = (func(x + e, t) - func(x - e, t)) / (2 * h)
    return out


def check_potentials(model: ExternalField, points, t: float = 0.0, h: float = 1e-5):
    """Largest ``|E + grad phi + dA/dt|`` and ``|B - curl A|`` over ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    pot = model.potentials(pts, t)
    e, b = external_field_at(model, pts, t)
    grad_phi = gradient_fd(model.phi, pts, t, h)
    curl_a = curl_fd(model.a, pts, t, h)
    res_e = np.linalg.norm(e + grad_phi + pot.dadt, axis=1).max()
    res_b = np.linalg.norm(b - curl_a, axis=1).max()
    return float(res_e), float(res_b)
