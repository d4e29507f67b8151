"""Particle state, initial samplers, grid deposition and velocity moments.

Units are nondimensional and rationalized (vacuum permittivity and
permeability equal to one).  Every particle carries the same weight
``n_total / n_particles``; the empirical distribution is

    f(x, v) ~ (1/N) sum_a delta(x - X_a) delta(v - V_a)

and deposition kernels replace the deltas by nearest-cell or cloud-in-cell
shape functions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .rng import DOMAIN_INIT, philox_stream

COORDINATE_NAMES = ("x1", "x2", "x3", "v1", "v2", "v3")
KERNELS = ("nearest", "cic")


@dataclass(frozen=True)
class SpeciesParams:
    """Charge ``q``, mass ``m`` and physical particle count ``n_total`` of the single species."""

    charge: float = 1.0
    mass: float = 1.0
    n_total: float = 1.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not self.n_total > 0:
            raise ValueError(f"n_total must be positive, got {self.n_total}")

    @property
    def charge_to_mass(self) -> float:
        return self.charge / self.mass


@dataclass
class ParticleEnsemble:
    """Positions, velocities and (optionally) conjugate momenta of ``N`` particles."""

    positions: np.ndarray
    velocities: np.ndarray
    momenta: np.ndarray | None = None
    weight: float = 1.0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        self.velocities = np.ascontiguousarray(self.velocities, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.velocities.shape != self.positions.shape:
            raise ValueError("positions and velocities must have the same shape")
        if self.positions.shape[0] < 1:
            raise ValueError("an ensemble needs at least one particle")
        if self.momenta is not None:
            self.momenta = np.ascontiguousarray(self.momenta, dtype=float)
            if self.momenta.shape != self.positions.shape:
                raise ValueError("momenta must have the same shape as positions")
        if not self.weight > 0:
            raise ValueError("particle weight must be positive")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.positions.copy(), self.velocities.copy(),
                                None if self.momenta is None else self.momenta.copy(),
                                self.weight)

    def coordinates(self, names: tuple[str, ...]) -> np.ndarray:
        """Stack the requested phase-space coordinates into an ``(N, len(names))`` array."""
        cols = []
        for name in names:
            try:
                k = COORDINATE_NAMES.index(name)
            except ValueError:
                raise ValueError(f"unknown coordinate {name!r}; expected one of "
                                 f"{COORDINATE_NAMES}") from None
            cols.append(self.positions[:, k] if k < 3 else self.velocities[:, k - 3])
        return np.stack(cols, axis=1)

    def all_finite(self) -> bool:
        ok = np.isfinite(self.positions).all() and np.isfinite(self.velocities).all()
        if self.momenta is not None:
            ok = ok and np.isfinite(self.momenta).all()
        return bool(ok)


# --------------------------------------------------------------------------
# initial distributions
# --------------------------------------------------------------------------

def _vec(params: dict, key: str, default=(0.0, 0.0, 0.0)) -> np.ndarray:
    v = np.asarray(params.get(key, default), dtype=float)
    if v.shape != (3,):
        raise ValueError(f"{key} must be a 3-vector, got {params.get(key)!r}")
    return v


def _thermal_speed(params: dict) -> float:
    vth = float(params.get("vth", 1.0))
    if not vth > 0:
        raise ValueError(f"thermal speed vth must be positive, got {vth}")
    return vth


def _box(params: dict) -> tuple[np.ndarray, np.ndarray]:
    lo = _vec(params, "box_lo", (-1.0, -1.0, -1.0))
    hi = _vec(params, "box_hi", (1.0, 1.0, 1.0))
    if np.any(hi <= lo):
        raise ValueError("box_hi must exceed box_lo on every axis")
    return lo, hi


def _sample_cold_beam(rng, n, params):
    x = np.broadcast_to(_vec(params, "position"), (n, 3)).copy()
    v = np.broadcast_to(_vec(params, "velocity"), (n, 3)).copy()
    return x, v


def _sample_maxwellian(rng, n, params):
    vth = _thermal_speed(params)
    sigma_x = float(params.get("position_sigma", 0.0))
    if sigma_x < 0:
        raise ValueError("position_sigma must be non-negative")
    center = _vec(params, "center")
    v = _vec(params, "drift") + vth * rng.standard_normal((n, 3))
    x = center + sigma_x * rng.standard_normal((n, 3)) if sigma_x > 0 else np.tile(center, (n, 1))
    return x, v


def _sample_uniform_maxwellian(rng, n, params):
    lo, hi = _box(params)
    vth = _thermal_speed(params)
    x = lo + (hi - lo) * rng.random((n, 3))
    v = _vec(params, "drift") + vth * rng.standard_normal((n, 3))
    return x, v


def _sample_two_stream(rng, n, params):
    lo, hi = _box(params)
    vth = _thermal_speed(params)
    beam = _vec(params, "beam", (1.0, 0.0, 0.0))
    x = lo + (hi - lo) * rng.random((n, 3))
    sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)[:, None]
    v = sign * beam + vth * rng.standard_normal((n, 3))
    return x, v


SAMPLERS: dict[str, Callable] = {
    "cold_beam": _sample_cold_beam,
    "maxwellian": _sample_maxwellian,
    "uniform_maxwellian": _sample_uniform_maxwellian,
    "two_stream": _sample_two_stream,
}


@dataclass(frozen=True)
class InitialDistribution:
    """Named sampler plus its parameters (see ``SAMPLERS``).

    ============================  ===============================================
    ``cold_beam``                 ``position``, ``velocity``
    ``maxwellian``                ``vth``, ``drift``, ``center``, ``position_sigma``
    ``uniform_maxwellian``        ``box_lo``, ``box_hi``, ``vth``, ``drift``
    ``two_stream``                ``box_lo``, ``box_hi``, ``vth``, ``beam``
    ============================  ===============================================
    """

    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SAMPLERS:
            raise ValueError(f"unknown initial distribution {self.name!r}; "
                             f"expected one of {sorted(SAMPLERS)}")
        if self.name != "cold_beam":
            _thermal_speed(self.params)


def init_ensemble(n_particles: int, sampler: InitialDistribution, rng_seed: int,
                  species: SpeciesParams | None = None,
                  vector_potential: Callable[[np.ndarray, float], np.ndarray] | None = None,
                  t0: float = 0.0) -> ParticleEnsemble:
    """Draw ``n_particles`` i.i.d. samples from ``sampler``.

    If ``vector_potential`` is given the conjugate momenta
    ``P = m V + q A(X, t0)`` are attached.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    species = species or SpeciesParams()
    rng = philox_stream(rng_seed, DOMAIN_INIT)
    x, v = SAMPLERS[sampler.name](rng, int(n_particles), sampler.params)
    momenta = None
    if vector_potential is not None:
        momenta = species.mass * v + species.charge * np.asarray(vector_potential(x, t0))
    return ParticleEnsemble(x, v, momenta, weight=species.n_total / n_particles)


# --------------------------------------------------------------------------
# deposition
# --------------------------------------------------------------------------

@dataclass
class DepositionGrid:
    """Axis-aligned box ``[lo, hi]`` over three phase-space coordinates, split into cells.

    ``coords`` names the axes, e.g. ``("x1", "x2", "x3")`` for a spatial grid,
    ``("v1", "v2", "v3")`` for velocity space or ``("x1", "v1", "v2")`` for a
    phase-space slice.  ``values`` holds one number per cell.
    """

    lo: np.ndarray
    hi: np.ndarray
    cells: tuple[int, int, int]
    coords: tuple[str, str, str] = ("x1", "x2", "x3")
    periodic: bool = False
    values: np.ndarray | None = None
    n_inside: int = 0
    n_outside: int = 0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(3)
        self.hi = np.asarray(self.hi, dtype=float).reshape(3)
        self.cells = tuple(int(c) for c in self.cells)
        self.coords = tuple(self.coords)
        if len(self.cells) != 3 or min(self.cells) < 1:
            raise ValueError(f"cells must be three positive integers, got {self.cells}")
        if not np.all(self.hi > self.lo):
            raise ValueError("grid has zero or negative extent (zero-volume cells)")
        for name in self.coords:
            if name not in COORDINATE_NAMES:
                raise ValueError(f"unknown grid coordinate {name!r}")

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def centers(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return self.lo[axis] + h * (np.arange(self.cells[axis]) + 0.5)

    def center_points(self) -> np.ndarray:
        """Cell centers as an ``(n_cells, 3)`` array in C order."""
        mesh = np.meshgrid(self.centers(0), self.centers(1), self.centers(2), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def with_values(self, values: np.ndarray, n_inside: int, n_outside: int) -> DepositionGrid:
        return replace(self, values=values, n_inside=n_inside, n_outside=n_outside)

    def integral(self) -> float:
        return float(np.sum(self.values) * self.cell_volume)


def _inside_mask(u: np.ndarray, cells: np.ndarray) -> np.ndarray:
    return np.all((u >= 0.0) & (u <= cells), axis=1)


def _deposit(points: np.ndarray, weights: np.ndarray, grid: DepositionGrid,
             kernel: str) -> tuple[np.ndarray, int]:
    """Scatter ``weights`` (shape ``(N, k)``) onto the grid; returns per-cell sums and inside count."""
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    cells = np.asarray(grid.cells)
    u = (points - grid.lo) / grid.spacing
    if grid.periodic:
        u = np.mod(u, cells)
        inside = np.ones(len(u), dtype=bool)
    else:
        inside = _inside_mask(u, cells)
        u = u[inside]
        weights = weights[inside]
    n_cells = int(np.prod(cells))
    out = np.zeros((weights.shape[1], n_cells))

    def fix(idx, axis):
        if grid.periodic:
            return np.mod(idx, cells[axis])
        return np.clip(idx, 0, cells[axis] - 1)

    if kernel == "nearest":
        idx = [fix(np.floor(u[:, k]).astype(np.int64), k) for k in range(3)]
        flat = np.ravel_multi_index(idx, grid.cells)
        for c in range(weights.shape[1]):
            out[c] = np.bincount(flat, weights=weights[:, c], minlength=n_cells)
    else:
        s = u - 0.5
        i0 = np.floor(s).astype(np.int64)
        frac = s - i0
        for offs in itertools.product((0, 1), repeat=3):
            w = np.ones(len(u))
            idx = []
            for k, o in enumerate(offs):
                w = w * (frac[:, k] if o else 1.0 - frac[:, k])
                idx.append(fix(i0[:, k] + o, k))
            flat = np.ravel_multi_index(idx, grid.cells)
            for c in range(weights.shape[1]):
                out[c] += np.bincount(flat, weights=w * weights[:, c], minlength=n_cells)
    return out.reshape((weights.shape[1],) + grid.cells), int(inside.sum())


def cic_weights(point: np.ndarray, grid: DepositionGrid) -> np.ndarray:
    """CIC weights of one point on the grid (mostly useful for checking partition of unity)."""
    ens_points = np.asarray(point, dtype=float).reshape(1, 3)
    vals, _ = _deposit(ens_points, np.ones((1, 1)), grid, "cic")
    return vals[0]


def deposit_density(ensemble: ParticleEnsemble, grid: DepositionGrid,
                    kernel: str = "cic") -> DepositionGrid:
    """Empirical probability density over the grid's coordinates.

    Each in-bounds particle carries mass ``1/N``; the returned values are
    mass per cell volume, so ``integral()`` equals the in-bounds fraction.
    """
    n = ensemble.n_particles
    pts = ensemble.coordinates(grid.coords)
    vals, n_in = _deposit(pts, np.ones((n, 1)), grid, kernel)
    return grid.with_values(vals[0] / (n * grid.cell_volume), n_in, n - n_in)


def deposit_charge_current(ensemble: ParticleEnsemble, species: SpeciesParams,
                           grid: DepositionGrid, kernel: str = "cic"
                           ) -> tuple[DepositionGrid, list[DepositionGrid]]:
    """Charge density ``rho`` and the three current components ``J_k`` on a spatial grid."""
    if grid.coords != ("x1", "x2", "x3"):
        raise ValueError("charge/current deposition needs a spatial grid (x1, x2, x3)")
    n = ensemble.n_particles
    weights = np.concatenate([np.ones((n, 1)), ensemble.velocities], axis=1)
    vals, n_in = _deposit(ensemble.positions, weights, grid, kernel)
    scale = species.charge * species.n_total / (n * grid.cell_volume)
    rho = grid.with_values(scale * vals[0], n_in, n - n_in)
    currents = [grid.with_values(scale * vals[k], n_in, n - n_in) for k in (1, 2, 3)]
    return rho, currents


# --------------------------------------------------------------------------
# moments
# --------------------------------------------------------------------------

@dataclass
class MomentReport:
    mean_velocity: np.ndarray
    velocity_variance: np.ndarray
    kinetic_energy: float
    total_momentum: np.ndarray
    mean_speed: float
    min_speed: float
    max_speed: float
    mean_conjugate_momentum: np.ndarray | None = None

    def as_dict(self) -> dict:
        out = {
            "mean_velocity": self.mean_velocity.tolist(),
            "velocity_variance": self.velocity_variance.tolist(),
            "kinetic_energy": self.kinetic_energy,
            "total_momentum": self.total_momentum.tolist(),
            "mean_speed": self.mean_speed,
            "min_speed": self.min_speed,
            "max_speed": self.max_speed,
        }
        if self.mean_conjugate_momentum is not None:
            out["mean_conjugate_momentum"] = self.mean_conjugate_momentum.tolist()
        return out


def moments(ensemble: ParticleEnsemble, species: SpeciesParams | None = None) -> MomentReport:
    """Velocity moments of the ensemble.

    Sums use numpy's pairwise reduction over contiguous arrays, which has a
    fixed traversal order and so is reproducible run to run.
    """
    mass = species.mass if species is not None else 1.0
    v = ensemble.velocities
    n = ensemble.n_particles
    cols = np.ascontiguousarray(v.T)
    mean = np.array([np.sum(c) for c in cols]) / n
    var = np.array([np.sum((c - m) ** 2) for c, m in zip(cols, mean)]) / n
    v2 = np.sum(cols * cols, axis=0)
    speed = np.sqrt(v2)
    ke = 0.5 * mass * ensemble.weight * float(np.sum(v2))
    p_mean = None
    if ensemble.momenta is not None:
        p_mean = np.array([np.sum(c) for c in np.ascontiguousarray(ensemble.momenta.T)]) / n
    return MomentReport(
        mean_velocity=mean,
        velocity_variance=var,
        kinetic_energy=ke,
        total_momentum=mass * ensemble.weight * n * mean,
        mean_speed=float(np.sum(speed)) / n,
        min_speed=float(speed.min()),
        max_speed=float(speed.max()),
        mean_conjugate_momentum=p_mean,
    )
