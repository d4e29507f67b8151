"""Run diagnostics and checks of structural identities.

* ``ConservationLedger``: time series of kinetic energy, a grid estimate of
  field energy, total momentum and speed statistics.
* ``track_conjugate_momentum``: compares the increment of ``P = m V + q A(X, t)``
  over each recorded step with the canonical right-hand side
  ``-q grad(phi) + q sum_j V^j grad(A^j) + m G`` plus the noise term.
* ``gauss_residual``: finite-volume divergence of the softened pairwise field
  against the deposited charge density.
* ``compare_to_maxwellian`` and ``speed_conservation_report``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from . import _parallel
from .collision import CollisionModel
from .ensemble import (DepositionGrid, ParticleEnsemble, SpeciesParams, deposit_charge_current,
                       moments)
from .fields import (ExternalField, FieldModel, SelfConsistentCoulomb, coupling, efield_at,
                     external_field_at)

LEDGER_COLUMNS = ("t", "step", "ke", "fe", "px", "py", "pz", "mean_speed", "min_speed",
                  "max_speed", "mean_v1", "mean_v2", "mean_v3", "var_v1", "var_v2", "var_v3")


@dataclass
class ConservationLedger:
    """Rows of ``LEDGER_COLUMNS``; timestamps must strictly increase."""

    rows: list = field(default_factory=list)

    def record(self, t: float, step: int, ensemble: ParticleEnsemble, species: SpeciesParams,
               field_energy: float = 0.0) -> dict:
        if self.rows and not t > self.rows[-1]["t"]:
            raise ValueError(f"ledger time {t} does not follow {self.rows[-1]['t']}")
        m = moments(ensemble, species)
        row = {"t": float(t), "step": int(step), "ke": m.kinetic_energy,
               "fe": float(field_energy)}
        row.update(zip(("px", "py", "pz"), m.total_momentum.tolist()))
        row.update(mean_speed=m.mean_speed, min_speed=m.min_speed, max_speed=m.max_speed)
        row.update(zip(("mean_v1", "mean_v2", "mean_v3"), m.mean_velocity.tolist()))
        row.update(zip(("var_v1", "var_v2", "var_v3"), m.velocity_variance.tolist()))
        self.rows.append(row)
        return row

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)


def field_energy_estimate(fields: FieldModel, ensemble: ParticleEnsemble, species: SpeciesParams,
                          grid: DepositionGrid, t: float) -> float:
    """``1/2 sum_cells |E|^2 dV`` with ``E`` sampled at the cell centres.

    This is an estimate only: the pairwise field is not grid-native.
    """
    pts = grid.center_points()
    if isinstance(fields, SelfConsistentCoulomb):
        e = efield_at(pts, t, ensemble, species, fields.resolve_softening(ensemble))
        if fields.external is not None:
            e = e + external_field_at(fields.external, pts, t)[0]
    else:
        e = external_field_at(fields, pts, t)[0]
    return float(0.5 * np.sum(e * e) * grid.cell_volume)


# --------------------------------------------------------------------------
# conjugate momentum
# --------------------------------------------------------------------------

@dataclass
class MomentumCheckReport:
    """Largest per-step residual of the momentum identity and the sizes of its terms.

    ``step_residuals[k]`` is the maximum over particles for recorded step
    ``k``; ``rhs_decomposition`` holds the largest magnitude of each
    right-hand-side contribution over the whole trajectory.
    """

    max_residual: float
    step_residuals: np.ndarray
    rhs_decomposition: dict
    dt: float

    @property
    def mean_residual(self) -> float:
        return float(np.mean(self.step_residuals)) if len(self.step_residuals) else 0.0


def _canonical_force(fields: ExternalField, species: SpeciesParams, x, v, t):
    """``-q grad(phi)`` and ``q sum_j v^j grad(A^j)`` at a batch of states."""
    pot = fields.potentials(x, t)
    e, _ = external_field_at(fields, x, t)
    phi_force = species.charge * (e + pot.dadt)
    a_force = species.charge * np.einsum("aji,aj->ai", pot.grad_a, v)
    return phi_force, a_force


def track_conjugate_momentum(trajectory, fields: FieldModel, species: SpeciesParams,
                             collision: CollisionModel | None = None) -> MomentumCheckReport:
    """Check ``dP = [-q grad(phi) + q V^j grad(A^j) + m G] dt + m sum g o dW`` step by step.

    Both sides use the recorded states: ``P`` from its definition at the two
    ends of each step, the right-hand side by the trapezoidal rule (drift) and
    the midpoint average of ``g`` (noise).  For an order-one scheme the
    residual per step is ``O(dt^2)`` without noise.
    """
    if not isinstance(fields, FieldModel) or not fields.has_potentials:
        raise ValueError("the momentum check needs a field model with phi, A, dA/dt and grad A")
    collision = collision or CollisionModel()
    m, q = species.mass, species.charge
    residuals = []
    terms = {"scalar_potential": 0.0, "vector_potential": 0.0, "collision_drift": 0.0,
             "noise": 0.0}
    dt = float("nan")
    for rec in trajectory.records:
        dt = rec.dt
        t0, t1 = rec.t, rec.t + rec.dt
        p0 = m * rec.v0 + q * fields.vector_potential(rec.x0, t0)
        p1 = m * rec.v1 + q * fields.vector_potential(rec.x1, t1)
        f0 = _canonical_force(fields, species, rec.x0, rec.v0, t0)
        f1 = _canonical_force(fields, species, rec.x1, rec.v1, t1)
        phi_term = 0.5 * rec.dt * (f0[0] + f1[0])
        a_term = 0.5 * rec.dt * (f0[1] + f1[1])
        rhs = phi_term + a_term
        if collision.n_channels:
            bound = collision.bind(ParticleEnsemble(rec.x0, rec.v0), species)
            idx = None if collision.additive else np.arange(len(rec.v0))
            g_drift = 0.5 * rec.dt * m * (bound.drift(rec.x0, rec.v0, idx, ito=False)
                                          + bound.drift(rec.x1, rec.v1, idx, ito=False))
            noise = 0.5 * m * (bound.noise_increment(rec.x0, rec.v0, rec.dw, idx)
                               + bound.noise_increment(rec.x1, rec.v1, rec.dw, idx))
            rhs = rhs + g_drift + noise
            terms["collision_drift"] = max(terms["collision_drift"],
                                           float(np.abs(g_drift).max()))
            terms["noise"] = max(terms["noise"], float(np.abs(noise).max()))
        terms["scalar_potential"] = max(terms["scalar_potential"], float(np.abs(phi_term).max()))
        terms["vector_potential"] = max(terms["vector_potential"], float(np.abs(a_term).max()))
        res = np.linalg.norm(p1 - p0 - rhs, axis=1)
        residuals.append(float(res.max()))
    residuals = np.asarray(residuals)
    if not np.all(np.isfinite(residuals)):
        raise ValueError("momentum residual is not finite")
    return MomentumCheckReport(float(residuals.max(initial=0.0)), residuals, terms, dt)


# --------------------------------------------------------------------------
# Gauss's law
# --------------------------------------------------------------------------

def _corner_values(d, y, z, eps2):
    """``(d/a) atan(y z / (a sqrt(a^2 + y^2 + z^2)))`` on the tensor grid of ``d, y, z``.

    With ``a^2 = d^2 + eps^2`` this is the antiderivative (in ``y`` and ``z``)
    of the normal component of a unit Plummer field through the plane at
    signed distance ``d``.  Planes through an unsoftened source carry no flux.
    """
    a2 = d * d + eps2
    a = np.sqrt(a2)
    a = a[..., :, None, None]
    yz = y[..., None, :, None] * z[..., None, None, :]
    r = np.sqrt(a * a + y[..., None, :, None] ** 2 + z[..., None, None, :] ** 2)
    safe_a = np.where(a > 0, a, 1.0)
    val = (d[..., :, None, None] / safe_a) * np.arctan(yz / (safe_a * np.where(r > 0, r, 1.0)))
    return np.where(a > 0, val, 0.0)


def _net_outflow(vals, axis):
    """Net outward flux per cell from corner antiderivatives oriented along ``axis``."""
    # flux through each face: mixed difference over the two in-plane axes
    face = vals[..., :, 1:, 1:] - vals[..., :, :-1, 1:] - vals[..., :, 1:, :-1] + vals[..., :, :-1, :-1]
    out = face[..., 1:, :, :] - face[..., :-1, :, :]
    # bring the normal axis back to its place; vals are ordered (normal, a1, a2)
    order = {0: (0, 1, 2), 1: (2, 0, 1), 2: (1, 2, 0)}[axis]
    lead = out.ndim - 3
    return np.transpose(out, tuple(range(lead)) + tuple(lead + i for i in order))


def flux_divergence(ensemble: ParticleEnsemble, species: SpeciesParams, grid: DepositionGrid,
                    softening: float) -> np.ndarray:
    """Cell-averaged divergence of the softened pairwise field.

    Every face flux is integrated exactly for the Plummer kernel, so this is
    the charge of the softened sources inside each cell divided by its
    volume.
    """
    edges = [grid.lo[k] + grid.spacing[k] * np.arange(grid.cells[k] + 1) for k in range(3)]
    pos = ensemble.positions
    eps2 = softening * softening
    chunk = max(1, (1 << 21) // int(np.prod([len(e) for e in edges])))

    def work(lo, hi):
        rel = [edges[k][None, :] - pos[lo:hi, k][:, None] for k in range(3)]
        total = np.zeros(grid.cells)
        # normal axis k, in-plane axes in cyclic order (k+1, k+2)
        for k in range(3):
            d, y, z = rel[k], rel[(k + 1) % 3], rel[(k + 2) % 3]
            total += _net_outflow(_corner_values(d, y, z, eps2), k).sum(axis=0)
        return total

    parts = _parallel.map_chunks(work, len(pos), chunk)
    total = np.zeros(grid.cells)
    for p in parts:
        total += p
    return coupling(species, ensemble.n_particles) * total / grid.cell_volume


def gauss_residual(ensemble: ParticleEnsemble, species: SpeciesParams, grid: DepositionGrid,
                   softening: float) -> float:
    """Relative L2 mismatch between the discrete divergence of E and the deposited charge.

    ``rho`` uses nearest-cell deposition; the divergence is the exact cell
    average from face fluxes (see ``flux_divergence``).  The mismatch is the
    charge the softening moves across cell boundaries, so it shrinks when the
    softening shrinks faster than the cells.
    """
    if grid.coords != ("x1", "x2", "x3") or grid.periodic:
        raise ValueError("Gauss residual needs a non-periodic spatial grid")
    if softening < 0:
        raise ValueError("softening must be non-negative")
    if species.charge == 0:
        return 0.0
    rho = deposit_charge_current(ensemble, species, grid, kernel="nearest")[0].values
    div = flux_divergence(ensemble, species, grid, softening)
    norm = np.linalg.norm(rho)
    if norm == 0:
        raise ValueError("no charge is deposited on the grid; it does not cover the cloud")
    return float(np.linalg.norm(div - rho) / norm)


# --------------------------------------------------------------------------
# distribution comparison and speed conservation
# --------------------------------------------------------------------------

def ks_critical_value(n: int, alpha: float) -> float:
    """Asymptotic Kolmogorov critical value ``K_alpha / sqrt(n)``."""
    return float(stats.kstwobign.isf(alpha) / np.sqrt(n))


@dataclass
class GoodnessReport:
    ks_statistic: np.ndarray
    p_value: np.ndarray
    n: int
    mean_delta: np.ndarray
    variance_delta: np.ndarray
    kurtosis_delta: np.ndarray

    def critical_value(self, alpha: float = 0.01) -> float:
        return ks_critical_value(self.n, alpha)

    def passes(self, alpha: float = 0.05) -> bool:
        return bool(np.all(self.ks_statistic < self.critical_value(alpha)))

    def as_dict(self) -> dict:
        return {"ks_statistic": self.ks_statistic.tolist(), "p_value": self.p_value.tolist(),
                "n": self.n, "mean_delta": self.mean_delta.tolist(),
                "variance_delta": self.variance_delta.tolist(),
                "kurtosis_delta": self.kurtosis_delta.tolist()}


def compare_to_maxwellian(ensemble: ParticleEnsemble, temperature: float) -> GoodnessReport:
    """Per-component KS test of the velocities against ``N(0, temperature)``.

    The moment deltas are sample mean, sample variance minus ``temperature``
    and excess kurtosis (zero for a Gaussian).
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    v = ensemble.velocities
    scale = np.sqrt(temperature)
    ks, pv = [], []
    for k in range(3):
        res = stats.kstest(v[:, k], "norm", args=(0.0, scale))
        ks.append(res.statistic)
        pv.append(res.pvalue)
    return GoodnessReport(np.array(ks), np.array(pv), len(v), v.mean(axis=0),
                          v.var(axis=0) - temperature, stats.kurtosis(v, axis=0, fisher=True))


class SpeedReport(NamedTuple):
    max_rel_drift: float
    per_step_drift: np.ndarray
    n_excluded: int


def speed_conservation_report(trajectory) -> SpeedReport:
    """Largest ``| |v(t)| - |v(0)| | / |v(0)|`` over recorded steps and particles.

    ``v(0)`` is the velocity at the start of the first recorded step.
    Particles starting at rest are excluded and counted.
    """
    if not trajectory.records:
        return SpeedReport(0.0, np.zeros(0), 0)
    s0 = np.linalg.norm(trajectory.records[0].v0, axis=1)
    mask = s0 > 0
    per_step = np.array([
        float(np.max(np.abs(np.linalg.norm(r.v1[mask], axis=1) - s0[mask]) / s0[mask],
                     initial=0.0))
        for r in trajectory.records])
    return SpeedReport(float(per_step.max(initial=0.0)), per_step, int((~mask).sum()))
