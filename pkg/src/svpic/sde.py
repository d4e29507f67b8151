"""Time integrators for the particle SDE system.

Each particle obeys

    dX = V dt
    dV = (q/m)(E + V x B) dt + G(X, V) dt + sum_nu g_nu(X, V) o dW^nu

with ``o`` the Stratonovich product.  Three schemes are provided:

``ito_euler``
    Euler-Maruyama on the equivalent Ito equation (drift ``K`` in place of
    ``G``).
``stratonovich_heun``
    Euler-Heun: explicit Euler drift with ``G``, diffusion averaged between
    the current state and an Euler predictor.  The drift is deliberately not
    averaged: averaging it would raise the weak order on linear problems and
    the scheme is meant to be a plain order-one method.
``lorentz_rotation``
    For pitch-angle scattering only: half field kick, an exact rotation of
    each velocity by ``Omega = sqrt(nu(|v|)) dW``, half field kick.  Without
    fields every speed is preserved to round-off.

Electromagnetic and ensemble-dependent forcing (self-field, Coulomb ``D`` and
``K``) are evaluated once per step from the state at the start of the step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .collision import CollisionModel, Lorentz, NonFiniteForcing
from .diagnostics import ConservationLedger, field_energy_estimate
from .ensemble import DepositionGrid, MomentReport, ParticleEnsemble, SpeciesParams, moments
from .fields import FieldModel
from .rng import WienerBatch, empty_batch, refine_increments, wiener_increments

SCHEMES = ("ito_euler", "stratonovich_heun", "lorentz_rotation")


class NumericalError(RuntimeError):
    """A non-finite value appeared during a step."""

    def __init__(self, message: str, step: int | None = None, particle: int | None = None):
        super().__init__(message)
        self.step = step
        self.particle = particle


@dataclass
class IntegratorSpec:
    scheme: str = "ito_euler"
    dt: float = 1e-3
    n_steps: int = 1000
    boris: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ValueError(f"n_steps must be a non-negative integer, got {self.n_steps}")
        self.n_steps = int(self.n_steps)

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps


def _first_bad_row(*arrays) -> int | None:
    for arr in arrays:
        # a non-finite entry makes the sum non-finite; the full scan only runs then
        if np.isfinite(np.sum(arr)):
            continue
        ok = np.isfinite(arr)
        if not ok.all():
            return int(np.flatnonzero(~ok.reshape(len(arr), -1).all(axis=1))[0])
    return None


def _check(step_index, x, v):
    bad = _first_bad_row(x, v)
    if bad is not None:
        raise NumericalError(f"non-finite particle state at step {step_index}, particle {bad}",
                             step=step_index, particle=bad)


@nb.njit(cache=True)
def _euler_update(x, v, drift, kick, dt, x_out, v_out):
    """``V' = V + drift dt + kick`` and ``X' = X + V dt`` in one pass.

    Returns the first particle whose new state is not finite, or -1.
    """
    bad = -1
    for a in range(x.shape[0]):
        for k in range(3):
            vn = v[a, k] + drift[a, k] * dt + kick[a, k]
            xn = x[a, k] + v[a, k] * dt
            v_out[a, k] = vn
            x_out[a, k] = xn
            if bad < 0 and not (math.isfinite(vn) and math.isfinite(xn)):
                bad = a
    return bad


def _terms(step_index, method, *args, **kw):
    """Call a collision method, turning a non-finite forcing into ``NumericalError``."""
    try:
        return method(*args, **kw)
    except NonFiniteForcing as exc:
        raise NumericalError(f"non-finite collision forcing at step {step_index}, "
                             f"particle {exc.particle}", step=step_index,
                             particle=exc.particle) from None


def _field_accel(species: SpeciesParams, v, e, b):
    """``(q/m)(E + v x B)``; ``None`` when both fields vanish."""
    if e is None and b is None:
        return None
    acc = np.zeros_like(v) if e is None else np.array(e, dtype=float)
    if b is not None:
        acc += np.cross(v, b)
    acc *= species.charge_to_mass
    return acc


def _new_ensemble(ens: ParticleEnsemble, x, v) -> ParticleEnsemble:
    out = ParticleEnsemble.__new__(ParticleEnsemble)
    out.positions = x
    out.velocities = v
    out.momenta = ens.momenta
    out.weight = ens.weight
    return out


def _noise_array(noise: WienerBatch, collision: CollisionModel, n: int):
    dw = noise.increments
    if collision.n_channels and dw.shape != (n, collision.n_channels):
        raise ValueError(f"noise has shape {dw.shape}, expected {(n, collision.n_channels)}")
    return dw


def _index(collision: CollisionModel, n: int):
    return None if collision.additive else np.arange(n)


def step_ito_euler(ensemble: ParticleEnsemble, species: SpeciesParams, collision: CollisionModel,
                   fields: FieldModel, t: float, dt: float, noise: WienerBatch,
                   step_index: int = 0, boris: bool = False) -> ParticleEnsemble:
    """One Euler-Maruyama step with the Ito drift ``K``.

    ``boris`` replaces the explicit Lorentz-force update by the Boris push;
    it is only allowed without collisions.
    """
    x, v = ensemble.positions, ensemble.velocities
    n = len(v)
    dw = _noise_array(noise, collision, n)
    e, b = fields.particle_fields(ensemble, species, t)
    if boris:
        if collision.n_channels:
            raise ValueError("the Boris push is only available without collisions")
        v_new = boris_push(v, e, b, species.charge_to_mass, dt)
    else:
        bound = collision.bind(ensemble, species)
        acc = _field_accel(species, v, e, b)
        drift, kick = _terms(step_index, bound.step_terms, x, v, dw, _index(collision, n), ito=True)
        if acc is not None:
            drift += acc  # step_terms returns fresh arrays
        x_new = np.empty_like(x)
        v_new = np.empty_like(v)
        f64 = np.ascontiguousarray
        bad = _euler_update(f64(x, dtype=float), f64(v, dtype=float), f64(drift, dtype=float),
                            f64(kick, dtype=float), float(dt), x_new, v_new)
        if bad >= 0:
            raise NumericalError(f"non-finite particle state at step {step_index}, "
                                 f"particle {bad}", step=step_index, particle=bad)
        return _new_ensemble(ensemble, x_new, v_new)
    x_new = v_new * dt
    x_new += x
    _check(step_index, x_new, v_new)
    return _new_ensemble(ensemble, x_new, v_new)


def step_stratonovich_heun(ensemble: ParticleEnsemble, species: SpeciesParams,
                           collision: CollisionModel, fields: FieldModel, t: float, dt: float,
                           noise: WienerBatch, step_index: int = 0) -> ParticleEnsemble:
    """One Euler-Heun step with the Stratonovich drift ``G``.

    Predictor ``V* = V + a dt + g(X, V) dW``, ``X* = X + V dt``; corrector
    ``V' = V + a dt + (g(X, V) + g(X*, V*)) dW / 2`` where ``a`` collects the
    Lorentz force and ``G`` at the start of the step.
    """
    x, v = ensemble.positions, ensemble.velocities
    n = len(v)
    dw = _noise_array(noise, collision, n)
    e, b = fields.particle_fields(ensemble, species, t)
    bound = collision.bind(ensemble, species)
    idx = _index(collision, n)
    acc = _field_accel(species, v, e, b)
    drift, kick0 = _terms(step_index, bound.step_terms, x, v, dw, idx, ito=False)
    if acc is not None:
        drift = drift + acc
    x_new = x + v * dt
    v_det = v + drift * dt
    if collision.n_channels == 0:
        v_new = v_det
    elif collision.additive:
        v_new = v_det + kick0
    else:
        kick1 = _terms(step_index, bound.noise_increment, x_new, v_det + kick0, dw, idx)
        v_new = v_det + 0.5 * (kick0 + kick1)
    _check(step_index, x_new, v_new)
    return _new_ensemble(ensemble, x_new, v_new)


def rotate(v: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Rotate each row of ``v`` by the rotation vector in the matching row of ``omega``.

    Rodrigues' formula ``v cos(th) + (k x v) sin(th) + k (k . v)(1 - cos(th))``
    with ``th = |omega|`` and ``k = omega / th``.
    """
    theta = np.linalg.norm(omega, axis=1)
    safe = np.where(theta > 0, theta, 1.0)
    k = omega / safe[:, None]
    c = np.cos(theta)[:, None]
    s = np.sin(theta)[:, None]
    kv = np.einsum("ai,ai->a", k, v)[:, None]
    return v * c + np.cross(k, v) * s + k * (kv * (1.0 - c))


def step_lorentz_rotation(ensemble: ParticleEnsemble, species: SpeciesParams, collision: Lorentz,
                          fields: FieldModel, t: float, dt: float, noise: WienerBatch,
                          step_index: int = 0) -> ParticleEnsemble:
    """Kick-rotate-kick step for pitch-angle scattering.

    The noise term ``sum_k sqrt(nu) (e_k x v) dW^k`` equals ``Omega x v`` with
    ``Omega = sqrt(nu(|v|)) dW``; its exact flow over the step is the rotation
    by ``Omega``.  ``X`` advances with the final velocity.
    """
    if not isinstance(collision, Lorentz):
        raise ValueError("the lorentz_rotation scheme requires the Lorentz collision operator")
    x, v = ensemble.positions, ensemble.velocities
    dw = _noise_array(noise, collision, len(v))
    e, b = fields.particle_fields(ensemble, species, t)
    acc = _field_accel(species, v, e, b)
    half = v if acc is None else v + 0.5 * dt * acc
    omega = np.sqrt(collision.rate(half))[:, None] * dw
    v_new = rotate(half, omega)
    if acc is not None:
        # E and B are still those at X_n; only the magnetic force sees the rotated velocity
        v_new = v_new + 0.5 * dt * _field_accel(species, v_new, e, b)
    x_new = x + v_new * dt
    _check(step_index, x_new, v_new)
    return _new_ensemble(ensemble, x_new, v_new)


def boris_push(v, e, b, qm: float, dt: float):
    """Boris velocity update for the Lorentz force (collisionless path)."""
    v_minus = v if e is None else v + 0.5 * qm * dt * e
    if b is not None:
        tvec = 0.5 * qm * dt * np.asarray(b, dtype=float)
        svec = 2.0 * tvec / (1.0 + np.einsum("ai,ai->a", tvec, tvec))[:, None]
        v_prime = v_minus + np.cross(v_minus, tvec)
        v_minus = v_minus + np.cross(v_prime, svec)
    return v_minus if e is None else v_minus + 0.5 * qm * dt * e


def make_stepper(spec: IntegratorSpec):
    """Return ``f(ensemble, species, collision, fields, t, dt, noise, step_index)``."""
    if spec.scheme == "ito_euler":
        def f(*args, **kw):
            return step_ito_euler(*args, boris=spec.boris, **kw)
        return f
    if spec.boris:
        raise ValueError("the Boris option is only available with ito_euler")
    return {"stratonovich_heun": step_stratonovich_heun,
            "lorentz_rotation": step_lorentz_rotation}[spec.scheme]


# --------------------------------------------------------------------------
# trajectories and run loop
# --------------------------------------------------------------------------

@dataclass
class StepRecord:
    """State before and after one step, with the noise that drove it."""

    step: int
    t: float
    dt: float
    x0: np.ndarray
    v0: np.ndarray
    x1: np.ndarray
    v1: np.ndarray
    dw: np.ndarray


@dataclass
class Trajectory:
    """Recorded steps (every ``stride``-th step of a run)."""

    stride: int = 1
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


class SpeedMonitor:
    """Running maximum of ``| |v(t)| - |v(0)| | / |v(0)|`` over all particles.

    ``mean_rel_drift`` holds the ensemble mean of the same quantity at the
    latest observation.  Particles with zero initial speed are excluded and
    counted.
    """

    def __init__(self, ensemble: ParticleEnsemble):
        self.v0 = np.linalg.norm(ensemble.velocities, axis=1)
        self.mask = self.v0 > 0
        self.n_excluded = int((~self.mask).sum())
        self.max_rel_drift = 0.0
        self.mean_rel_drift = 0.0
        self.per_step: list[float] = []

    def observe(self, step: int, t: float, ensemble: ParticleEnsemble) -> None:
        speed = np.linalg.norm(ensemble.velocities[self.mask], axis=1)
        rel = np.abs(speed - self.v0[self.mask]) / self.v0[self.mask]
        drift = float(np.max(rel, initial=0.0))
        self.mean_rel_drift = float(rel.mean()) if rel.size else 0.0
        self.per_step.append(drift)
        self.max_rel_drift = max(self.max_rel_drift, drift)


@dataclass
class RunResult:
    ensemble: ParticleEnsemble
    initial_moments: MomentReport
    final_moments: MomentReport
    ledger: ConservationLedger
    t_final: float
    n_steps: int
    wall_time: float
    trajectory: Trajectory | None = None
    moment_times: list = field(default_factory=list)
    moment_series: list = field(default_factory=list)

    @property
    def steps_per_second(self) -> float:
        return self.n_steps / self.wall_time if self.wall_time > 0 else float("inf")

    def summary(self) -> dict:
        return {
            "t_final": self.t_final,
            "n_steps": self.n_steps,
            "initial_moments": self.initial_moments.as_dict(),
            "final_moments": self.final_moments.as_dict(),
            "wall_time_s": self.wall_time,
            "steps_per_second": self.steps_per_second,
        }


def update_momenta(ensemble: ParticleEnsemble, species: SpeciesParams, fields: FieldModel,
                   t: float) -> None:
    """Set ``P = m V + q A(X, t)`` in place (only if the ensemble carries momenta)."""
    if ensemble.momenta is None:
        return
    a = fields.vector_potential(ensemble.positions, t)
    ensemble.momenta = species.mass * ensemble.velocities + species.charge * a


def simulate(ensemble: ParticleEnsemble, species: SpeciesParams, collision: CollisionModel,
             fields: FieldModel, integrator: IntegratorSpec, seed: int, *, t0: float = 0.0,
             step0: int = 0, diag_stride: int = 0, diag_grid: DepositionGrid | None = None,
             moment_stride: int = 0, record_stride: int = 0, monitors=(),
             callback=None) -> RunResult:
    """Advance ``ensemble`` by ``integrator.n_steps`` steps.

    Step ``k`` (counting from ``step0``) is driven by
    ``wiener_increments(seed, k, N, M, dt)``, so a run restarted from a
    snapshot at step ``k`` continues on the same Brownian path.

    ``diag_stride`` controls the conservation ledger, ``moment_stride`` the
    stored moment series and ``record_stride`` trajectory recording (0
    disables each).  ``monitors`` receive ``observe(step, t, ensemble)``
    after every step and ``callback(step, t, ensemble)`` is called likewise.
    """
    stepper = make_stepper(integrator)
    dt = integrator.dt
    n = ensemble.n_particles
    m = collision.n_channels
    ens = ensemble
    ledger = ConservationLedger()

    def diag(step, t):
        fe = field_energy_estimate(fields, ens, species, diag_grid, t) if diag_grid else 0.0
        ledger.record(t, step, ens, species, fe)

    initial = moments(ens, species)
    times, series = [t0], [initial]
    if diag_stride:
        diag(step0, t0)
    traj = Trajectory(stride=record_stride) if record_stride else None
    start = time.perf_counter()
    t = t0
    for k in range(integrator.n_steps):
        step = step0 + k
        if m:
            noise = wiener_increments(seed, step, n, m, dt)
        else:
            noise = empty_batch(n, dt, seed, step)
        new = stepper(ens, species, collision, fields, t, dt, noise, step_index=step)
        t = t0 + (k + 1) * dt
        update_momenta(new, species, fields, t)
        if traj is not None and k % record_stride == 0:
            traj.records.append(StepRecord(step, t - dt, dt, ens.positions, ens.velocities,
                                           new.positions, new.velocities, noise.increments))
        ens = new
        for mon in monitors:
            mon.observe(step + 1, t, ens)
        if callback is not None:
            callback(step + 1, t, ens)
        if diag_stride and (k + 1) % diag_stride == 0:
            diag(step + 1, t)
        if moment_stride and (k + 1) % moment_stride == 0:
            times.append(t)
            series.append(moments(ens, species))
    wall = time.perf_counter() - start
    final = moments(ens, species)
    if diag_stride and integrator.n_steps % diag_stride:
        diag(step0 + integrator.n_steps, t)
    return RunResult(ens, initial, final, ledger, t, integrator.n_steps, wall, traj, times, series)


def run(config) -> RunResult:
    """Execute a validated ``SimConfig`` including all file output it requests."""
    from .config_io import execute
    return execute(config)


# --------------------------------------------------------------------------
# coupled refinement (weak convergence)
# --------------------------------------------------------------------------

def coupled_levels(ensemble: ParticleEnsemble, species: SpeciesParams, collision: CollisionModel,
                   fields: FieldModel, scheme: str, dt0: float, n_coarse: int, seed: int,
                   levels: int, observables, monitor_factory=None):
    """Run the same initial ensemble at ``dt0, dt0/2, ..., dt0/2^(levels-1)``.

    All levels share one Brownian path: each coarse increment is split along
    the Brownian bridge, and the levels advance in lock-step one coarse step
    at a time.  ``observables`` maps names to functions of the final
    ensemble; the result maps each name to a list of values (one per level).
    ``monitor_factory(ensemble)`` optionally creates a per-level monitor;
    the monitors are returned as the second element.
    """
    if levels < 2:
        raise ValueError("at least two refinement levels are needed")
    stepper = make_stepper(IntegratorSpec(scheme, dt0, n_coarse))
    n = ensemble.n_particles
    m = collision.n_channels
    states = [ensemble.copy() for _ in range(levels)]
    monitors = [monitor_factory(ensemble) for _ in range(levels)] if monitor_factory else None
    for k in range(n_coarse):
        if m:
            root = wiener_increments(seed, k, n, m, dt0)
        else:
            root = empty_batch(n, dt0, seed, k)
        tree = [[root]]
        for _ in range(1, levels):
            if m:
                tree.append([c for b in tree[-1] for c in refine_increments(b)])
            else:
                tree.append([empty_batch(n, b.dt / 2, seed, k) for b in tree[-1] for _ in (0, 1)])
        for lvl in range(levels):
            h = dt0 / (1 << lvl)
            for j, batch in enumerate(tree[lvl]):
                t = k * dt0 + j * h
                sub_step = (k << lvl) + j
                states[lvl] = stepper(states[lvl], species, collision, fields, t, h, batch,
                                      step_index=sub_step)
                if monitors:
                    monitors[lvl].observe(sub_step + 1, t + h, states[lvl])
    values = {name: [float(fn(s)) for s in states] for name, fn in observables.items()}
    return (values, monitors) if monitor_factory else values


def fit_order(dts, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(dt)``."""
    dts = np.asarray(dts, dtype=float)
    errors = np.abs(np.asarray(errors, dtype=float))
    if np.any(errors <= 0):
        return float("nan")
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])


@dataclass
class ConvergenceReport:
    dts: list
    values: list
    differences: list
    order: float
    reference: float | None = None
    reference_errors: list | None = None
    reference_order: float | None = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("dts", "values", "differences", "order",
                                               "reference", "reference_errors", "reference_order")}


def weak_order(values, dt0: float, reference: float | None = None) -> ConvergenceReport:
    """Observed weak order from coupled level values.

    The order is the slope of ``|m_l - m_{l+1}|`` against ``dt_l``; for an
    order-p method these successive differences scale as ``dt^p``.  With a
    known exact value the slope of ``|m_l - reference|`` is reported too.
    """
    values = [float(x) for x in values]
    dts = [dt0 / (1 << i) for i in range(len(values))]
    diffs = [abs(values[i] - values[i + 1]) for i in range(len(values) - 1)]
    order = fit_order(dts[:-1], diffs)
    rep = ConvergenceReport(dts, values, diffs, order)
    if reference is not None:
        errs = [abs(x - reference) for x in values]
        rep.reference = float(reference)
        rep.reference_errors = errs
        rep.reference_order = fit_order(dts, errs)
    return rep
