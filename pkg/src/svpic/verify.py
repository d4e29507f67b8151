"""Executable verification battery.

Each ``criterion_*`` function runs one self-contained check at desk scale and
returns a ``CriterionResult``.  Measured values and thresholds are plain
numbers, so ``CriterionResult.json_line`` is byte-identical between runs
with the same seed.  Wall-clock timings are kept separately in
``CriterionResult.runtime_s`` and never enter the JSON line.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import sqrtm

from . import oracle
from .collision import (CollisionModel, ConstantFrequency, Coulomb, LenardBernstein, Lorentz,
                        PowerLawFrequency, decompose_dk)
from .diagnostics import gauss_residual, track_conjugate_momentum
from .ensemble import (DepositionGrid, InitialDistribution, ParticleEnsemble, SpeciesParams,
                       init_ensemble)
from .fields import (AnalyticExternal, FieldModel, default_softening, efield_at, potential_at,
                     self_field_batch)
from .rng import DOMAIN_AUX, philox_stream
from .sde import IntegratorSpec, SpeedMonitor, coupled_levels, fit_order, simulate, weak_order

DEFAULT_SEED = 20240607


@dataclass
class CriterionResult:
    criterion: int
    name: str
    passed: bool
    measured: dict
    threshold: dict
    runtime_s: float = field(default=0.0, compare=False)

    def json_line(self) -> str:
        return json.dumps({"criterion": self.criterion, "name": self.name,
                           "passed": bool(self.passed), "measured": self.measured,
                           "threshold": self.threshold}, sort_keys=True)


def _timed(fn):
    def wrapper(*args, **kw):
        start = time.perf_counter()
        res = fn(*args, **kw)
        res.runtime_s = time.perf_counter() - start
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _f(x) -> float:
    return float(x)


# --------------------------------------------------------------------------
# Lenard-Bernstein
# --------------------------------------------------------------------------

@_timed
def criterion_lb_relaxation(n: int = 100_000, dt: float = 1e-3, horizon: float = 10.0,
                            seed: int = DEFAULT_SEED, moment_stride: int = 10) -> CriterionResult:
    """Stationary variance and mean-velocity decay of the OU process (nu = mu = gamma = 1)."""
    species = SpeciesParams()
    lb = LenardBernstein(1.0, 1.0, 1.0)
    ens = init_ensemble(n, InitialDistribution("cold_beam", {"velocity": [1.0, 0.0, 0.0]}), seed)
    steps = int(round(horizon / dt))
    res = simulate(ens, species, lb, FieldModel(), IntegratorSpec("ito_euler", dt, steps), seed,
                   moment_stride=moment_stride)
    _, var_ref = oracle.ou_moments(1.0, 1.0, 1.0, [1.0, 0.0, 0.0], horizon)
    var = res.final_moments.velocity_variance
    var_err = float(np.max(np.abs(var - var_ref) / var_ref))
    # fit log(mean v1) against t where the mean stands well above its sampling error
    t = np.array(res.moment_times)
    m1 = np.array([m.mean_velocity[0] for m in res.moment_series])
    se = np.sqrt(np.array([m.velocity_variance[0] for m in res.moment_series]) / n)
    use = m1 > 10.0 * np.maximum(se, 1e-300)
    use[0] = True
    rate = -float(np.polyfit(t[use], np.log(m1[use]), 1)[0])
    rate_err = abs(rate - 1.0)
    passed = var_err < 0.03 and rate_err < 0.05
    return CriterionResult(1, "lb_relaxation", passed,
                           {"variance": [_f(x) for x in var], "max_rel_variance_error": var_err,
                            "decay_rate": rate, "decay_rate_error": rate_err,
                            "fit_points": int(use.sum())},
                           {"variance_rel": 0.03, "rate_rel": 0.05, "variance_target": var_ref})


def _two_stream_density(v, beam=1.0, vth=0.3):
    g = lambda c: np.exp(-0.5 * ((v - c) / vth) ** 2) / (vth * np.sqrt(2 * np.pi))
    return 0.5 * (g(beam) + g(-beam))


def bootstrap_l1_floor(samples: np.ndarray, edges: np.ndarray, n_boot: int, seed: int) -> float:
    """Mean L1 distance between bootstrap and original histograms (bin probabilities)."""
    n = len(samples)
    base = np.histogram(samples, edges)[0] / n
    rng = philox_stream(seed, DOMAIN_AUX)
    dists = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        dists.append(np.abs(np.histogram(samples[idx], edges)[0] / n - base).sum())
    return float(np.mean(dists))


@_timed
def criterion_lb_distribution(n: int = 100_000, dt: float = 1e-3, horizon: float = 1.0,
                              seed: int = DEFAULT_SEED, bins: int = 60,
                              n_boot: int = 100) -> CriterionResult:
    """Particle histogram of v1 against the finite-difference Fokker-Planck marginal.

    The run starts from two counter-streaming Maxwellian beams so the marginal
    at the final time is not a trivial Gaussian.
    """
    beam, vth = 1.0, 0.3
    lb = LenardBernstein(1.0, 1.0, 1.0)
    ens = init_ensemble(n, InitialDistribution("two_stream", {"vth": vth,
                                                              "beam": [beam, 0.0, 0.0]}), seed)
    steps = int(round(horizon / dt))
    res = simulate(ens, SpeciesParams(), lb, FieldModel(), IntegratorSpec("ito_euler", dt, steps),
                   seed)
    fp = oracle.fp_solve_1d(lb, lambda v: _two_stream_density(v, beam, vth), horizon,
                            v_bounds=(-6.0, 6.0), n_cells=1200)
    edges = np.linspace(-4.0, 4.0, bins + 1)
    v1 = res.ensemble.velocities[:, 0]
    hist = np.histogram(v1, edges)[0] / n
    ref = fp.cell_masses(edges)
    l1 = float(np.abs(hist - ref).sum())
    floor = bootstrap_l1_floor(v1, edges, n_boot, seed)
    return CriterionResult(2, "lb_distribution", l1 < 3.0 * floor,
                           {"l1": l1, "bootstrap_floor": floor, "ratio": l1 / floor,
                            "fp_mass_error": fp.max_mass_error},
                           {"ratio": 3.0})


@_timed
def criterion_weak_convergence(n: int = 100_000, dt0: float = 0.1, horizon: float = 1.0,
                               levels: int = 4, seed: int = DEFAULT_SEED) -> CriterionResult:
    """Weak order of E|V(T)|^2 for both schemes on coupled Brownian paths."""
    lb = LenardBernstein(1.0, 1.0, 1.0)
    ens = init_ensemble(n, InitialDistribution("cold_beam", {"velocity": [1.0, 0.0, 0.0]}), seed)
    ref = oracle.ou_second_moment(1.0, 1.0, 1.0, 1.0, horizon)
    n_coarse = int(round(horizon / dt0))
    measured, ok = {}, True
    for scheme in ("ito_euler", "stratonovich_heun"):
        vals = coupled_levels(ens, SpeciesParams(), lb, FieldModel(), scheme, dt0, n_coarse, seed,
                              levels, {"msq": lambda e: np.mean(np.sum(e.velocities ** 2, axis=1))})
        rep = weak_order(vals["msq"], dt0, ref)
        measured[scheme] = {"order": rep.order, "values": rep.values,
                            "reference_order": rep.reference_order}
        ok &= 0.7 <= rep.order <= 1.3
    measured["reference"] = ref
    return CriterionResult(8, "weak_convergence", bool(ok), measured, {"order": [0.7, 1.3]})


# --------------------------------------------------------------------------
# Lorentz
# --------------------------------------------------------------------------

@_timed
def criterion_lorentz_speed(n: int = 10_000, steps: int = 10_000, dt: float = 1e-3,
                            heun_n: int = 1000, heun_dt0: float = 0.02, heun_horizon: float = 1.0,
                            seed: int = DEFAULT_SEED) -> CriterionResult:
    """Rotation push preserves speeds; Euler-Heun speed drift shrinks like dt."""
    lorentz = Lorentz(ConstantFrequency(1.0))
    ens = init_ensemble(n, InitialDistribution("maxwellian", {"vth": 1.0}), seed)
    mon = SpeedMonitor(ens)
    simulate(ens, SpeciesParams(), lorentz, FieldModel(),
             IntegratorSpec("lorentz_rotation", dt, steps), seed, monitors=[mon])
    small = init_ensemble(heun_n, InitialDistribution("maxwellian", {"vth": 1.0}), seed + 1)
    n_coarse = int(round(heun_horizon / heun_dt0))
    _, monitors = coupled_levels(small, SpeciesParams(), lorentz, FieldModel(),
                                 "stratonovich_heun", heun_dt0, n_coarse, seed, 4, {},
                                 monitor_factory=SpeedMonitor)
    # the ensemble-mean drift carries the clean dt term; the per-particle
    # maximum is dominated by rare large increments and is reported only
    drifts = [m.mean_rel_drift for m in monitors]
    max_drifts = [m.max_rel_drift for m in monitors]
    dts = [heun_dt0 / (1 << i) for i in range(4)]
    slope = fit_order(dts, drifts)
    passed = mon.max_rel_drift <= 1e-10 and abs(slope - 1.0) <= 0.3
    return CriterionResult(3, "lorentz_speed", passed,
                           {"rotation_max_rel_drift": mon.max_rel_drift,
                            "heun_mean_drifts": drifts, "heun_slope": slope,
                            "heun_max_drifts": max_drifts,
                            "heun_max_slope": fit_order(dts, max_drifts)},
                           {"rotation_drift": 1e-10, "heun_slope": [0.7, 1.3]})


def random_dk_family(rng):
    """A smooth PSD ``D(v) = B(v) B(v)^T + c I`` with analytic derivative, plus a random ``K``."""
    b0 = rng.standard_normal((3, 3))
    b1 = 0.3 * rng.standard_normal((3, 3, 3))
    c = 0.1 + rng.random()
    k = rng.standard_normal(3)

    def bmat(v):
        return b0 + np.einsum("ijk,k->ij", b1, v)

    def d_of_v(v):
        b = bmat(v)
        return b @ b.T + c * np.eye(3)

    def dd_of_v(v):
        b = bmat(v)
        # d(B B^T)_ij / dv_k = b1_ilk B_jl + B_il b1_jlk
        return np.einsum("ilk,jl->ijk", b1, b) + np.einsum("il,jlk->ijk", b, b1)

    return d_of_v, dd_of_v, k


def _fd_correction_sqrtm(d_of_v, v):
    """Independent oracle: central differences of scipy's matrix square root."""
    return oracle.fd_strat_correction(lambda vv: np.real(sqrtm(d_of_v(vv))), v)


@_timed
def criterion_forcing_consistency(n_random: int = 50, seed: int = DEFAULT_SEED) -> CriterionResult:
    """Reconstruction of D and the noise-induced drift for LB, Lorentz and random (D, K)."""
    rng = philox_stream(seed, DOMAIN_AUX, 4)
    recon, corr = 0.0, 0.0
    states = rng.standard_normal((20, 3)) * 1.5
    ops = [LenardBernstein(1.3, 0.7, 0.9), Lorentz(ConstantFrequency(1.0)),
           Lorentz(PowerLawFrequency(1.0))]
    for op in ops:
        for v in states:
            f = op.forcing(np.zeros(3), v)[0]
            if op.kind == "lorentz":
                nu = op.rate(v[None])[0]
                d_ref = nu * (np.dot(v, v) * np.eye(3) - np.outer(v, v))
            else:
                d_ref = op.nu * op.gamma ** 2 * np.eye(3)
            recon = max(recon, float(np.abs(f.diffusion_matrix - d_ref).max()
                                     / max(1.0, np.abs(d_ref).max())))
            fd = oracle.fd_strat_correction(lambda vv: op.forcing(np.zeros(3), vv)[0].diffusion_g, v)
            corr = max(corr, float(np.abs(f.stratonovich_correction - fd).max()))
    for _ in range(n_random):
        d_of_v, dd_of_v, k = random_dk_family(rng)
        v = rng.standard_normal(3)
        d = d_of_v(v)
        f = decompose_dk(d, k, dd_of_v(v))
        recon = max(recon, float(np.abs(f.diffusion_matrix - d).max() / max(1.0, np.abs(d).max())))
        corr = max(corr, float(np.abs(f.stratonovich_correction - _fd_correction_sqrtm(d_of_v, v)).max()))
    passed = recon <= 1e-10 and corr <= 1e-6
    return CriterionResult(4, "forcing_consistency", passed,
                           {"max_reconstruction_error": recon, "max_correction_error": corr},
                           {"reconstruction": 1e-10, "correction_abs": 1e-6})


# --------------------------------------------------------------------------
# Coulomb
# --------------------------------------------------------------------------

@_timed
def criterion_coulomb_identities(n_field: int = 1000, n_test: int = 100, softening: float = 1e-3,
                                 seed: int = DEFAULT_SEED, h: float = 1e-5) -> CriterionResult:
    """Symmetry, PSD, trace and divergence identities of the empirical Landau D and K."""
    species = SpeciesParams(n_total=1.0)
    model = Coulomb(1.0, softening)
    cloud = init_ensemble(n_field, InitialDistribution("maxwellian", {"vth": 1.0}), seed)
    snap = model.bind(cloud, species)
    rng = philox_stream(seed, DOMAIN_AUX, 5)
    tests = rng.standard_normal((n_test, 3))
    d, k, _ = snap.dk(tests, tests)
    scale = species.n_total * model.gamma / n_field
    asym = float(np.abs(d - np.swapaxes(d, 1, 2)).max() / np.abs(d).max())
    min_eig = float((np.linalg.eigvalsh(d).min(axis=1) / np.abs(d).max(axis=(1, 2))).min())
    w = tests[:, None, :] - cloud.velocities[None, :, :]
    w2 = (w * w).sum(-1)
    s3 = (w2 + softening ** 2) ** 1.5
    tr = np.trace(d, axis1=1, axis2=2)
    trace_soft = float(np.max(np.abs(tr - 2 * scale * (w2 / s3).sum(1)) / tr))
    trace_bare = float(np.max(np.abs(tr - 2 * scale * (1 / np.sqrt(w2)).sum(1)) / tr))
    div = np.zeros_like(k)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        dp = snap.dk(tests, tests + e)[0]
        dm = snap.dk(tests, tests - e)[0]
        div += (dp[:, :, j] - dm[:, :, j]) / (2 * h)
    div_err = float(np.max(np.linalg.norm(k - div, axis=1) / np.linalg.norm(k, axis=1)))
    passed = asym <= 1e-12 and min_eig >= -1e-12 and max(trace_bare, div_err) <= 1e-4 \
        and trace_soft <= 1e-12
    return CriterionResult(5, "coulomb_identities", passed,
                           {"max_asymmetry": asym, "min_eigenvalue_rel": min_eig,
                            "trace_rel_error_softened": trace_soft,
                            "trace_rel_error_unsoftened": trace_bare,
                            "divergence_rel_error": div_err},
                           {"symmetry": 1e-12, "psd": -1e-12, "identities_rel": 1e-4})


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------

@_timed
def criterion_fields(n: int = 1000, seed: int = DEFAULT_SEED, h: float = 1e-5) -> CriterionResult:
    """Single-particle values, E = -grad phi, pairwise antisymmetry and far-field monopole."""
    one = ParticleEnsemble(np.zeros((1, 3)), np.zeros((1, 3)))
    unit = SpeciesParams(charge=1.0, n_total=4 * np.pi)
    phi1 = potential_at([0.0, 2.0, 0.0], 0.0, one, unit, 0.0)
    e1 = efield_at([2.0, 0.0, 0.0], 0.0, one, unit, 0.0)
    single_err = max(abs(phi1 - 0.5), float(np.abs(e1 - [0.25, 0.0, 0.0]).max()))

    species = SpeciesParams(charge=1.0, n_total=1.0)
    cloud = init_ensemble(n, InitialDistribution("maxwellian", {"vth": 1.0, "position_sigma": 1.0}),
                          seed)
    eps = default_softening(cloud.positions)
    rng = philox_stream(seed, DOMAIN_AUX, 6)
    pts = 1.5 * rng.standard_normal((100, 3))
    e = efield_at(pts, 0.0, cloud, species, eps)
    grad = np.zeros_like(pts)
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        grad[:, j] = (potential_at(pts + d, 0.0, cloud, species, eps)
                      - potential_at(pts - d, 0.0, cloud, species, eps)) / (2 * h)
    grad_err = float(np.max(np.linalg.norm(e + grad, axis=1) / np.linalg.norm(e, axis=1)))

    self_e = self_field_batch(cloud, species, eps, exclude_self=True)
    antisym = float(np.linalg.norm(self_e.sum(axis=0))
                    / np.linalg.norm(self_e, axis=1).max())

    center = cloud.positions.mean(axis=0)
    radius = float(np.linalg.norm(cloud.positions - center, axis=1).max())
    dirs = rng.standard_normal((100, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    far = center + 10.0 * radius * dirs
    e_far = np.linalg.norm(efield_at(far, 0.0, cloud, species, eps), axis=1)
    mono = species.charge * species.n_total / (4 * np.pi * (10.0 * radius) ** 2)
    far_err = float(np.max(np.abs(e_far - mono) / mono))
    passed = single_err <= 1e-14 and grad_err <= 1e-8 and antisym <= 1e-12 and far_err <= 0.05
    return CriterionResult(6, "fields", passed,
                           {"single_particle_error": single_err, "gradient_rel_error": grad_err,
                            "antisymmetry_rel": antisym, "far_field_rel_error": far_err,
                            "softening": eps},
                           {"single": 1e-14, "gradient": 1e-8, "antisymmetry": 1e-12,
                            "far_field": 0.05})


def gauss_refinement(n: int = 1000, seed: int = DEFAULT_SEED, cells=(8, 16, 32),
                     half_width: float = 4.0, eps_ratio: float = 0.25, eps_shrink: float = 16.0):
    """Gauss residuals for cell counts ``cells``.

    The softening starts at ``eps_ratio`` coarse cell widths and shrinks by
    ``eps_shrink`` per grid halving.  Once cells hold only a few particles the
    relative L2 residual behaves like ``sqrt(eps/h)`` times a sparsity factor
    that grows under refinement, so the softening must fall much faster than
    the cell width for the residual to decrease.
    """
    species = SpeciesParams(charge=1.0, n_total=1.0)
    cloud = init_ensemble(n, InitialDistribution("maxwellian", {"vth": 1.0, "position_sigma": 1.0}),
                          seed)
    out = []
    h0 = 2 * half_width / cells[0]
    for i, c in enumerate(cells):
        grid = DepositionGrid([-half_width] * 3, [half_width] * 3, (c, c, c))
        eps = eps_ratio * h0 / eps_shrink ** i
        out.append(gauss_residual(cloud, species, grid, eps))
    return out


@_timed
def criterion_gauss(n: int = 1000, seed: int = DEFAULT_SEED, cells=(8, 16, 32)) -> CriterionResult:
    """Gauss residual decreases monotonically under grid and softening refinement."""
    res = gauss_refinement(n, seed, cells)
    passed = all(b < a for a, b in zip(res, res[1:]))
    return CriterionResult(10, "gauss_law", passed, {"residuals": res, "cells": list(cells)},
                           {"monotone_decrease": True})


# --------------------------------------------------------------------------
# conjugate momentum
# --------------------------------------------------------------------------

def momentum_residuals(dts, horizon: float = 1.0, n: int = 200, seed: int = DEFAULT_SEED,
                       collision=None, b0=(0.0, 0.0, 1.0), scheme: str = "ito_euler"):
    """Largest per-step momentum-identity residual for each step size."""
    species = SpeciesParams(charge=1.0, mass=1.0)
    fields = AnalyticExternal(b0=b0, name="uniform_b")
    ens = init_ensemble(n, InitialDistribution("maxwellian", {"vth": 1.0, "position_sigma": 1.0}),
                        seed, species, fields.vector_potential)
    out = []
    for dt in dts:
        steps = int(round(horizon / dt))
        coll = collision if collision is not None else CollisionModel()
        res = simulate(ens, species, coll, fields, IntegratorSpec(scheme, dt, steps), seed,
                       record_stride=1)
        rep = track_conjugate_momentum(res.trajectory, fields, species, coll)
        out.append(rep.max_residual)
    return out


@_timed
def criterion_momentum(dt0: float = 0.05, seed: int = DEFAULT_SEED) -> CriterionResult:
    """Per-step residual of the conjugate-momentum identity in a uniform magnetic field."""
    dts = [dt0 / (1 << i) for i in range(4)]
    res = momentum_residuals(dts, seed=seed)
    order = fit_order(dts, res)
    # with Lenard-Bernstein noise the residual picks up a dt^1.5 term; reported only
    noisy = momentum_residuals(dts, seed=seed, collision=LenardBernstein(0.2, 1.0, 0.3))
    return CriterionResult(7, "momentum_identity", order >= 1.7,
                           {"residuals": res, "order": order,
                            "with_noise_residuals": noisy,
                            "with_noise_order": fit_order(dts, noisy)},
                           {"order_min": 1.7})


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

SUITES = {
    "lb": (criterion_lb_relaxation, criterion_lb_distribution, criterion_weak_convergence),
    "lorentz": (criterion_lorentz_speed, criterion_forcing_consistency),
    "coulomb": (criterion_coulomb_identities,),
    "fields": (criterion_fields, criterion_gauss),
    "momentum": (criterion_momentum,),
}


def run_suite(name: str, seed: int = DEFAULT_SEED) -> list[CriterionResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    return [fn(seed=seed) for fn in SUITES[name]]
