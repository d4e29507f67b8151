"""Run configuration, snapshots, diagnostics CSV and run manifests.

Configuration files are TOML.  The grammar (all sections optional except
``[particles]`` and ``[integrator]``)::

    seed = 7                          # unsigned 64-bit; omitted -> derived from the config hash

    [species]
    charge = 1.0
    mass = 1.0
    n_total = 1.0

    [particles]
    n = 1000
    distribution = "maxwellian"       # cold_beam | maxwellian | uniform_maxwellian | two_stream
    restart = "snap.svpm"             # optional: start from a snapshot instead
    [particles.params]                # sampler parameters, e.g. vth, drift, center
    vth = 1.0

    [collision]                       # or the shorthand  collision = "lenard_bernstein"
    kind = "lenard_bernstein"         # none | lenard_bernstein | lorentz | coulomb
    nu = 1.0                          # lenard_bernstein: nu, mu, gamma
    # lorentz:  frequency = "constant" (nu) | "power_law" (nu0, exponent, v_min)
    # coulomb:  gamma, softening, locality = "homogeneous" | "cell",
    #           cell_lo, cell_hi, cells

    [fields]                          # or  fields = "vacuum"
    kind = "vacuum"                   # vacuum | external | self_consistent
    # external:        external = "uniform_e" | "uniform_b" | "harmonic_trap" | "analytic",
    #                  e0 = [..], b0 = [..], k = ..
    # self_consistent: softening, exclude_self, plus optional external field keys

    [integrator]
    scheme = "ito_euler"              # ito_euler | stratonovich_heun | lorentz_rotation
    dt = 1e-3
    n_steps = 1000
    boris = false                     # collisionless ito_euler only

    [output]
    dir = "run1"                      # else $SVPIC_OUT, else "svpic_out"
    diag_stride = 10                  # 0 -> n_steps / 100
    snapshot_stride = 0               # 0 -> final snapshot only
    record_trajectory = false
    trajectory_stride = 1
    momentum_diagnostics = false      # needs record_trajectory and external potentials
    diag_grid = { lo = [-4, -4, -4], hi = [4, 4, 4], cells = [16, 16, 16] }

    [convergence]
    levels = 4
    observable = "mean_sq_speed"

Unknown keys are errors.  Every problem found is reported, not just the
first.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .collision import (Coulomb, ConstantFrequency, LenardBernstein, LocalitySpec, Lorentz,
                        CollisionModel, PowerLawFrequency)
from .diagnostics import LEDGER_COLUMNS, ConservationLedger, track_conjugate_momentum
from .ensemble import (DepositionGrid, InitialDistribution, ParticleEnsemble, SAMPLERS,
                       SpeciesParams, init_ensemble)
from .fields import BUILTIN_EXTERNAL, FieldModel, SelfConsistentCoulomb, make_external
from .sde import SCHEMES, IntegratorSpec, RunResult, simulate

SNAPSHOT_MAGIC = b"SVPM"
SNAPSHOT_VERSION = 1
CSV_SCHEMA_VERSION = 1

OBSERVABLES = {
    "mean_sq_speed": lambda e: np.mean(np.sum(e.velocities ** 2, axis=1)),
    "mean_speed": lambda e: np.mean(np.linalg.norm(e.velocities, axis=1)),
    "mean_v1": lambda e: np.mean(e.velocities[:, 0]),
    "mean_v2": lambda e: np.mean(e.velocities[:, 1]),
    "mean_v3": lambda e: np.mean(e.velocities[:, 2]),
    "var_v1": lambda e: np.var(e.velocities[:, 0]),
    "mean_x1": lambda e: np.mean(e.positions[:, 0]),
}


class ConfigError(ValueError):
    """Configuration problems; ``errors`` lists every one found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class SnapshotError(ValueError):
    pass


# --------------------------------------------------------------------------
# validation helpers
# --------------------------------------------------------------------------

_NUMBER = (int, float)


class _Reader:
    """Pulls typed keys out of a table and remembers every problem."""

    def __init__(self, errors: list):
        self.errors = errors

    def unknown(self, table: dict, allowed, path: str) -> None:
        for key in table:
            if key not in allowed:
                msg = f"unknown key {path}{key!r}"
                close = difflib.get_close_matches(key, list(allowed), n=1)
                if close:
                    msg += f"; did you mean {close[0]!r}?"
                self.errors.append(msg)

    def get(self, table: dict, key: str, kind, default, path: str):
        if key not in table:
            return default
        value = table[key]
        name = f"{path}{key}"
        if kind == "number":
            if isinstance(value, bool) or not isinstance(value, _NUMBER):
                self.errors.append(f"{name} must be a number, got {value!r}")
                return default
            return float(value)
        if kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                self.errors.append(f"{name} must be an integer, got {value!r}")
                return default
            return int(value)
        if kind == "bool":
            if not isinstance(value, bool):
                self.errors.append(f"{name} must be true or false, got {value!r}")
                return default
            return value
        if kind == "str":
            if not isinstance(value, str):
                self.errors.append(f"{name} must be a string, got {value!r}")
                return default
            return value
        if kind == "vec3":
            if (not isinstance(value, list) or len(value) != 3
                    or any(isinstance(x, bool) or not isinstance(x, _NUMBER) for x in value)):
                self.errors.append(f"{name} must be a list of three numbers, got {value!r}")
                return default
            return [float(x) for x in value]
        if kind == "ivec3":
            if (not isinstance(value, list) or len(value) != 3
                    or any(isinstance(x, bool) or not isinstance(x, int) for x in value)):
                self.errors.append(f"{name} must be a list of three integers, got {value!r}")
                return default
            return [int(x) for x in value]
        if kind == "table":
            if not isinstance(value, dict):
                self.errors.append(f"{name} must be a table, got {value!r}")
                return default
            return value
        raise AssertionError(kind)

    def positive(self, value, name: str, strict: bool = True):
        if value is None:
            return
        if (strict and not value > 0) or (not strict and not value >= 0):
            self.errors.append(f"{name} must be {'positive' if strict else 'non-negative'}, "
                               f"got {value}")


def _table_or_kind(raw: dict, key: str, r: _Reader) -> dict:
    value = raw.get(key, {})
    if isinstance(value, str):
        return {"kind": value}
    if not isinstance(value, dict):
        r.errors.append(f"{key} must be a table or a kind name, got {value!r}")
        return {}
    return value


# --------------------------------------------------------------------------
# configuration model
# --------------------------------------------------------------------------

@dataclass
class OutputPlan:
    directory: str | None = None
    diag_stride: int = 0
    snapshot_stride: int = 0
    record_trajectory: bool = False
    trajectory_stride: int = 1
    momentum_diagnostics: bool = False
    diag_grid: dict | None = None

    def resolve_directory(self) -> Path:
        return Path(self.directory or os.environ.get("SVPIC_OUT") or "svpic_out")


@dataclass
class SimConfig:
    """A fully validated run description (see the module docstring for the grammar)."""

    species: SpeciesParams
    n_particles: int
    distribution: InitialDistribution
    collision: dict
    fields: dict
    integrator: IntegratorSpec
    output: OutputPlan = field(default_factory=OutputPlan)
    seed: int | None = None
    restart: str | None = None
    convergence: dict = field(default_factory=lambda: {"levels": 4, "observable": "mean_sq_speed"})

    def physics(self) -> dict:
        """The parts of the configuration that determine the dynamics."""
        return {
            "species": {"charge": self.species.charge, "mass": self.species.mass,
                        "n_total": self.species.n_total},
            "particles": {"n": self.n_particles, "distribution": self.distribution.name,
                          "params": self.distribution.params},
            "collision": self.collision,
            "fields": self.fields,
            "integrator": {"scheme": self.integrator.scheme, "dt": self.integrator.dt,
                           "boris": self.integrator.boris},
        }

    def config_hash(self) -> str:
        text = json.dumps(self.physics(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def effective_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        return int(self.config_hash()[:16], 16)

    def resolved(self) -> dict:
        out = self.physics()
        out["seed"] = self.effective_seed()
        out["integrator"]["n_steps"] = self.integrator.n_steps
        out["particles"]["restart"] = self.restart
        out["output"] = {
            "dir": str(self.output.resolve_directory()),
            "diag_stride": self.diag_stride(),
            "snapshot_stride": self.output.snapshot_stride,
            "record_trajectory": self.output.record_trajectory,
            "trajectory_stride": self.output.trajectory_stride,
            "momentum_diagnostics": self.output.momentum_diagnostics,
            "diag_grid": self.output.diag_grid,
        }
        out["convergence"] = self.convergence
        return out

    def diag_stride(self) -> int:
        return self.output.diag_stride or max(1, self.integrator.n_steps // 100)

    def build_collision(self) -> CollisionModel:
        c = self.collision
        kind = c["kind"]
        if kind == "none":
            return CollisionModel()
        if kind == "lenard_bernstein":
            return LenardBernstein(c["nu"], c["mu"], c["gamma"])
        if kind == "lorentz":
            if c["frequency"] == "constant":
                return Lorentz(ConstantFrequency(c["nu"]))
            return Lorentz(PowerLawFrequency(c["nu0"], c["exponent"], c["v_min"]))
        locality = LocalitySpec(c["locality"], tuple(c["cell_lo"]), tuple(c["cell_hi"]),
                                tuple(c["cells"]))
        return Coulomb(c["gamma"], c["softening"], locality)

    def build_fields(self) -> FieldModel:
        f = self.fields
        external = None
        if f.get("external"):
            params = {k: f[k] for k in ("e0", "b0", "k") if k in f}
            external = make_external(f["external"], params)
        if f["kind"] == "vacuum":
            return FieldModel()
        if f["kind"] == "external":
            return external
        return SelfConsistentCoulomb(f.get("softening"), f["exclude_self"], external)

    def build_grid(self) -> DepositionGrid | None:
        g = self.output.diag_grid
        if not g:
            return None
        return DepositionGrid(g["lo"], g["hi"], tuple(g["cells"]))


_TOP_KEYS = ("seed", "species", "particles", "collision", "fields", "integrator", "output",
             "convergence")


def _parse_collision(raw, r: _Reader) -> dict:
    c = _table_or_kind(raw, "collision", r)
    p = "collision."
    kind = r.get(c, "kind", "str", "none", p)
    base = {"kind"}
    if kind == "none":
        r.unknown(c, base, p)
        return {"kind": "none"}
    if kind == "lenard_bernstein":
        r.unknown(c, base | {"nu", "mu", "gamma"}, p)
        out = {"kind": kind}
        for key in ("nu", "mu", "gamma"):
            out[key] = r.get(c, key, "number", 1.0, p)
            r.positive(out[key], p + key)
        return out
    if kind == "lorentz":
        r.unknown(c, base | {"frequency", "nu", "nu0", "exponent", "v_min"}, p)
        freq = r.get(c, "frequency", "str", "constant", p)
        if freq == "constant":
            extra = [k for k in ("nu0", "exponent", "v_min") if k in c]
            if extra:
                r.errors.append(f"{p}{extra[0]} only applies to collision.frequency = "
                                "'power_law'")
            nu = r.get(c, "nu", "number", 1.0, p)
            r.positive(nu, p + "nu")
            return {"kind": kind, "frequency": freq, "nu": nu}
        if freq == "power_law":
            if "nu" in c:
                r.errors.append(f"{p}nu only applies to collision.frequency = 'constant'; "
                                "use nu0")
            out = {"kind": kind, "frequency": freq,
                   "nu0": r.get(c, "nu0", "number", 1.0, p),
                   "exponent": r.get(c, "exponent", "number", -3.0, p),
                   "v_min": r.get(c, "v_min", "number", 1e-6, p)}
            r.positive(out["nu0"], p + "nu0")
            r.positive(out["v_min"], p + "v_min")
            return out
        r.errors.append(f"{p}frequency must be 'constant' or 'power_law', got {freq!r}")
        return {"kind": kind}
    if kind == "coulomb":
        r.unknown(c, base | {"gamma", "softening", "locality", "cell_lo", "cell_hi", "cells"}, p)
        out = {"kind": kind,
               "gamma": r.get(c, "gamma", "number", 1.0, p),
               "softening": r.get(c, "softening", "number", 1e-3, p),
               "locality": r.get(c, "locality", "str", "homogeneous", p),
               "cell_lo": r.get(c, "cell_lo", "vec3", [-1.0, -1.0, -1.0], p),
               "cell_hi": r.get(c, "cell_hi", "vec3", [1.0, 1.0, 1.0], p),
               "cells": r.get(c, "cells", "ivec3", [1, 1, 1], p)}
        r.positive(out["gamma"], p + "gamma")
        r.positive(out["softening"], p + "softening")
        if out["locality"] not in ("homogeneous", "cell"):
            r.errors.append(f"{p}locality must be 'homogeneous' or 'cell', "
                            f"got {out['locality']!r}")
        elif out["locality"] == "cell":
            if any(h <= lo for lo, h in zip(out["cell_lo"], out["cell_hi"])):
                r.errors.append(f"{p}cell_hi must exceed {p}cell_lo in every component")
            if min(out["cells"]) < 1:
                r.errors.append(f"{p}cells must be positive")
        return out
    if kind == "custom":
        r.errors.append(f"{p}kind = 'custom' needs Python callables and is only available "
                        "through the library API")
        return {"kind": kind}
    r.errors.append(f"{p}kind must be one of none, lenard_bernstein, lorentz, coulomb; "
                    f"got {kind!r}")
    return {"kind": kind}


def _parse_fields(raw, r: _Reader) -> dict:
    f = _table_or_kind(raw, "fields", r)
    p = "fields."
    kind = r.get(f, "kind", "str", "vacuum", p)
    ext_keys = {"external", "e0", "b0", "k"}
    if kind == "vacuum":
        r.unknown(f, {"kind"}, p)
        return {"kind": kind}
    out = {"kind": kind}
    if kind == "external":
        r.unknown(f, {"kind"} | ext_keys, p)
        if "external" not in f:
            r.errors.append(f"{p}external is required when fields.kind = 'external'")
    elif kind == "self_consistent":
        r.unknown(f, {"kind", "softening", "exclude_self"} | ext_keys, p)
        soft = r.get(f, "softening", "number", None, p)
        r.positive(soft, p + "softening", strict=False)
        out["softening"] = soft
        out["exclude_self"] = r.get(f, "exclude_self", "bool", True, p)
    else:
        r.errors.append(f"{p}kind must be one of vacuum, external, self_consistent; got {kind!r}")
        return out
    name = r.get(f, "external", "str", None, p)
    if name is not None:
        if name not in BUILTIN_EXTERNAL:
            r.errors.append(f"{p}external must be one of {', '.join(BUILTIN_EXTERNAL)}; "
                            f"got {name!r}")
        out["external"] = name
        allowed = {"uniform_e": {"e0"}, "uniform_b": {"b0"}, "harmonic_trap": {"k"},
                   "analytic": {"e0", "b0", "k"}}.get(name, {"e0", "b0", "k"})
        for key in ("e0", "b0", "k"):
            if key in f:
                if key not in allowed:
                    r.errors.append(f"{p}{key} does not apply to fields.external = {name!r}")
                    continue
                out[key] = r.get(f, key, "number" if key == "k" else "vec3", None, p)
    elif any(k in f for k in ("e0", "b0", "k")):
        r.errors.append(f"{p}e0/b0/k need fields.external to name an external field")
    return out


def parse_config(text: str, overrides: dict | None = None, base_dir: str | Path | None = None
                 ) -> SimConfig:
    """Parse and validate a TOML configuration document.

    ``overrides`` maps dotted keys (``"integrator.dt"``, ``"seed"``) to values
    applied before validation.  Relative restart paths are resolved against
    ``base_dir``.  Raises ``ConfigError`` listing every problem.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax error: {exc}"]) from None
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            if isinstance(node.get(key), str):
                node[key] = {"kind": node[key]}
            node = node.setdefault(key, {})
        node[leaf] = value

    errors: list[str] = []
    r = _Reader(errors)
    r.unknown(raw, _TOP_KEYS, "")

    seed = raw.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)
                             or not 0 <= seed < 2 ** 64):
        errors.append(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        seed = None

    sp = r.get(raw, "species", "table", {}, "")
    r.unknown(sp, ("charge", "mass", "n_total"), "species.")
    charge = r.get(sp, "charge", "number", 1.0, "species.")
    mass = r.get(sp, "mass", "number", 1.0, "species.")
    n_total = r.get(sp, "n_total", "number", 1.0, "species.")
    r.positive(mass, "species.mass")
    r.positive(n_total, "species.n_total")

    pa = r.get(raw, "particles", "table", None, "")
    n_particles, dist, restart = 1, None, None
    if pa is None:
        errors.append("missing section [particles]")
    else:
        r.unknown(pa, ("n", "distribution", "params", "restart"), "particles.")
        n_particles = r.get(pa, "n", "int", None, "particles.")
        restart = r.get(pa, "restart", "str", None, "particles.")
        if n_particles is None:
            if restart is None:
                errors.append("particles.n is required")
            n_particles = 1
        elif n_particles < 1:
            errors.append(f"particles.n must be >= 1, got {n_particles}")
        name = r.get(pa, "distribution", "str", "maxwellian", "particles.")
        params = r.get(pa, "params", "table", {}, "particles.")
        if name not in SAMPLERS:
            close = difflib.get_close_matches(name, list(SAMPLERS), n=1)
            errors.append(f"particles.distribution {name!r} is not one of {sorted(SAMPLERS)}"
                          + (f"; did you mean {close[0]!r}?" if close else ""))
        else:
            try:
                dist = InitialDistribution(name, dict(params))
            except ValueError as exc:
                errors.append(f"particles.params: {exc}")
        if restart is not None and base_dir is not None and not os.path.isabs(restart):
            restart = str(Path(base_dir) / restart)

    collision = _parse_collision(raw, r)
    fields = _parse_fields(raw, r)

    it = r.get(raw, "integrator", "table", None, "")
    integrator = None
    if it is None:
        errors.append("missing section [integrator]")
    else:
        r.unknown(it, ("scheme", "dt", "n_steps", "boris"), "integrator.")
        scheme = r.get(it, "scheme", "str", "ito_euler", "integrator.")
        dt = r.get(it, "dt", "number", None, "integrator.")
        n_steps = r.get(it, "n_steps", "int", None, "integrator.")
        boris = r.get(it, "boris", "bool", False, "integrator.")
        if scheme not in SCHEMES:
            errors.append(f"integrator.scheme must be one of {', '.join(SCHEMES)}; got {scheme!r}")
        if dt is None:
            errors.append("integrator.dt is required")
        else:
            r.positive(dt, "integrator.dt")
        if n_steps is None:
            errors.append("integrator.n_steps is required")
        elif n_steps < 0:
            errors.append(f"integrator.n_steps must be >= 0, got {n_steps}")
        if scheme == "lorentz_rotation" and collision.get("kind") != "lorentz":
            errors.append("integrator.scheme = 'lorentz_rotation' requires collision.kind = "
                          f"'lorentz' (got collision.kind = {collision.get('kind')!r})")
        if boris and (scheme != "ito_euler" or collision.get("kind") != "none"):
            errors.append("integrator.boris = true requires integrator.scheme = 'ito_euler' "
                          "and collision.kind = 'none'")
        if not any(e.startswith("integrator.") for e in errors):
            integrator = IntegratorSpec(scheme, dt, n_steps, boris)

    ou = r.get(raw, "output", "table", {}, "")
    r.unknown(ou, ("dir", "diag_stride", "snapshot_stride", "record_trajectory",
                   "trajectory_stride", "momentum_diagnostics", "diag_grid"), "output.")
    plan = OutputPlan(
        directory=r.get(ou, "dir", "str", None, "output."),
        diag_stride=r.get(ou, "diag_stride", "int", 0, "output."),
        snapshot_stride=r.get(ou, "snapshot_stride", "int", 0, "output."),
        record_trajectory=r.get(ou, "record_trajectory", "bool", False, "output."),
        trajectory_stride=r.get(ou, "trajectory_stride", "int", 1, "output."),
        momentum_diagnostics=r.get(ou, "momentum_diagnostics", "bool", False, "output."),
    )
    for key in ("diag_stride", "snapshot_stride"):
        r.positive(getattr(plan, key), f"output.{key}", strict=False)
    r.positive(plan.trajectory_stride, "output.trajectory_stride")
    grid = r.get(ou, "diag_grid", "table", None, "output.")
    if grid is not None:
        r.unknown(grid, ("lo", "hi", "cells"), "output.diag_grid.")
        g = {"lo": r.get(grid, "lo", "vec3", None, "output.diag_grid."),
             "hi": r.get(grid, "hi", "vec3", None, "output.diag_grid."),
             "cells": r.get(grid, "cells", "ivec3", None, "output.diag_grid.")}
        if None in g.values():
            errors.append("output.diag_grid needs lo, hi and cells")
        elif any(h <= lo for lo, h in zip(g["lo"], g["hi"])) or min(g["cells"]) < 1:
            errors.append("output.diag_grid must have hi > lo and positive cells")
        else:
            plan.diag_grid = g
    if plan.momentum_diagnostics:
        if fields.get("kind") not in ("vacuum", "external"):
            errors.append("output.momentum_diagnostics = true requires fields.kind = 'external' "
                          f"or 'vacuum' with potentials (got fields.kind = {fields.get('kind')!r})")
        if not plan.record_trajectory:
            errors.append("output.momentum_diagnostics = true requires "
                          "output.record_trajectory = true")

    cv = r.get(raw, "convergence", "table", {}, "")
    r.unknown(cv, ("levels", "observable"), "convergence.")
    conv = {"levels": r.get(cv, "levels", "int", 4, "convergence."),
            "observable": r.get(cv, "observable", "str", "mean_sq_speed", "convergence.")}
    if conv["levels"] < 2:
        errors.append(f"convergence.levels must be >= 2, got {conv['levels']}")
    if conv["observable"] not in OBSERVABLES:
        errors.append(f"convergence.observable must be one of {sorted(OBSERVABLES)}")

    species = None
    if not any(e.startswith("species.") for e in errors):
        species = SpeciesParams(charge, mass, n_total)
    if errors:
        raise ConfigError(errors)
    return SimConfig(species, n_particles, dist, collision, fields, integrator, plan, seed,
                     restart, conv)


def load_config(path: str | Path, overrides: dict | None = None) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from None
    return parse_config(text, overrides, base_dir=path.parent)


# --------------------------------------------------------------------------
# snapshots
# --------------------------------------------------------------------------

def write_snapshot(path: str | Path, ensemble: ParticleEnsemble, meta: dict) -> Path:
    """Write a snapshot atomically.

    Layout: ``SVPM``, format version (u32 LE), header length (u32 LE), UTF-8
    JSON header, then little-endian float64 columns x1 x2 x3 v1 v2 v3 and,
    if present, p1 p2 p3.
    """
    path = Path(path)
    header = dict(meta)
    header["n_particles"] = ensemble.n_particles
    header["weight"] = ensemble.weight
    header["has_momenta"] = ensemble.momenta is not None
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    cols = [ensemble.positions, ensemble.velocities]
    if ensemble.momenta is not None:
        cols.append(ensemble.momenta)
    payload = np.concatenate([np.asarray(c, dtype="<f8").T.ravel() for c in cols])
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", SNAPSHOT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())
    os.replace(tmp, path)
    return path


def read_snapshot(path: str | Path) -> tuple[ParticleEnsemble, dict]:
    """Read a snapshot; any corruption raises ``SnapshotError`` and returns nothing."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != SNAPSHOT_MAGIC:
        raise SnapshotError(f"{path}: not a snapshot file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"{path}: unsupported snapshot version {version}")
    if 12 + hlen > len(data):
        raise SnapshotError(f"{path}: truncated header")
    try:
        meta = json.loads(data[12:12 + hlen].decode("utf-8"))
        n = int(meta["n_particles"])
        ncol = 9 if meta["has_momenta"] else 6
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise SnapshotError(f"{path}: corrupt header ({exc})") from None
    body = data[12 + hlen:]
    if len(body) != ncol * n * 8:
        raise SnapshotError(f"{path}: payload length {len(body)} does not match "
                            f"{ncol} columns of {n} particles")
    cols = np.frombuffer(body, dtype="<f8").reshape(ncol, n).astype(float)
    mom = cols[6:9].T.copy() if ncol == 9 else None
    ens = ParticleEnsemble(cols[0:3].T.copy(), cols[3:6].T.copy(), mom, meta["weight"])
    return ens, meta


# --------------------------------------------------------------------------
# diagnostics CSV and manifest
# --------------------------------------------------------------------------

def write_diagnostics_csv(path: str | Path, ledger: ConservationLedger) -> Path:
    """CSV with a ``# schema`` comment line, a header and 17-significant-digit values."""
    path = Path(path)
    lines = [f"# svpic diagnostics schema {CSV_SCHEMA_VERSION}", ",".join(LEDGER_COLUMNS)]
    for row in ledger.rows:
        lines.append(",".join(str(row[c]) if c == "step" else "%.17g" % row[c]
                              for c in LEDGER_COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_diagnostics_csv(path: str | Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        vals = ln.split(",")
        rows.append({k: (int(v) if k == "step" else float(v)) for k, v in zip(header, vals)})
    return rows


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, config: SimConfig, files: list[Path], warnings: list[str],
                   extra: dict | None = None) -> Path:
    manifest = {
        "code_version": __version__,
        "config_hash": config.config_hash(),
        "seed": config.effective_seed(),
        "resolved_config": config.resolved(),
        "files": [{"name": f.name, "bytes": f.stat().st_size, "sha256": _sha256(f)}
                  for f in files],
        "warnings": warnings,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# run driver
# --------------------------------------------------------------------------

def initial_state(config: SimConfig, fields: FieldModel):
    """Initial ensemble, start time, start step and provenance warnings."""
    warnings = []
    need_p = config.output.momentum_diagnostics
    if config.restart:
        try:
            ens, meta = read_snapshot(config.restart)
        except OSError as exc:
            raise ConfigError([f"particles.restart: cannot read {config.restart}: "
                               f"{exc.strerror or exc}"]) from None
        if meta.get("config_hash") != config.config_hash():
            warnings.append(f"restart snapshot {config.restart} was written by a different "
                            f"configuration (hash {meta.get('config_hash')})")
        return ens, float(meta.get("t", 0.0)), int(meta.get("step", 0)), warnings
    vp = fields.vector_potential if need_p else None
    ens = init_ensemble(config.n_particles, config.distribution, config.effective_seed(),
                        config.species, vp)
    return ens, 0.0, 0, warnings


def execute(config: SimConfig) -> RunResult:
    """Run ``config`` and write diagnostics, snapshots, summary and manifest."""
    out_dir = config.output.resolve_directory()
    out_dir.mkdir(parents=True, exist_ok=True)
    collision = config.build_collision()
    fields = config.build_fields()
    ens, t0, step0, warnings = initial_state(config, fields)
    seed = config.effective_seed()
    files: list[Path] = []
    chash = config.config_hash()

    def snap_meta(step, t):
        return {"t": t, "step": step, "config_hash": chash, "seed": seed,
                "species": {"charge": config.species.charge, "mass": config.species.mass,
                            "n_total": config.species.n_total}}

    callback = None
    if config.output.snapshot_stride:
        stride = config.output.snapshot_stride

        def callback(step, t, e):
            if (step - step0) % stride == 0:
                files.append(write_snapshot(out_dir / f"snapshot_{step:08d}.svpm", e,
                                            snap_meta(step, t)))

    record = config.output.trajectory_stride if config.output.record_trajectory else 0
    result = simulate(ens, config.species, collision, fields, config.integrator, seed, t0=t0,
                      step0=step0, diag_stride=config.diag_stride(),
                      diag_grid=config.build_grid(), record_stride=record, callback=callback)
    final_step = step0 + config.integrator.n_steps
    final = out_dir / "final.svpm"
    files.append(write_snapshot(final, result.ensemble, snap_meta(final_step, result.t_final)))
    files.append(write_diagnostics_csv(out_dir / "diagnostics.csv", result.ledger))
    summary = {"final_moments": result.final_moments.as_dict(),
               "initial_moments": result.initial_moments.as_dict(),
               "t_final": result.t_final, "final_step": final_step}
    if config.output.momentum_diagnostics and result.trajectory is not None:
        rep = track_conjugate_momentum(result.trajectory, fields, config.species, collision)
        summary["momentum_check"] = {"max_residual": rep.max_residual,
                                     "rhs_decomposition": rep.rhs_decomposition}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    files.append(out_dir / "summary.json")
    write_manifest(out_dir, config, files, warnings,
                   {"timing": {"wall_time_s": result.wall_time,
                               "steps_per_second": result.steps_per_second}})
    return result
