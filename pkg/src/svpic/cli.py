"""Command-line interface.

Subcommands::

    svpic run CONFIG [--seed S] [--dt DT] [--steps N] [--scheme NAME] [--out-dir DIR]
    svpic verify {lb,lorentz,coulomb,fields,momentum} [--seed S]
    svpic convergence CONFIG [--levels L] [--observable NAME] [--scheme NAME] ...
    svpic inspect PATH                 # .svpm snapshot, diagnostics .csv or .toml config

Every subcommand accepts ``--threads`` to cap the worker count.

Exit codes
----------
0  success
1  a verification criterion failed
2  invalid configuration or arguments
3  numerical abort (non-finite state); step and particle are reported
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import _parallel, __version__
from .config_io import (OBSERVABLES, ConfigError, SnapshotError, initial_state, load_config,
                        read_diagnostics_csv, read_snapshot)
from .ensemble import moments
from .sde import NumericalError, coupled_levels, run, weak_order

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2
EXIT_NUMERICAL = 3


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "dt", None) is not None:
        out["integrator.dt"] = args.dt
    if getattr(args, "steps", None) is not None:
        out["integrator.n_steps"] = args.steps
    if getattr(args, "scheme", None) is not None:
        out["integrator.scheme"] = args.scheme
    if getattr(args, "out_dir", None) is not None:
        out["output.dir"] = args.out_dir
    return out


def _config_path(args) -> str:
    path = args.config_opt or args.config
    if not path:
        raise ConfigError(["a configuration file is required (positional or --config)"])
    return path


def cmd_run(config_path: str, overrides: dict | None = None) -> int:
    config = load_config(config_path, overrides)
    result = run(config)
    out = config.output.resolve_directory()
    print(json.dumps({"out_dir": str(out), **result.summary()}, sort_keys=True))
    return EXIT_OK


def cmd_verify(suite: str, seed: int | None = None, stream=None) -> int:
    from . import verify
    stream = stream or sys.stdout
    results = verify.run_suite(suite, verify.DEFAULT_SEED if seed is None else seed)
    for res in results:
        print(res.json_line(), file=stream, flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def convergence_report(config_path: str, levels: int | None = None,
                       observable: str | None = None, overrides: dict | None = None) -> dict:
    """Weak-order study of a configuration on coupled Brownian paths."""
    config = load_config(config_path, overrides)
    levels = int(levels if levels is not None else config.convergence["levels"])
    if levels < 2:
        raise ConfigError([f"convergence needs at least 2 levels, got {levels}"])
    names = [observable] if observable else [config.convergence["observable"]]
    bad = [n for n in names if n not in OBSERVABLES]
    if bad:
        raise ConfigError([f"unknown observable {bad[0]!r}; expected one of {sorted(OBSERVABLES)}"])
    fields = config.build_fields()
    ens, _, _, _ = initial_state(config, fields)
    spec = config.integrator
    values = coupled_levels(ens, config.species, config.build_collision(), fields, spec.scheme,
                            spec.dt, spec.n_steps, config.effective_seed(), levels,
                            {n: OBSERVABLES[n] for n in names})
    return {"scheme": spec.scheme, "levels": levels, "horizon": spec.horizon,
            "observables": {n: weak_order(values[n], spec.dt).as_dict() for n in names}}


def cmd_inspect(path: str) -> int:
    p = Path(path)
    if p.suffix == ".svpm":
        ens, meta = read_snapshot(p)
        print(json.dumps({"header": meta, "n_particles": ens.n_particles,
                          "moments": moments(ens).as_dict()}, sort_keys=True, indent=2))
    elif p.suffix == ".csv":
        rows = read_diagnostics_csv(p)
        info = {"rows": len(rows)}
        if rows:
            info["first"], info["last"] = rows[0], rows[-1]
        print(json.dumps(info, sort_keys=True, indent=2))
    elif p.suffix == ".toml":
        print(json.dumps(load_config(p).resolved(), sort_keys=True, indent=2))
    else:
        raise ConfigError([f"cannot inspect {path!r}: expected .svpm, .csv or .toml"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svpic", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"svpic {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: hardware parallelism)")
    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("config", nargs="?", help="TOML configuration file")
    sim.add_argument("--config", dest="config_opt", help="TOML configuration file")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--dt", type=float)
    sim.add_argument("--steps", type=int)
    sim.add_argument("--scheme")
    sim.add_argument("--out-dir")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common, sim], help="run a configuration")
    p = sub.add_parser("verify", parents=[common], help="run a verification suite")
    p.add_argument("suite", choices=["lb", "lorentz", "coulomb", "fields", "momentum"])
    p.add_argument("--seed", type=int)
    p = sub.add_parser("convergence", parents=[common, sim], help="weak-order study")
    p.add_argument("--levels", type=int)
    p.add_argument("--observable", choices=sorted(OBSERVABLES))
    p = sub.add_parser("inspect", parents=[common], help="summarize a snapshot, CSV or config")
    p.add_argument("path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    _parallel.set_threads(args.threads)
    try:
        if args.command == "run":
            return cmd_run(_config_path(args), _overrides(args))
        if args.command == "verify":
            return cmd_verify(args.suite, args.seed)
        if args.command == "convergence":
            rep = convergence_report(_config_path(args), args.levels, args.observable,
                                     _overrides(args))
            print(json.dumps(rep, sort_keys=True))
            return EXIT_OK
        return cmd_inspect(args.path)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (SnapshotError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
