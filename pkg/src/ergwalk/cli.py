"""Command-line experiment runner.

Each subcommand reads a JSON config, materializes every default into the
emitted report (full audit trail), and writes machine-readable outputs:
a JSON report, CSV series where the command produces one, and a rendered
figure next to the CSV unless --no-plot.

Exit codes: 0 success or verdict, 2 config error, 3 strict-mode
indeterminate, 4 numerical divergence where the command demands
convergence.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import bdp, lyapunov, rwre, velocity2
from .environments import (EnvSpec, EnvironmentEnsemble, check_nonexplosion,
                           validate_condition_B_env, validate_condition_C,
                           validate_condition_C2prime)
from .errors import ConfigError, ErgwalkError
from .parallel import default_jobs
from .reporting import write_csv, write_json_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INDETERMINATE = 3
EXIT_DIVERGENCE = 4

COMMANDS = ("validate", "classify", "velocity", "compare", "tailcheck",
            "hconsistency", "simulate")


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}")


def _resolve(config: dict, args, command: str, defaults: dict,
             default_outputs: dict) -> dict:
    """Materialize defaults and overrides into a fully explicit config."""
    if "env" not in config:
        raise ConfigError("config needs an 'env' block")
    if config.get("command") not in (None, command):
        raise ConfigError(
            f"config was written for {config['command']!r}, not {command!r}")
    spec = EnvSpec.from_dict(config["env"])  # validates the env block
    resolved = {"command": command, "env": spec.to_dict()}
    resolved["seed"] = int(args.seed if args.seed is not None
                           else config.get("seed", 0))
    for key, default in defaults.items():
        resolved[key] = config.get(key, default)
    outputs = dict(default_outputs)
    outputs.update(config.get("outputs", {}))
    resolved["outputs"] = outputs
    return resolved


def _out_path(args, name) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _emit(args, resolved: dict, payload: dict) -> Path:
    payload = {"config": resolved, **payload}
    path = _out_path(args, resolved["outputs"]["report"])
    write_json_report(path, payload)
    return path


def _plots(args):
    if args.no_plot:
        return None
    from . import plots
    return plots


# -- validate ---------------------------------------------------------------


def cmd_validate(config, args) -> int:
    resolved = _resolve(config, args, "validate", {
        "window": [-50, 50],
        "nonexplosion_depth": 200,
        "b2_epsilon": 1e-6,
    }, {"report": "validate_report.json"})
    spec = EnvSpec.from_dict(resolved["env"])
    env = EnvironmentEnsemble(spec, spec.seed)
    window = tuple(resolved["window"])
    reports = []
    warnings = []
    if spec.model == "bdp":
        if spec.bounds:
            eps, M = spec.bounds
            reports.append(validate_condition_C(env, eps, M, window).to_dict())
            reports.append(validate_condition_C2prime(
                env, kappa=eps, K=(env.L + env.R) * M, window=window).to_dict())
        try:
            div = check_nonexplosion(env, resolved["nonexplosion_depth"])
        except ErgwalkError as err:
            raise ConfigError(f"non-explosion check failed: {err}")
        reports.append({"name": "non-explosion", "passed": div.consistent,
                        "violations": [], **div.to_dict()})
        if not div.consistent:
            warnings.append("reciprocal-rate series divergence NOT observed")
    else:
        if spec.tail:
            D, eps0, _ = spec.tail
            reports.append(validate_condition_B_env(
                env, resolved["b2_epsilon"], D, eps0, window).to_dict())
    passed = all(r["passed"] for r in reports) if reports else True
    _emit(args, resolved, {"reports": reports, "passed": passed,
                           "warnings": warnings})
    return EXIT_OK


# -- classify ---------------------------------------------------------------


def cmd_classify(config, args) -> int:
    resolved = _resolve(config, args, "classify", {
        "n_products": 20000,
        "burn_in": 1000,
    }, {"report": "classify_report.json"})
    spec = EnvSpec.from_dict(resolved["env"])
    if spec.model != "bdp":
        raise ConfigError("classification applies to bdp environments")
    env = EnvironmentEnsemble(spec, spec.seed)
    spectrum = lyapunov.lyapunov_spectrum(env, resolved["n_products"],
                                          resolved["burn_in"], resolved["seed"])
    cls = lyapunov.classify(spectrum, env.R)
    _emit(args, resolved, {"spectrum": spectrum.to_dict(),
                           "classification": cls.to_dict(),
                           "verdict": cls.verdict})
    if args.strict and cls.verdict == "boundary-undetermined":
        return EXIT_INDETERMINATE
    return EXIT_OK


# -- velocity ---------------------------------------------------------------

_METHOD_MODEL = {"mc-bdp": "bdp", "theorem51": "bdp",
                 "mc-rwre": "rwre", "corollary": "rwre"}


def _check_method(method: str, spec: EnvSpec):
    if method not in _METHOD_MODEL:
        raise ConfigError(f"unknown velocity method {method!r}")
    if _METHOD_MODEL[method] != spec.model:
        raise ConfigError(f"method {method} needs a {_METHOD_MODEL[method]} "
                          f"environment, got {spec.model}")
    if method == "theorem51":
        env = EnvironmentEnsemble(spec, spec.seed)
        if env.L != 2 or env.R != 2:
            raise ConfigError("theorem51 requires L = R = 2")
    if method == "corollary":
        if any(law.max_offset() > 1 for law in spec.sites):
            raise ConfigError("corollary requires one-step-right site laws")


def _run_velocity(method, spec, resolved, jobs):
    seed = resolved["seed"]
    if method == "mc-bdp":
        return bdp.estimate_velocity_bdp(
            spec, resolved["t_max"], resolved["replicas"], seed,
            annealed=resolved["annealed"], jobs=jobs)
    if method == "mc-rwre":
        return rwre.estimate_velocity_rwre(
            spec, resolved["n_steps"], resolved["replicas"], seed,
            annealed=resolved["annealed"], jobs=jobs)
    if method == "theorem51":
        return velocity2.velocity_theorem51(
            spec, resolved["env_samples"], resolved["tol"],
            resolved["k_max"], seed, jobs=jobs)
    return rwre.velocity_corollary(
        spec, resolved["env_samples"], resolved["depth_K"],
        resolved["tol"], seed, jobs=jobs)


_VELOCITY_DEFAULTS = {
    "method": None,
    "t_max": 1000.0,
    "n_steps": 100000,
    "replicas": 200,
    "env_samples": 200,
    "tol": 1e-10,
    "k_max": 10000,
    "depth_K": 32,
    "annealed": True,
}


def cmd_velocity(config, args) -> int:
    resolved = _resolve(config, args, "velocity", _VELOCITY_DEFAULTS, {
        "report": "velocity_report.json",
        "csv": "velocity_replicas.csv",
        "figure": "velocity_replicas.png",
    })
    method = resolved["method"]
    if not method:
        raise ConfigError("velocity config needs a 'method'")
    spec = EnvSpec.from_dict(resolved["env"])
    _check_method(method, spec)
    jobs = args.jobs if args.jobs else default_jobs()
    report = _run_velocity(method, spec, resolved, jobs)
    _emit(args, resolved, {"report": report.to_dict(),
                           "verdict": report.verdict})
    values = getattr(report, "values", None)
    if values:
        write_csv(_out_path(args, resolved["outputs"]["csv"]),
                  ["replica", "velocity"], list(enumerate(values)))
        plots = _plots(args)
        if plots:
            plots.render_velocity(values, report.to_dict(),
                                  _out_path(args, resolved["outputs"]["figure"]))
    if args.strict and report.verdict != "ok":
        return EXIT_DIVERGENCE
    return EXIT_OK


# -- compare ----------------------------------------------------------------


def cmd_compare(config, args) -> int:
    resolved = _resolve(config, args, "compare",
                        {"methods": None, **_VELOCITY_DEFAULTS},
                        {"report": "compare_report.json",
                         "figure": "compare.png"})
    resolved.pop("method", None)
    methods = resolved["methods"]
    if not methods or len(methods) != 2:
        raise ConfigError("compare config needs 'methods': [m1, m2]")
    spec = EnvSpec.from_dict(resolved["env"])
    for m in methods:
        _check_method(m, spec)
    jobs = args.jobs if args.jobs else default_jobs()
    first = _run_velocity(methods[0], spec, resolved, jobs)
    second = _run_velocity(methods[1], spec, resolved, jobs)
    diverged = "zero-or-undefined" in (first.verdict, second.verdict)
    gap = abs(first.velocity - second.velocity)
    comb = math.hypot(first.se if first.se == first.se else 0.0,
                      second.se if second.se == second.se else 0.0)
    sigma = gap / comb if comb > 0 else (0.0 if gap == 0 else math.inf)
    payload = {"first": first.to_dict(), "second": second.to_dict(),
               "sigma": sigma, "passed": (not diverged) and sigma < 3.0}
    _emit(args, resolved, payload)
    plots = _plots(args)
    if plots and not diverged:
        plots.render_compare(payload, _out_path(args, resolved["outputs"]["figure"]))
    if diverged:
        return EXIT_DIVERGENCE
    return EXIT_OK


# -- tailcheck ----------------------------------------------------------------


def cmd_tailcheck(config, args) -> int:
    resolved = _resolve(config, args, "tailcheck", {
        "h": 0.1,
        "skeleton_steps": 100000,
        "lam_bar": -20.0,
        "m_max": None,
    }, {"report": "tailcheck_report.json",
        "csv": "tailcheck.csv",
        "figure": "tailcheck.png"})
    spec = EnvSpec.from_dict(resolved["env"])
    if spec.model != "bdp":
        raise ConfigError("tailcheck applies to bdp environments")
    env = EnvironmentEnsemble(spec, spec.seed)
    if resolved["m_max"] is not None and resolved["m_max"] <= max(env.L, env.R):
        raise ConfigError(f"m_max={resolved['m_max']} leaves the bound domain "
                          f"empty (need > max(L, R) = {max(env.L, env.R)})")
    report = bdp.skeleton_tail_check(
        spec, resolved["h"], resolved["skeleton_steps"], resolved["seed"],
        lam_bar=resolved["lam_bar"], m_max=resolved["m_max"])
    d = report.to_dict()
    _emit(args, resolved, {"report": d, "passed": report.passed})
    rows = [(m, f, s, b, math.log(f) if f > 0 else "")
            for m, f, s, b in zip(d["m"], d["freq"], d["se"], d["bound"])]
    write_csv(_out_path(args, resolved["outputs"]["csv"]),
              ["m", "freq", "se", "bound", "log_freq"], rows)
    plots = _plots(args)
    if plots:
        plots.render_tailcheck(d, _out_path(args, resolved["outputs"]["figure"]))
    return EXIT_OK


# -- hconsistency -------------------------------------------------------------


def cmd_hconsistency(config, args) -> int:
    resolved = _resolve(config, args, "hconsistency", {
        "h_list": [0.1, 0.05, 0.01],
        "t_max": 200.0,
        "replicas": 200,
        "small_h": None,   # optional {"h_list": [...], "replicas": N}
    }, {"report": "hconsistency_report.json",
        "csv": "hconsistency.csv",
        "small_h_csv": "small_h_rates.csv",
        "figure": "hconsistency.png"})
    spec = EnvSpec.from_dict(resolved["env"])
    if spec.model != "bdp":
        raise ConfigError("hconsistency applies to bdp environments")
    jobs = args.jobs if args.jobs else default_jobs()
    report = bdp.h_consistency(spec, resolved["h_list"], resolved["t_max"],
                               resolved["replicas"], resolved["seed"], jobs=jobs)
    payload = {"report": report.to_dict(), "consistent": report.consistent}
    small = resolved["small_h"]
    if small:
        small_report = bdp.small_h_rates(spec, small["h_list"],
                                         small.get("replicas", 100000),
                                         resolved["seed"], jobs=jobs)
        payload["small_h"] = small_report.to_dict()
        write_csv(_out_path(args, resolved["outputs"]["small_h_csv"]),
                  ["h", "offset", "rate_hat", "se", "n"],
                  [(r["h"], r["offset"], r["rate_hat"], r["se"], r["n"])
                   for r in small_report.rows])
    _emit(args, resolved, payload)
    write_csv(_out_path(args, resolved["outputs"]["csv"]),
              ["h", "n", "v_h", "se", "v_h_over_h", "se_over_h"],
              [(r["h"], r["n"], r["v_h"], r["se"], r["v_h_over_h"],
                r["se_over_h"]) for r in report.rows])
    plots = _plots(args)
    if plots:
        plots.render_hconsistency(report.to_dict(),
                                  _out_path(args, resolved["outputs"]["figure"]))
    return EXIT_OK


# -- simulate -----------------------------------------------------------------


def cmd_simulate(config, args) -> int:
    resolved = _resolve(config, args, "simulate", {
        "t_max": 100.0,
        "n_steps": 1000,
    }, {"report": "simulate_report.json",
        "csv": "path.csv",
        "figure": "path.png"})
    spec = EnvSpec.from_dict(resolved["env"])
    env = EnvironmentEnsemble(spec, spec.seed)
    if spec.model == "bdp":
        path = bdp.simulate_bdp(env, resolved["t_max"], resolved["seed"])
        rows = bdp.path_rows(path)
        header = ["tau", "chi"]
        summary = {"model": "bdp", "events": path.n_events,
                   "final_state": int(path.states[-1]), "t_max": path.t_max}
    else:
        traj = rwre.run_walk(env, resolved["n_steps"], resolved["seed"])
        rows = rwre.trajectory_rows(traj)
        header = ["step", "state"]
        summary = {"model": "rwre", "n_steps": len(traj),
                   "final_state": int(traj.states[-1])}
    _emit(args, resolved, {"summary": summary})
    write_csv(_out_path(args, resolved["outputs"]["csv"]), header, rows)
    plots = _plots(args)
    if plots:
        plots.render_path(rows, _out_path(args, resolved["outputs"]["figure"]),
                          spec.model)
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ergwalk",
        description="velocity laboratory for walks and birth-death processes "
                    "in random environments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config master seed")
        sp.add_argument("--jobs", type=int, default=None,
                        help="worker processes (default ERGWALK_DEFAULT_JOBS or 1)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--strict", action="store_true",
                        help="nonzero exit on indeterminate/divergent verdicts")
        sp.add_argument("--no-plot", action="store_true",
                        help="skip figure rendering")
    return parser


_HANDLERS = {
    "validate": cmd_validate,
    "classify": cmd_classify,
    "velocity": cmd_velocity,
    "compare": cmd_compare,
    "tailcheck": cmd_tailcheck,
    "hconsistency": cmd_hconsistency,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args.config)
        return _HANDLERS[args.command](config, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ErgwalkError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
