"""Command-line experiment runner.

Each subcommand takes flags, optionally backed by a YAML file given with
``--config`` (keys are the flag names with dashes or underscores; flags win
over file values).  Outputs go to ``--out``, else ``$ATTNFLOW_OUTPUT_DIR``,
else ``./attnflow-out``, together with a ``manifest.json`` that ``rerun`` can
replay.

Exit codes: 0 success, 1 configuration error, 2 invariant violation.
"""
import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np
import yaml

from ._accel import backend_name
from .analysis import (cluster_timeline, curve_csv, empirical_boundary, empirical_phase_diagram,
                       histogram_csv, pair_correlation_circle, phase_curve_infty)
from .dynamics import ModelSpec, Variant
from .energy import (classify_critical_point, dissipation_rate, g_function, tau_star)
from .geometry import (DomainError, circle_points, hemisphere_fraction, sample_orthonormal,
                       sample_uniform, wendel_fraction)
from .integrate import (IntegratorConfig, __version__, atomic_write, default_threads, fmt,
                        integrate, integrate_gamma, save_trajectory, solve_gamma_hitting_time)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2


class ConfigError(Exception):
    pass


# ------------------------------------------------------------- plumbing ----


def _out_dir(value):
    return value or os.environ.get("ATTNFLOW_OUTPUT_DIR") or "attnflow-out"


def _load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: malformed YAML{where}: {exc.problem}")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of field: value")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _resolve(args, defaults, required=()):
    """Merge defaults <- config file <- explicit flags; check required fields."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_vals = _load_config(args.config)
        unknown = sorted(set(file_vals) - set(defaults))
        if unknown:
            raise ConfigError(f"{args.config}: unknown field(s) {', '.join(unknown)}")
        cfg.update(file_vals)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}")
    return cfg


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_manifest(out, command, cfg, seed, started, files, invariants):
    manifest = {
        "command": command,
        "command_line": sys.argv[:],
        "config": cfg,
        "master_seed": seed,
        "version": f"attnflow {__version__}",
        "backend": backend_name(),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": {os.path.basename(f): _sha256(f) for f in files},
        "invariants": invariants,
    }
    atomic_write(os.path.join(out, "manifest.json"),
                 json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
    return manifest


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _status(invariants):
    return EXIT_OK if all(invariants.values()) else EXIT_INVARIANT


def _floats(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


# ------------------------------------------------------------- simulate ----

SIM_DEFAULTS = {
    "variant": "SA", "beta": None, "n": None, "d": None, "seed": 0, "t_end": None,
    "dt": 1e-2, "sample_every": 1e-1, "scheme": "RK4_RETRACT", "retraction": "EXP_MAP",
    "value_sign": 1, "noise_sigma": 0.0, "stop_tol": None, "init": "uniform",
    "coupling": "EXP_COS", "kc": 1.0, "omega": None, "tie_rule": "AVERAGE",
    "Q": None, "K": None, "V": None, "heads": None, "delta": 1e-3, "points": None,
}


def _initial_state(cfg, spec):
    n, d, seed = int(cfg["n"]), int(cfg["d"]), int(cfg["seed"])
    if cfg["points"] is not None:
        return np.asarray(cfg["points"], dtype=float)
    init = cfg["init"]
    rng = np.random.default_rng(seed)
    if spec.variant == Variant.ANGULAR:
        return rng.uniform(0.0, 2.0 * np.pi, n)
    if spec.variant in (Variant.HARDMAX, Variant.EUCLIDEAN_RESCALED):
        return rng.standard_normal((n, d))
    if init == "uniform":
        return sample_uniform(n, d, seed).points
    if init == "orthonormal":
        return sample_orthonormal(n, d, seed).points
    raise ConfigError(f"init: unknown value {init!r} (uniform | orthonormal)")


def cmd_simulate(args):
    required = ["variant", "n", "d", "t_end"]
    base = _resolve(args, SIM_DEFAULTS, required)
    if str(base["variant"]).upper() != "HARDMAX" and base.get("beta") is None:
        raise ConfigError("missing required field(s): beta")
    cfg = base
    started = time.time()
    try:
        spec = ModelSpec(variant=str(cfg["variant"]).upper(), beta=float(cfg["beta"] or 0.0),
                         Q=cfg["Q"], K=cfg["K"], V=cfg["V"], heads=cfg["heads"],
                         coupling=str(cfg["coupling"]).upper(), Kc=float(cfg["kc"]),
                         omega=cfg["omega"], value_sign=int(cfg["value_sign"]),
                         noise_sigma=float(cfg["noise_sigma"]),
                         tie_rule=str(cfg["tie_rule"]).upper())
        icfg = IntegratorConfig(scheme=str(cfg["scheme"]).upper(), dt=float(cfg["dt"]),
                                t_end=float(cfg["t_end"]),
                                sample_every=float(cfg["sample_every"]),
                                retraction=str(cfg["retraction"]).upper(),
                                noise_sigma=float(cfg["noise_sigma"]), seed=int(cfg["seed"]),
                                stop_tol=None if cfg["stop_tol"] is None else float(cfg["stop_tol"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc))
    c0 = _initial_state(cfg, spec)
    traj = integrate(c0, spec, icfg)
    out = _out_dir(args.out)
    os.makedirs(out, exist_ok=True)
    files = []
    tpath = os.path.join(out, "trajectory.csv")
    save_trajectory(traj, tpath)
    files += [tpath, tpath + ".json"]

    simple = spec.simple_sphere and spec.beta > 0 and spec.noise_sigma == 0
    lines = ["t,energy,dissipation"]
    for t, e, X in zip(traj.times, traj.energies, traj.states):
        rate = (spec.value_sign * dissipation_rate(X, spec.beta, spec.variant)
                if simple else float("nan"))
        lines.append(f"{fmt(t)},{fmt(e)},{fmt(rate)}")
    epath = os.path.join(out, "energy.csv")
    atomic_write(epath, "\n".join(lines) + "\n")
    files.append(epath)

    if traj.kind != "euclidean":
        rows = ["t,count,residual,max_intra_angle"]
        for s in cluster_timeline(traj, float(cfg["delta"])):
            rows.append(f"{fmt(s.time)},{s.count},{fmt(s.residual)},{fmt(s.max_intra_angle)}")
        cpath = os.path.join(out, "clusters.csv")
        atomic_write(cpath, "\n".join(rows) + "\n")
        files.append(cpath)

    invariants = {"no_integration_error": traj.error is None,
                  "energy_monotone": not any(v.startswith("energy") for v in traj.violations),
                  "sphere_constraint": not any(v.startswith("sphere") for v in traj.violations)}
    _write_manifest(out, "simulate", cfg, int(cfg["seed"]), started, files, invariants)
    print(f"wrote {len(traj)} samples to {out}; t_end={traj.times[-1]:g}")
    for v in traj.violations:
        print(f"invariant violation: {v}", file=sys.stderr)
    if traj.error:
        print(traj.error, file=sys.stderr)
    return _status(invariants)


# -------------------------------------------------------- phase diagram ----

PD_DEFAULTS = {"n": 32, "d": 512, "delta": 1e-3, "t_max": 40.0, "t_steps": 24,
               "beta_max": 9.0, "beta_steps": 24, "reps": 64, "seed": 0, "dt": 0.04,
               "qkv": "identity", "v_kind": "identity", "threads": None, "all_pairs": False}


def cmd_phase_diagram(args):
    cfg = _resolve(args, PD_DEFAULTS)
    if int(cfg["t_steps"]) < 2 or int(cfg["beta_steps"]) < 2:
        raise ConfigError("t_steps and beta_steps must be >= 2")
    if int(cfg["reps"]) < 1:
        raise ConfigError("reps must be >= 1")
    started = time.time()
    t_grid = np.linspace(0.0, float(cfg["t_max"]), int(cfg["t_steps"]))
    b_grid = np.linspace(0.0, float(cfg["beta_max"]), int(cfg["beta_steps"]))
    qkv = None if cfg["qkv"] == "identity" else f"{cfg['qkv']}:{cfg['v_kind']}"
    threads = int(cfg["threads"]) if cfg["threads"] else default_threads()
    grid = empirical_phase_diagram(int(cfg["n"]), int(cfg["d"]), float(cfg["delta"]), t_grid,
                                   b_grid, int(cfg["reps"]), int(cfg["seed"]), threads=threads,
                                   dt=float(cfg["dt"]), qkv=qkv, all_pairs=bool(cfg["all_pairs"]))
    out = _out_dir(args.out)
    os.makedirs(out, exist_ok=True)
    gpath = os.path.join(out, "phase_grid.csv")
    atomic_write(gpath, grid.to_csv())
    curve = phase_curve_infty(int(cfg["n"]), b_grid, float(cfg["delta"]))
    cpath = os.path.join(out, "gamma_curve.csv")
    atomic_write(cpath, curve_csv(curve))
    bpath = os.path.join(out, "empirical_boundary.csv")
    atomic_write(bpath, curve_csv(empirical_boundary(grid)))
    invariants = {"prob_in_unit_interval": bool(np.all((grid.prob >= 0) & (grid.prob <= 1)))}
    cfg_out = dict(cfg, threads=None)  # worker count does not affect the data
    _write_manifest(out, "phase-diagram", cfg_out, int(cfg["seed"]), started,
                    [gpath, cpath, bpath], invariants)
    print(f"phase grid {grid.prob.shape} written to {out}")
    return _status(invariants)


# ---------------------------------------------------------------- gamma ----

GAMMA_DEFAULTS = {"beta": 1.0, "n": 32, "variant": "SA", "delta": 1e-3, "t_end": 20.0,
                  "sample_every": 0.1}


def cmd_gamma(args):
    cfg = _resolve(args, GAMMA_DEFAULTS)
    started = time.time()
    beta, n, variant = float(cfg["beta"]), int(cfg["n"]), str(cfg["variant"]).upper()
    curve = integrate_gamma(beta, n, variant,
                            IntegratorConfig(t_end=float(cfg["t_end"]),
                                             sample_every=float(cfg["sample_every"]),
                                             dt=min(1e-2, float(cfg["sample_every"]))))
    t_star = solve_gamma_hitting_time(beta, n, variant, 1.0 - float(cfg["delta"]))
    out = _out_dir(args.out)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "gamma.csv")
    atomic_write(path, "t,gamma\n" + "".join(f"{fmt(t)},{fmt(g)}\n"
                                              for t, g in zip(curve.times, curve.values)))
    invariants = {"monotone": bool(np.all(np.diff(curve.values) >= 0)),
                  "below_one": bool(np.all(curve.values < 1.0))}
    _write_manifest(out, "gamma", dict(cfg, t_star=t_star), None, started, [path], invariants)
    print(f"t_star = {t_star:.12g}")
    return _status(invariants)


# ------------------------------------------------------------ landscape ----

LAND_DEFAULTS = {"mode": "classify", "d": 2, "n": 4, "beta": 1.0, "theta": None,
                 "points": None, "grid": 1001}


def cmd_landscape(args):
    cfg = _resolve(args, LAND_DEFAULTS)
    started = time.time()
    beta, d, n = float(cfg["beta"]), int(cfg["d"]), int(cfg["n"])
    out = _out_dir(args.out)
    os.makedirs(out, exist_ok=True)
    mode = cfg["mode"]
    if mode == "tau-star":
        root = tau_star(beta, d)
        report = {"mode": mode, "beta": beta, "d": d, "tau_star": root}
        print(f"tau_star = {root:.12g}")
    elif mode == "sweep-g":
        zeta = np.linspace(0.0, np.pi, int(cfg["grid"]))
        g = g_function(zeta, beta, d)
        path = os.path.join(out, "g_sweep.csv")
        atomic_write(path, "zeta,g\n" + "".join(f"{fmt(z)},{fmt(v)}\n" for z, v in zip(zeta, g)))
        report = {"mode": mode, "beta": beta, "d": d, "tau_star": tau_star(beta, d)}
    elif mode == "classify":
        if cfg["points"] is not None:
            state = np.asarray(cfg["points"], dtype=float)
        elif cfg["theta"] is not None:
            state = np.asarray(_floats(cfg["theta"]))
        elif d == 2:
            state = 2.0 * np.pi * np.arange(n) / n
        else:
            raise ConfigError("classify in d > 2 needs --points or a config with points")
        rep = classify_critical_point(state, beta)
        report = dict(rep.to_dict(), mode=mode)
        print(rep.classification.value)
    else:
        raise ConfigError(f"mode: unknown value {mode!r} (classify | sweep-g | tau-star)")
    path = os.path.join(out, "report.json")
    atomic_write(path, json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    files = [path] + ([os.path.join(out, "g_sweep.csv")] if mode == "sweep-g" else [])
    _write_manifest(out, "landscape", cfg, None, started, files, {})
    return EXIT_OK


# --------------------------------------------------------------- wendel ----

WENDEL_DEFAULTS = {"n": 6, "d": 3, "mc": 0, "seed": 0}


def cmd_wendel(args):
    cfg = _resolve(args, WENDEL_DEFAULTS)
    n, d = int(cfg["n"]), int(cfg["d"])
    if n < 1 or d < 1:
        raise ConfigError("n and d must be >= 1")
    exact = wendel_fraction(n, d)
    print(f"exact = {exact} = {float(exact):.17g}")
    if int(cfg["mc"]) > 0:
        if d < 2:
            raise ConfigError("Monte-Carlo estimate needs d >= 2")
        est, se = hemisphere_fraction(n, d, int(cfg["mc"]), int(cfg["seed"]))
        print(f"estimate = {est:.6f} +- {se:.6f} (z = {(est - float(exact)) / se if se else 0:.2f})")
    return EXIT_OK


# ---------------------------------------------------- pair correlation ----

PAIR_DEFAULTS = {"beta": 1.0, "n": 8, "t": 20.0, "reps": 2000, "bins": 128, "seed": 0,
                 "variant": "ANGULAR", "dt": 1e-2, "threads": None}


def cmd_pair_correlation(args):
    cfg = _resolve(args, PAIR_DEFAULTS)
    started = time.time()
    spec = ModelSpec(str(cfg["variant"]).upper(), beta=float(cfg["beta"]))
    threads = int(cfg["threads"]) if cfg["threads"] else default_threads()
    pc = pair_correlation_circle(spec, int(cfg["n"]), float(cfg["t"]), int(cfg["reps"]),
                                 int(cfg["bins"]), int(cfg["seed"]), dt=float(cfg["dt"]),
                                 threads=threads)
    out = _out_dir(args.out)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "pair_correlation.csv")
    atomic_write(path, histogram_csv(pc.edges, pc.density, "density"))
    total = float(np.sum(pc.density * np.diff(pc.edges)))
    invariants = {"normalized": abs(total - 1.0) < 1e-12}
    _write_manifest(out, "pair-correlation", dict(cfg, threads=None), int(cfg["seed"]), started,
                    [path], invariants)
    print(f"mass within |x| < 0.1: {pc.mass_within(0.1):.4f}")
    return _status(invariants)


# ---------------------------------------------------------------- rerun ----


def cmd_rerun(args):
    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc}")
    command = manifest["command"]
    cfg = dict(manifest["config"])
    cfg.pop("t_star", None)
    out = args.out or os.path.dirname(os.path.abspath(args.manifest))
    ns = argparse.Namespace(config=None, out=out, **cfg)
    if command == "phase-diagram" and args.threads:
        ns.threads = args.threads
    return COMMANDS[command](ns)


COMMANDS = {"simulate": cmd_simulate, "phase-diagram": cmd_phase_diagram, "gamma": cmd_gamma,
            "landscape": cmd_landscape, "wendel": cmd_wendel,
            "pair-correlation": cmd_pair_correlation}


# --------------------------------------------------------------- parser ----


def _flag(p, name, type_=str, **kw):
    dest = name.replace("-", "_")
    p.add_argument(f"--{name}", dest=dest, type=type_, default=None, **kw)


def build_parser():
    ap = argparse.ArgumentParser(prog="attnflow", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"attnflow {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML file with default values for the flags")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", help="integrate one trajectory")
    common(p)
    for name, t in [("variant", str), ("beta", float), ("n", int), ("d", int), ("seed", int),
                    ("t-end", float), ("dt", float), ("sample-every", float), ("scheme", str),
                    ("retraction", str), ("value-sign", int), ("noise-sigma", float),
                    ("stop-tol", float), ("init", str), ("coupling", str), ("kc", float),
                    ("tie-rule", str), ("delta", float)]:
        _flag(p, name, t)

    p = sub.add_parser("phase-diagram", help="Monte-Carlo clustering probability over (t, beta)")
    common(p)
    for name, t in [("n", int), ("d", int), ("delta", float), ("t-max", float),
                    ("t-steps", int), ("beta-max", float), ("beta-steps", int), ("reps", int),
                    ("seed", int), ("dt", float), ("threads", int)]:
        _flag(p, name, t)
    _flag(p, "qkv", str, choices=["identity", "ginibre", "wigner-sym"])
    _flag(p, "v-kind", str, choices=["identity", "equalsQK", "gaussian-PSD"])
    p.add_argument("--all-pairs", dest="all_pairs", action="store_true", default=None,
                   help="average over all pairs instead of the pair (1, 2)")

    p = sub.add_parser("gamma", help="common inner product of orthonormal starts")
    common(p)
    for name, t in [("beta", float), ("n", int), ("delta", float), ("t-end", float),
                    ("sample-every", float)]:
        _flag(p, name, t)
    _flag(p, "variant", str.upper, choices=["SA", "USA"])

    p = sub.add_parser("landscape", help="critical-point classification and saddle tools")
    common(p)
    _flag(p, "mode", str, choices=["classify", "sweep-g", "tau-star"])
    for name, t in [("d", int), ("n", int), ("beta", float), ("theta", str), ("grid", int)]:
        _flag(p, name, t)

    p = sub.add_parser("wendel", help="probability that n points share a hemisphere")
    common(p)
    for name, t in [("n", int), ("d", int), ("mc", int), ("seed", int)]:
        _flag(p, name, t)

    p = sub.add_parser("pair-correlation", help="angle-difference density on the circle")
    common(p)
    for name, t in [("beta", float), ("n", int), ("t", float), ("reps", int), ("bins", int),
                    ("seed", int), ("dt", float), ("threads", int)]:
        _flag(p, name, t)
    _flag(p, "variant", str.upper, choices=["ANGULAR", "SA", "USA"])

    p = sub.add_parser("rerun", help="replay a manifest")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = cmd_rerun if args.command == "rerun" else COMMANDS[args.command]
    try:
        return handler(args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
