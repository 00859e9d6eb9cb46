"""Command-line front end: ``mono-ph run|verify|oracle <config>``.

Exit codes: 0 success, 2 invalid configuration, 3 divergence or other
numerical failure, 4 property-suite failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, validate
from .errors import ConfigError, ConvergenceError, DivergenceError, ShapeError, SolverError, UsageError
from .flows import Variant, make_flow, reduced_u, steady_state
from .integrator import IntegratorConfig, integrate, spectral_step_bound
from .ocp import solve_kkt
from .suites import Problem, run_suites

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SUITE = 0, 2, 3, 4


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def integrator_config(cfg: RunConfig, flow, v0) -> IntegratorConfig:
    dt = cfg["integrator.dt_int"]
    if dt is None:
        dt = min(0.1 * flow.spec.grid.dt, spectral_step_bound(flow, v0))
    return IntegratorConfig(
        method=cfg["integrator.method"],
        dt_int=float(dt),
        T=float(cfg["integrator.T"]),
        record_every=int(cfg["integrator.record_every"]),
        stop_tol=cfg["integrator.stop_tol"],
        allow_unstable=bool(cfg["integrator.allow_unstable"]),
    )


def norm_nonincreasing(traj, channel="state_norm", factor=10.0, stride=1):
    """Largest increase of ``channel`` between records beyond the allowed
    slack ``factor * stride * local_error``; nonpositive means pass."""
    y = traj.channel(channel)
    slack = factor * stride * traj.monitors["local_error"][:-1]
    if y.size < 2:
        return -math.inf
    return float(np.max(np.diff(y) - slack - 1e-14 * y[:-1]))


def _initial_state(cfg, variant, flow, x_p0, point, rng):
    if variant.closed:
        return flow.initial_state(x_p0)
    if cfg["run.init"] == "zero":
        return flow.zero_state()
    w_star = steady_state(flow, point)
    d = rng.standard_normal(flow.dim)
    r = float(cfg["run.init_radius"]) * rng.uniform() ** (1.0 / flow.dim)
    return w_star + r * d / flow.norm(d)


def cmd_run(cfg: RunConfig, out: Path) -> int:
    """Integrate the configured flow and write trajectory.csv and report.json."""
    start = time.perf_counter()
    variant, spec, plant, x_p0 = validate(cfg)
    rng = np.random.default_rng(cfg["seed"])
    flow = make_flow(variant, spec, plant)
    point = None if variant.closed else solve_kkt(spec)
    v0 = _initial_state(cfg, variant, flow, x_p0, point, rng)
    icfg = integrator_config(cfg, flow, v0)
    reference = None if point is None else steady_state(flow, point)
    traj = integrate(flow, v0, icfg, reference=reference)

    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "trajectory.csv")
    v_T = traj.final
    report = {
        "config": cfg.echo(),
        "flow": variant.value,
        "dt_int": icfg.dt_int,
        "steps": traj.steps,
        "final_time": float(traj.times[-1]),
        "stopped_early": traj.stopped_early,
        "terminal_rhs_norm": flow.norm(flow.rhs(v_T, traj.times[-1])),
        "terminal_state_norm": float(traj.channel("state_norm")[-1]),
        "max_norm_increase": norm_nonincreasing(
            traj, "state_norm" if reference is None else "shifted_norm", stride=icfg.record_every
        ),
    }
    report["state_norm_nonincreasing"] = report["max_norm_increase"] <= 0.0
    if variant.closed:
        sl = flow.layout.slices["x_p"]
        report["terminal_plant_norm"] = float(np.linalg.norm(v_T[sl]))
        up = traj.channel("u_p")
        report["u_p_range"] = [float(up.min()), float(up.max())]
        if variant.constrained:
            report["min_feasibility_margin"] = float(np.min(traj.channel("feasibility_margin")))
        _write_plant_states(traj, sl, out / "plant_state.csv")
    else:
        report["kkt_residual"] = point.residual
        nx, nu = spec.nx, spec.nu
        wx = flow.weights[:nx]
        dx = v_T[:nx] - point.x_star.data
        if variant is Variant.OPEN_U:
            du = v_T[nx:nx + nu] - point.u_star.data
        else:
            du = reduced_u(spec, v_T) - point.u_star.data
        wu = np.full(nu, spec.grid.dt)
        report["terminal_distance_x"] = math.sqrt(float(np.dot(wx * dx, dx)))
        report["terminal_distance_u"] = math.sqrt(float(np.dot(wu * du, du)))
        report["terminal_distance_xu"] = math.hypot(report["terminal_distance_x"], report["terminal_distance_u"])
        report["terminal_shifted_norm"] = float(traj.channel("shifted_norm")[-1])
    _write_json(out / "report.json", report)
    _write_json(out / "timing.json", {"wall_clock_s": time.perf_counter() - start})
    _print_summary(report)
    return EXIT_OK


def _write_plant_states(traj, sl, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        xs = traj.states[:, sl]
        w.writerow(["t"] + [f"x_p_{i}" for i in range(xs.shape[1])])
        for t, row in zip(traj.times, xs):
            w.writerow([f"{t:.15g}"] + [f"{x:.15g}" for x in row])


def _print_summary(report):
    keys = [k for k in report if k not in ("config",)]
    for k in keys:
        print(f"{k}: {report[k]}")


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    """Run the selected property suites; exit status 4 on any failure."""
    start = time.perf_counter()
    variant, spec, plant, x_p0 = validate(cfg)
    suites = cfg["verify.suites"]
    suites = [suites] if isinstance(suites, str) else list(suites)
    results = run_suites(Problem(spec, plant, x_p0), suites, cfg["seed"])
    failed = []
    for name, reports in results.items():
        print(f"== {name}")
        for r in reports:
            print("  " + r.to_text())
            if not r.passed:
                failed.append(f"{name}: {r.label} (worst slack {r.worst_slack:.3e})")
    out.mkdir(parents=True, exist_ok=True)
    table = {name: [r.to_dict() for r in reports] for name, reports in results.items()}
    _write_json(out / "verify.json", {"config": cfg.echo(), "suites": table, "failed": failed})
    _write_json(out / "timing.json", {"wall_clock_s": time.perf_counter() - start})
    if failed:
        print("FAILED:", file=sys.stderr)
        for f in failed:
            print("  " + f, file=sys.stderr)
        return EXIT_SUITE
    print("all suites passed")
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, out: Path) -> int:
    """Solve the optimality system directly and write the KKT point."""
    _, spec, _, _ = validate(cfg)
    point = solve_kkt(spec)
    point.save(out, spec.box)
    print(f"residual: {point.residual:.3e}")
    print(f"iterations: {point.iterations}")
    print(f"active_set_fraction: {point.active_set_fraction(spec.box):.6f}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mono-ph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("config", help="config file or the name of a bundled config")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="master RNG seed (overrides seed)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        for item in args.override:
            cfg.override(item)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        out = Path(args.out if args.out else cfg["output.dir"])
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, ShapeError, UsageError) as exc:
        print(f"mono-ph: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, SolverError, ConvergenceError) as exc:
        print(f"mono-ph: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
