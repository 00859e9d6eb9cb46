"""Invariant suites run by ``mono-ph verify``.

Each suite takes a :class:`Problem` and a random generator and returns a
list of :class:`~monoph.monotone.PropertyReport`.  Suites draw from their
own generator, spawned from the master seed in a fixed order, so selecting
a subset of suites does not change the samples any suite sees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discrete_ops import adjointness_residual
from .flows import Flow, PlantSpec, conserving_plant, make_flow, steady_state
from .integrator import IntegratorConfig, integrate
from .monotone import (
    BoxSet,
    MonotoneMap,
    PropertyReport,
    check_dissipation_identity,
    check_firmly_nonexpansive,
    check_monotone,
    check_shifted_passivity,
    moreau_complement,
    project_box,
)
from .ocp import OcpSpec, solve_kkt
from .timegrid import Layout


@dataclass
class Problem:
    """Everything a suite needs: the configured OCP, a plant and its
    initial state."""

    spec: OcpSpec
    plant: PlantSpec
    x_p0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def spec_u(self) -> OcpSpec:
        return self.spec.with_box(None) if self.spec.box is not None else self.spec

    @property
    def spec_c(self) -> OcpSpec:
        if self.spec.box is not None:
            return self.spec
        return self.spec.with_box(BoxSet.symmetric(1.0, self.spec.m))

    def flows(self) -> dict:
        return {
            "open_u": make_flow("open_u", self.spec_u),
            "open_c": make_flow("open_c", self.spec_c),
            "closed_u": make_flow("closed_u", self.spec_u, self.plant),
            "closed_c": make_flow("closed_c", self.spec_c, self.plant),
        }


def structural_suite(problem: Problem, rng) -> list:
    spec = problem.spec_u
    reports = []

    C, Cs = spec.C, spec.C_star
    worst = 0.0
    for _ in range(100):
        z = rng.standard_normal(C.cols)
        p = rng.standard_normal(C.rows)
        worst = max(worst, adjointness_residual(C, Cs, z, p))
    reports.append(PropertyReport("adjointness: C vs C*", 100, -worst, 1e-12, worst <= 1e-12))

    for name, flow in problem.flows().items():
        if not name.startswith("closed") and name != "open_u":
            continue
        worst = 0.0
        for _ in range(100):
            v = rng.standard_normal(flow.dim)
            val = float(np.dot(flow.weights * (flow.K @ v), v))
            worst = max(worst, abs(val) / float(np.dot(flow.weights * v, v)))
        reports.append(PropertyReport(f"skew power neutrality: K[{name}]", 100, -worst, 1e-12, worst <= 1e-12))

    box = problem.spec_c.box
    w = spec.grid.weights(Layout.INTERVALS, spec.m)
    radius = 3.0 * float(np.max(np.abs(np.concatenate([box.lower, box.upper]))))
    reports.append(
        check_firmly_nonexpansive(
            lambda v: project_box(v, box), w, rng, pairs=1000, radius=radius * math.sqrt(spec.grid.t_f),
            tol=1e-12, label="P_F",
        )
    )

    worst = 0.0
    for _ in range(1000):
        v = rng.uniform(-5, 5, w.size) * float(np.max(box.upper))
        err = np.abs(project_box(v, box) + moreau_complement(v, box) - v)
        worst = max(worst, float(np.max(err / np.spacing(np.maximum(np.abs(v), 1e-300)))))
    reports.append(PropertyReport("Moreau decomposition (in ulps)", 1000, -worst, 1.0, worst <= 1.0))

    cons = conserving_plant()
    worst = 0.0
    for _ in range(1000):
        z = rng.uniform(-10, 10, cons.dim)
        val = abs(float(np.dot(cons.M_p(z), z)))
        worst = max(worst, val / (1.0 + float(z @ z)) ** 2)
    reports.append(PropertyReport("energy neutrality: conserving2d", 1000, -worst, 1e-14, worst <= 1e-14))
    return reports


def monotonicity_suite(problem: Problem, rng, pairs=1000) -> list:
    reports = []
    for name, flow in problem.flows().items():
        reports.append(check_monotone(flow.M, rng, pairs=pairs, relative=flow.relative_only))
        reports[-1].label = f"{reports[-1].label} [{name}]"
    if problem.plant.globally_monotone:
        reports.append(check_monotone(problem.plant.as_map(), rng, pairs=pairs))
    else:
        reports.append(check_monotone(problem.plant.as_map(), rng, pairs=pairs, relative=True))
    return reports


def _random_input(flow: Flow, rng, amplitude=0.5, modes=3):
    base = flow.constant_input
    amp = [amplitude * rng.standard_normal(base.size) for _ in range(modes)]
    omega = rng.uniform(1.0, 10.0, modes)
    phase = rng.uniform(0.0, 2 * math.pi, modes)

    def fn(t):
        out = base.copy()
        for a, om, ph in zip(amp, omega, phase):
            out += a * math.sin(om * t + ph)
        return out

    return fn


def passivity_suite(problem: Problem, rng, T=0.05, dt_int=1e-4) -> list:
    reports = []
    flows = problem.flows()
    cfg = IntegratorConfig(dt_int=dt_int, T=T, record_every=1)

    for name in ("open_u", "open_c"):
        flow = flows[name]
        spec = flow.spec
        w_star = steady_state(flow, solve_kkt(spec))
        d = rng.standard_normal(flow.dim)
        v0 = w_star + d / flow.norm(d)
        traj = integrate(flow, v0, cfg, reference=w_star)
        chk = check_dissipation_identity(traj, flow.N, flow.weights, reference=w_star, label=f"shifted dissipation identity [{name}]")
        reports.append(chk.to_report())
        steady = (w_star, flow.constant_input)
        rep = check_shifted_passivity(flow.M, traj, steady, flow.B_in, label=f"shifted passivity, constant input [{name}]")
        reports.append(rep.to_report())
        if name == "open_u":
            driven = flow.with_input(_random_input(flow, rng))
            traj = integrate(driven, v0, cfg, reference=w_star)
            rep = check_shifted_passivity(driven.M, traj, steady, driven.B_in, label=f"shifted passivity, random input [{name}]")
            reports.append(rep.to_report())

    x_p0 = problem.x_p0 if problem.x_p0.size else np.ones(problem.plant.dim)
    for name in ("closed_u", "closed_c"):
        flow = flows[name]
        traj = integrate(flow, flow.initial_state(x_p0), cfg)
        chk = check_dissipation_identity(traj, flow.N, flow.weights, label=f"dissipation identity [{name}]")
        reports.append(chk.to_report())
    return reports


def integrator_suite(problem: Problem, rng) -> list:
    reports = []
    lin = MonotoneMap.affine(np.array([[1.0]]), label="v -> v")
    errs = []
    for h in (0.1, 0.05):
        traj = integrate(lin, [1.0], IntegratorConfig(dt_int=h, T=1.0, record_every=1000, local_error=False))
        errs.append(abs(traj.final[0] - math.exp(-1.0)))
    factor = errs[0] / errs[1]
    reports.append(PropertyReport("RK4 order factor", 2, factor, 0.0, 12.0 <= factor <= 20.0, "expected in [12, 20]"))

    flow = make_flow("open_u", problem.spec_u)
    w_star = steady_state(flow, solve_kkt(flow.spec))
    d = rng.standard_normal(flow.dim)
    v0 = w_star + 5.0 * d / flow.norm(d)
    for h in (0.01, 0.1, 1.0):
        traj = integrate(flow, v0, IntegratorConfig("implicit_euler", dt_int=h, T=20 * h, local_error=False), reference=w_star)
        sn = traj.channel("shifted_norm")
        worst = float(np.max(np.diff(sn) / sn[:-1]))
        reports.append(PropertyReport(f"implicit Euler nonexpansive, dt_int={h:g}", sn.size - 1, -worst, 1e-12, worst <= 1e-12))

    cfg = IntegratorConfig(dt_int=2e-3, T=0.2, record_every=10)
    a = integrate(flow, v0, cfg, reference=w_star)
    b = integrate(flow, v0, cfg, reference=w_star)
    same = np.array_equal(a.states, b.states) and all(np.array_equal(a.monitors[k], b.monitors[k]) for k in a.monitors)
    reports.append(PropertyReport("determinism", 2, 0.0, 0.0, bool(same)))
    return reports


SUITES = {
    "structural": structural_suite,
    "monotonicity": monotonicity_suite,
    "passivity": passivity_suite,
    "integrator": integrator_suite,
}


def run_suites(problem: Problem, names=None, seed=0) -> dict:
    """Run the named suites with per-suite generators spawned from ``seed``."""
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suites {unknown}; available: {list(SUITES)}")
    children = np.random.SeedSequence(seed).spawn(len(SUITES))
    seeds = dict(zip(SUITES, children))
    return {n: SUITES[n](problem, np.random.default_rng(seeds[n])) for n in names}
