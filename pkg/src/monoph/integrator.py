"""Fixed-step time integration of monotone flows with monitor recording."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError, UnsupportedError, UsageError
from .flows import Flow
from .monotone import MonotoneMap, Resolvent

METHODS = ("rk4", "implicit_euler")


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    dt_int: float = 1e-3
    T: float = 1.0
    record_every: int = 1
    stop_tol: float | None = None
    allow_unstable: bool = False
    local_error: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {METHODS}, got {self.method!r}")
        if not (self.dt_int > 0 and math.isfinite(self.dt_int)):
            raise UsageError(f"dt_int must be positive, got {self.dt_int}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise UsageError(f"T must be positive, got {self.T}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise UsageError(f"record_every must be a positive integer, got {self.record_every}")
        if self.stop_tol is not None and self.stop_tol < 0:
            raise UsageError("stop_tol must be nonnegative")

    @property
    def steps(self) -> int:
        return int(math.ceil(self.T / self.dt_int - 1e-9))


@dataclass
class Trajectory:
    """Recorded states and monitor channels.

    ``monitors`` maps channel names to arrays whose first axis matches
    ``times``; ``inputs`` holds the input applied at each record (open
    loops only).
    """

    times: np.ndarray
    states: np.ndarray = field(repr=False)
    monitors: dict = field(default_factory=dict, repr=False)
    inputs: np.ndarray | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)
    stopped_early: bool = False
    steps: int = 0

    def channel(self, name) -> np.ndarray:
        if name not in self.monitors:
            raise KeyError(f"trajectory has no channel {name!r}; available: {sorted(self.monitors)}")
        return self.monitors[name]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)


class _Field:
    """Uniform view over the accepted vector-field types."""

    def __init__(self, target, dim):
        self.flow = target if isinstance(target, Flow) else None
        if isinstance(target, Flow):
            self.f = target.rhs
            self.weights = target.weights
            self.affine = target.affine()
        elif isinstance(target, MonotoneMap):
            self.f = lambda v, t: -target(v)
            self.weights = target.weights
            self.affine = target if target.is_affine else None
        elif callable(target):
            self.f = lambda v, t: np.asarray(target(t, v), dtype=float)
            self.weights = np.ones(dim)
            self.affine = None
        else:
            raise UsageError(f"cannot integrate object of type {type(target).__name__}")
        if self.weights.size != dim:
            raise ShapeError(f"initial state has {dim} entries, field expects {self.weights.size}")
        self._resolvents = {}

    def norm(self, v) -> float:
        return math.sqrt(float(np.dot(self.weights * v, v)))

    def rk4(self, v, t, h, k1=None):
        f = self.f
        k1 = f(v, t) if k1 is None else k1
        k2 = f(v + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(v + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(v + h * k3, t + h)
        return v + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def implicit_euler(self, v, t, h):
        if h not in self._resolvents:
            self._resolvents[h] = Resolvent(self.affine, h)
        return self._resolvents[h](v)


def integrate(rhs, v0, cfg: IntegratorConfig, reference=None, record_inputs=None) -> Trajectory:
    """Integrate ``v' = F(v, t)`` with fixed steps.

    Parameters
    ----------
    rhs : Flow, MonotoneMap or callable
        A :class:`~monoph.flows.Flow`, a monotone map ``M`` (integrated as
        ``v' = -M(v)``) or a plain callable ``F(t, v)``.
    v0 : array_like
        Initial state.
    cfg : IntegratorConfig
    reference : array_like, optional
        Steady state for the ``shifted_norm`` channel.
    record_inputs : bool, optional
        Record the flow input at each record.  Defaults to True for flows
        that have an input.

    Returns
    -------
    Trajectory
        Always contains the initial and the final state.  The
        ``local_error`` channel is a Richardson estimate (one step against
        two half steps) of the error committed by the step leaving each
        record.
    """
    v = np.array(v0, dtype=float).ravel()
    fld = _Field(rhs, v.size)
    if cfg.method == "implicit_euler" and fld.affine is None:
        raise UnsupportedError("implicit Euler needs an affine flow with constant input")
    if not np.all(np.isfinite(v)):
        raise DivergenceError("initial state is not finite", 0)
    if cfg.method == "rk4" and not cfg.allow_unstable:
        cap = spectral_step_bound(fld.f, v)
        if cfg.dt_int > cap:
            raise UsageError(
                f"dt_int={cfg.dt_int:g} exceeds the RK4 stability estimate {cap:.3g}; "
                "reduce it or set allow_unstable"
            )
    ref = None if reference is None else np.asarray(reference, dtype=float)
    flow = fld.flow
    if record_inputs is None:
        record_inputs = flow is not None and flow.B_in is not None
    order = 4 if cfg.method == "rk4" else 1

    times, states, records, inputs, local = [], [], [], [], []
    h = cfg.dt_int
    n_steps = cfg.steps
    t = 0.0
    stopped = False

    def step(v, t, h, k1=None):
        # blow-up is reported as DivergenceError below, not as float warnings
        with np.errstate(over="ignore", invalid="ignore"):
            if cfg.method == "rk4":
                return fld.rk4(v, t, h, k1)
            return fld.implicit_euler(v, t, h)

    def record(v, t, err):
        times.append(t)
        states.append(v.copy())
        local.append(err)
        if flow is not None:
            records.append(flow.monitors(v, ref))
            if record_inputs:
                inputs.append(np.array(flow.input(t), dtype=float))
        else:
            mon = {"state_norm": fld.norm(v)}
            if ref is not None:
                mon["shifted_norm"] = fld.norm(v - ref)
            records.append(mon)

    k = 0
    while True:
        at_record = k % cfg.record_every == 0 or k == n_steps
        k1 = fld.f(v, t) if cfg.method == "rk4" or cfg.stop_tol is not None else None
        done = k == n_steps
        if cfg.stop_tol is not None and fld.norm(k1) <= cfg.stop_tol:
            done, stopped = True, k < n_steps
        if done:
            record(v, t, 0.0)
            break
        hk = cfg.T - k * h if k == n_steps - 1 else h
        v_new = step(v, t, hk, k1)
        if not np.all(np.isfinite(v_new)):
            raise DivergenceError(f"non-finite state after step {k + 1} (t={t + hk:.6g})", k + 1)
        if at_record:
            err = 0.0
            if cfg.local_error:
                half = step(step(v, t, 0.5 * hk), t + 0.5 * hk, 0.5 * hk)
                err = fld.norm(v_new - half) * (2.0 ** order) / (2.0 ** order - 1.0)
            record(v, t, err)
        v = v_new
        k += 1
        t = cfg.T if k == n_steps else k * h

    mon = _stack_monitors(records)
    mon["local_error"] = np.asarray(local)
    return Trajectory(
        np.asarray(times),
        np.asarray(states),
        mon,
        np.asarray(inputs) if record_inputs else None,
        fld.weights,
        stopped,
        k,
    )


def _stack_monitors(records) -> dict:
    out = {}
    for key in records[0]:
        out[key] = np.asarray([r[key] for r in records], dtype=float)
    return out


def estimate_decay_rate(traj: Trajectory, channel: str, window) -> float:
    """Least-squares slope of ``log(channel)`` over ``window = (t_a, t_b)``."""
    t = np.asarray(traj.times)
    y = np.asarray(traj.channel(channel), dtype=float)
    t_a, t_b = window
    sel = (t >= t_a) & (t <= t_b)
    if sel.sum() < 2:
        raise UsageError(f"window {window} holds fewer than two records")
    if np.any(~(y[sel] > 0)):
        raise ValueError(f"channel {channel!r} must be positive on the fit window")
    slope, _ = np.polyfit(t[sel], np.log(y[sel]), 1)
    return float(slope)


def spectral_step_bound(rhs, v_probe, iterations=20, eps=1e-6, seed=0) -> float:
    """Suggested RK4 step ``2.5 / |J|`` from a power iteration on the
    finite-difference Jacobian of ``rhs`` at ``v_probe``.

    ``rhs`` may be a :class:`Flow`, a callable ``F(v, t)`` or a callable
    ``F(v)``.  A vanishing Jacobian gives ``1e6``.
    """
    if isinstance(rhs, Flow):
        f = rhs.rhs
    elif isinstance(rhs, MonotoneMap):
        f = lambda v, t: -rhs(v)  # noqa: E731
    else:
        f = _adapt(rhs)
    v = np.asarray(v_probe, dtype=float).ravel()
    f0 = f(v, 0.0)
    d = np.random.default_rng(seed).standard_normal(v.size)
    d /= np.linalg.norm(d)
    scale = eps * max(1.0, np.linalg.norm(v))
    est = 0.0
    for _ in range(iterations):
        jd = (f(v + scale * d, 0.0) - f0) / scale
        nrm = np.linalg.norm(jd)
        if not math.isfinite(nrm) or nrm == 0.0:
            break
        # iterating on J tracks the dominant eigenvalue modulus; oscillating
        # complex pairs make single ratios noisy, so keep the largest
        est = max(est, nrm)
        d = jd / nrm
    if est <= 2.5e-6:
        return 1e6
    return 2.5 / est


def _adapt(fn):
    def f(v, t):
        try:
            return np.asarray(fn(v, t), dtype=float)
        except TypeError:
            return np.asarray(fn(v), dtype=float)

    return f


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Columns ``t, state_norm, shifted_norm, plant_norm, dissipation_rate,
    u_p_0.., feasibility_margin`` in 15 significant digits; absent channels
    are written as ``nan``."""
    n = len(traj.times)
    nan = np.full(n, np.nan)
    up = traj.monitors.get("u_p")
    up = np.zeros((n, 0)) if up is None else np.asarray(up).reshape(n, -1)
    cols = ["t", "state_norm", "shifted_norm", "plant_norm", "dissipation_rate"]
    header = cols + [f"u_p_{i}" for i in range(up.shape[1])] + ["feasibility_margin"]
    data = [traj.times] + [traj.monitors.get(c, nan) for c in cols[1:]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n):
            row = [data[j][i] for j in range(len(data))] + list(up[i]) + [traj.monitors.get("feasibility_margin", nan)[i]]
            w.writerow([f"{float(x):.15g}" for x in row])
