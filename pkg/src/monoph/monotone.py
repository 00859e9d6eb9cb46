"""Monotone maps, box projections, resolvents and their property checks.

Set-valued operators never appear directly.  Every flow integrates a
single-valued selection, and constraint sets enter only through the box
projection ``P_F`` (the proximal map of the indicator of ``F``) and its
Moreau complement (the proximal map of the support function).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discrete_ops import LinearOp
from .errors import ShapeError, SolverError, UsageError
from .timegrid import GridFunction


@dataclass(frozen=True)
class BoxSet:
    """Componentwise bounds ``lower < u < upper`` in ``R^m``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ShapeError("box bounds differ in shape")
        if not np.all(lo < hi):
            raise ShapeError("box needs lower < upper in every component")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, bound, m=1):
        bound = np.atleast_1d(np.asarray(bound, dtype=float))
        if bound.size == 1:
            bound = np.full(m, bound[0])
        return cls(-bound, bound)

    @property
    def m(self) -> int:
        return self.lower.size

    @property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.lower, -self.upper))

    @property
    def zero_interior(self) -> bool:
        return bool(np.all(self.lower < 0) and np.all(self.upper > 0))

    def margin(self, v) -> float:
        """Smallest distance to a face; negative when ``v`` lies outside."""
        v = np.asarray(v, dtype=float).reshape(-1, self.m)
        return float(np.min(np.minimum(self.upper - v, v - self.lower)))


def _box_clip(v: np.ndarray, box: BoxSet) -> np.ndarray:
    if v.size % box.m:
        raise ShapeError(f"{v.size} entries cannot be split into blocks of {box.m}")
    return np.clip(v.reshape(-1, box.m), box.lower, box.upper).reshape(v.shape)


def project_box(v, box: BoxSet):
    """Pointwise clamp onto the box; grid functions are clamped per sample."""
    if isinstance(v, GridFunction):
        if v.dim != box.m:
            raise ShapeError(f"grid function dim {v.dim} does not match box dim {box.m}")
        return v.with_data(_box_clip(v.data, box))
    arr = np.asarray(v, dtype=float)
    return _box_clip(arr, box)


def moreau_complement(v, box: BoxSet):
    """``v - P_F(v)``, the proximal map of the support function of ``F``."""
    if isinstance(v, GridFunction):
        return v - project_box(v, box)
    arr = np.asarray(v, dtype=float)
    return arr - project_box(arr, box)


@dataclass(frozen=True)
class MonotoneMap:
    """A single-valued map ``v -> M(v)`` on a weighted coordinate space.

    Affine maps additionally carry ``linear`` and ``offset`` so that
    ``M(v) = linear @ v + offset``; resolvents are only available then.
    """

    dim: int
    eval: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    label: str = "M"
    weights: np.ndarray | None = field(default=None, repr=False)
    linear: sp.spmatrix | None = field(default=None, repr=False)
    offset: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        w = np.ones(self.dim) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.size != self.dim or np.any(w <= 0):
            raise ShapeError("weights must be positive with one entry per coordinate")
        object.__setattr__(self, "weights", w)

    def __call__(self, v) -> np.ndarray:
        return self.eval(np.asarray(v, dtype=float))

    @property
    def is_affine(self) -> bool:
        return self.linear is not None

    def inner(self, a, b) -> float:
        return float(np.dot(self.weights * a, b))

    @classmethod
    def affine(cls, linear, offset=None, weights=None, label="M"):
        linear = sp.csr_matrix(linear.matrix if isinstance(linear, LinearOp) else linear)
        dim = linear.shape[0]
        offset = np.zeros(dim) if offset is None else np.asarray(offset, dtype=float)

        def ev(v):
            return linear @ v + offset

        return cls(dim, ev, label, weights, linear, offset)


def build_prox_coupling(F1: LinearOp, F2: LinearOp, box: BoxSet, c: float, *, B1: LinearOp, B2: LinearOp) -> MonotoneMap:
    """Saturating interconnection of two systems through a box projection.

    With outputs ``y_i = B_i^* x_i`` and ``e = P_F(F1 y1) - P_F(F2 y2)`` the
    coupling term is ``K(x1, x2) = (c B1 F1^* e, -c B2 F2^* e)``.  Because
    ``P_F`` is firmly nonexpansive, ``<K(v), v> >= c |e|^2 >= 0``.
    """
    if c <= 0:
        raise UsageError("coupling gain c must be positive")
    if F1.rows != F2.rows or F1.rows % box.m:
        raise ShapeError("F1 and F2 must map into a common space of box-sized blocks")
    if F1.cols != B1.cols or F2.cols != B2.cols:
        raise ShapeError("F_i must act on the output space of system i")
    n1 = B1.rows
    B1s, B2s, F1s, F2s = B1.adjoint(), B2.adjoint(), F1.adjoint(), F2.adjoint()
    w = np.concatenate([B1.out_weights, B2.out_weights])

    def ev(v):
        x1, x2 = v[:n1], v[n1:]
        e = project_box(F1.matrix @ (B1s.matrix @ x1), box) - project_box(F2.matrix @ (B2s.matrix @ x2), box)
        return np.concatenate([c * (B1.matrix @ (F1s.matrix @ e)), -c * (B2.matrix @ (F2s.matrix @ e))])

    return MonotoneMap(n1 + B2.rows, ev, "K_prox", w)


def prox_coupling_gap(F1, F2, box, B1, B2, v) -> np.ndarray:
    """The saturated mismatch ``e`` used by :func:`build_prox_coupling`."""
    n1 = B1.rows
    return project_box(F1.matrix @ (B1.adjoint().matrix @ v[:n1]), box) - project_box(
        F2.matrix @ (B2.adjoint().matrix @ v[n1:]), box
    )


class Resolvent:
    """Cached ``(I + h L)^{-1}`` for an affine monotone map ``L v + b``."""

    def __init__(self, M: MonotoneMap, h: float):
        if not M.is_affine:
            raise UsageError(f"{M.label} has no affine structure; resolvent unavailable")
        if h <= 0:
            raise UsageError("resolvent step h must be positive")
        self.M, self.h = M, float(h)
        mat = (sp.identity(M.dim, format="csc") + self.h * sp.csc_matrix(M.linear)).tocsc()
        try:
            self._lu = spla.splu(mat)
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"factorization of I + hL failed: {exc}") from exc

    def __call__(self, v, offset=None) -> np.ndarray:
        b = self.M.offset if offset is None else offset
        w = self._lu.solve(np.asarray(v, dtype=float) - self.h * b)
        if not np.all(np.isfinite(w)):
            raise SolverError("resolvent solve produced non-finite values")
        return w


def resolvent_step(M: MonotoneMap, v, h: float) -> np.ndarray:
    """One implicit-Euler step of ``v' = -M(v)``."""
    return Resolvent(M, h)(v)


# ---------------------------------------------------------------------------
# property checks


@dataclass
class PropertyReport:
    label: str
    samples: int
    worst_slack: float
    tolerance: float
    passed: bool
    detail: str = ""

    def __post_init__(self):
        self.samples = int(self.samples)
        self.worst_slack = float(self.worst_slack)
        self.tolerance = float(self.tolerance)
        self.passed = bool(self.passed)

    def to_dict(self):
        return asdict(self)

    def to_text(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"[{verdict}] {self.label}: samples={self.samples} "
            f"worst_slack={self.worst_slack:.3e} tol={self.tolerance:.1e}"
            + (f" ({self.detail})" if self.detail else "")
        )

    @staticmethod
    def to_json(reports) -> str:
        return json.dumps([r.to_dict() for r in reports], indent=2)


def sample_ball(rng: np.random.Generator, weights: np.ndarray, radius: float, size: int) -> np.ndarray:
    """Points drawn from the ball of given radius in the weighted norm."""
    d = weights.size
    g = rng.standard_normal((size, d))
    g /= np.sqrt(np.sum(weights * g * g, axis=1))[:, None]
    r = radius * rng.uniform(0.0, 1.0, size) ** (1.0 / min(d, 8))
    return g * r[:, None]


def check_monotone(M: MonotoneMap, rng, pairs=1000, radius=10.0, tol=1e-10, relative=False, center=None) -> PropertyReport:
    """Sampled monotonicity certificate.

    Each pair contributes ``<M(v1) - M(v2), v1 - v2>`` divided by the
    Cauchy-Schwarz scale ``|M(v1) - M(v2)| |v1 - v2|``.  With
    ``relative=True`` the second point is pinned to ``center`` (default 0),
    which checks monotonicity relative to that point only.
    """
    c = np.zeros(M.dim) if center is None else np.asarray(center, dtype=float)
    mc = M(c)
    worst = math.inf
    pts = sample_ball(rng, M.weights, radius, 2 * pairs)
    for i in range(pairs):
        v1 = c + pts[2 * i]
        if relative:
            v2, m2 = c, mc
        else:
            v2 = c + pts[2 * i + 1]
            m2 = M(v2)
        dm, dv = M(v1) - m2, v1 - v2
        val = M.inner(dm, dv)
        scale = math.sqrt(M.inner(dm, dm) * M.inner(dv, dv))
        worst = min(worst, val / scale if scale > 0 else 0.0)
    kind = "relative monotonicity" if relative else "monotonicity"
    return PropertyReport(f"{kind}: {M.label}", pairs, worst, tol, worst >= -tol)


def check_firmly_nonexpansive(T: Callable, weights, rng, pairs=1000, radius=10.0, tol=1e-12, label="T") -> PropertyReport:
    """Worst value of ``<Tx - Ty, x - y> - |Tx - Ty|^2`` over sampled pairs,
    normalised by ``|x - y|^2``."""
    weights = np.asarray(weights, dtype=float)
    pts = sample_ball(rng, weights, radius, 2 * pairs)
    worst = math.inf
    for i in range(pairs):
        x, y = pts[2 * i], pts[2 * i + 1]
        dt_, dv = T(x) - T(y), x - y
        val = np.dot(weights * dt_, dv) - np.dot(weights * dt_, dt_)
        worst = min(worst, val / max(np.dot(weights * dv, dv), 1e-300))
    return PropertyReport(f"firm nonexpansiveness: {label}", pairs, worst, tol, worst >= -tol)


def _fd_tolerance(E, times, base_err):
    """Estimated error of the centered difference of a smooth sampled signal.

    Leading truncation term from third differences, plus the integrator's
    own per-step error propagated through the difference quotient.
    """
    h = np.diff(times)
    if not np.allclose(h, h[0], rtol=1e-9, atol=0.0):
        raise UsageError("finite-difference checks need equally spaced records")
    h = h[0]
    n = E.size
    tol = np.full(n, np.nan)
    for i in range(2, n - 2):
        third = abs(E[i + 2] - 2 * E[i + 1] + 2 * E[i - 1] - E[i - 2]) / (12.0 * h)
        tol[i] = third + base_err[i] / h
    return tol


@dataclass
class IdentityCheck:
    label: str
    samples: int
    worst_ratio: float
    max_error: float
    passed: bool

    def to_report(self) -> PropertyReport:
        return PropertyReport(self.label, self.samples, 1.0 - self.worst_ratio, 0.0, self.passed,
                              f"max mismatch {self.max_error:.3e}")


def check_dissipation_identity(traj, N: Callable, weights, reference=None, factor=10.0, label="dissipation") -> IdentityCheck:
    """Compare ``d/dt 1/2|v - s|^2`` along a trajectory with ``-<N(v) - N(s), v - s>``.

    ``N`` is the dissipative (non-skew) part of the governing map.  The
    derivative is a centered difference over consecutive records, so the
    trajectory must be recorded at every integrator step.
    """
    states = np.asarray(traj.states)
    times = np.asarray(traj.times)
    s = np.zeros(states.shape[1]) if reference is None else np.asarray(reference, dtype=float)
    ns = N(s)
    diff = states - s
    E = 0.5 * np.einsum("ij,ij->i", diff * weights, diff)
    local = np.asarray(traj.monitors.get("local_error", np.zeros(len(times))))
    dist = np.sqrt(2 * E)
    tol = _fd_tolerance(E, times, dist * local)
    worst, worst_err = -math.inf, 0.0
    ok = True
    count = 0
    for i in range(2, len(times) - 2):
        fd = (E[i + 1] - E[i - 1]) / (times[i + 1] - times[i - 1])
        pred = -float(np.dot(weights * (N(states[i]) - ns), diff[i]))
        err = abs(fd - pred)
        allowed = factor * tol[i] + 1e-12 * max(1.0, abs(pred))
        worst = max(worst, err / allowed)
        worst_err = max(worst_err, err)
        ok &= err <= allowed
        count += 1
    return IdentityCheck(label, count, worst, worst_err, bool(ok))


@dataclass
class PassivityReport:
    label: str
    samples: int
    max_violation: float
    tolerance_ratio: float
    identity_error: float
    passed: bool

    def to_report(self) -> PropertyReport:
        return PropertyReport(self.label, self.samples, 1.0 - max(self.tolerance_ratio, self.identity_error), 0.0,
                              self.passed, f"max violation {self.max_violation:.3e}")


def check_shifted_passivity(M: MonotoneMap, traj, steady, B_in: LinearOp, factor=10.0, label="shifted passivity") -> PassivityReport:
    """Passivity of ``v' = -M(v) + B_in u`` relative to a steady pair.

    For each interior record the centered difference of
    ``1/2 |v - v_bar|^2`` must not exceed the supplied power
    ``<y - y_bar, u - u_bar>`` with ``y = B_in^* v``, up to ``factor`` times
    the estimated finite-difference error.  The equality
    ``d/dt 1/2|v - v_bar|^2 = -<M(v) - M(v_bar), v - v_bar> + <y - y_bar, u - u_bar>``
    is checked along the way and its worst mismatch reported.
    """
    inputs = getattr(traj, "inputs", None)
    if inputs is None or len(inputs) == 0:
        raise UsageError("trajectory has no recorded inputs")
    v_bar, u_bar = (np.asarray(a, dtype=float) for a in steady)
    states = np.asarray(traj.states)
    times = np.asarray(traj.times)
    inputs = np.asarray(inputs)
    Bs = B_in.adjoint()
    y_bar = Bs.matrix @ v_bar
    m_bar = M(v_bar)
    w = M.weights
    diff = states - v_bar
    E = 0.5 * np.einsum("ij,ij->i", diff * w, diff)
    local = np.asarray(traj.monitors.get("local_error", np.zeros(len(times))))
    tol = _fd_tolerance(E, times, np.sqrt(2 * E) * local)
    worst_viol, worst_ratio, worst_id = -math.inf, -math.inf, 0.0
    count = 0
    for i in range(2, len(times) - 2):
        fd = (E[i + 1] - E[i - 1]) / (times[i + 1] - times[i - 1])
        du = inputs[i] - u_bar
        power = float(np.dot(B_in.in_weights * (Bs.matrix @ states[i] - y_bar), du))
        diss = float(np.dot(w * (M(states[i]) - m_bar), diff[i]))
        allowed = factor * tol[i] + 1e-12 * max(1.0, abs(power))
        viol = fd - power
        worst_viol = max(worst_viol, viol)
        worst_ratio = max(worst_ratio, viol / allowed)
        worst_id = max(worst_id, abs(fd - (power - diss)) / allowed)
        count += 1
    return PassivityReport(label, count, worst_viol, worst_ratio, worst_id, bool(worst_ratio <= 1.0 and worst_id <= 1.0))
