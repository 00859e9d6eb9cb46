"""Linear-quadratic optimal control on a time grid and its KKT system.

Problem::

    min  J(x, u) = dt * sum_{k=0..N} l_x(x_k) + dt * sum_{k=1..N} (alpha/2)|u_k|^2
    s.t. C(x, u) = (f, x0),   lower <= u_k <= upper.

Multipliers ``lambda`` live on intervals (interval ``k`` is sampled at its
right endpoint, node ``k``) and ``lambda0`` in ``R^n``.  The KKT point
satisfies::

    grad J(x, u) + C^*(lambda, lambda0) + (0, mu) = 0
    C(x, u) = (f, x0)
    u = P_F(u + mu)                       (mu in the normal cone of F at u)

and in particular ``u = P_F(B^T lambda / alpha)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discrete_ops import LinearOp, SystemMatrices, build_C, build_C_star
from .errors import ConvergenceError, ShapeError, SolverError, UnsupportedError
from .monotone import BoxSet, MonotoneMap, project_box
from .timegrid import GridFunction, Layout, TimeGrid


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``l_x(x) + (alpha/2)|u|^2``.

    ``kind`` selects ``l_x``:

    * ``"identity"``: ``1/2 |x|^2``
    * ``"output"``: ``1/2 |C_out x|^2``
    * ``"custom"``: user-supplied ``value`` and ``grad``.  Both receive an
      array of shape ``(samples, n)`` and return per-row values of shape
      ``(samples,)`` and gradients of shape ``(samples, n)``.
    """

    alpha: float
    kind: str = "identity"
    C_out: np.ndarray | None = None
    value: Callable | None = field(default=None, repr=False)
    grad: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ShapeError(f"alpha must be positive, got {self.alpha}")
        if self.kind not in ("identity", "output", "custom"):
            raise ShapeError(f"unknown state cost kind {self.kind!r}")
        if self.kind == "output":
            if self.C_out is None:
                raise ShapeError("output cost needs C_out")
            object.__setattr__(self, "C_out", np.atleast_2d(np.asarray(self.C_out, dtype=float)))
        if self.kind == "custom" and (self.value is None or self.grad is None):
            raise ShapeError("custom cost needs both value and grad")

    @property
    def is_quadratic(self) -> bool:
        return self.kind != "custom"

    def hessian(self, n: int) -> np.ndarray:
        """``Q`` with ``grad l_x(x) = Q x`` for the quadratic kinds."""
        if self.kind == "identity":
            return np.eye(n)
        if self.kind == "output":
            if self.C_out.shape[1] != n:
                raise ShapeError(f"C_out has {self.C_out.shape[1]} columns, state dim is {n}")
            return self.C_out.T @ self.C_out
        raise UnsupportedError("custom state costs have no constant Hessian")

    def ell_x(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return 0.5 * np.sum(X * X, axis=1)
        if self.kind == "output":
            Y = X @ self.C_out.T
            return 0.5 * np.sum(Y * Y, axis=1)
        return np.asarray(self.value(X), dtype=float)

    def grad_ell_x(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return X.copy()
        if self.kind == "output":
            return X @ (self.C_out.T @ self.C_out)
        return np.asarray(self.grad(X), dtype=float).reshape(X.shape)

    def check_convex(self, n, rng, samples=1000, radius=10.0) -> float:
        """Worst midpoint-convexity slack of ``l_x`` over random pairs."""
        a = rng.uniform(-radius, radius, (samples, n))
        b = rng.uniform(-radius, radius, (samples, n))
        slack = 0.5 * (self.ell_x(a) + self.ell_x(b)) - self.ell_x(0.5 * (a + b))
        return float(slack.min())


@dataclass(frozen=True)
class OcpSpec:
    sys: SystemMatrices
    grid: TimeGrid
    x0: np.ndarray
    cost: CostSpec
    f: GridFunction | None = None
    box: BoxSet | None = None
    unweighted_adjoint: bool = False  # debug only: breaks adjointness on purpose

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.size != self.sys.n:
            raise ShapeError(f"x0 has {x0.size} entries, state dim is {self.sys.n}")
        object.__setattr__(self, "x0", x0)
        f = self.f
        if f is None:
            f = GridFunction.zeros(self.grid, Layout.INTERVALS, self.sys.n)
        if f.layout is not Layout.INTERVALS or f.dim != self.sys.n or f.grid != self.grid:
            raise ShapeError("forcing f must be an interval function of state dimension")
        object.__setattr__(self, "f", f)
        if self.box is not None:
            if self.box.m != self.sys.m:
                raise ShapeError(f"box has dim {self.box.m}, control dim is {self.sys.m}")
            if not self.box.zero_interior:
                raise ShapeError("0 must lie in the interior of the control box")
        if self.cost.kind == "output":
            self.cost.hessian(self.sys.n)

    @property
    def n(self) -> int:
        return self.sys.n

    @property
    def m(self) -> int:
        return self.sys.m

    @property
    def alpha(self) -> float:
        return self.cost.alpha

    @property
    def nx(self) -> int:
        return (self.grid.N + 1) * self.n

    @property
    def nu(self) -> int:
        return self.grid.N * self.m

    @property
    def nl(self) -> int:
        return self.grid.N * self.n + self.n

    @cached_property
    def C(self) -> LinearOp:
        return build_C(self.sys, self.grid)

    @cached_property
    def C_star(self) -> LinearOp:
        return build_C_star(self.C, weighted=not self.unweighted_adjoint)

    @cached_property
    def blocks(self) -> "ConstraintBlocks":
        return ConstraintBlocks.from_spec(self)

    @property
    def data(self) -> np.ndarray:
        """Right-hand side ``(f, x0)`` in residual coordinates."""
        return np.concatenate([self.f.data, self.x0])

    def with_box(self, box: BoxSet | None) -> OcpSpec:
        return OcpSpec(self.sys, self.grid, self.x0, self.cost, self.f, box, self.unweighted_adjoint)


@dataclass(frozen=True)
class ConstraintBlocks:
    """Column blocks of ``C`` and row blocks of ``C^*`` as plain CSR matrices."""

    Cx: sp.csr_matrix
    Cu: sp.csr_matrix
    Cx_star: sp.csr_matrix
    Cu_star: sp.csr_matrix
    wx: np.ndarray
    wu: np.ndarray
    wl: np.ndarray

    @classmethod
    def from_spec(cls, spec: OcpSpec):
        C, Cs, nx = spec.C.matrix, spec.C_star.matrix, spec.nx
        return cls(
            C[:, :nx].tocsr(), C[:, nx:].tocsr(), Cs[:nx, :].tocsr(), Cs[nx:, :].tocsr(),
            spec.C.in_weights[:nx], spec.C.in_weights[nx:], spec.C.out_weights,
        )


def grad_x_flat(spec: OcpSpec, x: np.ndarray) -> np.ndarray:
    return spec.cost.grad_ell_x(x.reshape(-1, spec.n)).ravel()


def grad_J(spec: OcpSpec, x: GridFunction, u: GridFunction):
    """L2 gradient of the discrete cost.

    The ``dt`` in the cost cancels against the ``dt`` in the inner product,
    leaving ``(grad l_x(x_k), alpha u_k)`` samplewise.
    """
    if x.layout is not Layout.NODES or x.dim != spec.n:
        raise ShapeError("x must be a node function of state dimension")
    if u.layout is not Layout.INTERVALS or u.dim != spec.m:
        raise ShapeError("u must be an interval function of control dimension")
    return x.with_data(grad_x_flat(spec, x.data)), u.with_data(spec.alpha * u.data)


def cost_value(spec: OcpSpec, x, u) -> float:
    xd = x.data if isinstance(x, GridFunction) else np.asarray(x, dtype=float)
    ud = u.data if isinstance(u, GridFunction) else np.asarray(u, dtype=float)
    dt = spec.grid.dt
    return float(dt * np.sum(spec.cost.ell_x(xd.reshape(-1, spec.n))) + 0.5 * spec.alpha * dt * np.dot(ud, ud))


def assemble_M_opt(spec: OcpSpec) -> MonotoneMap:
    """The KKT operator without data.

    Without a box: ``w = (x, u, lambda, lambda0) -> (grad J + C^* p, -C z)``,
    affine for quadratic costs.  With a box the control is eliminated by
    ``u = P_F(B^T lambda / alpha)`` and ``w = (x, lambda, lambda0)``.
    """
    b = spec.blocks
    nx, nu = spec.nx, spec.nu
    if spec.box is None:
        weights = np.concatenate([b.wx, b.wu, b.wl])
        if spec.cost.is_quadratic:
            Q = spec.cost.hessian(spec.n)
            H = sp.block_diag([sp.kron(sp.identity(spec.grid.N + 1), Q), spec.alpha * sp.identity(nu)])
            L = sp.bmat([[H, spec.C_star.matrix], [-spec.C.matrix, None]]).tocsr()
            return MonotoneMap.affine(L, None, weights, "M_opt")

        def ev(w):
            x, u, p = w[:nx], w[nx:nx + nu], w[nx + nu:]
            z = w[:nx + nu]
            top = np.concatenate([grad_x_flat(spec, x), spec.alpha * u]) + spec.C_star.matrix @ p
            return np.concatenate([top, -(spec.C.matrix @ z)])

        return MonotoneMap(weights.size, ev, "M_opt", weights)

    weights = np.concatenate([b.wx, b.wl])

    def ev_c(w):
        x, p = w[:nx], w[nx:]
        u = reduced_control(spec, p)
        return np.concatenate([grad_x_flat(spec, x) + b.Cx_star @ p, -(b.Cx @ x) - b.Cu @ u])

    return MonotoneMap(weights.size, ev_c, "M_opt(reduced)", weights)


def reduced_control(spec: OcpSpec, p: np.ndarray) -> np.ndarray:
    """``P_F(B^T lambda_k / alpha)`` per interval, from residual coordinates ``p``."""
    lam = p[: spec.grid.N * spec.n].reshape(-1, spec.n)
    v = (lam @ spec.sys.B) / spec.alpha
    if spec.box is not None:
        v = project_box(v, spec.box)
    return v.ravel()


@dataclass
class KktPoint:
    x_star: GridFunction
    u_star: GridFunction
    lam: GridFunction  # interval layout, right-endpoint samples
    lam0: np.ndarray
    mu: GridFunction
    iterations: int = 0
    residual: float = float("nan")

    @property
    def lambda_nodes(self) -> GridFunction:
        """``lambda`` on nodes with ``lambda(0) := lambda0``."""
        data = np.concatenate([self.lam0, self.lam.data])
        return GridFunction(self.lam.grid, Layout.NODES, self.lam.dim, data)

    def flat(self, constrained: bool = False) -> np.ndarray:
        """State of the matching open-loop flow."""
        parts = [self.x_star.data] + ([] if constrained else [self.u_star.data])
        return np.concatenate(parts + [self.lam.data, self.lam0])

    def active_set_fraction(self, box: BoxSet | None) -> float:
        if box is None:
            return 0.0
        u = self.u_star.values
        active = np.isclose(u, box.lower, rtol=0, atol=1e-9) | np.isclose(u, box.upper, rtol=0, atol=1e-9)
        return float(active.mean())

    def save(self, directory, box: BoxSet | None = None) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        self.x_star.to_csv(out / "x_star.csv")
        self.u_star.to_csv(out / "u_star.csv")
        self.lam.to_csv(out / "lambda.csv")
        self.mu.to_csv(out / "mu.csv")
        with open(out / "lambda0.csv", "w") as fh:
            fh.write(",".join(f"component_{i}" for i in range(self.lam0.size)) + "\n")
            fh.write(",".join(repr(float(v)) for v in self.lam0) + "\n")
        summary = {
            "residual": self.residual,
            "iterations": self.iterations,
            "active_set_fraction": self.active_set_fraction(box),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def make_kkt_point(spec: OcpSpec, x, u, p, iterations=0) -> KktPoint:
    g = spec.grid
    Nn = g.N * spec.n
    lam = p[:Nn]
    mu = (lam.reshape(-1, spec.n) @ spec.sys.B).ravel() - spec.alpha * u
    pt = KktPoint(
        GridFunction(g, Layout.NODES, spec.n, x),
        GridFunction(g, Layout.INTERVALS, spec.m, u),
        GridFunction(g, Layout.INTERVALS, spec.n, lam),
        np.array(p[Nn:], dtype=float),
        GridFunction(g, Layout.INTERVALS, spec.m, mu),
        iterations,
    )
    pt.residual = kkt_residual(spec, pt)
    return pt


def kkt_residual(spec: OcpSpec, p: KktPoint) -> float:
    """Stacked norm of the adjoint, state and complementarity residuals."""
    b = spec.blocks
    z = np.concatenate([p.x_star.data, p.u_star.data])
    pp = np.concatenate([p.lam.data, p.lam0])
    adj = np.concatenate([grad_x_flat(spec, p.x_star.data), spec.alpha * p.u_star.data])
    adj += spec.C_star.matrix @ pp
    adj[spec.nx:] += p.mu.data
    state = spec.data - spec.C.matrix @ z
    u, mu = p.u_star.data, p.mu.data
    comp = u - (u + mu if spec.box is None else project_box(u + mu, spec.box))
    total = (
        np.dot(np.concatenate([b.wx, b.wu]) * adj, adj)
        + np.dot(b.wl * state, state)
        + np.dot(b.wu * comp, comp)
    )
    return math.sqrt(total)


def solve_kkt(spec: OcpSpec, tol=1e-10, max_iter=1_000_000, u_init=None) -> KktPoint:
    """Independent reference solution of the optimality system.

    Without a box the linear KKT system is solved directly.  With a box a
    projected-gradient method runs on the reduced problem ``u -> J(x(u), u)``
    until ``|u - P_F(u - grad)| <= tol``.
    """
    if not spec.cost.is_quadratic:
        raise UnsupportedError("the reference solver handles quadratic state costs only")
    if spec.box is None:
        return _solve_linear_kkt(spec)
    return _solve_projected_gradient(spec, tol, max_iter, u_init)


def _solve_linear_kkt(spec: OcpSpec) -> KktPoint:
    b = spec.blocks
    nz = spec.nx + spec.nu
    Q = spec.cost.hessian(spec.n)
    H = sp.block_diag([sp.kron(sp.identity(spec.grid.N + 1), Q), spec.alpha * sp.identity(spec.nu)])
    WH = sp.diags(np.concatenate([b.wx, b.wu])) @ H
    C = spec.C.matrix
    K = sp.bmat([[WH, C.T], [C, None]]).tocsc()
    rhs = np.concatenate([np.zeros(nz), spec.data])
    try:
        sol = spla.spsolve(K, rhs)
    except RuntimeError as exc:
        raise SolverError(f"KKT solve failed: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SolverError("KKT solve produced non-finite values")
    z, q = sol[:nz], sol[nz:]
    p = q / b.wl
    return make_kkt_point(spec, z[:spec.nx], z[spec.nx:], p)


def _solve_projected_gradient(spec: OcpSpec, tol, max_iter, u_init) -> KktPoint:
    b = spec.blocks
    box, alpha = spec.box, spec.alpha
    lu = spla.splu(b.Cx.tocsc())
    data = spec.data
    wu = b.wu

    def evaluate(u):
        x = lu.solve(data - b.Cu @ u)
        gx = b.wx * grad_x_flat(spec, x)
        q = lu.solve(-gx, trans="T")
        g = alpha * u + (b.Cu.T @ q) / wu
        return cost_value(spec, x, u), g, x, q

    def wnorm(v):
        return math.sqrt(np.dot(wu * v, v))

    u = np.zeros(spec.nu) if u_init is None else project_box(np.asarray(u_init, dtype=float), box)
    val, g, x, q = evaluate(u)
    step = 1.0 / alpha
    res = wnorm(u - project_box(u - g, box))
    it = 0
    while res > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"projected gradient stopped at residual {res:.3e} after {it} iterations", res, it
            )
        s = step
        for _ in range(60):
            u_new = project_box(u - s * g, box)
            val_new, g_new, x_new, q_new = evaluate(u_new)
            decrease = np.dot(wu * g, u_new - u)
            if val_new <= val + 1e-4 * decrease + 1e-15 * abs(val):
                break
            s *= 0.5
        su, sg = u_new - u, g_new - g
        curv = np.dot(wu * su, sg)
        step = np.dot(wu * su, su) / curv if curv > 0 else 1.0 / alpha
        step = min(max(step, 1e-8), 1e8)
        u, val, g, x, q = u_new, val_new, g_new, x_new, q_new
        res = wnorm(u - project_box(u - g, box))
        it += 1
    return make_kkt_point(spec, x, u, q / b.wl, it)
