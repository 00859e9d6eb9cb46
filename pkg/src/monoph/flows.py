"""The four primal-dual vector fields and the plant models.

Every flow has the form ``v' = -M(v) + B_in u_in(t)`` with ``M`` a
(relatively) monotone map split as ``M = K + N``: ``K`` is a linear,
skew-adjoint block collecting the constraint operator and linear couplings,
``N`` holds cost gradients, plant dynamics and saturations.

Variants and their flat state layouts::

    open_u    [x | u | lambda | lambda0]
    open_c    [x | lambda | lambda0]              (u = P_F(B^T lambda / alpha))
    closed_u  [x_p | x | u | lambda | lambda0]
    closed_c  [x_p | x | lambda | lambda0]

Open loops take the data ``(f, x0)`` as their input; closed loops are
autonomous and the optimizer's initial value is driven by the plant.
"""

from __future__ import annotations

import enum
import importlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .discrete_ops import LinearOp, build_skew_coupling, dense_op
from .errors import ShapeError, UsageError
from .monotone import MonotoneMap, build_prox_coupling, project_box
from .ocp import OcpSpec, assemble_M_opt, reduced_control
from .timegrid import GridFunction, Layout, stack_inner

J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])


class Variant(enum.Enum):
    OPEN_U = "open_u"
    OPEN_C = "open_c"
    CLOSED_U = "closed_u"
    CLOSED_C = "closed_c"

    @property
    def closed(self) -> bool:
        return self in (Variant.CLOSED_U, Variant.CLOSED_C)

    @property
    def constrained(self) -> bool:
        return self in (Variant.OPEN_C, Variant.CLOSED_C)


# ---------------------------------------------------------------------------
# plants


@dataclass(frozen=True)
class PlantSpec:
    """Plant ``x_p' = -M_p(x_p) + B_p u_p`` with ``M_p(0) = 0``.

    ``linear`` is set when ``M_p(z) = linear @ z``.
    """

    dim: int
    M_p: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    B_p: np.ndarray = field(repr=False)
    label: str = "plant"
    linear: np.ndarray | None = field(default=None, repr=False)
    globally_monotone: bool = True

    def __post_init__(self):
        Bp = np.asarray(self.B_p, dtype=float)
        if Bp.ndim == 1:
            Bp = Bp[:, None]
        if Bp.shape[0] != self.dim:
            raise ShapeError(f"B_p has {Bp.shape[0]} rows, plant dim is {self.dim}")
        object.__setattr__(self, "B_p", Bp)
        at_zero = np.asarray(self.M_p(np.zeros(self.dim)), dtype=float)
        if at_zero.shape != (self.dim,):
            raise ShapeError(f"M_p must return {self.dim} entries, got shape {at_zero.shape}")
        if np.any(at_zero != 0.0):
            raise ShapeError("plant map must vanish at the origin")

    @property
    def m(self) -> int:
        return self.B_p.shape[1]

    def as_map(self) -> MonotoneMap:
        if self.linear is not None:
            return MonotoneMap.affine(self.linear, None, None, self.label)
        return MonotoneMap(self.dim, self.M_p, self.label)


def conserving_plant() -> PlantSpec:
    """``M_p(z) = J2 (1 + |z|^2) z`` with ``B_p = (0, 1)^T``.

    ``<M_p(z), z> = 0`` for every ``z``, but the map is not monotone
    between arbitrary pairs; it is monotone relative to the origin only.
    """

    def M_p(z):
        z = np.asarray(z, dtype=float)
        return (1.0 + z @ z) * (J2 @ z)

    return PlantSpec(2, M_p, np.array([[0.0], [1.0]]), "conserving2d", globally_monotone=False)


def linear_plant(R, B_p, label="linear") -> PlantSpec:
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape[0] != R.shape[1]:
        raise ShapeError(f"plant matrix must be square, got {R.shape}")
    sym_min = np.linalg.eigvalsh(0.5 * (R + R.T)).min()
    if sym_min < -1e-12 * max(1.0, np.abs(R).max()):
        raise ShapeError(f"plant matrix has an indefinite symmetric part (min eig {sym_min:.3e})")
    return PlantSpec(R.shape[0], lambda z: R @ z, B_p, label, R)


def custom_plant(target: str, B_p, dim: int) -> PlantSpec:
    """Load ``M_p`` from ``"package.module:callable"``."""
    mod_name, _, attr = target.partition(":")
    if not attr:
        raise UsageError(f"custom plant must be given as module:callable, got {target!r}")
    fn = getattr(importlib.import_module(mod_name), attr)
    return PlantSpec(dim, fn, B_p, target)


def plant_rhs(plant: PlantSpec, z, u_p) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    u_p = np.atleast_1d(np.asarray(u_p, dtype=float))
    if z.shape != (plant.dim,) or u_p.shape != (plant.m,):
        raise ShapeError("plant state or input has the wrong size")
    return -plant.M_p(z) + plant.B_p @ u_p


# ---------------------------------------------------------------------------
# state layouts


@dataclass(frozen=True)
class FlowLayout:
    variant: Variant
    spec: OcpSpec = field(repr=False)
    n_p: int = 0

    @property
    def sizes(self):
        s = self.spec
        out = []
        if self.variant.closed:
            out.append(("x_p", self.n_p))
        out.append(("x", s.nx))
        if not self.variant.constrained:
            out.append(("u", s.nu))
        out += [("lambda", s.grid.N * s.n), ("lambda0", s.n)]
        return out

    @property
    def slices(self) -> dict:
        out, start = {}, 0
        for name, size in self.sizes:
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def dim(self) -> int:
        return sum(size for _, size in self.sizes)

    @property
    def weights(self) -> np.ndarray:
        dt = self.spec.grid.dt
        w = []
        for name, size in self.sizes:
            w.append(np.ones(size) if name in ("x_p", "lambda0") else np.full(size, dt))
        return np.concatenate(w)

    @property
    def optimizer(self) -> slice:
        """The optimizer blocks, which always follow the plant block."""
        return slice(self.n_p if self.variant.closed else 0, self.dim)

    def pack(self, **blocks) -> np.ndarray:
        v = np.zeros(self.dim)
        sl = self.slices
        for name, val in blocks.items():
            if name not in sl:
                raise ShapeError(f"{self.variant.value} has no block {name!r}")
            arr = val.data if isinstance(val, GridFunction) else np.asarray(val, dtype=float).ravel()
            if arr.size != sl[name].stop - sl[name].start:
                raise ShapeError(f"block {name!r} needs {sl[name].stop - sl[name].start} entries, got {arr.size}")
            v[sl[name]] = arr
        return v


@dataclass(frozen=True)
class FlowState:
    """A flat state vector tagged with its layout."""

    layout: FlowLayout
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.array(self.data, dtype=float).ravel()
        if d.size != self.layout.dim:
            raise ShapeError(f"{self.layout.variant.value} state needs {self.layout.dim} entries, got {d.size}")
        if not np.all(np.isfinite(d)):
            raise ShapeError("flow state contains non-finite entries")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    def block(self, name):
        s = self.layout.spec
        raw = self.data[self.layout.slices[name]]
        if name == "x":
            return GridFunction(s.grid, Layout.NODES, s.n, raw)
        if name == "u":
            return GridFunction(s.grid, Layout.INTERVALS, s.m, raw)
        if name == "lambda":
            return GridFunction(s.grid, Layout.INTERVALS, s.n, raw)
        return raw.copy()

    def blocks(self) -> dict:
        return {name: self.block(name) for name, _ in self.layout.sizes}

    def norm(self) -> float:
        return math.sqrt(stack_inner(list(self.blocks().values())))


# ---------------------------------------------------------------------------
# flows


@dataclass
class Flow:
    """``v' = -M(v) + B_in u_in(t)`` with ``M = K + N``.

    ``K`` is a sparse skew-adjoint matrix.  ``B_in``/``input_fn`` are set for
    the open loops, whose input is the data ``(f, x0)``.
    """

    layout: FlowLayout
    M: MonotoneMap
    K: sp.csr_matrix = field(repr=False)
    plant: PlantSpec | None = None
    B_in: LinearOp | None = None
    input_fn: Callable[[float], np.ndarray] | None = field(default=None, repr=False)
    constant_input: np.ndarray | None = field(default=None, repr=False)
    relative_only: bool = False

    @property
    def variant(self) -> Variant:
        return self.layout.variant

    @property
    def spec(self) -> OcpSpec:
        return self.layout.spec

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def weights(self) -> np.ndarray:
        return self.M.weights

    def input(self, t: float):
        if self.B_in is None:
            return None
        return self.input_fn(t) if self.input_fn is not None else self.constant_input

    def rhs(self, v, t: float = 0.0) -> np.ndarray:
        out = -self.M(v)
        if self.B_in is not None:
            out += self.B_in.matrix @ self.input(t)
        return out

    def N(self, v) -> np.ndarray:
        """Non-skew part of ``M``."""
        v = np.asarray(v, dtype=float)
        return self.M(v) - self.K @ v

    def norm(self, v) -> float:
        return math.sqrt(float(np.dot(self.weights * v, v)))

    def with_input(self, fn: Callable[[float], np.ndarray]) -> Flow:
        if self.B_in is None:
            raise UsageError("closed loops are autonomous and take no input")
        return Flow(self.layout, self.M, self.K, self.plant, self.B_in, fn, self.constant_input, self.relative_only)

    def affine(self) -> MonotoneMap | None:
        """``M`` with the constant input folded into the offset, if affine."""
        if not self.M.is_affine or self.input_fn is not None:
            return None
        offset = self.M.offset.copy()
        if self.B_in is not None:
            offset -= self.B_in.matrix @ self.constant_input
        return MonotoneMap.affine(self.M.linear, offset, self.weights, self.M.label)

    def state(self, v) -> FlowState:
        return FlowState(self.layout, v)

    def zero_state(self) -> np.ndarray:
        return np.zeros(self.dim)

    def initial_state(self, x_p=None) -> np.ndarray:
        """Zero optimizer blocks, plant block ``x_p`` for closed loops."""
        if self.variant.closed:
            return self.layout.pack(x_p=np.zeros(self.layout.n_p) if x_p is None else x_p)
        return self.zero_state()

    def monitors(self, v, reference=None) -> dict:
        out = {"state_norm": self.norm(v)}
        if reference is not None:
            out["shifted_norm"] = self.norm(v - reference)
            n_ref = self.N(reference)
        else:
            n_ref = 0.0
        d = v - (0.0 if reference is None else reference)
        out["dissipation_rate"] = -float(np.dot(self.weights * (self.N(v) - n_ref), d))
        if self.variant.closed:
            out["plant_norm"] = float(np.linalg.norm(v[self.layout.slices["x_p"]]))
            up = feedback_u_p(self, v)
            out["u_p"] = up
            box = self.spec.box
            out["feasibility_margin"] = box.margin(up) if (box is not None and self.variant.constrained) else math.nan
        return out


def _input_op(layout: FlowLayout) -> LinearOp:
    """Places ``-(f, x0)`` into the multiplier blocks."""
    s = layout.spec
    sl = layout.optimizer
    start = sl.start + s.nx + (0 if layout.variant.constrained else s.nu)
    rows = np.arange(start, start + s.nl)
    mat = sp.csr_matrix((-np.ones(s.nl), (rows, np.arange(s.nl))), shape=(layout.dim, s.nl))
    return LinearOp(mat, s.blocks.wl, layout.weights, "B_in")


def _optimizer_skew(spec: OcpSpec, constrained: bool) -> sp.csr_matrix:
    b = spec.blocks
    if constrained:
        return sp.bmat([[None, b.Cx_star], [-b.Cx, None]]).tocsr()
    return sp.bmat([[None, spec.C_star.matrix], [-spec.C.matrix, None]]).tocsr()


def _optimizer_map(spec: OcpSpec, constrained: bool) -> MonotoneMap:
    if constrained:
        return assemble_M_opt(spec)
    unboxed = spec.with_box(None) if spec.box is not None else spec
    return assemble_M_opt(unboxed)


def _check_coupling_dims(spec: OcpSpec, plant: PlantSpec):
    if plant is None:
        raise UsageError("closed-loop flows need a plant")
    if plant.m != spec.m:
        raise ShapeError(f"plant input dim {plant.m} differs from control dim {spec.m}")


def _lambda0_port(spec: OcpSpec, layout: FlowLayout) -> LinearOp:
    """``R^n -> optimizer state``, ``e -> -e`` in the lambda0 block."""
    nw = layout.dim - layout.n_p
    rows = np.arange(nw - spec.n, nw)
    mat = sp.csr_matrix((-np.ones(spec.n), (rows, np.arange(spec.n))), shape=(nw, spec.n))
    return LinearOp(mat, np.ones(spec.n), layout.weights[layout.optimizer], "B_lambda0")


def make_flow(variant, spec: OcpSpec, plant: PlantSpec | None = None) -> Flow:
    variant = Variant(variant)
    if variant is Variant.OPEN_U:
        return _open_unconstrained(spec)
    if variant is Variant.OPEN_C:
        return _open_constrained(spec)
    if variant is Variant.CLOSED_U:
        return _closed_unconstrained(spec, plant)
    return _closed_constrained(spec, plant)


def _open_unconstrained(spec: OcpSpec) -> Flow:
    layout = FlowLayout(Variant.OPEN_U, spec)
    M = _optimizer_map(spec, False)
    return Flow(layout, M, _optimizer_skew(spec, False), B_in=_input_op(layout), constant_input=spec.data)


def _open_constrained(spec: OcpSpec) -> Flow:
    if spec.box is None:
        raise UsageError("the constrained open-loop flow needs a control box")
    layout = FlowLayout(Variant.OPEN_C, spec)
    M = _optimizer_map(spec, True)
    return Flow(layout, M, _optimizer_skew(spec, True), B_in=_input_op(layout), constant_input=spec.data)


def _closed_unconstrained(spec: OcpSpec, plant: PlantSpec) -> Flow:
    _check_coupling_dims(spec, plant)
    layout = FlowLayout(Variant.CLOSED_U, spec, plant.dim)
    opt = _optimizer_map(spec, False)
    Bp = dense_op(plant.B_p, label="B_p")
    E = dense_op(-spec.sys.B.T / spec.alpha, label="E")
    K_c = build_skew_coupling(Bp, _lambda0_port(spec, layout), E).matrix
    K = (sp.block_diag([sp.csr_matrix((plant.dim, plant.dim)), _optimizer_skew(spec, False)]) + K_c).tocsr()
    np_ = plant.dim
    Mp = plant.as_map()

    def ev(v):
        out = K_c @ v
        out[:np_] += Mp(v[:np_])
        out[np_:] += opt(v[np_:])
        return out

    weights = layout.weights
    if plant.linear is not None and opt.is_affine:
        L = (sp.block_diag([sp.csr_matrix(plant.linear), opt.linear]) + K_c).tocsr()
        M = MonotoneMap.affine(L, None, weights, "M_closed_u")
    else:
        M = MonotoneMap(layout.dim, ev, "M_closed_u", weights)
    return Flow(layout, M, K, plant, relative_only=not plant.globally_monotone)


def _closed_constrained(spec: OcpSpec, plant: PlantSpec) -> Flow:
    _check_coupling_dims(spec, plant)
    if spec.box is None or not spec.box.is_symmetric:
        raise UsageError("the constrained closed loop needs a symmetric control box")
    layout = FlowLayout(Variant.CLOSED_C, spec, plant.dim)
    opt = _optimizer_map(spec, True)
    m, n = spec.m, spec.n
    coupling = build_prox_coupling(
        dense_op(np.eye(m), label="F1"),
        dense_op(-spec.sys.B.T / spec.alpha, label="F2"),
        spec.box,
        0.5,
        B1=dense_op(plant.B_p, label="B_p"),
        B2=_lambda0_port(spec, layout),
    )
    K = sp.block_diag([sp.csr_matrix((plant.dim, plant.dim)), _optimizer_skew(spec, True)]).tocsr()
    np_ = plant.dim

    def ev(v):
        out = coupling(v)
        out[:np_] += plant.M_p(v[:np_])
        out[np_:] += opt(v[np_:])
        return out

    M = MonotoneMap(layout.dim, ev, "M_closed_c", layout.weights)
    return Flow(layout, M, K, plant, relative_only=True)


def feedback_u_p(flow: Flow, v) -> np.ndarray:
    """Plant input implied by the interconnection at state ``v``."""
    if not flow.variant.closed:
        raise UsageError("open-loop flows have no plant feedback")
    spec, sl = flow.spec, flow.layout.slices
    lam0 = v[sl["lambda0"]]
    ideal = spec.sys.B.T @ lam0 / spec.alpha
    if flow.variant is Variant.CLOSED_U:
        return ideal
    box = spec.box
    return 0.5 * project_box(ideal, box) - 0.5 * project_box(flow.plant.B_p.T @ v[sl["x_p"]], box)


def open_u_from_reduced(spec: OcpSpec, v_c: np.ndarray) -> np.ndarray:
    """Lift an ``open_c`` state to ``open_u`` using ``u = B^T lambda / alpha``
    without saturation."""
    x, p = v_c[: spec.nx], v_c[spec.nx:]
    lam = p[: spec.grid.N * spec.n].reshape(-1, spec.n)
    u = (lam @ spec.sys.B / spec.alpha).ravel()
    return np.concatenate([x, u, p])


def reduced_u(spec: OcpSpec, v_c: np.ndarray) -> np.ndarray:
    """``P_F(B^T lambda / alpha)`` for an ``open_c`` state."""
    return reduced_control(spec, v_c[spec.nx:])


def steady_state(flow: Flow, point) -> np.ndarray:
    """Open-loop steady state from a KKT point."""
    if flow.variant.closed:
        return flow.zero_state()
    return point.flat(constrained=flow.variant.constrained)


__all__ = [
    "Variant", "PlantSpec", "FlowLayout", "FlowState", "Flow", "make_flow", "plant_rhs",
    "feedback_u_p", "conserving_plant", "linear_plant", "custom_plant", "steady_state",
]
