"""Sparse linear operators on weighted coordinate spaces.

The dynamics constraint ``C(x, u) = (x' - A x - B u, x(0))`` is discretized
with the implicit Euler stencil: for ``k = 1..N``

    r_k = (x_k - x_{k-1}) / dt - A x_k - B u_k,        r0 = x_0.

States sit on nodes, controls and residuals on intervals.  The adjoint is
the weighted transpose ``W_in^{-1} C^T W_out``; the terminal condition
``lambda(t_f) = 0`` and the initial coupling ``lambda_0 = lambda(0)`` are
not imposed, they fall out of the transposed stencil.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError
from .timegrid import Layout, TimeGrid


@dataclass(frozen=True)
class LinearOp:
    """A sparse matrix between two diagonally weighted coordinate spaces.

    ``in_weights`` and ``out_weights`` define the inner products
    ``<a, b> = sum(w * a * b)`` on the domain and codomain.
    """

    matrix: sp.csr_matrix = field(repr=False)
    in_weights: np.ndarray = field(repr=False)
    out_weights: np.ndarray = field(repr=False)
    label: str = ""

    def __post_init__(self):
        mat = sp.csr_matrix(self.matrix, dtype=float)
        mat.sort_indices()
        win = np.asarray(self.in_weights, dtype=float).ravel()
        wout = np.asarray(self.out_weights, dtype=float).ravel()
        if win.size != mat.shape[1] or wout.size != mat.shape[0]:
            raise ShapeError(
                f"weights ({wout.size}, {win.size}) do not match matrix shape {mat.shape}"
            )
        if np.any(win <= 0) or np.any(wout <= 0):
            raise ShapeError("inner-product weights must be strictly positive")
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "in_weights", win)
        object.__setattr__(self, "out_weights", wout)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def entries(self):
        """Triplets ``(i, j, value)`` in row-major order."""
        coo = self.matrix.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def __call__(self, v):
        return apply(self, v)

    def adjoint(self) -> LinearOp:
        """Hilbert-space adjoint with respect to the two weighted products."""
        mat = sp.diags(1.0 / self.in_weights) @ self.matrix.T @ sp.diags(self.out_weights)
        return LinearOp(mat.tocsr(), self.out_weights, self.in_weights, f"{self.label}*")

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def dump(self, path) -> None:
        """Write a ``rows cols nnz`` header followed by ``i j value`` lines."""
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            fh.write(f"{self.rows} {self.cols} {coo.nnz}\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i} {j} {float(v)!r}\n")


def apply(op: LinearOp, v) -> np.ndarray:
    v = np.asarray(v, dtype=float).ravel()
    if v.size != op.cols:
        raise ShapeError(f"operator expects {op.cols} entries, got {v.size}")
    return op.matrix @ v


def load_dump(path, in_weights=None, out_weights=None) -> LinearOp:
    with open(path) as fh:
        rows, cols, nnz = (int(t) for t in fh.readline().split())
        trip = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    mat = sp.csr_matrix(
        (trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=(rows, cols)
    )
    win = np.ones(cols) if in_weights is None else in_weights
    wout = np.ones(rows) if out_weights is None else out_weights
    return LinearOp(mat, win, wout)


@dataclass(frozen=True)
class SystemMatrices:
    """Linear model ``x' = A x + B u`` plus an optional plant input matrix."""

    A: np.ndarray
    B: np.ndarray
    B_p: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1]:
            raise ShapeError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ShapeError(f"B has {B.shape[0]} rows but A is {A.shape[0]}x{A.shape[0]}")
        sv = np.linalg.svd(B, compute_uv=False)
        if sv.size < B.shape[1] or sv[0] == 0.0 or sv[-1] <= 1e-10 * sv[0]:
            raise ShapeError("B must have full column rank")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.B_p is not None:
            Bp = np.asarray(self.B_p, dtype=float)
            if Bp.ndim == 1:
                Bp = Bp[:, None]
            object.__setattr__(self, "B_p", Bp)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


def state_control_weights(grid: TimeGrid, n: int, m: int) -> np.ndarray:
    return np.concatenate([grid.weights(Layout.NODES, n), grid.weights(Layout.INTERVALS, m)])


def residual_weights(grid: TimeGrid, n: int) -> np.ndarray:
    return np.concatenate([grid.weights(Layout.INTERVALS, n), np.ones(n)])


def build_C(sys: SystemMatrices, grid: TimeGrid) -> LinearOp:
    """Implicit-Euler discretization of ``(x, u) -> (x' - A x - B u, x(0))``.

    Domain: ``[x_0..x_N | u_1..u_N]``; codomain: ``[r_1..r_N | r0]``.
    """
    n, m, N, dt = sys.n, sys.m, grid.N, grid.dt
    eye_n = sp.identity(n, format="csr")
    # residual rows k = 1..N against state columns 0..N
    shift = sp.eye(N, N + 1, k=1, format="csr")
    back = sp.eye(N, N + 1, k=0, format="csr")
    Dx = sp.kron(shift, eye_n / dt - sp.csr_matrix(sys.A)) - sp.kron(back, eye_n / dt)
    init = sp.hstack([eye_n, sp.csr_matrix((n, N * n))])
    Cx = sp.vstack([Dx, init])
    Cu = sp.vstack([sp.kron(sp.identity(N), -sp.csr_matrix(sys.B)), sp.csr_matrix((n, N * m))])
    mat = sp.hstack([Cx, Cu]).tocsr()
    mat.eliminate_zeros()
    return LinearOp(mat, state_control_weights(grid, n, m), residual_weights(grid, n), "C")


def build_C_star(C: LinearOp, weighted: bool = True) -> LinearOp:
    """Adjoint of the constraint operator.

    ``weighted=False`` returns the bare transpose; it exists only as a
    negative control for the adjointness suite.
    """
    if weighted:
        return C.adjoint()
    return LinearOp(C.matrix.T.tocsr(), C.out_weights, C.in_weights, "C^T")


def adjointness_residual(op: LinearOp, op_star: LinearOp, z, p) -> float:
    """Relative mismatch ``|<op z, p> - <z, op_star p>|`` for one pair."""
    lhs = np.dot(op.out_weights * apply(op, z), p)
    rhs = np.dot(op.in_weights * z, apply(op_star, p))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return abs(lhs - rhs) / scale


def dense_op(matrix, in_weights=None, out_weights=None, label="") -> LinearOp:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    win = np.ones(matrix.shape[1]) if in_weights is None else in_weights
    wout = np.ones(matrix.shape[0]) if out_weights is None else out_weights
    return LinearOp(sp.csr_matrix(matrix), win, wout, label)


def build_skew_coupling(B1_1: LinearOp, B2_1: LinearOp, E: LinearOp) -> LinearOp:
    """Power-preserving interconnection block on ``X1 x X2``.

    Implements ``u1 = E y2``, ``u2 = -E* y1`` with ``y_i = (B_i)^* x_i``,
    giving ``K = [[0, -B1 E B2*], [B2 E* B1*, 0]]``.
    """
    if E.rows != B1_1.cols or E.cols != B2_1.cols:
        raise ShapeError(
            f"E must map U2 (dim {B2_1.cols}) into U1 (dim {B1_1.cols}); got {E.shape}"
        )
    if not (np.allclose(E.out_weights, B1_1.in_weights) and np.allclose(E.in_weights, B2_1.in_weights)):
        raise ShapeError("E and the input maps disagree on the port inner products")
    top = B1_1.matrix @ E.matrix @ B2_1.adjoint().matrix
    bottom = B2_1.matrix @ E.adjoint().matrix @ B1_1.adjoint().matrix
    n1, n2 = B1_1.rows, B2_1.rows
    mat = sp.bmat([[sp.csr_matrix((n1, n1)), -top], [bottom, sp.csr_matrix((n2, n2))]])
    w = np.concatenate([B1_1.out_weights, B2_1.out_weights])
    return LinearOp(mat.tocsr(), w, w, "K_skew")
