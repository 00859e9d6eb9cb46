"""Uniform time grids and grid functions.

A :class:`TimeGrid` splits the horizon ``[0, t_f]`` into ``N`` equal
intervals.  Grid functions live either on the ``N + 1`` nodes
``tau_0, ..., tau_N`` (states) or on the ``N`` intervals, indexed by their
right endpoint ``tau_1, ..., tau_N`` (controls and the dynamics residual).

Every sample carries the quadrature weight ``dt``; finite-dimensional
blocks such as an initial value carry weight 1.  With these weights the
discrete spaces are genuine inner-product spaces and every adjoint used
elsewhere in the package is a weighted transpose.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError


class Layout(enum.Enum):
    NODES = "nodes"
    INTERVALS = "intervals"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, t_f]`` with ``N`` intervals."""

    t_f: float
    N: int

    def __post_init__(self):
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 2):
            raise ShapeError(f"N must be an integer >= 2, got {self.N!r}")
        if not (math.isfinite(self.t_f) and self.t_f > 0):
            raise ShapeError(f"t_f must be positive and finite, got {self.t_f!r}")
        object.__setattr__(self, "t_f", float(self.t_f))
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return self.t_f / self.N

    def samples(self, layout: Layout) -> int:
        return self.N + 1 if layout is Layout.NODES else self.N

    def times(self, layout: Layout) -> np.ndarray:
        """Sample times; intervals are stamped with their right endpoint."""
        k = np.arange(self.samples(layout)) if layout is Layout.NODES else np.arange(1, self.N + 1)
        return k * self.dt

    def weights(self, layout: Layout, dim: int) -> np.ndarray:
        return np.full(self.samples(layout) * dim, self.dt)


@dataclass(frozen=True)
class GridFunction:
    """Vector-valued samples on a :class:`TimeGrid`.

    ``data`` is stored flat, sample-major: component ``i`` of sample ``k``
    sits at ``data[k * dim + i]``.
    """

    grid: TimeGrid
    layout: Layout
    dim: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=float).ravel()
        expected = self.grid.samples(self.layout) * self.dim
        if data.size != expected:
            raise ShapeError(
                f"{self.layout.value} function of dim {self.dim} needs {expected} "
                f"entries, got {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise ShapeError("grid function contains non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, grid, layout, dim):
        return cls(grid, layout, dim, np.zeros(grid.samples(layout) * dim))

    @classmethod
    def constant(cls, grid, layout, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        data = np.tile(value, grid.samples(layout))
        return cls(grid, layout, value.size, data)

    @classmethod
    def from_function(cls, grid, layout, fn, dim=None):
        """Sample ``fn(tau) -> R^dim`` at the layout's sample times."""
        rows = [np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in grid.times(layout)]
        values = np.vstack(rows)
        return cls(grid, layout, values.shape[1] if dim is None else dim, values.ravel())

    @property
    def values(self) -> np.ndarray:
        """Samples as a ``(samples, dim)`` view."""
        return self.data.reshape(-1, self.dim)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times(self.layout)

    @property
    def weights(self) -> np.ndarray:
        return self.grid.weights(self.layout, self.dim)

    def with_data(self, data) -> GridFunction:
        return GridFunction(self.grid, self.layout, self.dim, data)

    def __add__(self, other: GridFunction) -> GridFunction:
        _check_compatible(self, other)
        return self.with_data(self.data + other.data)

    def __sub__(self, other: GridFunction) -> GridFunction:
        _check_compatible(self, other)
        return self.with_data(self.data - other.data)

    def __mul__(self, scalar: float) -> GridFunction:
        return self.with_data(float(scalar) * self.data)

    __rmul__ = __mul__

    def to_csv(self, path) -> None:
        write_csv(self, path)


def _check_compatible(a: GridFunction, b: GridFunction) -> None:
    if a.layout is not b.layout or a.dim != b.dim or a.grid != b.grid:
        raise ShapeError(
            f"incompatible grid functions: ({a.layout.value}, dim {a.dim}, {a.grid}) "
            f"vs ({b.layout.value}, dim {b.dim}, {b.grid})"
        )


def inner_product(a: GridFunction, b: GridFunction, grid: TimeGrid | None = None) -> float:
    """Discrete L2 pairing ``dt * sum_k a_k . b_k``."""
    _check_compatible(a, b)
    if grid is not None and grid != a.grid:
        raise ShapeError("grid functions were sampled on a different grid")
    return float(a.grid.dt * np.dot(a.data, b.data))


def norm(a: GridFunction, grid: TimeGrid | None = None) -> float:
    # rescale first so tiny or huge entries do not under/overflow when squared
    scale = float(np.max(np.abs(a.data))) if a.data.size else 0.0
    if scale == 0.0 or not math.isfinite(scale):
        return math.sqrt(max(inner_product(a, a, grid), 0.0))
    unit = a.with_data(a.data / scale)
    return scale * math.sqrt(max(inner_product(unit, unit, grid), 0.0))


def _part_inner(p, q, grid) -> float:
    if isinstance(p, GridFunction):
        if not isinstance(q, GridFunction):
            raise ShapeError("cannot pair a grid function with a plain vector")
        return inner_product(p, q, grid)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if p.shape != q.shape:
        raise ShapeError(f"vector blocks differ in shape: {p.shape} vs {q.shape}")
    return float(np.dot(p, q))


def stack_inner(parts: Sequence, grid: TimeGrid | None = None, other: Sequence | None = None) -> float:
    """Inner product on a product space of grid functions and vectors.

    Grid-function blocks are weighted by ``dt`` and plain vectors by 1.
    With ``other=None`` this is the squared norm of ``parts``.
    """
    if len(parts) == 0:
        raise ShapeError("stack_inner needs at least one block")
    other = parts if other is None else other
    if len(other) != len(parts):
        raise ShapeError("block lists differ in length")
    return sum(_part_inner(p, q, grid) for p, q in zip(parts, other))


def format_tau(t: float) -> str:
    return np.format_float_positional(t, precision=12, unique=False, fractional=False, trim="-")


def write_csv(gf: GridFunction, path) -> None:
    """One row per sample: ``tau, component_0, ..., component_{dim-1}``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau"] + [f"component_{i}" for i in range(gf.dim)])
        for t, row in zip(gf.times, gf.values):
            writer.writerow([format_tau(t)] + [repr(float(v)) for v in row])


def read_csv(path, grid: TimeGrid, layout: Layout) -> GridFunction:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r[1:]] for r in reader if r]
    dim = len(header) - 1
    return GridFunction(grid, layout, dim, np.asarray(rows).ravel())
