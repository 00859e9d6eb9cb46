import json
import math

import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ALPHA_EX, example_spec
from monoph.discrete_ops import SystemMatrices
from monoph.errors import ConvergenceError, ShapeError, UnsupportedError
from monoph.monotone import BoxSet, check_monotone, project_box
from monoph.ocp import (
    CostSpec,
    OcpSpec,
    assemble_M_opt,
    cost_value,
    grad_J,
    kkt_residual,
    make_kkt_point,
    reduced_control,
    solve_kkt,
)
from monoph.timegrid import GridFunction, Layout, TimeGrid


def _random_xu(spec, rng, scale=3.0):
    g = spec.grid
    x = GridFunction(g, Layout.NODES, spec.n, scale * rng.standard_normal(spec.nx))
    u = GridFunction(g, Layout.INTERVALS, spec.m, scale * rng.standard_normal(spec.nu))
    return x, u


def _quartic_cost():
    return CostSpec(
        0.7,
        "custom",
        value=lambda X: 0.25 * np.sum(X ** 4, axis=1) + 0.5 * np.sum(X * X, axis=1),
        grad=lambda X: X ** 3 + X,
    )


class TestCostSpec:
    def test_alpha_positive(self):
        with pytest.raises(ShapeError):
            CostSpec(0.0)

    def test_unknown_kind_and_missing_parts(self):
        with pytest.raises(ShapeError):
            CostSpec(1.0, "cubic")
        with pytest.raises(ShapeError):
            CostSpec(1.0, "output")
        with pytest.raises(ShapeError):
            CostSpec(1.0, "custom", value=lambda X: X[:, 0])

    def test_convexity_samples(self, rng):
        assert CostSpec(1.0).check_convex(3, rng) >= -1e-12
        assert _quartic_cost().check_convex(2, rng) >= -1e-12
        concave = CostSpec(1.0, "custom", value=lambda X: -np.sum(X * X, axis=1), grad=lambda X: -2 * X)
        assert concave.check_convex(2, rng) < 0

    def test_output_cost_dimension(self):
        with pytest.raises(ShapeError):
            OcpSpec(SystemMatrices(np.eye(2), np.eye(2)[:, :1]), TimeGrid(1.0, 4), [0, 0],
                    CostSpec(1.0, "output", C_out=[[1.0, 0.0, 0.0]]))


class TestOcpSpec:
    def test_sizes(self, small_spec_u):
        s = small_spec_u
        assert (s.n, s.m, s.nx, s.nu, s.nl) == (2, 1, 42, 20, 42)
        assert s.alpha == ALPHA_EX

    def test_box_must_contain_zero(self):
        with pytest.raises(ShapeError):
            example_spec(N=10, box=BoxSet([0.1], [1.0]))
        with pytest.raises(ShapeError):
            example_spec(N=10, box=BoxSet.symmetric(1.0, 2))

    def test_x0_and_forcing_shapes(self):
        with pytest.raises(ShapeError):
            example_spec(N=10, x0=[1.0, 2.0, 3.0])
        g = TimeGrid(1.0, 10)
        with pytest.raises(ShapeError):
            example_spec(N=10, f=GridFunction.zeros(g, Layout.NODES, 2))
        with pytest.raises(ShapeError):
            example_spec(N=10, f=GridFunction.zeros(TimeGrid(2.0, 10), Layout.INTERVALS, 2))

    def test_data_layout(self, small_spec_u):
        d = small_spec_u.data
        np.testing.assert_array_equal(d[:-2], 0.0)
        np.testing.assert_array_equal(d[-2:], [-0.5, -3.0])


class TestGradJ:
    def test_zero_at_origin(self, small_spec_u):
        g = small_spec_u.grid
        gx, gu = grad_J(small_spec_u, GridFunction.zeros(g, Layout.NODES, 2), GridFunction.zeros(g, Layout.INTERVALS, 1))
        assert not gx.data.any() and not gu.data.any()

    def test_constant_state(self, small_spec_u):
        g = small_spec_u.grid
        xbar = [0.3, -4.0]
        gx, gu = grad_J(small_spec_u, GridFunction.constant(g, Layout.NODES, xbar), GridFunction.constant(g, Layout.INTERVALS, 2.0))
        np.testing.assert_array_equal(gx.values, np.tile(xbar, (21, 1)))
        np.testing.assert_allclose(gu.data, 2.0 * ALPHA_EX)

    def test_layout_errors(self, small_spec_u):
        g = small_spec_u.grid
        z = GridFunction.zeros(g, Layout.INTERVALS, 2)
        with pytest.raises(ShapeError):
            grad_J(small_spec_u, z, GridFunction.zeros(g, Layout.INTERVALS, 1))

    @pytest.mark.parametrize("cost", ["identity", "output", "quartic"])
    def test_central_difference(self, rng, cost):
        costs = {
            "identity": CostSpec(ALPHA_EX),
            "output": CostSpec(ALPHA_EX, "output", C_out=[[1.0, 2.0]]),
            "quartic": _quartic_cost(),
        }
        spec = OcpSpec(SystemMatrices(np.array([[0.0, -1.0], [1.0, 0.0]]), [[0.0], [1.0]]), TimeGrid(1.0, 40),
                       [-0.5, -3.0], costs[cost])
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            x, u = _random_xu(spec, rng, 1.0)
            dx, du = _random_xu(spec, rng, 1.0)
            fd = (cost_value(spec, x.data + h * dx.data, u.data + h * du.data)
                  - cost_value(spec, x.data - h * dx.data, u.data - h * du.data)) / (2 * h)
            gx, gu = grad_J(spec, x, u)
            an = spec.grid.dt * (float(gx.data @ dx.data) + float(gu.data @ du.data))
            worst = max(worst, abs(fd - an) / abs(an))
        assert worst <= 1e-6

    def test_coercivity_constant(self, small_spec_u, rng):
        spec = small_spec_u
        beta = min(1.0, spec.alpha)
        dt = spec.grid.dt
        worst = math.inf
        for _ in range(200):
            x1, u1 = _random_xu(spec, rng)
            x2, u2 = _random_xu(spec, rng)
            g1, g2 = grad_J(spec, x1, u1), grad_J(spec, x2, u2)
            dx, du = x1.data - x2.data, u1.data - u2.data
            lhs = dt * (float((g1[0].data - g2[0].data) @ dx) + float((g1[1].data - g2[1].data) @ du))
            rhs = beta * dt * (float(dx @ dx) + float(du @ du))
            worst = min(worst, (lhs - rhs) / rhs)
        assert worst >= -1e-10


class TestMOpt:
    def test_zero_maps_to_zero(self):
        spec = example_spec(N=20, x0=[0.0, 0.0])
        M = assemble_M_opt(spec)
        assert not M(np.zeros(M.dim)).any()
        Mc = assemble_M_opt(spec.with_box(BoxSet.symmetric(1.0)))
        assert not Mc(np.zeros(Mc.dim)).any()

    def test_oracle_point_balances_data(self, small_spec_u):
        pt = solve_kkt(small_spec_u)
        M = assemble_M_opt(small_spec_u)
        out = M(pt.flat())
        nz = small_spec_u.nx + small_spec_u.nu
        assert np.max(np.abs(out[:nz])) <= 1e-8
        np.testing.assert_allclose(out[nz:], -small_spec_u.data, atol=1e-8)

    def test_oracle_point_balances_data_reduced(self, small_spec_c):
        pt = solve_kkt(small_spec_c)
        M = assemble_M_opt(small_spec_c)
        out = M(pt.flat(constrained=True))
        nx = small_spec_c.nx
        assert np.max(np.abs(out[:nx])) <= 1e-8
        np.testing.assert_allclose(out[nx:], -small_spec_c.data, atol=1e-8)

    def test_unconstrained_is_affine_and_monotone(self, small_spec_u, rng):
        M = assemble_M_opt(small_spec_u)
        assert M.is_affine
        rep = check_monotone(M, rng, pairs=1000)
        assert rep.passed, rep.to_text()

    def test_reduced_is_monotone(self, small_spec_c, rng):
        rep = check_monotone(assemble_M_opt(small_spec_c), rng, pairs=1000)
        assert rep.passed, rep.to_text()

    def test_custom_cost_map_is_monotone(self, rng):
        spec = OcpSpec(SystemMatrices([[0.0, -1.0], [1.0, 0.0]], [[0.0], [1.0]]), TimeGrid(1.0, 10),
                       [1.0, 0.0], _quartic_cost())
        M = assemble_M_opt(spec)
        assert not M.is_affine
        assert check_monotone(M, rng, pairs=300, radius=3.0).passed


class TestOracle:
    def test_zero_data(self):
        pt = solve_kkt(example_spec(N=30, x0=[0.0, 0.0]))
        for arr in (pt.x_star.data, pt.u_star.data, pt.lam.data, pt.lam0, pt.mu.data):
            assert np.max(np.abs(arr)) <= 1e-14

    def test_unconstrained_residual(self, spec_u):
        pt = solve_kkt(spec_u)
        assert pt.residual <= 1e-8
        assert np.all(pt.mu.data == 0.0) or np.max(np.abs(pt.mu.data)) <= 1e-10

    def test_box_feasible_and_stationary(self, spec_c):
        pt = solve_kkt(spec_c)
        u = pt.u_star.data
        assert np.all(u >= -1.0) and np.all(u <= 1.0)
        assert pt.residual <= 1e-8
        assert 0.0 < pt.active_set_fraction(spec_c.box) < 1.0

    def test_optimal_control_formula(self, spec_c, spec_u):
        for spec in (spec_u, spec_c):
            pt = solve_kkt(spec)
            p = np.concatenate([pt.lam.data, pt.lam0])
            dt = spec.grid.dt
            d = pt.u_star.data - reduced_control(spec, p)
            assert math.sqrt(dt * float(d @ d)) <= 1e-8

    def test_wide_box_matches_unconstrained(self, spec_u):
        pu = solve_kkt(spec_u)
        pc = solve_kkt(spec_u.with_box(BoxSet.symmetric(1e6)))
        assert np.max(np.abs(pu.u_star.data - pc.u_star.data)) <= 1e-8

    def test_unique_from_two_starts(self, spec_c):
        a = solve_kkt(spec_c, u_init=np.ones(spec_c.nu))
        b = solve_kkt(spec_c, u_init=-np.ones(spec_c.nu))
        assert np.max(np.abs(a.u_star.data - b.u_star.data)) <= 1e-7
        assert np.max(np.abs(a.x_star.data - b.x_star.data)) <= 1e-7

    def test_lambda_nodes_view(self, small_spec_u):
        pt = solve_kkt(small_spec_u)
        ln = pt.lambda_nodes
        assert ln.layout is Layout.NODES
        np.testing.assert_array_equal(ln.values[0], pt.lam0)
        np.testing.assert_array_equal(ln.values[1:], pt.lam.values)

    def test_custom_cost_unsupported(self):
        spec = OcpSpec(SystemMatrices(np.eye(2), np.eye(2)[:, :1]), TimeGrid(1.0, 4), [1, 0], _quartic_cost())
        with pytest.raises(UnsupportedError):
            solve_kkt(spec)

    def test_iteration_cap(self, spec_c):
        with pytest.raises(ConvergenceError) as info:
            solve_kkt(spec_c, max_iter=1)
        assert info.value.residual > 1e-10 and info.value.iterations == 1

    def test_output_cost(self):
        spec = OcpSpec(SystemMatrices([[0.0, -1.0], [1.0, 0.0]], [[0.0], [1.0]]), TimeGrid(1.0, 50),
                       [-0.5, -3.0], CostSpec(1.5, "output", C_out=[[1.0, 0.0]]), box=BoxSet.symmetric(1.0))
        pt = solve_kkt(spec)
        assert pt.residual <= 1e-8
        assert solve_kkt(spec.with_box(None)).residual <= 1e-8

    def test_save(self, small_spec_c, tmp_path):
        pt = solve_kkt(small_spec_c)
        pt.save(tmp_path, small_spec_c.box)
        for name in ("x_star", "u_star", "lambda", "mu", "lambda0"):
            assert (tmp_path / f"{name}.csv").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert set(summary) == {"residual", "iterations", "active_set_fraction"}
        assert summary["iterations"] == pt.iterations


class TestKktResidual:
    def test_zero_point(self, small_spec_u):
        s = small_spec_u
        pt = make_kkt_point(s, np.zeros(s.nx), np.zeros(s.nu), np.zeros(s.nl))
        assert kkt_residual(s, pt) >= np.linalg.norm(s.x0)

    @pytest.mark.parametrize("constrained", [False, True])
    def test_perturbation_scaling(self, spec_u, constrained):
        spec = spec_u.with_box(BoxSet.symmetric(1.0)) if constrained else spec_u
        pt = solve_kkt(spec)
        u = pt.u_star.data.copy()
        k = int(np.argmin(np.abs(u)))  # an inactive interval
        delta = 1e-3
        u[k] += delta
        b = spec.blocks
        x = spla.spsolve(b.Cx.tocsc(), spec.data - b.Cu @ u)
        p = np.concatenate([pt.lam.data, pt.lam0])
        moved = make_kkt_point(spec, x, u, p)
        moved.mu = pt.mu  # keep the multiplier, only the control moved
        expected = spec.alpha * delta * math.sqrt(spec.grid.dt)
        assert kkt_residual(spec, moved) == pytest.approx(expected, rel=0.1)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(0.3, 2.0), st.integers(0, 2**31 - 1))
def test_oracle_feasible_for_random_boxes(alpha, bound, seed):
    r = np.random.default_rng(seed)
    spec = OcpSpec(SystemMatrices([[0.0, -1.0], [1.0, 0.0]], [[0.0], [1.0]]), TimeGrid(1.0, 30),
                   r.uniform(-3, 3, 2), CostSpec(alpha), box=BoxSet.symmetric(bound))
    pt = solve_kkt(spec)
    np.testing.assert_array_equal(project_box(pt.u_star.data, spec.box), pt.u_star.data)
    assert pt.residual <= 1e-8
