import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import example_spec
from monoph.errors import ShapeError, UsageError
from monoph.flows import (
    J2,
    FlowLayout,
    FlowState,
    PlantSpec,
    Variant,
    conserving_plant,
    custom_plant,
    feedback_u_p,
    linear_plant,
    make_flow,
    open_u_from_reduced,
    plant_rhs,
    steady_state,
)
from monoph.monotone import BoxSet, check_monotone, project_box
from monoph.ocp import grad_x_flat, solve_kkt


def _rand_state(flow, rng, scale=2.0):
    return scale * rng.standard_normal(flow.dim)


class TestPlants:
    def test_conserving_example(self):
        p = conserving_plant()
        np.testing.assert_allclose(p.M_p(np.array([1.0, 0.0])), [0.0, -2.0])
        np.testing.assert_allclose(plant_rhs(p, [1.0, 0.0], [0.0]), [0.0, 2.0])
        np.testing.assert_array_equal(plant_rhs(p, [0.0, 0.0], [0.0]), [0.0, 0.0])

    def test_energy_neutral(self, rng):
        p = conserving_plant()
        z = 5 * rng.standard_normal((1000, 2))
        vals = np.array([p.M_p(zi) @ zi for zi in z])
        assert np.max(np.abs(vals)) <= 1e-14 * np.max(np.sum(z * z, axis=1) ** 2)

    def test_conserving_plant_is_not_globally_monotone(self):
        p = conserving_plant()
        z1, z2 = np.array([1.0, 0.0]), np.array([0.0, 2.0])
        assert (p.M_p(z1) - p.M_p(z2)) @ (z1 - z2) == pytest.approx(-6.0)
        assert not p.globally_monotone

    def test_linear_plant_checks(self, rng):
        p = linear_plant([[1.0, 2.0], [-2.0, 0.5]], [[1.0], [0.0]])
        assert check_monotone(p.as_map(), rng, pairs=200).passed
        with pytest.raises(ShapeError):
            linear_plant([[-1.0, 0.0], [0.0, 1.0]], [[1.0], [0.0]])
        with pytest.raises(ShapeError):
            linear_plant([[1.0, 0.0, 0.0]], [[1.0]])

    def test_plant_validation(self):
        with pytest.raises(ShapeError):
            PlantSpec(2, lambda z: z + 1.0, [[0.0], [1.0]])
        with pytest.raises(ShapeError):
            PlantSpec(2, lambda z: z, [[0.0], [1.0], [0.0]])
        with pytest.raises(ShapeError):
            plant_rhs(conserving_plant(), [1.0, 0.0, 0.0], [0.0])

    def test_custom_plant_loader(self):
        p = custom_plant("numpy:negative", [[1.0], [0.0]], 2)
        np.testing.assert_array_equal(p.M_p(np.array([1.0, 2.0])), [-1.0, -2.0])
        with pytest.raises(UsageError):
            custom_plant("numpy.negative", [[1.0], [0.0]], 2)


class TestLayout:
    def test_block_order_and_weights(self, small_spec_u):
        lay = FlowLayout(Variant.CLOSED_U, small_spec_u, 2)
        assert [n for n, _ in lay.sizes] == ["x_p", "x", "u", "lambda", "lambda0"]
        assert lay.dim == 2 + 42 + 20 + 40 + 2
        w = lay.weights
        np.testing.assert_array_equal(w[:2], 1.0)
        np.testing.assert_array_equal(w[-2:], 1.0)
        np.testing.assert_allclose(w[2:-2], small_spec_u.grid.dt)

    def test_pack_and_state_blocks(self, small_spec_c):
        lay = FlowLayout(Variant.OPEN_C, small_spec_c)
        v = lay.pack(lambda0=[1.0, 2.0])
        st_ = FlowState(lay, v)
        np.testing.assert_array_equal(st_.block("lambda0"), [1.0, 2.0])
        assert st_.norm() == pytest.approx(np.sqrt(5.0))
        with pytest.raises(ShapeError):
            lay.pack(u=np.zeros(20))
        with pytest.raises(ShapeError):
            lay.pack(lambda0=[1.0])
        with pytest.raises(ShapeError):
            FlowState(lay, np.zeros(3))


def _open_u_oracle(spec, w):
    """Hand assembly from the constraint operator and its adjoint."""
    nz = spec.nx + spec.nu
    z, p = w[:nz], w[nz:]
    grad = np.concatenate([grad_x_flat(spec, z[:spec.nx]), spec.alpha * z[spec.nx:]])
    return np.concatenate([-(grad + spec.C_star(p)), spec.C(z) - spec.data])


class TestOpenLoops:
    def test_open_u_matches_block_formula(self, small_spec_u, rng):
        flow = make_flow("open_u", small_spec_u)
        for _ in range(20):
            w = _rand_state(flow, rng)
            ref = _open_u_oracle(small_spec_u, w)
            np.testing.assert_allclose(flow.rhs(w), ref, rtol=1e-13, atol=1e-12 * np.abs(ref).max())

    def test_equilibria_at_oracle(self, spec_u, spec_c):
        for variant, spec in (("open_u", spec_u), ("open_c", spec_c)):
            flow = make_flow(variant, spec)
            point = solve_kkt(spec)
            r = flow.rhs(steady_state(flow, point))
            assert flow.norm(r) <= (1e-8 if variant == "open_u" else 1e-7)

    def test_zero_data_origin(self):
        spec = example_spec(N=20, x0=[0.0, 0.0], box=BoxSet.symmetric(1.0))
        for variant in ("open_u", "open_c"):
            flow = make_flow(variant, spec)
            assert not flow.rhs(flow.zero_state()).any()

    def test_wide_box_reduces_to_unconstrained(self, small_spec_u, rng):
        wide = small_spec_u.with_box(BoxSet.symmetric(1e9))
        fc, fu = make_flow("open_c", wide), make_flow("open_u", small_spec_u)
        nx, nu = small_spec_u.nx, small_spec_u.nu
        for _ in range(20):
            vc = _rand_state(fc, rng)
            vu = open_u_from_reduced(small_spec_u, vc)
            rc, ru = fc.rhs(vc), fu.rhs(vu)
            ref = np.concatenate([ru[:nx], ru[nx + nu:]])
            assert np.max(np.abs(rc - ref)) <= 1e-10 * max(1.0, np.abs(ref).max())

    def test_open_c_needs_box(self, small_spec_u):
        with pytest.raises(UsageError):
            make_flow("open_c", small_spec_u)

    def test_open_loop_monotone(self, small_spec_u, small_spec_c, rng):
        for variant, spec in (("open_u", small_spec_u), ("open_c", small_spec_c)):
            rep = check_monotone(make_flow(variant, spec).M, rng, pairs=500)
            assert rep.passed, rep.to_text()

    def test_input_override(self, small_spec_u):
        flow = make_flow("open_u", small_spec_u)
        zero_in = flow.with_input(lambda t: np.zeros(small_spec_u.nl))
        assert not zero_in.rhs(zero_in.zero_state(), 0.3).any()
        assert flow.affine() is not None and zero_in.affine() is None


def _closed_u_oracle(spec, plant, v):
    n_p, nx, nu = plant.dim, spec.nx, spec.nu
    xp, z, p = v[:n_p], v[n_p:n_p + nx + nu], v[n_p + nx + nu:]
    lam0 = p[-spec.n:]
    a = spec.alpha
    dxp = -plant.M_p(xp) + plant.B_p @ (spec.sys.B.T @ lam0) / a
    grad = np.concatenate([grad_x_flat(spec, z[:nx]), a * z[nx:]])
    dz = -(grad + spec.C_star(p))
    dp = spec.C(z)
    dp[-spec.n:] -= spec.sys.B @ (plant.B_p.T @ xp) / a
    return np.concatenate([dxp, dz, dp])


def _closed_c_oracle(spec, plant, v):
    n_p, nx = plant.dim, spec.nx
    xp, x, p = v[:n_p], v[n_p:n_p + nx], v[n_p + nx:]
    lam0 = p[-spec.n:]
    a, box = spec.alpha, spec.box
    gap = project_box(spec.sys.B.T @ lam0 / a, box) - project_box(plant.B_p.T @ xp, box)
    dxp = -plant.M_p(xp) + 0.5 * plant.B_p @ gap
    b = spec.blocks
    lam = p[:-spec.n].reshape(-1, spec.n)
    u = project_box((lam @ spec.sys.B / a).ravel(), box)
    dx = -grad_x_flat(spec, x) - b.Cx_star @ p
    dp = b.Cx @ x + b.Cu @ u
    dp[-spec.n:] -= spec.sys.B @ gap / (2 * a)
    return np.concatenate([dxp, dx, dp])


class TestClosedLoops:
    def test_closed_u_block_formula(self, small_spec_u, rng):
        plant = conserving_plant()
        flow = make_flow("closed_u", small_spec_u, plant)
        for _ in range(20):
            v = _rand_state(flow, rng)
            ref = _closed_u_oracle(small_spec_u, plant, v)
            np.testing.assert_allclose(flow.rhs(v), ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())

    def test_closed_c_block_formula(self, small_spec_c, rng):
        plant = conserving_plant()
        flow = make_flow("closed_c", small_spec_c, plant)
        for _ in range(20):
            v = _rand_state(flow, rng)
            ref = _closed_c_oracle(small_spec_c, plant, v)
            np.testing.assert_allclose(flow.rhs(v), ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())

    def test_origin_is_equilibrium(self, small_spec_u, small_spec_c):
        for variant, spec in (("closed_u", small_spec_u), ("closed_c", small_spec_c)):
            flow = make_flow(variant, spec, conserving_plant())
            assert not flow.rhs(flow.zero_state()).any()

    def test_skew_part_power_neutral(self, small_spec_u, small_spec_c, rng):
        for variant, spec in (("closed_u", small_spec_u), ("closed_c", small_spec_c)):
            flow = make_flow(variant, spec, conserving_plant())
            for _ in range(50):
                v = _rand_state(flow, rng)
                assert abs(np.dot(flow.weights * (flow.K @ v), v)) <= 1e-12 * flow.norm(v) ** 2

    def test_closed_u_monotone_with_linear_plant(self, small_spec_u, rng):
        flow = make_flow("closed_u", small_spec_u, linear_plant(J2, [[0.0], [1.0]]))
        assert flow.M.is_affine and not flow.relative_only
        rep = check_monotone(flow.M, rng, pairs=1000)
        assert rep.passed, rep.to_text()

    def test_closed_u_relative_monotone_with_conserving_plant(self, small_spec_u, rng):
        flow = make_flow("closed_u", small_spec_u, conserving_plant())
        assert flow.relative_only
        rep = check_monotone(flow.M, rng, pairs=1000, relative=True)
        assert rep.passed, rep.to_text()

    def test_closed_c_relative_monotone(self, small_spec_c, rng):
        flow = make_flow("closed_c", small_spec_c, conserving_plant())
        rep = check_monotone(flow.M, rng, pairs=1000, relative=True)
        assert rep.passed, rep.to_text()

    def test_feedback(self, small_spec_u, small_spec_c, rng):
        fu = make_flow("closed_u", small_spec_u, conserving_plant())
        fc = make_flow("closed_c", small_spec_c, conserving_plant())
        assert not feedback_u_p(fu, fu.zero_state()).any()
        assert not feedback_u_p(fc, fc.zero_state()).any()
        for _ in range(200):
            v = _rand_state(fu, rng, 10.0)
            lam0 = v[fu.layout.slices["lambda0"]]
            np.testing.assert_array_equal(feedback_u_p(fu, v), small_spec_u.sys.B.T @ lam0 / small_spec_u.alpha)
            w = _rand_state(fc, rng, 10.0)
            up = feedback_u_p(fc, w)
            assert np.all(up >= -1.0) and np.all(up <= 1.0)
        with pytest.raises(UsageError):
            feedback_u_p(make_flow("open_u", small_spec_u), np.zeros(104))

    def test_wide_box_feedback_is_half_difference(self, small_spec_u, rng):
        spec = small_spec_u.with_box(BoxSet.symmetric(1e9))
        flow = make_flow("closed_c", spec, conserving_plant())
        for _ in range(20):
            v = _rand_state(flow, rng)
            sl = flow.layout.slices
            ref = 0.5 * (spec.sys.B.T @ v[sl["lambda0"]] / spec.alpha - flow.plant.B_p.T @ v[sl["x_p"]])
            np.testing.assert_allclose(feedback_u_p(flow, v), ref, rtol=1e-14)

    def test_errors(self, small_spec_u):
        with pytest.raises(UsageError):
            make_flow("closed_u", small_spec_u)
        with pytest.raises(UsageError):
            make_flow("closed_c", small_spec_u.with_box(BoxSet([-1.0], [2.0])), conserving_plant())
        with pytest.raises(ShapeError):
            make_flow("closed_u", small_spec_u, linear_plant(np.eye(2), np.eye(2)))

    def test_initial_state_and_monitors(self, small_spec_c):
        flow = make_flow("closed_c", small_spec_c, conserving_plant())
        v0 = flow.initial_state([-0.5, -3.0])
        mon = flow.monitors(v0)
        assert mon["plant_norm"] == pytest.approx(np.hypot(0.5, 3.0))
        assert mon["state_norm"] == pytest.approx(np.hypot(0.5, 3.0))
        assert mon["feasibility_margin"] >= 0.0
        assert mon["dissipation_rate"] <= 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 3.0))
def test_closed_c_feedback_always_feasible(seed, bound):
    spec = example_spec(N=10, box=BoxSet.symmetric(bound))
    flow = make_flow("closed_c", spec, conserving_plant())
    v = 50 * np.random.default_rng(seed).standard_normal(flow.dim)
    up = feedback_u_p(flow, v)
    assert np.all(np.abs(up) <= bound)
