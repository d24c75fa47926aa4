import numpy as np
import pytest

from cellular_basis import assemble_transport_velocity, sample_basis
from field_grid import Grid2D, ScalarField, VectorField, integrate, l2_norm, mean, sample
from mixnorm import mix_norm_sq, solve_helmholtz
from optimizer import assemble_p, reduced_gradient
from presets import preset_theta0
from transport_adjoint import (
    AdjointTrajectory,
    ControlTrajectory,
    SolverError,
    advection_operator,
    apply_advection,
    check_cfl,
    cost_of,
    gram_matrices,
    running_source,
    solve_adjoint,
    solve_state,
    step_adjoint_explicit,
    step_adjoint_implicit,
    step_state_implicit,
    steps_for,
)


def _zero_velocity(grid):
    return VectorField(grid, np.zeros((grid.n, grid.n)), np.zeros((grid.n, grid.n)))


def _const(grid, c):
    return ScalarField(grid, np.full((grid.n, grid.n), c))


class TestControlTrajectory:
    def test_constant_profile(self):
        u = ControlTrajectory.constant([0.0, 1.0], 0.25, 1.0)
        assert u.steps == 4
        assert u.values.shape == (2, 4)
        np.testing.assert_array_equal(u.times(), [0.0, 0.25, 0.5, 0.75])
        np.testing.assert_array_equal(u.at(2), [0.0, 1.0])

    def test_scalar_multiple(self):
        u = ControlTrajectory.constant([1.0, -2.0], 0.5, 1.0)
        np.testing.assert_array_equal((3 * u).values, 3 * u.values)

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            ControlTrajectory(0.1, 10, np.zeros((2, 9)))

    def test_rejects_nonfinite(self):
        vals = np.zeros((1, 4))
        vals[0, 1] = np.inf
        with pytest.raises(ValueError):
            ControlTrajectory(0.25, 4, vals)

    def test_steps_must_divide(self):
        assert steps_for(0.005, 1.0) == 200
        with pytest.raises(ValueError):
            steps_for(0.003, 1.0)


class TestAdvectionOperator:
    def test_sparse_matches_matrix_free(self, grid33):
        basis = sample_basis(grid33, (1, 2))
        v = assemble_transport_velocity(basis, [0.7, -0.4])
        rng = np.random.default_rng(0)
        f = rng.standard_normal((33, 33))
        np.testing.assert_allclose(
            (advection_operator(v) @ f.ravel()).reshape(33, 33), apply_advection(f, v), atol=1e-11,
        )

    def test_skew_in_trapezoid_inner_product(self):
        grid = Grid2D(17)
        v = sample_basis(grid, (2,)).transport[0]
        wa = np.diag(grid.weights.ravel()) @ advection_operator(v).toarray()
        np.testing.assert_allclose(wa + wa.T, 0.0, atol=1e-12)


class TestStateStep:
    def test_zero_velocity_identity(self, grid33):
        theta = preset_theta0("tanh-stripe", grid33)
        out = step_state_implicit(theta, _zero_velocity(grid33), 0.01)
        np.testing.assert_array_equal(out.values, theta.values)

    def test_mass_conserved(self, grid33):
        theta = preset_theta0("tanh-stripe", grid33)
        basis = sample_basis(grid33, (1, 2))
        mass0 = integrate(theta)
        for u in ([1.0, 0.0], [0.0, 1.0], [0.6, -1.3]):
            out = step_state_implicit(theta, assemble_transport_velocity(basis, u), 0.02)
            assert integrate(out) == pytest.approx(mass0, abs=1e-10)

    def test_l2_non_increasing(self, grid33):
        theta = preset_theta0("sine-stripe", grid33)
        v = assemble_transport_velocity(sample_basis(grid33, (1, 2)), [1.0, 1.0])
        for _ in range(5):
            nxt = step_state_implicit(theta, v, 0.02)
            assert l2_norm(nxt) <= l2_norm(theta) * (1 + 1e-9)
            theta = nxt

    def test_local_error_second_order(self, grid65):
        theta = sample(grid65, lambda x1, x2: np.cos(np.pi * x1))
        v = sample_basis(grid65, (1,)).transport[0]

        def defect(tau):
            one = step_state_implicit(theta, v, tau)
            half = step_state_implicit(step_state_implicit(theta, v, tau / 2), v, tau / 2)
            return l2_norm(one - half)

        ratio = defect(0.01) / defect(0.005)
        assert ratio == pytest.approx(4.0, abs=0.4)

    def test_rejects_nonpositive_tau(self, grid33):
        theta = preset_theta0("cosine-x", grid33)
        with pytest.raises(ValueError):
            step_state_implicit(theta, _zero_velocity(grid33), 0.0)


class TestSolveState:
    def test_zero_controls_freeze_state(self, grid33, basis12_33):
        theta0 = preset_theta0("tanh-stripe", grid33)
        u = ControlTrajectory.constant([0.0, 0.0], 0.1, 1.0)
        rec = solve_state(theta0, basis12_33, u)
        for k in range(rec.steps + 1):
            np.testing.assert_array_equal(rec.states[k], theta0.values)
        assert np.ptp(rec.mixnorm_series) == 0.0
        assert rec.cost == 0.0

    def test_series_lengths_and_snapshots(self, grid33, basis12_33):
        theta0 = preset_theta0("tanh-stripe", grid33)
        u = ControlTrajectory.constant([0.0, 1.0], 0.05, 0.5)
        rec = solve_state(theta0, basis12_33, u, snapshot_times=(0.0, 0.25, 0.5))
        assert rec.states.shape == (11, 33, 33)
        assert len(rec.mixnorm_series) == len(rec.cost_cumulative) == 11
        assert rec.cost_cumulative[0] == 0.0
        assert np.all(np.diff(rec.cost_cumulative) >= 0.0)
        assert sorted(rec.snapshots) == [0.0, 0.25, 0.5]
        np.testing.assert_array_equal(rec.snapshots[0.5].values, rec.final.values)
        assert rec.mixnorm_series[0] == pytest.approx(
            mix_norm_sq(theta0 - mean(theta0)), rel=1e-12)

    def test_snapshot_off_grid_rejected(self, grid33, basis12_33):
        theta0 = preset_theta0("tanh-stripe", grid33)
        u = ControlTrajectory.constant([0.0, 1.0], 0.05, 0.5)
        with pytest.raises(ValueError):
            solve_state(theta0, basis12_33, u, snapshot_times=(0.07,))

    def test_mass_conserved_over_run(self, grid33, basis12_33):
        theta0 = preset_theta0("tanh-stripe", grid33)
        u = ControlTrajectory.constant([0.0, 1.0], 0.02, 0.4)
        rec = solve_state(theta0, basis12_33, u)
        assert abs(integrate(rec.final) - integrate(theta0)) <= 1e-8 * abs(integrate(theta0))

    def test_time_reversal(self, grid65):
        theta0 = sample(grid65, lambda x1, x2: np.cos(np.pi * x1))
        basis = sample_basis(grid65, (1,))
        fwd = solve_state(theta0, basis, ControlTrajectory.constant([0.5], 0.005, 0.2))
        back = solve_state(fwd.final, basis, ControlTrajectory.constant([-0.5], 0.005, 0.2))
        assert l2_norm(back.final - theta0) <= 5e-3

    def test_control_count_mismatch(self, grid33, basis12_33):
        theta0 = preset_theta0("tanh-stripe", grid33)
        with pytest.raises(ValueError):
            solve_state(theta0, basis12_33, ControlTrajectory.constant([1.0], 0.1, 1.0))

    @pytest.mark.slow
    def test_conservation_full_resolution(self, grid129):
        theta0 = preset_theta0("tanh-stripe", grid129)
        basis = sample_basis(grid129, (1, 2))
        rec = solve_state(theta0, basis, ControlTrajectory.constant([0.0, 1.0], 0.005, 1.0))
        assert abs(integrate(rec.final) - integrate(theta0)) <= 1e-8
        drift = abs(l2_norm(rec.final) - l2_norm(theta0)) / l2_norm(theta0)
        assert drift <= 1e-2


class TestCost:
    def test_zero_controls(self, grid33, basis12_33):
        u = ControlTrajectory.constant([0.0, 0.0], 0.1, 1.0)
        assert cost_of(np.ones((33, 33)), basis12_33, u) == 0.0

    def test_unit_density_single_basis(self, grid65):
        basis = sample_basis(grid65, (1,))
        u = ControlTrajectory.constant([1.0], 0.1, 1.0)
        assert cost_of(np.ones((65, 65)), basis, u) == pytest.approx(0.25, abs=1e-6)

    def test_quadratic_in_controls(self, grid33, basis12_33):
        theta = preset_theta0("sine-stripe", grid33).values
        u = ControlTrajectory.constant([0.3, -1.1], 0.1, 1.0)
        assert cost_of(theta, basis12_33, 2 * u) == pytest.approx(4 * cost_of(theta, basis12_33, u),
                                                                  rel=1e-12)

    def test_gram_matrices_symmetric(self, grid33, basis12_33):
        states = np.stack([preset_theta0("tanh-stripe", grid33).values] * 3)
        m = gram_matrices(states, basis12_33)
        assert m.shape == (3, 2, 2)
        np.testing.assert_allclose(m, np.swapaxes(m, 1, 2), atol=1e-15)


class TestAdjointSteps:
    def test_explicit_identity_without_velocity_or_source(self, grid33):
        rho = preset_theta0("cosine-x", grid33)
        out = step_adjoint_explicit(rho, _zero_velocity(grid33), _const(grid33, 0.0), 0.01)
        np.testing.assert_array_equal(out.values, rho.values)

    def test_explicit_source_accumulates(self, grid33):
        rho = _const(grid33, 0.0)
        src = _const(grid33, 0.7)
        for _ in range(20):
            rho = step_adjoint_explicit(rho, _zero_velocity(grid33), src, 0.05)
        np.testing.assert_allclose(rho.values, 0.7, atol=1e-12)

    def test_explicit_rejects_cfl_violation(self, grid33):
        v = assemble_transport_velocity(sample_basis(grid33, (1,)), [40.0])
        rho = preset_theta0("cosine-x", grid33)
        with pytest.raises(SolverError):
            step_adjoint_explicit(rho, v, _const(grid33, 0.0), 0.05)
        with pytest.raises(SolverError):
            check_cfl(v, 0.05)

    def test_implicit_matches_explicit_without_velocity(self, grid33):
        rho = preset_theta0("cosine-y", grid33)
        src = _const(grid33, 0.3)
        a = step_adjoint_implicit(rho, _zero_velocity(grid33), src, 0.1)
        b = step_adjoint_explicit(rho, _zero_velocity(grid33), src, 0.1)
        np.testing.assert_array_equal(a.values, b.values)

    def test_running_source_value(self):
        grid = Grid2D(9)
        basis = sample_basis(grid, (1, 2))
        s = running_source(basis, [1.0, 0.0])
        assert s[2, 2] == pytest.approx(0.25, abs=1e-15)

    def test_source_modes(self, grid33, basis12_33):
        u = [0.8, -0.5]
        sq_sum = running_source(basis12_33, u, "square-of-sum")
        sum_sq = running_source(basis12_33, u, "sum-of-squares")
        assert not np.allclose(sq_sum, sum_sq)
        single = sample_basis(grid33, (2,))
        np.testing.assert_allclose(running_source(single, [1.5], "square-of-sum"),
                                   running_source(single, [1.5], "sum-of-squares"), atol=1e-15)
        assert not np.any(running_source(basis12_33, u, "none"))
        with pytest.raises(ValueError):
            running_source(basis12_33, u, "cube")


class TestSolveAdjoint:
    def test_no_multiplier_no_control(self, grid33, basis12_33):
        theta = preset_theta0("tanh-stripe", grid33)
        u = ControlTrajectory.constant([0.0, 0.0], 0.1, 1.0)
        adj = solve_adjoint(theta, 0.0, basis12_33, u, mean(theta))
        assert not np.any(adj.values)

    def test_frozen_terminal_without_control(self, grid33, basis12_33):
        theta = preset_theta0("tanh-stripe", grid33)
        m0 = mean(theta)
        u = ControlTrajectory.constant([0.0, 0.0], 0.1, 1.0)
        adj = solve_adjoint(theta, 1.0, basis12_33, u, m0)
        expected = -2.0 * solve_helmholtz(theta - m0).values
        for k in range(u.steps + 1):
            np.testing.assert_allclose(adj.values[k], expected, atol=1e-14)

    @pytest.mark.parametrize("scheme", ["implicit", "explicit"])
    def test_mean_of_accumulated_source(self, grid33, scheme):
        basis = sample_basis(grid33, (1,))
        theta = preset_theta0("tanh-stripe", grid33)
        c, tf = 1.5, 0.2
        u = ControlTrajectory.constant([c], 0.01, tf)
        adj = solve_adjoint(theta, 0.0, basis, u, mean(theta), scheme=scheme)
        assert mean(adj.at(0)) == pytest.approx(-tf * c * c / 4, abs=1e-3)

    def test_duality_without_source(self, grid33, basis12_33):
        theta0 = preset_theta0("tanh-stripe", grid33)
        u = ControlTrajectory.constant([0.4, 1.0], 0.02, 0.4)
        rec = solve_state(theta0, basis12_33, u)
        terminal = sample(grid33, lambda x1, x2: np.cos(np.pi * x1) * x2 + x1 ** 2)
        adj = solve_adjoint(rec.final, 0.0, basis12_33, u, mean(theta0),
                            source_mode="none", terminal=terminal)
        pairs = [integrate(ScalarField(grid33, rec.states[k] * adj.values[k]))
                 for k in range(u.steps + 1)]
        assert max(pairs) - min(pairs) <= 1e-8

    def test_rejects_negative_multiplier(self, grid33, basis12_33):
        theta = preset_theta0("tanh-stripe", grid33)
        u = ControlTrajectory.constant([0.0, 1.0], 0.1, 1.0)
        with pytest.raises(ValueError):
            solve_adjoint(theta, -1.0, basis12_33, u, mean(theta))
        with pytest.raises(ValueError):
            solve_adjoint(theta, 1.0, basis12_33, u, mean(theta), scheme="rk4")

    def test_carried_shape(self, grid33, basis12_33):
        theta = preset_theta0("tanh-stripe", grid33)
        u = ControlTrajectory.constant([0.0, 1.0], 0.1, 1.0)
        adj = solve_adjoint(theta, 1.0, basis12_33, u, mean(theta))
        assert isinstance(adj, AdjointTrajectory)
        assert adj.values.shape == (11, 33, 33)
        assert adj.carried.shape == (10, 33, 33)


class TestGradient:
    @pytest.mark.parametrize("lam", [0.0, 1.0])
    def test_adjoint_gradient_matches_finite_differences(self, grid65, basis12_65, lam):
        theta0 = preset_theta0("sine-stripe", grid65) + 0.1
        m0 = mean(theta0)
        rng = np.random.default_rng(42)
        tau, tf = 0.02, 0.2
        base = ControlTrajectory.constant([0.3, 1.0], tau, tf)
        u = base.with_values(base.values + 0.2 * rng.standard_normal(base.values.shape))

        def objective(ctrl):
            rec = solve_state(theta0, basis12_65, ctrl, mean0=m0)
            return rec.cost + lam * mix_norm_sq(rec.final - m0)

        rec = solve_state(theta0, basis12_65, u, mean0=m0)
        adj = solve_adjoint(rec.final, lam, basis12_65, u, m0)
        grad = reduced_gradient(u, gram_matrices(rec.states[:-1], basis12_65),
                                assemble_p(rec.states, adj, basis12_65))

        entries = [(int(i), int(k)) for i, k in zip(rng.integers(0, 2, 10), rng.integers(0, u.steps, 10))]
        delta = 1e-4
        fd, ad = [], []
        for i, k in entries:
            bump = np.zeros_like(u.values)
            bump[i, k] = delta
            plus = objective(u.with_values(u.values + bump))
            minus = objective(u.with_values(u.values - bump))
            fd.append((plus - minus) / (2 * delta))
            ad.append(grad[i, k])
        fd, ad = np.array(fd), np.array(ad)
        assert np.linalg.norm(ad - fd) <= 1e-2 * np.linalg.norm(fd)
