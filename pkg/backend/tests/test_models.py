import logging

import numpy as np
import pytest

from core import History, SolverConfig, Trajectory, build_grid
from dde import integrate_forward
from essa import solve
from exceptions import InvalidParams, MissingCoefficients
from models import (SidartheVParams, lq_problem_from_params, lq_test_problem,
                    negative_compartments, sidarthe_v_history, sidarthe_v_problem,
                    sirv_history, sirv_problem)
from oracle import delayed_slot_audit, fd_check
from registry import LqBuilder, ModelBuilder, ModelRegistry, default_registry


def stacked(grid_rows, k):
    """X with the same state in every slot"""
    return np.tile(np.asarray(grid_rows, dtype=float), (k + 1, 1))


@pytest.mark.unit
class TestSirvModel:
    """Test suite for the delayed SIRV model"""

    def test_defaults(self, sirv_params):
        """Test the default rates and the derived initial state"""
        assert sirv_params.h1 == 5.0 and sirv_params.h2 == 7.0
        assert sirv_params.u_max == 0.4 and sirv_params.v_max == 0.8
        assert sirv_params.initial_state() == pytest.approx([1.0 - 1e-6, 1e-6, 0.0, 0.0])

    def test_problem_shape(self, sirv):
        """Test dimensions, delays, names and the control box"""
        assert (sirv.n, sirv.m) == (4, 2)
        assert sirv.delays == (5.0, 7.0)
        assert sirv.state_names == ("S", "I", "R", "V")
        assert sirv.control_names == ("u", "v")
        assert sirv.control_set.upper == pytest.approx([0.4, 0.8])
        assert sirv.control_affine and sirv.quadratic_control_cost
        assert sirv.has_terminal_cost

    def test_disease_free_state(self, sirv):
        """Test that I = 0 is an equilibrium of the infected compartment"""
        X = stacked([1.0, 0.0, 0.0, 0.0], 2)

        rate = sirv.f(0.0, X, np.zeros(2))

        assert rate[1] == 0.0
        assert rate[0] == pytest.approx(2.91e-5 - 2.90e-5)

    def test_full_distancing_stops_transmission(self, sirv):
        """Test u = 1 gives dI/dt = -(gamma + mu_I) I"""
        X = stacked([0.9, 0.01, 0.05, 0.04], 2)

        rate = sirv.f(0.0, X, np.array([1.0, 0.0]))

        assert rate[1] == pytest.approx(-(1.0 / 6.0 + 2.90e-5) * 0.01)

    def test_delayed_infection_derivative(self, sirv):
        """Test d(dI/dt)/dI(t-h1) = beta (1 - u) (S + theta_V V + theta_R R)"""
        X = stacked([0.9, 0.01, 0.05, 0.04], 2)
        u = np.array([0.2, 0.1])
        h = 1e-6
        plus, minus = X.copy(), X.copy()
        plus[1, 1] += h
        minus[1, 1] -= h

        numeric = (sirv.f(0.0, plus, u)[1] - sirv.f(0.0, minus, u)[1]) / (2.0 * h)
        analytic = sirv.df_dx(0.0, X, u)[1, 1, 1]

        assert analytic == pytest.approx(0.8 * (0.9 + 0.0013 * 0.04 + 0.0021 * 0.05))
        assert numeric == pytest.approx(analytic, rel=1e-8)

    def test_derivatives_match_finite_differences(self, sirv):
        """Test every derivative block against central differences"""
        report = fd_check(sirv, samples=50, eps=1e-6)

        assert report.passed(1e-6), report.errors

    def test_equal_delays_share_a_slot(self):
        """Test h1 = h2 collapses to one delayed slot read by both terms"""
        problem = sirv_problem({"h1": 5.0, "h2": 5.0})

        assert problem.delays == (5.0,)
        assert fd_check(problem, samples=20, eps=1e-6).passed(1e-6)

    def test_delayed_slot_audit(self, sirv, sirv_params):
        """Test that the I(t-h1) and S(t-h2) slots are the only delayed reads"""
        grid = build_grid(0.0, 30.0, 300, sirv.delays)
        control = Trajectory.constant(grid, [0.1, 0.2])

        reads = delayed_slot_audit(sirv, grid, control, sirv_history(sirv_params), stride=10)

        assert reads == {1: [1], 2: [0]}

    def test_uncontrolled_run_stays_in_simplex(self, sirv, sirv_params):
        """Test compartments stay non-negative and bounded over 350 days"""
        grid = build_grid(0.0, 350.0, 3500, sirv.delays)
        control = Trajectory.constant(grid, [0.0, 0.0])

        state = integrate_forward(sirv, grid, control, sirv_history(sirv_params))

        assert np.all(state.values >= -1e-9)
        assert np.all(state.values.sum(axis=1) <= 1.01)
        assert negative_compartments(state, sirv.state_names) == []
        # Without control the outbreak grows far beyond I0
        assert state.values[:, 1].max() > 1e-2

    @pytest.mark.parametrize("control", [[0.4, 0.8], [0.2, 0.4], [0.0, 0.8]])
    def test_controlled_runs_stay_non_negative(self, sirv, sirv_params, control):
        """Test compartments stay above -1e-9 over 350 days for controls in the box"""
        grid = build_grid(0.0, 350.0, 3500, sirv.delays)

        state = integrate_forward(sirv, grid, Trajectory.constant(grid, control),
                                  sirv_history(sirv_params))

        assert np.all(state.values >= -1e-9)
        assert np.all(state.values.sum(axis=1) <= 1.01)

    def test_vaccination_flow_on_constant_history(self, sirv):
        """Test the flow S -> V is v S when S(t-h2) equals S"""
        X = stacked([0.6, 0.01, 0.1, 0.29], 2)

        rate = sirv.f(0.0, X, np.array([0.0, 0.5]))
        no_vaccination = sirv.f(0.0, X, np.zeros(2))

        assert rate[3] - no_vaccination[3] == pytest.approx(0.5 * 0.6)
        assert rate[0] - no_vaccination[0] == pytest.approx(-0.5 * 0.6)

    def test_vaccination_flow_limited_by_susceptibles(self, sirv):
        """Test the flow stays below v (1 + kappa) S / kappa when S(t-h2) is much larger"""
        X = stacked([0.01, 0.0, 0.0, 0.0], 2)
        X[2, 0] = 0.9

        flow = sirv.f(0.0, X, np.array([0.0, 0.8]))[3]

        assert 0.0 < flow <= 0.8 * 1.25 * 0.01 / 0.25
        assert flow < 0.8 * 0.9

    def test_bilinear_vaccination_flow(self):
        """Test vaccination_saturation = 0 gives the flow v S(t-h2)"""
        problem = sirv_problem({"vaccination_saturation": 0.0})
        X = stacked([0.01, 0.0, 0.0, 0.0], 2)
        X[2, 0] = 0.9

        flow = problem.f(0.0, X, np.array([0.0, 0.8]))[3]

        assert flow == pytest.approx(0.8 * 0.9)
        assert fd_check(problem, samples=20, eps=1e-6).passed(1e-6)

    @pytest.mark.parametrize("params", [{"u_max": -1.0}, {"theta_V": 2.0}, {"w_I": -1.0},
                                        {"unknown": 1.0}, {"h1": 0.0}])
    def test_invalid_params(self, params):
        """Test that out-of-range or unknown parameters raise InvalidParams"""
        with pytest.raises(InvalidParams) as info:
            sirv_problem(params)

        assert info.value.messages

    def test_no_terminal_cost_when_weight_zero(self):
        """Test terminal_weight = 0 drops the terminal cost"""
        assert not sirv_problem({"terminal_weight": 0.0}).has_terminal_cost

    def test_negative_compartments_warns(self, caplog):
        """Test that compartments below the floor are reported"""
        grid = build_grid(0.0, 1.0, 2)
        state = Trajectory(grid, [[0.5, 0.1], [0.5, -1e-6], [0.5, 0.0]])

        with caplog.at_level(logging.WARNING, logger="models"):
            offenders = negative_compartments(state, ("S", "I"))

        assert [name for name, _ in offenders] == ["I"]
        assert "Compartment I" in caplog.text


@pytest.mark.unit
class TestSidartheVModel:
    """Test suite for the extended SIDARTHE-V model"""

    def test_missing_coefficients(self):
        """Test that absent coefficients are listed by name"""
        with pytest.raises(MissingCoefficients) as info:
            sidarthe_v_problem({"alpha": 0.5})

        assert "alpha" not in info.value.missing
        assert "beta" in info.value.missing
        assert "lambda" in info.value.missing

    def test_lambda_alias(self, sidarthe_params):
        """Test that the coefficient file spells lambda as 'lambda'"""
        params = SidartheVParams.model_validate(sidarthe_params)

        assert params.lambda_ == pytest.approx(0.034)
        assert params.missing_coefficients() == []

    def test_problem_shape(self, sidarthe_params):
        """Test dimensions, delays and the vaccination bound"""
        problem = sidarthe_v_problem(sidarthe_params)

        assert (problem.n, problem.m) == (9, 1)
        assert problem.delays == (3.0, 5.0)
        assert problem.control_set.upper == pytest.approx([0.1])
        assert problem.state_names[-1] == "V"

    def test_population_is_conserved(self, sidarthe_params):
        """Test that the rates sum to zero without births and deaths"""
        problem = sidarthe_v_problem(sidarthe_params)
        rng = np.random.default_rng(5)

        for _ in range(20):
            X = rng.uniform(0.0, 1.0, size=(3, 9))
            u = rng.uniform(0.0, 0.1, size=1)
            assert np.sum(problem.f(0.0, X, u)) == pytest.approx(0.0, abs=1e-12)

    def test_no_infection_means_only_vaccination(self, sidarthe_params):
        """Test that with no contagious classes only vaccination and waning act on S and V"""
        problem = sidarthe_v_problem(sidarthe_params)
        X = np.zeros((3, 9))
        X[:, 0] = 0.8
        X[:, 8] = 0.2

        rate = problem.f(0.0, X, np.array([0.05]))

        omega_V = 1.0 / 180.0
        assert rate[0] == pytest.approx(-0.05 * 0.8 + omega_V * 0.2)
        assert rate[8] == pytest.approx(0.05 * 0.8 - omega_V * 0.2)
        assert np.all(rate[1:8] == 0.0)

    def test_derivatives_match_finite_differences(self, sidarthe_params):
        """Test every derivative block against central differences"""
        problem = sidarthe_v_problem(sidarthe_params)

        report = fd_check(problem, samples=30, eps=1e-6)

        assert report.passed(1e-6), report.errors

    def test_delayed_slot_audit(self, sidarthe_params):
        """Test contagious classes are read at t-h1 and S at t-h2"""
        problem = sidarthe_v_problem(sidarthe_params)
        grid = build_grid(0.0, 20.0, 200, problem.delays)
        control = Trajectory.constant(grid, 0.05)

        reads = delayed_slot_audit(problem, grid, control, sidarthe_v_history(sidarthe_params),
                                   stride=20)

        assert reads == {1: [1, 2, 3, 4], 2: [0]}

    def test_history_requires_initial_state(self, sidarthe_params):
        """Test that the initial state must be given with nine values"""
        params = dict(sidarthe_params)
        params.pop("initial_state")
        with pytest.raises(MissingCoefficients):
            sidarthe_v_history(params)

        params["initial_state"] = [1.0, 0.0]
        with pytest.raises(InvalidParams):
            sidarthe_v_history(params)


@pytest.mark.unit
class TestLqModel:
    """Test suite for the scalar LQ test problem"""

    @pytest.mark.parametrize("q,r", [(-1.0, 1.0), (1.0, 0.0), (1.0, -2.0)])
    def test_invalid_weights(self, q, r):
        """Test that q < 0 or r <= 0 raise InvalidParams"""
        with pytest.raises(InvalidParams):
            lq_test_problem(0.0, 1.0, q, r)

    def test_reversed_bounds(self):
        """Test that reversed control bounds raise InvalidParams"""
        with pytest.raises(InvalidParams):
            lq_test_problem(0.0, 1.0, 1.0, 1.0, u_bounds=(1.0, -1.0))

    def test_from_params(self):
        """Test building from the parameter model"""
        problem = lq_problem_from_params({"a": 0.5, "terminal_weight": 2.0})

        assert problem.horizon == 1.0
        assert problem.has_terminal_cost
        assert problem.terminal_cost(np.array([3.0])) == pytest.approx(9.0)
        assert fd_check(problem, samples=10).passed(1e-6)


@pytest.mark.unit
class TestModelRegistry:
    """Test suite for named model builders"""

    def setup_method(self):
        self.registry = default_registry()

    def test_shipped_models(self):
        """Test that the shipped models are registered"""
        assert self.registry.names() == ["lq", "sidarthe_v", "sirv"]
        assert self.registry.get("sirv").compartmental
        assert not self.registry.get("lq").compartmental

    def test_unknown_model(self):
        """Test that unknown names raise KeyError listing the known ones"""
        with pytest.raises(KeyError) as info:
            self.registry.get("seir")

        assert "sirv" in str(info.value)

    def test_register_requires_name(self):
        """Test that unnamed builders are refused"""
        class Unnamed(LqBuilder):
            name = ""

        with pytest.raises(ValueError):
            ModelRegistry().register(Unnamed())

    def test_parse_params(self):
        """Test raw parameter validation through a builder"""
        builder = self.registry.get("lq")

        assert builder.parse_params({"q": 2.0}).q == 2.0
        with pytest.raises(InvalidParams):
            builder.parse_params({"r": 0.0})

    def test_builder_is_abstract(self):
        """Test that ModelBuilder cannot be used without its hooks"""
        with pytest.raises(TypeError):
            ModelBuilder()

    def test_lq_builder_history(self):
        """Test the LQ builder's constant history"""
        builder = self.registry.get("lq")
        history = builder.initial_history(builder.parse_params({"x0": 2.0}))

        assert isinstance(history, History)
        assert history.initial_state == pytest.approx([2.0])


@pytest.mark.integration
class TestModelSolves:
    """Test suite for solving small model instances"""

    def test_lq_zero_weights_keep_zero_control(self):
        """Test q = 0 and x0 = 0 return u = 0 with J = 0"""
        problem = lq_test_problem(0.0, 1.0, 0.0, 1.0, T=1.0)
        grid = build_grid(0.0, 1.0, 100)

        solution = solve(problem, grid, History.constant([0.0]))

        assert solution.converged
        assert solution.J == 0.0

    def test_short_sirv_horizon(self, sirv_params):
        """Test a 60-day SIRV solve lowers the cost and stays feasible"""
        problem = sirv_problem({"horizon": 60.0})
        grid = build_grid(0.0, 60.0, 600, problem.delays)

        solution = solve(problem, grid, sirv_history(sirv_params),
                         SolverConfig(max_outer_iters=100))

        costs = solution.log.accepted_costs()
        assert all(b < a for a, b in zip(costs, costs[1:]))
        assert all(problem.control_set.contains(u) for u in solution.control.values)
        assert len(costs) > 1
