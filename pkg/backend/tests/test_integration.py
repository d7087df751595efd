"""
End-to-end run of the delayed SIRV problem as shipped in configs/sirv_delayed.json:
an incubation delay of 5 days in the contagion terms, a vaccine build-up delay
of 7 days in the vaccination flow and a 350-day horizon on 3500 nodes.
"""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from cli import cmd_solve
from core import Trajectory
from dde import integrate_forward
from essa import Solution, TerminationReason, eval_cost, solve
from output_writer import OutputWriter
from run_config import ResolvedRun, load_run

CONFIG = Path(__file__).resolve().parents[2] / "configs" / "sirv_delayed.json"
RESULT_FILES = ("trajectories.csv", "controls.csv", "iterations.csv")


@dataclass
class SirvRun:
    run: ResolvedRun
    solution: Solution
    directory: Path

    @property
    def infected(self) -> np.ndarray:
        return self.solution.state.values[:, 1]


@pytest.fixture(scope="module")
def sirv_run(tmp_path_factory):
    """Solve the shipped configuration once and write its result files"""
    run = load_run(str(CONFIG))
    solution = solve(run.problem, run.grid, run.history, run.config.solver,
                     run.initial_control(), run.config.integrator)
    directory = tmp_path_factory.mktemp("sirv_first")
    writer = OutputWriter(str(directory), run.config.output.precision)
    writer.write_states(solution.state, run.problem.state_names)
    writer.write_controls(solution.control, run.problem.control_names)
    writer.write_iterations(solution.log)
    return SirvRun(run, solution, directory)


@pytest.mark.slow
@pytest.mark.integration
class TestSirvFullHorizon:
    """Full-horizon SIRV solve"""

    def test_tolerance_met(self, sirv_run):
        """Test the run stops on the step tolerance within 500 iterations"""
        assert sirv_run.solution.termination is TerminationReason.TOLERANCE_MET
        assert sirv_run.solution.iterations <= 500

    def test_accepted_costs_strictly_decrease(self, sirv_run):
        """Test J strictly decreases over accepted iterations"""
        costs = sirv_run.solution.log.accepted_costs()

        assert len(costs) > 1
        assert all(later < earlier for earlier, later in zip(costs, costs[1:]))
        assert sirv_run.solution.J < costs[0]

    def test_regularization_never_shrinks(self, sirv_run):
        """Test the smallest C entry is non-decreasing across attempts"""
        eps = sirv_run.solution.log.eps_sequence()

        assert all(later >= earlier for earlier, later in zip(eps, eps[1:]))

    def test_residual_within_bound(self, sirv_run):
        """Test the exit residual is at most 1e-3 sqrt(m (T - t0)) u_max"""
        bound = 1e-3 * math.sqrt(2 * 350.0) * 0.4

        assert sirv_run.solution.residual <= bound
        assert sirv_run.solution.log.last().residual == sirv_run.solution.residual

    def test_infection_peaks_early(self, sirv_run):
        """Test I peaks before day 80"""
        grid = sirv_run.run.grid

        assert grid.times[int(np.argmax(sirv_run.infected))] < 80.0

    def test_infection_declines_after_day_80(self, sirv_run):
        """Test I is strictly decreasing on [80, 350]"""
        start = int(np.searchsorted(sirv_run.run.grid.times, 80.0))

        assert np.all(np.diff(sirv_run.infected[start:]) < 0.0)

    def test_final_infection_small(self, sirv_run):
        """Test I(350) is at most one percent of the peak"""
        infected = sirv_run.infected

        assert infected[-1] <= 1e-2 * infected.max()

    def test_control_is_feasible(self, sirv_run):
        """Test every control node lies in the box [0, 0.4] x [0, 0.8]"""
        control = sirv_run.solution.control.values

        assert np.all(control >= 0.0)
        assert np.all(control[:, 0] <= 0.4)
        assert np.all(control[:, 1] <= 0.8)

    def test_compartments_non_negative(self, sirv_run):
        """Test no compartment drops below -1e-9"""
        assert np.all(sirv_run.solution.state.values >= -1e-9)

    def test_state_matches_replay(self, sirv_run):
        """Test the returned state is the forward integration of the returned control"""
        run, solution = sirv_run.run, sirv_run.solution
        replay = integrate_forward(run.problem, run.grid, solution.control,
                                   run.history, run.config.integrator)

        assert np.max(np.abs(replay.values - solution.state.values)) <= 1e-12

    def test_reported_cost_matches_quadrature(self, sirv_run):
        """Test J equals the cost of the returned trajectory plus the terminal term"""
        run, solution = sirv_run.run, sirv_run.solution
        cost = eval_cost(run.problem, run.grid, solution.state, solution.control, run.history)
        cost += float(run.problem.terminal_cost(solution.state.values[-1]))

        assert solution.objective == pytest.approx(cost, rel=1e-10)

    def test_controls_flatten_the_epidemic(self, sirv_run):
        """Test the optimal controls lower the infection peak of the uncontrolled run"""
        run = sirv_run.run
        uncontrolled = integrate_forward(run.problem, run.grid,
                                         Trajectory.constant(run.grid, [0.0, 0.0]),
                                         run.history, run.config.integrator)

        assert sirv_run.infected.max() < uncontrolled.values[:, 1].max()

    def test_rerun_is_byte_identical(self, sirv_run, tmp_path):
        """Test solving the config again through the CLI writes identical result files"""
        cmd_solve(str(CONFIG), out=str(tmp_path), progress=False)

        for name in RESULT_FILES:
            first = (sirv_run.directory / name).read_bytes()
            assert (tmp_path / name).read_bytes() == first, name
