import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from adjoint import integrate_costate
from config import config as defaults
from core import ControlSet, Grid, History, ProblemDef, SolverConfig, Trajectory
from dde import (IntegratorSettings, extended_states, integrate_forward, stacked_state,
                 state_buffer, step)
from exceptions import DivergentInitialControl, MissingHessian, NonFiniteState
from hamiltonian import RegMatrix, grad_H_u, minimize_K
from iteration_log import IterationLog, IterationRecord, IterationSink

logger = logging.getLogger(__name__)


class TerminationReason(str, Enum):
    TOLERANCE_MET = "ToleranceMet"
    MAX_ITERS = "MaxIters"
    C_INCREASE_CAP = "CIncreaseCap"


@dataclass(frozen=True, eq=False)
class Solution:
    """Result of one solve: trajectories, iteration log and termination data"""
    control: Trajectory
    state: Trajectory
    costate: Trajectory
    log: IterationLog
    termination: TerminationReason
    J: float                 # Cost of the returned control (terminal cost absorbed)
    objective: float         # Integral cost plus terminal cost of the original problem
    residual: float          # First-order residual at the returned control
    regularization: RegMatrix
    iteration_bound: Optional[int] = None
    wall_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.termination is TerminationReason.TOLERANCE_MET

    @property
    def iterations(self) -> int:
        last = self.log.last()
        return last.index if last else 0


def absorb_terminal_cost(problem: ProblemDef) -> ProblemDef:
    """
    Fold a terminal cost gamma into the running cost.

    l1(t, X, u) = l(t, X, u) + grad_gamma(x0) . f(t, X, u); the x0 derivative
    picks up hess_gamma(x0) f by the product rule. The integral of l1 equals
    the integral of l plus gamma(x(T)) - gamma(x(t0)).
    """
    if not problem.has_terminal_cost:
        return problem
    if problem.terminal_hess is None:
        raise MissingHessian(f"Problem '{problem.name}' has a terminal cost without its Hessian")

    base = problem

    def running_cost(t, X, u):
        return base.running_cost(t, X, u) + base.terminal_grad(X[0]) @ base.f(t, X, u)

    def dl_dx(t, X, u):
        gradient = base.dl_dx(t, X, u) + base.terminal_grad(X[0]) @ base.df_dx(t, X, u)
        gradient[0] = gradient[0] + base.terminal_hess(X[0]) @ base.f(t, X, u)
        return gradient

    def dl_du(t, X, u):
        return base.dl_du(t, X, u) + base.terminal_grad(X[0]) @ base.df_du(t, X, u)

    # With affine dynamics the extra term is linear in u, so the closed form survives
    return problem.with_changes(
        running_cost=running_cost,
        dl_dx=dl_dx,
        dl_du=dl_du,
        terminal_cost=None,
        terminal_grad=None,
        terminal_hess=None,
        quadratic_control_cost=problem.quadratic_control_cost and problem.control_affine,
        hess_u=problem.hess_u if problem.control_affine else None,
    )


def _cost_from_buffer(problem: ProblemDef, grid: Grid, states: np.ndarray,
                      controls: np.ndarray) -> float:
    total = 0.0
    for node in range(grid.N):
        X = stacked_state(grid, states, node)
        total += problem.running_cost(grid.time(node), X, controls[node])
    return (grid.T - grid.t0) * float(total) / grid.N


def eval_cost(problem: ProblemDef, grid: Grid, state: Trajectory, control: Trajectory,
              history: Optional[History] = None) -> float:
    """Left-endpoint rectangle quadrature of the running cost"""
    history = history or History.constant(state.values[0])
    states = extended_states(grid, history, state)
    return _cost_from_buffer(problem, grid, states, control.values)


def _residual_from_buffer(problem, grid, states, controls, costate, control_set) -> float:
    total = 0.0
    for node in range(grid.N):
        X = stacked_state(grid, states, node)
        u = controls[node]
        g = grad_H_u(problem, grid.time(node), X, u, costate[node])
        r = u - control_set.project(u - g)
        total += float(r @ r)
    return math.sqrt(grid.dt * total)


def optimality_residual(problem: ProblemDef, grid: Grid, control: Trajectory,
                        state: Trajectory, costate: Trajectory,
                        control_set: Optional[ControlSet] = None,
                        history: Optional[History] = None) -> float:
    """L2 norm of u - P_U(u - H_u), zero where the minimum principle holds"""
    control_set = control_set or problem.control_set
    history = history or History.constant(state.values[0])
    states = extended_states(grid, history, state)
    return _residual_from_buffer(problem, grid, states, control.values,
                                 costate.values, control_set)


def termination_bound(J0: float, J_star: float, xi0: float, eta_tol: float) -> int:
    """Upper bound on accepted iterations: floor((J0 - J*) / (xi0 * eta_tol))"""
    if J_star > J0:
        raise ValueError(f"Lower bound {J_star} exceeds the initial cost {J0}")
    if xi0 <= 0 or eta_tol <= 0:
        raise ValueError("xi0 and eta_tol must be positive")
    return math.floor((J0 - J_star) / (xi0 * eta_tol))


InitialControl = Union[None, float, Sequence[float], np.ndarray, Trajectory]


@dataclass(frozen=True)
class Sweep:
    """Controls and state buffer produced by one Step-2 sweep"""
    controls: np.ndarray
    states: np.ndarray
    costate_version: int  # Which costate computation drove the sweep


class EssaSolver:
    """Extended Sakawa-Shindo outer loop for one problem on one grid"""

    def __init__(self, problem: ProblemDef, grid: Grid, history: History,
                 config: Optional[SolverConfig] = None,
                 integrator: Optional[IntegratorSettings] = None,
                 sink: Optional[IterationSink] = None):
        problem.check_grid(grid)
        history.validate(grid, problem.n)
        self.original = problem
        self.problem = absorb_terminal_cost(problem)
        self.grid = grid
        self.history = history
        self.config = config or SolverConfig()
        self.integrator = integrator or IntegratorSettings()
        self.control_set = problem.control_set
        self.log = IterationLog()
        if sink:
            self.log.add_sink(sink)
        self.costate_count = 0

    def solve(self, u0: InitialControl = None) -> Solution:
        """
        Run Steps 0-3 until ||du||^2 <= eta_tol or a cap is reached.

        Each iteration computes the costate of the current pair, then sweeps
        the nodes left to right minimizing K and advancing the state. A sweep
        whose cost does not drop is redone from the same control and costate
        with every entry of C multiplied by c_growth. A sweep whose state
        becomes non-finite counts as such a sweep, with J = inf.
        """
        start = time.perf_counter()
        cfg = self.config
        eta_tol = cfg.resolved_eta_tol(self.grid, self.problem.m)
        C = RegMatrix(cfg.c0_vector(self.problem.m))

        control = self._initial_control(u0)
        try:
            states = self._integrate(control)
        except NonFiniteState as e:
            raise DivergentInitialControl(e.node) from e
        J = _cost_from_buffer(self.problem, self.grid, states, control)
        J0 = J
        self.log.append(IterationRecord(0, J, 0.0, C.eps_min, 0, True))
        logger.info(f"Solving '{self.problem.name}' on N={self.grid.N}, "
                    f"eta_tol={eta_tol:.3g}, J0={J0:.10g}")

        termination = TerminationReason.MAX_ITERS
        for i in range(1, cfg.max_outer_iters + 1):
            costate = self._costate(states, control)
            version = self.costate_count
            increases = 0
            outcome = None
            while outcome is None:
                try:
                    sweep = self._sweep(costate, version, control, C)
                except NonFiniteState as e:
                    logger.warning(f"Iteration {i}: sweep diverged at node {e.node}, "
                                   f"eps_min={C.eps_min:.6g}")
                    self._record(i, math.inf, math.nan, C, increases, False, version)
                    C, increases, outcome = self._grow(i, C, increases)
                    continue

                delta_u_sq = self._l2_sq(sweep.controls - control)
                J_new = _cost_from_buffer(self.problem, self.grid, sweep.states, sweep.controls)

                if delta_u_sq <= eta_tol and self._residual_gate(sweep.states, sweep.controls):
                    self._record(i, J_new, delta_u_sq, C, increases, J_new < J,
                                 sweep.costate_version)
                    control, states, J = sweep.controls, sweep.states, J_new
                    outcome = TerminationReason.TOLERANCE_MET
                elif not J_new < J:
                    self._record(i, J_new, delta_u_sq, C, increases, False,
                                 sweep.costate_version)
                    C, increases, outcome = self._grow(i, C, increases)
                else:
                    self._record(i, J_new, delta_u_sq, C, increases, True,
                                 sweep.costate_version)
                    control, states, J = sweep.controls, sweep.states, J_new
                    if cfg.c_relax > 1.0:
                        C = C.relaxed(cfg.c_relax)
                    outcome = "accepted"

            if outcome != "accepted":
                termination = outcome
                break

        return self._finish(control, states, J, J0, C, eta_tol, termination,
                            time.perf_counter() - start)

    def _grow(self, i, C, increases):
        """Scale C after a rejected sweep, or stop once the per-iteration cap is hit"""
        if increases >= self.config.max_c_increases_per_iter:
            return C, increases, TerminationReason.C_INCREASE_CAP
        C = C.grown(self.config.c_growth)
        logger.info(f"Iteration {i}: cost did not decrease, eps_min -> {C.eps_min:.6g}")
        return C, increases + 1, None

    def _record(self, i, J, delta_u_sq, C, increases, accepted, version):
        record = IterationRecord(i, J, delta_u_sq, C.eps_min, increases, accepted,
                                 costate_version=version)
        logger.debug(f"Iteration {i}: J={J:.12g} du2={delta_u_sq:.3e} "
                     f"eps_min={C.eps_min:.3g} accepted={accepted}")
        self.log.append(record)

    def _residual_gate(self, states, controls) -> bool:
        """Strict mode also demands a small first-order residual before stopping"""
        if not self.config.strict:
            return True
        costate = self._costate(states, controls)
        residual = _residual_from_buffer(self.problem, self.grid, states, controls,
                                         costate.values, self.control_set)
        if residual > self.config.residual_tol:
            logger.info(f"Step below eta_tol but residual {residual:.3e} "
                        f"exceeds {self.config.residual_tol:.3e}; continuing")
            return False
        return True

    def _initial_control(self, u0: InitialControl) -> np.ndarray:
        N, m = self.grid.N, self.problem.m
        if u0 is None:
            values = np.tile(self.control_set.default_point(), (N + 1, 1))
        elif isinstance(u0, Trajectory):
            values = np.array(u0.values)
        else:
            array = np.asarray(u0, dtype=float)
            if array.ndim == 2:
                values = np.array(array)
            else:
                values = np.tile(np.broadcast_to(array, (m,)), (N + 1, 1))
        if values.shape != (N + 1, m):
            raise ValueError(f"Initial control must have shape {(N + 1, m)}, got {values.shape}")

        projected = np.array([self.control_set.project(v) for v in values])
        moved = int(np.count_nonzero(np.any(projected != values, axis=1)))
        if moved:
            logger.warning(f"Projected {moved} nodes of the initial control onto U")
        projected[N] = projected[N - 1]
        return projected

    def _integrate(self, controls: np.ndarray) -> np.ndarray:
        states = state_buffer(self.grid, self.history, self.problem.n)
        for node in range(self.grid.N):
            step(self.problem, self.grid, states, node, controls[node], self.integrator)
        return states

    def _costate(self, states: np.ndarray, controls: np.ndarray) -> Trajectory:
        """Backward costate of a state buffer; each call bumps costate_count"""
        base = self.grid.max_delay_steps
        costate = integrate_costate(self.problem, self.grid,
                                    Trajectory(self.grid, states[base:]),
                                    Trajectory(self.grid, controls), self.history)
        self.costate_count += 1
        return costate

    def _sweep(self, costate: Trajectory, version: int, previous: np.ndarray,
               C: RegMatrix) -> Sweep:
        """Per-node minimization of K with immediate state advance"""
        grid, problem = self.grid, self.problem
        lam = costate.values
        states = state_buffer(grid, self.history, problem.n)
        controls = np.empty_like(previous)
        for node in range(grid.N):
            # X at this node depends only on controls of earlier nodes
            X = stacked_state(grid, states, node)
            controls[node] = minimize_K(problem, grid.time(node), X, lam[node],
                                        previous[node], C, self.control_set,
                                        self.config.inner)
            step(problem, grid, states, node, controls[node], self.integrator)
        controls[grid.N] = controls[grid.N - 1]
        return Sweep(controls, states, version)

    def _l2_sq(self, difference: np.ndarray) -> float:
        return self.grid.dt * float(np.sum(difference[: self.grid.N] ** 2))

    def _finish(self, controls, states, J, J0, C, eta_tol, termination, elapsed) -> Solution:
        grid, base = self.grid, self.grid.max_delay_steps
        control = Trajectory(grid, controls)
        state = Trajectory(grid, states[base:])
        costate = self._costate(states, controls)
        residual = _residual_from_buffer(self.problem, grid, states, controls,
                                         costate.values, self.control_set)
        self.log.set_final_residual(residual)

        replay = integrate_forward(self.problem, grid, control, self.history, self.integrator)
        gap = float(np.max(np.abs(replay.values - state.values)))
        if gap > defaults.CLOSURE_TOL:
            raise RuntimeError(f"Returned state differs from its re-integration by {gap:.3e}")

        objective = J
        if self.original.has_terminal_cost:
            objective = (_cost_from_buffer(self.original, grid, states, controls)
                         + float(self.original.terminal_cost(state.values[-1])))

        bound = None
        cfg = self.config
        if cfg.xi0 is not None and cfg.J_lower_bound is not None and cfg.J_lower_bound <= J0:
            bound = termination_bound(J0, cfg.J_lower_bound, cfg.xi0, eta_tol)

        logger.info(f"Finished '{self.problem.name}': {termination.value} after "
                    f"{self.log.last().index} iterations, J={J:.12g}, residual={residual:.3e}")
        return Solution(control=control, state=state, costate=costate, log=self.log,
                        termination=termination, J=J, objective=objective,
                        residual=residual, regularization=C, iteration_bound=bound,
                        wall_time=elapsed)


def solve(problem: ProblemDef, grid: Grid, history: History,
          config: Optional[SolverConfig] = None, u0: InitialControl = None,
          integrator: Optional[IntegratorSettings] = None,
          sink: Optional[IterationSink] = None) -> Solution:
    """Solve the delayed optimal control problem with the extended Sakawa-Shindo loop"""
    return EssaSolver(problem, grid, history, config, integrator, sink).solve(u0)
