import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from core import Grid, History, ProblemDef, Trajectory
from exceptions import NonFiniteState

logger = logging.getLogger(__name__)


class Scheme(str, Enum):
    EXPLICIT_EULER = "explicit_euler"
    HEUN2 = "heun2"


class IntegratorSettings(BaseModel):
    """Finite-difference scheme used by the method of steps"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    scheme: Scheme = Scheme.EXPLICIT_EULER
    nonneg_clip: bool = False  # Clamp negative components to 0 after each step


DEFAULT_SETTINGS = IntegratorSettings()


def state_buffer(grid: Grid, history: History, n: int) -> np.ndarray:
    """
    Working array holding the pre-horizon block followed by the grid nodes.

    Row d_k + j is node j, so slot s of X at node j is row d_k + j - d_s.
    Only the history rows (up to node 0) are filled.
    """
    history.validate(grid, n)
    buffer = np.zeros((grid.max_delay_steps + grid.N + 1, n))
    buffer[: grid.max_delay_steps + 1] = history.block(grid)
    return buffer


def extended_states(grid: Grid, history: History, state: Trajectory) -> np.ndarray:
    """State buffer filled from an existing trajectory"""
    buffer = state_buffer(grid, history, state.dim)
    buffer[grid.max_delay_steps:] = state.values
    return buffer


def stacked_state(grid: Grid, buffer: np.ndarray, node: int) -> np.ndarray:
    """X at a node: current and delayed states, shape (k+1, n)"""
    return buffer[grid.max_delay_steps + node - grid.slot_offsets]


def step(problem: ProblemDef, grid: Grid, buffer: np.ndarray, node: int,
         u: np.ndarray, settings: IntegratorSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Advance the state from `node` to `node + 1` under the interval's control"""
    base = grid.max_delay_steps
    dt = grid.dt
    t = grid.time(node)
    X = stacked_state(grid, buffer, node)
    rate = problem.f(t, X, u)

    if settings.scheme is Scheme.HEUN2:
        predictor = X[0] + dt * rate
        # Delayed slots at node+1 are already known since every d_s >= 1
        X_next = stacked_state(grid, buffer, node + 1)
        X_next[0] = predictor
        x_new = X[0] + 0.5 * dt * (rate + problem.f(t + dt, X_next, u))
    else:
        x_new = X[0] + dt * rate

    if settings.nonneg_clip:
        negative = x_new < 0
        if negative.any():
            logger.warning(
                f"Clipped components {np.flatnonzero(negative).tolist()} "
                f"to zero at node {node + 1} (t={t + dt:.6g})"
            )
            x_new = np.where(negative, 0.0, x_new)

    if not np.all(np.isfinite(x_new)):
        raise NonFiniteState(node + 1)
    buffer[base + node + 1] = x_new
    return x_new


def integrate_forward(problem: ProblemDef, grid: Grid, control: Trajectory,
                      history: History,
                      settings: Optional[IntegratorSettings] = None) -> Trajectory:
    """
    Integrate the delayed dynamics by the method of steps.

    Args:
        problem: Dynamics and derivative callbacks
        grid: Uniform grid whose delays match the problem's
        control: Piecewise-constant control, value on [rho_j, rho_j+1) at node j
        history: Initial function on [-h_k, 0]
        settings: Scheme and clipping options

    Returns:
        State trajectory; node 0 equals the history value at t0
    """
    settings = settings or DEFAULT_SETTINGS
    problem.check_grid(grid)
    if control.grid.N != grid.N or control.dim != problem.m:
        raise ValueError(
            f"Control must have {grid.N + 1} nodes of dimension {problem.m}, "
            f"got {control.values.shape}"
        )
    buffer = state_buffer(grid, history, problem.n)
    controls = control.values
    for node in range(grid.N):
        step(problem, grid, buffer, node, controls[node], settings)
    return Trajectory(grid, buffer[grid.max_delay_steps:])


@dataclass
class ConvergenceEstimate:
    """Empirical order from successive grid halvings"""
    order: Optional[float]
    exact: bool
    differences: List[float] = field(default_factory=list)

    def describe(self) -> str:
        if self.exact:
            return "exact"
        return f"{self.order:.3f}"


ControlSpec = Union[np.ndarray, float, Callable[[float], np.ndarray]]


def _control_on(grid: Grid, control: ControlSpec) -> Trajectory:
    if callable(control):
        return Trajectory.from_function(grid, control)
    return Trajectory.constant(grid, control)


def convergence_order(problem: ProblemDef, grid: Grid, control: ControlSpec,
                      history: History, refinements: int = 3,
                      settings: Optional[IntegratorSettings] = None) -> ConvergenceEstimate:
    """
    Estimate the scheme order on `refinements` grids dt, dt/2, dt/4, ...

    Each grid's error is its sup-norm difference to the next finer grid on
    the coarse nodes, not to the finest grid. For an order-p scheme these
    differences shrink by 2^p per halving, whereas differences to the finest
    grid shrink by 2^p + 1 over the last halving (log2(3) for Euler). The
    order is log2 of the ratio of the last two.
    """
    if refinements < 3:
        raise ValueError("At least three grids are needed for an order estimate")
    restricted = []
    for level in range(refinements):
        factor = 2 ** level
        fine = grid.refine(factor)
        state = integrate_forward(problem, fine, _control_on(fine, control),
                                  history.resample(factor), settings)
        restricted.append(state.values[::factor])

    differences = [float(np.max(np.abs(a - b))) for a, b in zip(restricted, restricted[1:])]
    if all(d == 0.0 for d in differences):
        return ConvergenceEstimate(order=None, exact=True, differences=differences)
    if differences[-1] == 0.0 or differences[-2] == 0.0:
        order = math.inf if differences[-1] == 0.0 else -math.inf
        return ConvergenceEstimate(order=order, exact=False, differences=differences)
    order = math.log2(differences[-2] / differences[-1])
    logger.debug(f"Successive differences {differences}, order {order:.3f}")
    return ConvergenceEstimate(order=order, exact=False, differences=differences)
