import logging
from typing import Optional

import numpy as np

from core import Grid, History, ProblemDef, Trajectory
from dde import extended_states, stacked_state
from exceptions import NonFiniteCostate

logger = logging.getLogger(__name__)


def integrate_costate(problem: ProblemDef, grid: Grid, state: Trajectory,
                      control: Trajectory,
                      history: Optional[History] = None) -> Trajectory:
    """
    Integrate the costate backward from lambda(T) = 0.

    lambda_j = lambda_{j+1} + dt * sum_s H_{x_s} at node j+1+d_s, where
    H_{x_s} = dl/dx_s + lambda^T df/dx_s and terms past node N are dropped
    (the Hamiltonian vanishes beyond T). Any terminal cost must already be
    absorbed into the running cost.

    Args:
        problem: Problem whose derivative callbacks define H_x
        grid: Grid shared by state and control
        state: Forward state trajectory
        control: Piecewise-constant control; node N reuses node N-1
        history: Pre-horizon state, constant x(t0) when omitted

    Returns:
        Costate trajectory on all N+1 nodes
    """
    problem.check_grid(grid)
    if history is None:
        history = History.constant(state.values[0])
    N, dt = grid.N, grid.dt
    offsets = grid.slot_offsets
    states = extended_states(grid, history, state)
    controls = control.values

    costate = np.zeros((N + 1, problem.n))
    # H_{x_s} evaluated at each node, filled as lambda becomes known there
    sources = np.zeros((N + 1, grid.k + 1, problem.n))

    for node in range(N, 0, -1):
        t = grid.time(node)
        X = stacked_state(grid, states, node)
        u = controls[min(node, N - 1)]
        sources[node] = problem.dl_dx(t, X, u) + costate[node] @ problem.df_dx(t, X, u)

        rate = np.zeros(problem.n)
        for slot, offset in enumerate(offsets):
            advanced = node + offset
            if advanced > N:
                continue
            rate += sources[advanced, slot]
        costate[node - 1] = costate[node] + dt * rate
        if not np.all(np.isfinite(costate[node - 1])):
            raise NonFiniteCostate(node - 1)

    return Trajectory(grid, costate)
