import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from config import config
from core import Grid, History, ProblemDef, SolverConfig, Trajectory, build_grid
from dde import IntegratorSettings, extended_states, integrate_forward, stacked_state
from essa import absorb_terminal_cost, eval_cost, solve
from exceptions import NoConvergence
from models import LqParams, lq_problem_from_params

logger = logging.getLogger(__name__)

# Relative rounding error allowed in each callback value of a difference quotient
ROUNDOFF = 4.0 * np.finfo(float).eps


def l2_distance(a: Trajectory, b: Trajectory) -> float:
    """L2[t0, T] distance of two piecewise-constant controls on the same grid"""
    grid = a.grid
    difference = a.values[: grid.N] - b.values[: grid.N]
    return math.sqrt(grid.dt * float(np.sum(difference ** 2)))


# --- Finite-difference derivative check ---

@dataclass
class FdReport:
    """Largest relative error per derivative block over the sampled points"""
    errors: Dict[str, float] = field(default_factory=dict)
    samples: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failing(self, tol: float) -> List[str]:
        return [block for block, error in self.errors.items() if error > tol]

    def passed(self, tol: float) -> bool:
        return not self.failing(tol)


def _sample_point(problem: ProblemDef, rng: np.random.Generator, state_scale: float):
    X = rng.uniform(0.0, state_scale, size=(problem.num_slots, problem.n))
    control_set = problem.control_set
    if control_set.is_box:
        u = rng.uniform(control_set.lower, control_set.upper)
    else:
        u = control_set.project(rng.normal(size=problem.m))
    t = rng.uniform(0.0, problem.horizon or 1.0)
    return t, X, u


def _central(fn, z: np.ndarray, index: Tuple[int, ...],
             eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Central difference along one coordinate and its rounding floor"""
    h = eps * max(1.0, abs(z[index]))
    plus, minus = z.copy(), z.copy()
    plus[index] += h
    minus[index] -= h
    high, low = np.asarray(fn(plus), dtype=float), np.asarray(fn(minus), dtype=float)
    noise = ROUNDOFF * np.maximum(np.abs(high), np.abs(low)) / (2.0 * h)
    return (high - low) / (2.0 * h), noise


def _stack(pairs, columns: bool):
    join = np.column_stack if columns else np.array
    return join([d for d, _ in pairs]), join([n for _, n in pairs])


def fd_check(problem: ProblemDef, samples: int = config.FD_SAMPLES, eps: float = config.FD_EPS,
             seed: int = 0, state_scale: float = 1.0) -> FdReport:
    """
    Compare the derivative callbacks with central differences at random points.

    Blocks are f_x<slot>, f_u, l_x<slot> and l_u. The error of a block at one
    point is max(|fd - analytic| - rounding floor, 0) / max(1, max|analytic|);
    the floor is the cancellation error of the difference quotient itself.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"Finite-difference step must lie in (0, 1e-3], got {eps}")
    rng = np.random.default_rng(seed)
    blocks = [f"f_x{s}" for s in range(problem.num_slots)] + ["f_u"]
    blocks += [f"l_x{s}" for s in range(problem.num_slots)] + ["l_u"]
    report = FdReport(errors={block: 0.0 for block in blocks}, samples=samples)

    def record(block, differences, analytic):
        numeric, noise = differences
        scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)))
        excess = np.maximum(np.abs(numeric - analytic) - noise, 0.0)
        report.errors[block] = max(report.errors[block],
                                   float(np.max(excess, initial=0.0)) / scale)

    for _ in range(samples):
        t, X, u = _sample_point(problem, rng, state_scale)
        jac_x = np.asarray(problem.df_dx(t, X, u))
        jac_u = np.asarray(problem.df_du(t, X, u))
        grad_x = np.asarray(problem.dl_dx(t, X, u))
        grad_u = np.asarray(problem.dl_du(t, X, u))

        for s in range(problem.num_slots):
            record(f"f_x{s}", _stack([
                _central(lambda Z: problem.f(t, Z, u), X, (s, j), eps) for j in range(problem.n)
            ], columns=True), jac_x[s])
            record(f"l_x{s}", _stack([
                _central(lambda Z: problem.running_cost(t, Z, u), X, (s, j), eps)
                for j in range(problem.n)
            ], columns=False), grad_x[s])

        record("f_u", _stack([
            _central(lambda w: problem.f(t, X, w), u, (j,), eps) for j in range(problem.m)
        ], columns=True), jac_u)
        record("l_u", _stack([
            _central(lambda w: problem.running_cost(t, X, w), u, (j,), eps) for j in range(problem.m)
        ], columns=False), grad_u)

    logger.info(f"Finite-difference check of '{problem.name}': max error {report.max_error:.3e}")
    return report


# --- Brute-force discrete LQ solution ---

def _discrete_gradient(problem: ProblemDef, grid: Grid, x0: np.ndarray, controls: np.ndarray):
    """Cost and L2 gradient of the explicit-Euler discretized problem"""
    N, dt = grid.N, grid.dt
    states = np.zeros((N + 1, problem.n))
    states[0] = x0
    cost = 0.0
    for j in range(N):
        X = states[j][None, :]
        cost += problem.running_cost(grid.time(j), X, controls[j])
        states[j + 1] = states[j] + dt * problem.f(grid.time(j), X, controls[j])
    cost = (grid.T - grid.t0) * float(cost) / N

    # Discrete adjoint of the same scheme: p_j = p_{j+1} + dt (l_x + f_x^T p_{j+1})
    adjoint = np.zeros(problem.n)
    gradient = np.zeros((N, problem.m))
    for j in range(N - 1, -1, -1):
        t, X, u = grid.time(j), states[j][None, :], controls[j]
        gradient[j] = problem.dl_du(t, X, u) + adjoint @ problem.df_du(t, X, u)
        adjoint = adjoint + dt * (problem.dl_dx(t, X, u)[0] + adjoint @ problem.df_dx(t, X, u)[0])
    return cost, gradient


def brute_force_lq(grid: Grid, lq: ProblemDef, history: History, tol: float = 1e-7,
                   max_iter: int = 20000) -> Trajectory:
    """
    Solve the fully discretized delay-free problem by projected gradient.

    Decision variables are the N control nodes; the dynamics are rolled in
    by forward substitution and the gradient comes from the discrete
    adjoint of the same Euler scheme. Steps are Barzilai-Borwein with
    Armijo backtracking; iteration stops once the projected-gradient norm
    drops to `tol`.
    """
    if grid.k != 0 or lq.delays:
        raise ValueError("brute_force_lq handles delay-free problems only")
    if not (lq.control_affine and lq.quadratic_control_cost and lq.control_set.is_box):
        raise ValueError("brute_force_lq needs control-affine dynamics, quadratic cost and a box")
    problem = absorb_terminal_cost(lq)
    control_set = problem.control_set
    x0 = history.initial_state
    dt = grid.dt

    def inner(a, b):
        return dt * float(np.sum(a * b))

    controls = np.tile(control_set.project(np.zeros(problem.m)), (grid.N, 1))
    cost, gradient = _discrete_gradient(problem, grid, x0, controls)
    alpha = 1.0

    for iteration in range(max_iter):
        projected = controls - np.clip(controls - gradient, control_set.lower, control_set.upper)
        if math.sqrt(inner(projected, projected)) <= tol:
            logger.debug(f"Brute-force LQ converged after {iteration} iterations")
            break

        for _ in range(60):
            trial = np.clip(controls - alpha * gradient, control_set.lower, control_set.upper)
            trial_cost, trial_gradient = _discrete_gradient(problem, grid, x0, trial)
            if trial_cost <= cost + 1e-4 * inner(gradient, trial - controls):
                break
            alpha *= 0.5
        else:
            raise NoConvergence("Brute-force LQ line search failed")

        s = trial - controls
        y = trial_gradient - gradient
        sy = inner(s, y)
        alpha = min(max(inner(s, s) / sy, 1e-10), 1e10) if sy > 0 else 1.0
        controls, cost, gradient = trial, trial_cost, trial_gradient
    else:
        raise NoConvergence(f"Brute-force LQ did not reach tol={tol} in {max_iter} iterations")

    return Trajectory(grid, np.vstack([controls, controls[-1:]]))


# --- Scalar Riccati reference ---

@dataclass
class RiccatiReference:
    """Continuous unconstrained LQ optimum sampled on the grid nodes"""
    control: Trajectory
    state: Trajectory
    gain: np.ndarray  # P(t) at the nodes, u = -(b / r) P x


def riccati_lq_reference(grid: Grid, a: float, b: float, q: float, r: float, x0: float,
                         terminal_weight: float = 0.0) -> RiccatiReference:
    """
    Solve P' = -q - 2aP + b^2 P^2 / r backward from P(T) = terminal_weight / 2,
    then the closed-loop state x' = (a - b^2 P / r) x forward.
    """
    riccati = solve_ivp(lambda t, P: -q - 2.0 * a * P + (b * b / r) * P * P,
                        (grid.T, grid.t0), [0.5 * terminal_weight],
                        rtol=1e-10, atol=1e-12, dense_output=True)
    if not riccati.success:
        raise NoConvergence(f"Riccati integration failed: {riccati.message}")

    def gain(t):
        return float(riccati.sol(t)[0])

    closed_loop = solve_ivp(lambda t, x: (a - b * b * gain(t) / r) * x,
                            (grid.t0, grid.T), [x0], t_eval=np.clip(grid.times, grid.t0, grid.T),
                            rtol=1e-10, atol=1e-12)
    if not closed_loop.success:
        raise NoConvergence(f"Closed-loop integration failed: {closed_loop.message}")

    P = np.array([gain(t) for t in grid.times])
    x = closed_loop.y[0]
    return RiccatiReference(control=Trajectory(grid, (-(b / r) * P * x)[:, None]),
                            state=Trajectory(grid, x[:, None]), gain=P)


# --- Fine-grid references and instrumentation ---

def reference_trajectory(problem: ProblemDef, grid: Grid, control: Trajectory, history: History,
                         refine: int = 10,
                         settings: Optional[IntegratorSettings] = None) -> Trajectory:
    """Integrate on a `refine` times finer grid and restrict to the coarse nodes"""
    if refine < 2:
        raise ValueError("Reference integration needs refine >= 2")
    fine = grid.refine(refine)
    values = np.repeat(control.values[: grid.N], refine, axis=0)
    fine_control = Trajectory(fine, np.vstack([values, values[-1:]]))
    state = integrate_forward(problem, fine, fine_control, history.resample(refine), settings)
    return Trajectory(grid, state.values[::refine])


def delayed_slot_audit(problem: ProblemDef, grid: Grid, control: Trajectory, history: History,
                       stride: int = 1,
                       settings: Optional[IntegratorSettings] = None) -> Dict[int, List[int]]:
    """
    Components of each delayed slot that f or l actually read.

    Along a forward integration, every (slot, component) entry of X is
    poisoned with NaN in turn; the entry counts as read when f or l turns
    non-finite.
    """
    state = integrate_forward(problem, grid, control, history, settings)
    buffer = extended_states(grid, history, state)
    reads: Dict[int, set] = {slot: set() for slot in range(1, grid.k + 1)}
    for node in range(0, grid.N, stride):
        t, u = grid.time(node), control.values[node]
        X = stacked_state(grid, buffer, node)
        for slot in reads:
            for j in range(problem.n):
                poisoned = X.copy()
                poisoned[slot, j] = np.nan
                touched = (not np.all(np.isfinite(problem.f(t, poisoned, u)))
                           or not np.isfinite(problem.running_cost(t, poisoned, u)))
                if touched:
                    reads[slot].add(j)
    return {slot: sorted(components) for slot, components in reads.items()}


# --- Three-way LQ cross validation ---

@dataclass
class LqCrossCheck:
    """Pairwise L2 control gaps between ESSA, brute force and Riccati"""
    essa_vs_brute: float
    essa_vs_riccati: float
    brute_vs_riccati: float
    J_essa: float
    J_brute: float
    riccati_nodes: int  # Nodes where the Riccati control stays inside the box

    @property
    def J_relative_gap(self) -> float:
        return abs(self.J_essa - self.J_brute) / max(abs(self.J_brute), 1e-300)

    def passed(self, tol: float = config.CROSS_CHECK_TOLERANCE) -> bool:
        return max(self.essa_vs_brute, self.essa_vs_riccati, self.brute_vs_riccati) <= tol

    def describe(self) -> str:
        return (f"ESSA vs brute force: {self.essa_vs_brute:.3e}\n"
                f"ESSA vs Riccati: {self.essa_vs_riccati:.3e}\n"
                f"Brute force vs Riccati: {self.brute_vs_riccati:.3e}\n"
                f"J (ESSA / brute force): {self.J_essa:.12g} / {self.J_brute:.12g}")


def _masked_l2(a: Trajectory, b: Trajectory, mask: np.ndarray) -> float:
    grid = a.grid
    difference = (a.values[: grid.N] - b.values[: grid.N])[mask[: grid.N]]
    return math.sqrt(grid.dt * float(np.sum(difference ** 2)))


def lq_cross_check(params: Optional[LqParams] = None, N: int = 2000,
                   solver_config: Optional[SolverConfig] = None) -> LqCrossCheck:
    """Solve one LQ instance three ways and report the pairwise gaps"""
    params = params or LqParams()
    problem = lq_problem_from_params(params)
    grid = build_grid(0.0, params.horizon, N)
    history = History.constant([params.x0])

    solution = solve(problem, grid, history, solver_config)
    brute = brute_force_lq(grid, problem, history)
    reference = riccati_lq_reference(grid, params.a, params.b, params.q, params.r,
                                     params.x0, params.terminal_weight)

    # Riccati ignores the box, so compare only where its control is feasible
    inside = np.all((reference.control.values >= params.u_min)
                    & (reference.control.values <= params.u_max), axis=1)
    absorbed = absorb_terminal_cost(problem)
    brute_state = integrate_forward(absorbed, grid, brute, history)
    report = LqCrossCheck(
        essa_vs_brute=l2_distance(solution.control, brute),
        essa_vs_riccati=_masked_l2(solution.control, reference.control, inside),
        brute_vs_riccati=_masked_l2(brute, reference.control, inside),
        J_essa=solution.J,
        J_brute=eval_cost(absorbed, grid, brute_state, brute, history),
        riccati_nodes=int(np.count_nonzero(inside[: grid.N])),
    )
    logger.info(f"LQ cross check:\n{report.describe()}")
    return report
