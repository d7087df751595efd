import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config import config
from exceptions import NonIntegerDelay

# Relative deviation allowed between h/Δ and the nearest integer
DELAY_TOLERANCE = 1e-9

Vector = np.ndarray
Callback = Callable[..., np.ndarray]


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform time mesh on [t0, T] with delays stored as node counts"""
    t0: float
    T: float
    N: int
    delay_steps: Tuple[int, ...] = ()  # d_1 < ... < d_k, h_j = d_j * dt

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def k(self) -> int:
        """Number of delays (k=0 is the plain ODE case)"""
        return len(self.delay_steps)

    @property
    def max_delay_steps(self) -> int:
        return self.delay_steps[-1] if self.delay_steps else 0

    @cached_property
    def slot_offsets(self) -> np.ndarray:
        """Node offset of every slot of X, slot 0 being the current state"""
        return np.array((0,) + tuple(self.delay_steps), dtype=int)

    @cached_property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.N + 1)

    @property
    def delays(self) -> Tuple[float, ...]:
        return tuple(d * self.dt for d in self.delay_steps)

    def time(self, node: int) -> float:
        return self.t0 + node * self.dt

    def refine(self, factor: int) -> "Grid":
        """Grid with `factor` times as many intervals; delays stay integral"""
        if factor < 1:
            raise ValueError("Refinement factor must be a positive integer")
        return Grid(self.t0, self.T, self.N * factor,
                    tuple(d * factor for d in self.delay_steps))


def _integral_steps(delays: Sequence[float], dt: float) -> Optional[List[int]]:
    steps = []
    for h in delays:
        ratio = h / dt
        nearest = round(ratio)
        if nearest < 1 or abs(ratio - nearest) > DELAY_TOLERANCE * max(1.0, abs(ratio)):
            return None
        steps.append(int(nearest))
    return steps


def build_grid(t0: float, T: float, N: int, delays: Sequence[float] = ()) -> Grid:
    """
    Build the uniform grid and convert every delay to a node count.

    Raises NonIntegerDelay when a delay is not a multiple of the step; the
    error suggests the smallest multiple of N that fixes all delays.
    """
    if not T > t0:
        raise ValueError(f"Horizon end {T} must exceed start {t0}")
    if N < 1:
        raise ValueError(f"Node count must be at least 1, got {N}")
    delays = [float(h) for h in delays]
    if any(h <= 0 for h in delays):
        raise ValueError("Delays must be positive")
    if any(b <= a for a, b in zip(delays, delays[1:])):
        raise ValueError("Delays must be strictly increasing")

    dt = (T - t0) / N
    steps = _integral_steps(delays, dt)
    if steps is None:
        offending = next(h for h in delays if _integral_steps([h], dt) is None)
        raise NonIntegerDelay(offending, dt, _suggest_nodes(t0, T, N, delays))
    return Grid(float(t0), float(T), int(N), tuple(steps))


def _suggest_nodes(t0: float, T: float, N: int, delays: Sequence[float],
                   max_multiple: int = 1000) -> Optional[int]:
    for multiple in range(2, max_multiple + 1):
        candidate = N * multiple
        if _integral_steps(delays, (T - t0) / candidate) is not None:
            return candidate
    return None


def _frozen_array(values, ndim: int) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim == ndim - 1:
        array = array.reshape(array.shape + (1,)) if ndim == 2 else array.reshape(1)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Node values of a vector quantity on a grid (state, costate or control)"""
    grid: Grid
    values: np.ndarray  # shape (N+1, dim)

    def __post_init__(self):
        values = _frozen_array(self.values, 2)
        if values.ndim != 2 or values.shape[0] != self.grid.N + 1:
            raise ValueError(
                f"Trajectory needs {self.grid.N + 1} nodes, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: Grid, value) -> "Trajectory":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.N + 1, 1)))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[float], Vector]) -> "Trajectory":
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in grid.times]))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def at(self, node: int) -> Vector:
        return self.values[node]


@dataclass(frozen=True, eq=False)
class History:
    """Pre-horizon initial function, constant or sampled on t0-h_k ... t0"""
    constant_value: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None  # shape (d_k+1, n), last row is x(t0)

    def __post_init__(self):
        if (self.constant_value is None) == (self.samples is None):
            raise ValueError("History is either constant or sampled")
        if self.constant_value is not None:
            object.__setattr__(self, "constant_value", _frozen_array(self.constant_value, 1))
        else:
            object.__setattr__(self, "samples", _frozen_array(self.samples, 2))

    @classmethod
    def constant(cls, value) -> "History":
        return cls(constant_value=np.atleast_1d(np.asarray(value, dtype=float)))

    @classmethod
    def sampled(cls, values) -> "History":
        return cls(samples=np.asarray(values, dtype=float))

    @property
    def is_constant(self) -> bool:
        return self.constant_value is not None

    @property
    def initial_state(self) -> Vector:
        return self.constant_value if self.is_constant else self.samples[-1]

    @property
    def dim(self) -> int:
        return self.initial_state.shape[0]

    def validate(self, grid: Grid, n: int):
        if self.dim != n:
            raise ValueError(f"History dimension {self.dim} does not match state dimension {n}")
        if not self.is_constant and self.samples.shape[0] != grid.max_delay_steps + 1:
            raise ValueError(
                f"Sampled history needs {grid.max_delay_steps + 1} nodes, "
                f"got {self.samples.shape[0]}"
            )

    def value_at(self, node: int, grid: Grid) -> Vector:
        """Value at a pre-horizon node index in [-d_k, 0]"""
        if self.is_constant:
            return self.constant_value
        return self.samples[grid.max_delay_steps + node]

    def block(self, grid: Grid) -> np.ndarray:
        """All pre-horizon nodes t0-h_k ... t0 as an array of shape (d_k+1, n)"""
        if self.is_constant:
            return np.tile(self.constant_value, (grid.max_delay_steps + 1, 1))
        return np.array(self.samples)

    def resample(self, factor: int) -> "History":
        """Linear resampling onto a `factor` times finer pre-horizon mesh"""
        if self.is_constant or factor == 1:
            return self
        old = np.arange(self.samples.shape[0], dtype=float)
        new = np.arange((self.samples.shape[0] - 1) * factor + 1) / factor
        columns = [np.interp(new, old, self.samples[:, i]) for i in range(self.dim)]
        return History.sampled(np.column_stack(columns))


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Compact convex control set: a box or a custom projection oracle"""
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    projector: Optional[Callable[[Vector], Vector]] = None
    size: int = 0

    def __post_init__(self):
        if self.projector is None:
            lower = _frozen_array(np.atleast_1d(self.lower), 1)
            upper = _frozen_array(np.atleast_1d(self.upper), 1)
            if lower.shape != upper.shape:
                raise ValueError("Box bounds must have the same length")
            if np.any(lower > upper):
                raise ValueError(f"Box lower bound {lower} exceeds upper bound {upper}")
            object.__setattr__(self, "lower", lower)
            object.__setattr__(self, "upper", upper)
            object.__setattr__(self, "size", lower.shape[0])
        elif self.size < 1:
            raise ValueError("Custom control sets need their dimension")

    @classmethod
    def box(cls, lower, upper) -> "ControlSet":
        return cls(lower=lower, upper=upper)

    @classmethod
    def custom(cls, projector: Callable[[Vector], Vector], dim: int) -> "ControlSet":
        return cls(projector=projector, size=dim)

    @property
    def is_box(self) -> bool:
        return self.projector is None

    @property
    def dim(self) -> int:
        return self.size

    def project(self, q) -> Vector:
        q = np.asarray(q, dtype=float)
        if self.is_box:
            return np.clip(q, self.lower, self.upper)
        return np.asarray(self.projector(q), dtype=float)

    def contains(self, q, tol: float = 0.0) -> bool:
        q = np.asarray(q, dtype=float)
        if self.is_box:
            return bool(np.all(q >= self.lower - tol) and np.all(q <= self.upper + tol))
        return bool(np.max(np.abs(self.project(q) - q), initial=0.0) <= tol)

    def default_point(self) -> Vector:
        """Box midpoint, or the projection of the origin for custom sets"""
        if self.is_box:
            return 0.5 * (self.lower + self.upper)
        return self.project(np.zeros(self.size))


def project(control_set: ControlSet, q) -> Vector:
    """Euclidean projection onto the control set"""
    q = np.asarray(q, dtype=float)
    if q.shape != (control_set.dim,):
        raise ValueError(f"Expected a control of length {control_set.dim}, got shape {q.shape}")
    return control_set.project(q)


def delayed_state(traj: Trajectory, history: History, node: int, delay_slot: int) -> Vector:
    """x(t_node - h_slot), read from the history when the index is pre-horizon"""
    grid = traj.grid
    if not 0 <= delay_slot <= grid.k:
        raise IndexError(f"Delay slot {delay_slot} outside 0..{grid.k}")
    if not 0 <= node <= grid.N:
        raise IndexError(f"Node {node} outside 0..{grid.N}")
    index = node - int(grid.slot_offsets[delay_slot])
    if index >= 0:
        return traj.values[index]
    return history.value_at(index, grid)


@dataclass(frozen=True, eq=False)
class ProblemDef:
    """
    Delayed optimal control problem: dynamics f, running cost and derivatives.

    Callbacks take (t, X, u) with X of shape (k+1, n) stacking the current and
    delayed states. Shapes: f -> (n,), df_dx -> (k+1, n, n) with
    df_dx[s, i, j] = d f_i / d X[s, j], df_du -> (n, m), running_cost -> float,
    dl_dx -> (k+1, n), dl_du -> (m,).
    """
    n: int
    m: int
    delays: Tuple[float, ...]
    f: Callback
    df_dx: Callback
    df_du: Callback
    running_cost: Callable[..., float]
    dl_dx: Callback
    dl_du: Callback
    control_set: ControlSet
    terminal_cost: Optional[Callable[[Vector], float]] = None
    terminal_grad: Optional[Callback] = None
    terminal_hess: Optional[Callback] = None
    hess_u: Optional[Callback] = None  # exact H_uu(t, X, u, lam), shape (m, m)
    control_affine: bool = False
    quadratic_control_cost: bool = False
    control_weight: Optional[Callable[[float], Vector]] = None  # diag of Q(t)
    state_names: Tuple[str, ...] = ()
    control_names: Tuple[str, ...] = ()
    name: str = "problem"
    horizon: Optional[float] = None  # nominal T, used when a run config omits it

    def __post_init__(self):
        if self.control_set.dim != self.m:
            raise ValueError(f"Control set dimension {self.control_set.dim} != m={self.m}")
        if self.quadratic_control_cost and self.control_weight is None:
            raise ValueError("quadratic_control_cost requires control_weight")
        if self.terminal_cost is not None and self.terminal_grad is None:
            raise ValueError("A terminal cost needs its gradient")
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"x{i}" for i in range(self.n)))
        if not self.control_names:
            object.__setattr__(self, "control_names", tuple(f"u{i}" for i in range(self.m)))
        object.__setattr__(self, "delays", tuple(float(h) for h in self.delays))

    @property
    def num_slots(self) -> int:
        return len(self.delays) + 1

    @property
    def has_terminal_cost(self) -> bool:
        return self.terminal_cost is not None

    def with_changes(self, **changes) -> "ProblemDef":
        return replace(self, **changes)

    def check_grid(self, grid: Grid):
        """Raise if the grid does not carry exactly this problem's delays"""
        if grid.k != len(self.delays):
            raise ValueError(
                f"Problem '{self.name}' has {len(self.delays)} delays, grid has {grid.k}"
            )
        for h, g in zip(self.delays, grid.delays):
            if not math.isclose(h, g, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError(f"Grid delay {g} does not match problem delay {h}")


class InnerMinSettings(BaseModel):
    """Settings for the per-node projected Newton minimizer"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_steps: int = Field(config.INNER_MAX_STEPS, ge=1)
    step_tol: float = Field(config.INNER_STEP_TOL, gt=0)


class SolverConfig(BaseModel):
    """Outer-loop settings; C stays diagonal for the whole run"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    C0_diag: Union[float, List[float]] = 1.0
    eta_tol: Optional[float] = Field(None, gt=0)  # None -> 1e-8 * (T - t0) * m
    c_growth: float = Field(config.C_GROWTH, gt=1)
    c_relax: float = Field(1.0, ge=1)  # 1.0 keeps C fixed after acceptance
    max_outer_iters: int = Field(config.MAX_OUTER_ITERS, ge=1)
    max_c_increases_per_iter: int = Field(config.MAX_C_INCREASES, ge=1)
    residual_tol: float = Field(config.RESIDUAL_TOL, gt=0)
    inner: InnerMinSettings = InnerMinSettings()
    J_lower_bound: Optional[float] = 0.0
    xi0: Optional[float] = Field(None, gt=0)
    strict: bool = False

    @field_validator("C0_diag")
    @classmethod
    def _positive_diagonal(cls, value):
        entries = value if isinstance(value, list) else [value]
        if not entries or any(not c > 0 for c in entries):
            raise ValueError("C0_diag entries must be positive")
        return value

    def c0_vector(self, m: int) -> np.ndarray:
        if isinstance(self.C0_diag, list):
            if len(self.C0_diag) != m:
                raise ValueError(f"C0_diag has {len(self.C0_diag)} entries, expected {m}")
            return np.array(self.C0_diag, dtype=float)
        return np.full(m, float(self.C0_diag))

    def resolved_eta_tol(self, grid: Grid, m: int) -> float:
        if self.eta_tol is not None:
            return self.eta_tol
        return 1e-8 * (grid.T - grid.t0) * m
