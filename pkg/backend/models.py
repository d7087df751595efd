import logging
from typing import Any, List, Mapping, Optional, Tuple, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core import ControlSet, History, ProblemDef, Trajectory
from exceptions import InvalidParams, MissingCoefficients

logger = logging.getLogger(__name__)

# Compartments below this value are reported as step-size problems
NEGATIVE_FLOOR = -1e-9

P = TypeVar("P", bound=BaseModel)


def validation_messages(error: ValidationError, prefix: str = "") -> List[str]:
    """One 'key.path: message' line per validation failure"""
    messages = []
    for item in error.errors():
        path = ".".join(str(part) for part in (prefix, *item["loc"]) if part != "")
        messages.append(f"{path}: {item['msg']}")
    return messages


def coerce_params(model: Type[P], params: Union[P, Mapping[str, Any], None]) -> P:
    """Accept a parameter model or a raw mapping; invalid values raise InvalidParams"""
    if isinstance(params, model):
        return params
    try:
        return model.model_validate(dict(params or {}))
    except ValidationError as e:
        raise InvalidParams(validation_messages(e)) from e


def _delay_slots(h_first: float, h_second: float) -> Tuple[Tuple[float, ...], int, int]:
    """Sorted distinct delays plus the X slot carrying each of the two"""
    delays = tuple(sorted({float(h_first), float(h_second)}))
    return delays, delays.index(float(h_first)) + 1, delays.index(float(h_second)) + 1


def negative_compartments(state: Trajectory, names: Tuple[str, ...],
                          floor: float = NEGATIVE_FLOOR) -> List[Tuple[str, float]]:
    """Compartments whose minimum drops below `floor`, each logged as a warning"""
    minima = state.values.min(axis=0)
    offenders = [(name, float(low)) for name, low in zip(names, minima) if low < floor]
    for name, low in offenders:
        logger.warning(f"Compartment {name} reached {low:.3e}; the step size may be too large")
    return offenders


# --- SIRV with incubation and vaccine build-up delays ---

class SirvParams(BaseModel):
    """Rates per day and weights of the delayed SIRV model"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    Lambda: float = Field(2.91e-5, ge=0)      # Birth rate
    mu_S: float = Field(2.90e-5, ge=0)
    mu_I: float = Field(2.90e-5, ge=0)
    mu_R: float = Field(2.90e-5, ge=0)
    mu_V: float = Field(2.90e-5, ge=0)
    beta: float = Field(1.0, ge=0)            # Transmission
    gamma: float = Field(1.0 / 6.0, ge=0)     # Recovery
    sigma_R: float = Field(1.0 / 500.0, ge=0)
    sigma_V: float = Field(1.0 / 500.0, ge=0)
    theta_R: float = Field(0.0021, ge=0, le=1)
    theta_V: float = Field(0.0013, ge=0, le=1)
    h1: float = Field(5.0, gt=0)              # Incubation delay
    h2: float = Field(7.0, gt=0)              # Vaccine build-up delay
    u_max: float = Field(0.4, ge=0)
    v_max: float = Field(0.8, ge=0)
    w_I: float = Field(1e4, ge=0)
    w_u: float = Field(1.0, ge=0)
    w_v: float = Field(10.0, ge=0)
    terminal_weight: float = Field(1.0, ge=0)  # Coefficient of I(T)^2 / 2
    # kappa in v (1 + kappa) S S_h / (S + kappa S_h); 0 gives the bilinear flow v S_h
    vaccination_saturation: float = Field(0.25, ge=0)
    horizon: float = Field(350.0, gt=0)
    I0: float = Field(1e-6, ge=0, le=1)
    R0: float = Field(0.0, ge=0, le=1)
    V0: float = Field(0.0, ge=0, le=1)
    S0: Optional[float] = Field(None, ge=0, le=1)  # None -> 1 - I0 - R0 - V0

    def initial_state(self) -> np.ndarray:
        S0 = self.S0 if self.S0 is not None else 1.0 - self.I0 - self.R0 - self.V0
        return np.array([S0, self.I0, self.R0, self.V0])


SIRV_STATES = ("S", "I", "R", "V")
SIRV_CONTROLS = ("u", "v")


def sirv_problem(params: Union[SirvParams, Mapping[str, Any], None] = None) -> ProblemDef:
    """
    Delayed SIRV problem with social-distancing u and vaccination v.

    Contagion reads I at t-h1 and the vaccination flow reads S at t-h2.
    The flow v (1 + kappa) S S_h / (S + kappa S_h) equals v S_h while S keeps
    up with S_h and stays below v (1 + kappa) S / kappa, so explicit Euler
    keeps S non-negative whenever dt (v_max (1 + kappa) / kappa + beta + mu_S) < 1.
    Running cost w_I I + w_u u^2 + w_v v^2, terminal cost terminal_weight I(T)^2 / 2.
    """
    p = coerce_params(SirvParams, params)
    delays, inc, vac = _delay_slots(p.h1, p.h2)
    slots = len(delays) + 1
    kappa = p.vaccination_saturation

    def unpack(X, u):
        S, I, R, V = X[0]
        return S, I, R, V, X[inc, 1], X[vac, 0], p.beta * (1.0 - u[0]), u[1]

    def vaccination(S, S_h):
        """Flow per unit v and its partials in S and S(t-h2)"""
        if kappa == 0.0:
            return S_h, 0.0, 1.0
        D = S + kappa * S_h
        if D <= 0.0:
            return 0.0, 0.0, 0.0
        scale = (1.0 + kappa) / (D * D)
        return (1.0 + kappa) * S * S_h / D, scale * kappa * S_h * S_h, scale * S * S

    def f(t, X, u):
        S, I, R, V, I_h, S_h, b, v = unpack(X, u)
        flow = v * vaccination(S, S_h)[0]
        return np.array([
            p.Lambda - b * S * I_h + p.sigma_R * R + p.sigma_V * V - flow - p.mu_S * S,
            b * I_h * (S + p.theta_V * V + p.theta_R * R) - (p.gamma + p.mu_I) * I,
            p.gamma * I - p.sigma_R * R - p.theta_R * b * R * I_h - p.mu_R * R,
            flow - p.sigma_V * V - p.theta_V * b * V * I_h - p.mu_V * V,
        ])

    def df_dx(t, X, u):
        S, I, R, V, I_h, S_h, b, v = unpack(X, u)
        _, flow_S, flow_Sh = vaccination(S, S_h)
        J = np.zeros((slots, 4, 4))
        J[0, 0] = [-b * I_h - p.mu_S - v * flow_S, 0.0, p.sigma_R, p.sigma_V]
        J[0, 1] = [b * I_h, -(p.gamma + p.mu_I), p.theta_R * b * I_h, p.theta_V * b * I_h]
        J[0, 2] = [0.0, p.gamma, -p.sigma_R - p.theta_R * b * I_h - p.mu_R, 0.0]
        J[0, 3] = [v * flow_S, 0.0, 0.0, -p.sigma_V - p.theta_V * b * I_h - p.mu_V]
        J[inc, :, 1] += [-b * S, b * (S + p.theta_V * V + p.theta_R * R),
                         -p.theta_R * b * R, -p.theta_V * b * V]
        J[vac, 0, 0] += -v * flow_Sh
        J[vac, 3, 0] += v * flow_Sh
        return J

    def df_du(t, X, u):
        S, I, R, V, I_h, S_h, _, _ = unpack(X, u)
        rate = vaccination(S, S_h)[0]
        return np.array([
            [p.beta * S * I_h, -rate],
            [-p.beta * I_h * (S + p.theta_V * V + p.theta_R * R), 0.0],
            [p.theta_R * p.beta * R * I_h, 0.0],
            [p.theta_V * p.beta * V * I_h, rate],
        ])

    weights = np.array([p.w_u, p.w_v])

    def running_cost(t, X, u):
        return p.w_I * X[0, 1] + float(weights @ (u * u))

    def dl_dx(t, X, u):
        gradient = np.zeros((slots, 4))
        gradient[0, 1] = p.w_I
        return gradient

    def terminal_cost(x):
        return 0.5 * p.terminal_weight * x[1] ** 2

    def terminal_grad(x):
        return np.array([0.0, p.terminal_weight * x[1], 0.0, 0.0])

    def terminal_hess(x):
        return np.diag([0.0, p.terminal_weight, 0.0, 0.0])

    terminal = p.terminal_weight > 0
    return ProblemDef(
        n=4,
        m=2,
        delays=delays,
        f=f,
        df_dx=df_dx,
        df_du=df_du,
        running_cost=running_cost,
        dl_dx=dl_dx,
        dl_du=lambda t, X, u: 2.0 * weights * u,
        control_set=ControlSet.box([0.0, 0.0], [p.u_max, p.v_max]),
        terminal_cost=terminal_cost if terminal else None,
        terminal_grad=terminal_grad if terminal else None,
        terminal_hess=terminal_hess if terminal else None,
        hess_u=lambda t, X, u, lam: np.diag(2.0 * weights),
        control_affine=True,
        quadratic_control_cost=True,
        control_weight=lambda t: weights,
        state_names=SIRV_STATES,
        control_names=SIRV_CONTROLS,
        name="sirv",
        horizon=p.horizon,
    )


def sirv_history(params: Union[SirvParams, Mapping[str, Any], None] = None) -> History:
    return History.constant(coerce_params(SirvParams, params).initial_state())


# --- Extended SIDARTHE-V with delayed contagion and vaccination ---

SIDARTHE_V_STATES = ("S", "I", "D", "A", "R", "T", "H", "E", "V")
SIDARTHE_V_CONTROLS = ("u",)
SIDARTHE_V_COEFFICIENTS = (
    "alpha", "beta", "gamma", "delta", "epsilon", "theta", "zeta", "eta", "mu",
    "nu", "tau", "lambda", "rho", "kappa", "xi", "sigma",
    "omega_V", "omega_H", "phi_V", "phi_H",
)
# Indices of the weighted infected classes I, D, A, R, T
_WEIGHTED = np.array([1, 2, 3, 4, 5])
# Indices of the contagious classes I, D, A, R
_CONTAGIOUS = np.array([1, 2, 3, 4])


class SidartheVParams(BaseModel):
    """
    Coefficients of the extended SIDARTHE-V model.

    Coefficients have no built-in values: they come from a parameter file.
    alpha..delta are the contagion rates of I, D, A, R; epsilon and theta are
    detection rates; zeta, eta, mu, nu, tau, lambda, rho, kappa, xi, sigma are
    the usual SIDARTHE transition and healing rates; omega_V and omega_H are
    waning rates of vaccinated and healed; phi_V and phi_H scale the exposure
    of vaccinated and healed to contagion.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    alpha: Optional[float] = Field(None, ge=0)
    beta: Optional[float] = Field(None, ge=0)
    gamma: Optional[float] = Field(None, ge=0)
    delta: Optional[float] = Field(None, ge=0)
    epsilon: Optional[float] = Field(None, ge=0)
    theta: Optional[float] = Field(None, ge=0)
    zeta: Optional[float] = Field(None, ge=0)
    eta: Optional[float] = Field(None, ge=0)
    mu: Optional[float] = Field(None, ge=0)
    nu: Optional[float] = Field(None, ge=0)
    tau: Optional[float] = Field(None, ge=0)
    lambda_: Optional[float] = Field(None, ge=0, alias="lambda")
    rho: Optional[float] = Field(None, ge=0)
    kappa: Optional[float] = Field(None, ge=0)
    xi: Optional[float] = Field(None, ge=0)
    sigma: Optional[float] = Field(None, ge=0)
    omega_V: Optional[float] = Field(None, ge=0)
    omega_H: Optional[float] = Field(None, ge=0)
    phi_V: Optional[float] = Field(None, ge=0, le=1)
    phi_H: Optional[float] = Field(None, ge=0, le=1)

    h1: float = Field(3.0, gt=0)
    h2: float = Field(5.0, gt=0)
    u_max: float = Field(0.1, ge=0)
    w_I: float = Field(1e5, ge=0)
    w_D: float = Field(1e5, ge=0)
    w_A: float = Field(1e5, ge=0)
    w_R: float = Field(1e5, ge=0)
    w_T: float = Field(1e5, ge=0)
    w_u: float = Field(1.0, ge=0)
    terminal_weight: float = Field(1.0, ge=0)  # Coefficient of each y_i(T)^2 / 2
    horizon: float = Field(365.0, gt=0)
    initial_state: Optional[List[float]] = None  # S, I, D, A, R, T, H, E, V

    def missing_coefficients(self) -> List[str]:
        values = self.model_dump(by_alias=True)
        return [name for name in SIDARTHE_V_COEFFICIENTS if values.get(name) is None]

    def infected_weights(self) -> np.ndarray:
        return np.array([self.w_I, self.w_D, self.w_A, self.w_R, self.w_T])


def sidarthe_v_problem(params: Union[SidartheVParams, Mapping[str, Any], None] = None) -> ProblemDef:
    """
    SIDARTHE-V problem with vaccination rate u in [0, u_max].

    Contagion products of S, V and H with I, D, A, R read the infected classes
    at t-h1; the vaccination inflow reads S at t-h2.
    """
    p = coerce_params(SidartheVParams, params)
    missing = p.missing_coefficients()
    if missing:
        raise MissingCoefficients(missing)

    delays, inc, vac = _delay_slots(p.h1, p.h2)
    slots = len(delays) + 1
    contagion = np.zeros(9)
    contagion[_CONTAGIOUS] = [p.alpha, p.beta, p.gamma, p.delta]
    leave_I = p.epsilon + p.zeta + p.lambda_
    leave_D = p.eta + p.rho
    leave_A = p.theta + p.mu + p.kappa
    leave_R = p.nu + p.xi
    leave_T = p.sigma + p.tau
    weights = p.infected_weights()
    tw = p.terminal_weight

    def f(t, X, u):
        S, I, D, A, R, T, H, E, V = X[0]
        c = contagion[_CONTAGIOUS] @ X[inc, _CONTAGIOUS]
        S_h = X[vac, 0]
        vaccination = u[0] * S_h
        return np.array([
            -S * c - vaccination + p.omega_V * V + p.omega_H * H,
            (S + p.phi_V * V + p.phi_H * H) * c - leave_I * I,
            p.epsilon * I - leave_D * D,
            p.zeta * I - leave_A * A,
            p.eta * D + p.theta * A - leave_R * R,
            p.mu * A + p.nu * R - leave_T * T,
            p.lambda_ * I + p.rho * D + p.kappa * A + p.xi * R + p.sigma * T
            - p.phi_H * H * c - p.omega_H * H,
            p.tau * T,
            vaccination - p.phi_V * V * c - p.omega_V * V,
        ])

    def df_dx(t, X, u):
        S, I, D, A, R, T, H, E, V = X[0]
        c = contagion[_CONTAGIOUS] @ X[inc, _CONTAGIOUS]
        J = np.zeros((slots, 9, 9))
        now = J[0]
        now[0, [0, 6, 8]] = [-c, p.omega_H, p.omega_V]
        now[1, [0, 1, 6, 8]] = [c, -leave_I, p.phi_H * c, p.phi_V * c]
        now[2, [1, 2]] = [p.epsilon, -leave_D]
        now[3, [1, 3]] = [p.zeta, -leave_A]
        now[4, [2, 3, 4]] = [p.eta, p.theta, -leave_R]
        now[5, [3, 4, 5]] = [p.mu, p.nu, -leave_T]
        now[6, [1, 2, 3, 4, 5, 6]] = [p.lambda_, p.rho, p.kappa, p.xi, p.sigma,
                                      -p.phi_H * c - p.omega_H]
        now[7, 5] = p.tau
        now[8, 8] = -p.phi_V * c - p.omega_V
        J[inc, 0] += -S * contagion
        J[inc, 1] += (S + p.phi_V * V + p.phi_H * H) * contagion
        J[inc, 6] += -p.phi_H * H * contagion
        J[inc, 8] += -p.phi_V * V * contagion
        J[vac, 0, 0] += -u[0]
        J[vac, 8, 0] += u[0]
        return J

    def df_du(t, X, u):
        G = np.zeros((9, 1))
        G[0, 0] = -X[vac, 0]
        G[8, 0] = X[vac, 0]
        return G

    def running_cost(t, X, u):
        return float(weights @ X[0, _WEIGHTED]) + p.w_u * float(u[0] ** 2)

    def dl_dx(t, X, u):
        gradient = np.zeros((slots, 9))
        gradient[0, _WEIGHTED] = weights
        return gradient

    def terminal_cost(x):
        return 0.5 * tw * float(np.sum(x[_WEIGHTED] ** 2))

    def terminal_grad(x):
        gradient = np.zeros(9)
        gradient[_WEIGHTED] = tw * x[_WEIGHTED]
        return gradient

    def terminal_hess(x):
        diagonal = np.zeros(9)
        diagonal[_WEIGHTED] = tw
        return np.diag(diagonal)

    terminal = tw > 0
    return ProblemDef(
        n=9,
        m=1,
        delays=delays,
        f=f,
        df_dx=df_dx,
        df_du=df_du,
        running_cost=running_cost,
        dl_dx=dl_dx,
        dl_du=lambda t, X, u: np.array([2.0 * p.w_u * u[0]]),
        control_set=ControlSet.box([0.0], [p.u_max]),
        terminal_cost=terminal_cost if terminal else None,
        terminal_grad=terminal_grad if terminal else None,
        terminal_hess=terminal_hess if terminal else None,
        hess_u=lambda t, X, u, lam: np.array([[2.0 * p.w_u]]),
        control_affine=True,
        quadratic_control_cost=True,
        control_weight=lambda t: np.array([p.w_u]),
        state_names=SIDARTHE_V_STATES,
        control_names=SIDARTHE_V_CONTROLS,
        name="sidarthe_v",
        horizon=p.horizon,
    )


def sidarthe_v_history(params: Union[SidartheVParams, Mapping[str, Any], None] = None) -> History:
    p = coerce_params(SidartheVParams, params)
    if p.initial_state is None:
        raise MissingCoefficients(["initial_state"])
    if len(p.initial_state) != 9:
        raise InvalidParams(f"initial_state: expected 9 values, got {len(p.initial_state)}")
    return History.constant(p.initial_state)


# --- Delay-free scalar LQ test problem ---

class LqParams(BaseModel):
    """x' = a x + b u, running cost q x^2 + r u^2"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    a: float = 0.0
    b: float = 1.0
    q: float = Field(1.0, ge=0)
    r: float = Field(1.0, gt=0)
    horizon: float = Field(1.0, gt=0)
    x0: float = 1.0
    u_min: float = -10.0
    u_max: float = 10.0
    terminal_weight: float = Field(0.0, ge=0)  # Coefficient of x(T)^2 / 2


def lq_test_problem(a: float, b: float, q: float, r: float, T: Optional[float] = None,
                    u_bounds: Tuple[float, float] = (-10.0, 10.0),
                    terminal_weight: float = 0.0) -> ProblemDef:
    """Scalar linear-quadratic problem without delays, used as an oracle target"""
    if q < 0 or r <= 0:
        raise InvalidParams(f"LQ weights need q >= 0 and r > 0, got q={q}, r={r}")
    if u_bounds[0] > u_bounds[1]:
        raise InvalidParams(f"Control bounds {u_bounds} are reversed")

    def terminal_cost(x):
        return 0.5 * terminal_weight * float(x[0] ** 2)

    terminal = terminal_weight > 0
    return ProblemDef(
        n=1,
        m=1,
        delays=(),
        f=lambda t, X, u: a * X[0] + b * u,
        df_dx=lambda t, X, u: np.array([[[a]]]),
        df_du=lambda t, X, u: np.array([[b]]),
        running_cost=lambda t, X, u: float(q * X[0, 0] ** 2 + r * u[0] ** 2),
        dl_dx=lambda t, X, u: np.array([[2.0 * q * X[0, 0]]]),
        dl_du=lambda t, X, u: np.array([2.0 * r * u[0]]),
        control_set=ControlSet.box([u_bounds[0]], [u_bounds[1]]),
        terminal_cost=terminal_cost if terminal else None,
        terminal_grad=(lambda x: terminal_weight * np.asarray(x, dtype=float)) if terminal else None,
        terminal_hess=(lambda x: np.array([[terminal_weight]])) if terminal else None,
        hess_u=lambda t, X, u, lam: np.array([[2.0 * r]]),
        control_affine=True,
        quadratic_control_cost=True,
        control_weight=lambda t: np.array([r]),
        state_names=("x",),
        control_names=("u",),
        name="lq",
        horizon=T,
    )


def lq_problem_from_params(params: Union[LqParams, Mapping[str, Any], None] = None) -> ProblemDef:
    p = coerce_params(LqParams, params)
    return lq_test_problem(p.a, p.b, p.q, p.r, p.horizon, (p.u_min, p.u_max), p.terminal_weight)
