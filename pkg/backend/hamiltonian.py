import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core import ControlSet, InnerMinSettings, ProblemDef
from exceptions import InnerMinStall

logger = logging.getLogger(__name__)

# Armijo sufficient-decrease constant and backtracking cap
ARMIJO = 1e-4
MAX_HALVINGS = 50


@dataclass(frozen=True, eq=False)
class RegMatrix:
    """Diagonal of the positive regularization matrix C"""
    diag: np.ndarray

    def __post_init__(self):
        diag = np.array(self.diag, dtype=float).reshape(-1)
        if diag.size == 0 or np.any(diag <= 0) or not np.all(np.isfinite(diag)):
            raise ValueError(f"Regularization diagonal must be positive, got {diag}")
        diag.setflags(write=False)
        object.__setattr__(self, "diag", diag)

    @property
    def eps_min(self) -> float:
        return float(self.diag.min())

    def grown(self, factor: float) -> "RegMatrix":
        return RegMatrix(self.diag * factor)

    def relaxed(self, factor: float) -> "RegMatrix":
        return RegMatrix(self.diag / factor)


def eval_H(problem: ProblemDef, t: float, X: np.ndarray, u: np.ndarray,
           lam: np.ndarray) -> float:
    """Hamiltonian l + lam^T f (callers drop evaluations beyond T)"""
    return float(problem.running_cost(t, X, u) + lam @ problem.f(t, X, u))


def eval_K(problem: ProblemDef, t: float, X: np.ndarray, v: np.ndarray,
           lam: np.ndarray, u_prev: np.ndarray, C: RegMatrix) -> float:
    """Augmented Hamiltonian H + (v - u_prev)^T C (v - u_prev)"""
    d = v - u_prev
    return eval_H(problem, t, X, v, lam) + float(d @ (C.diag * d))


def grad_H_u(problem: ProblemDef, t: float, X: np.ndarray, u: np.ndarray,
             lam: np.ndarray) -> np.ndarray:
    return problem.dl_du(t, X, u) + lam @ problem.df_du(t, X, u)


def closed_form_applies(problem: ProblemDef, control_set: ControlSet) -> bool:
    """Separable case: affine dynamics, diagonal quadratic cost, box set"""
    return problem.control_affine and problem.quadratic_control_cost and control_set.is_box


def minimize_K(problem: ProblemDef, t: float, X: np.ndarray, lam: np.ndarray,
               u_prev: np.ndarray, C: RegMatrix,
               control_set: Optional[ControlSet] = None,
               settings: Optional[InnerMinSettings] = None,
               method: str = "auto", strict: bool = False) -> np.ndarray:
    """
    Minimize K(t, X, ., lam; u_prev, C) over the control set.

    Uses the exact clamp formula in the separable case and projected Newton
    otherwise. The result is feasible and never has a larger K than u_prev;
    a Newton stall falls back to u_prev (or raises InnerMinStall when strict).

    Args:
        method: "auto", "closed_form" or "newton"
    """
    control_set = control_set or problem.control_set
    settings = settings or InnerMinSettings()
    if method not in ("auto", "closed_form", "newton"):
        raise ValueError(f"Unknown inner method '{method}'")

    if method == "closed_form" or (method == "auto" and closed_form_applies(problem, control_set)):
        if not closed_form_applies(problem, control_set):
            raise ValueError("Closed form needs control-affine dynamics, "
                             "diagonal quadratic control cost and a box control set")
        return _closed_form(problem, t, X, lam, u_prev, C, control_set)
    return _projected_newton(problem, t, X, lam, u_prev, C, control_set, settings, strict)


def _closed_form(problem, t, X, lam, u_prev, C, control_set):
    zero = np.zeros(problem.m)
    # Gradient at u=0 collects the linear-in-u terms: q_lin + G^T lam
    linear = grad_H_u(problem, t, X, zero, lam)
    q = problem.control_weight(t)
    v = (2.0 * C.diag * u_prev - linear) / (2.0 * q + 2.0 * C.diag)
    return np.clip(v, control_set.lower, control_set.upper)


def _newton_direction(B, g, v, control_set, C):
    fallback = g / (2.0 * C.diag)
    if control_set.is_box:
        # Bertsekas active set: bound reached with the gradient pushing outward
        active = ((v <= control_set.lower) & (g > 0)) | ((v >= control_set.upper) & (g < 0))
        free = ~active
        direction = fallback.copy()
        if free.any():
            try:
                direction[free] = np.linalg.solve(B[np.ix_(free, free)], g[free])
            except np.linalg.LinAlgError:
                return fallback
            if g[free] @ direction[free] <= 0:
                return fallback
        return direction
    try:
        direction = np.linalg.solve(B, g)
    except np.linalg.LinAlgError:
        return fallback
    return direction if g @ direction > 0 else fallback


def _projected_newton(problem, t, X, lam, u_prev, C, control_set, settings, strict):
    anchor = control_set.project(u_prev)

    def K(v):
        return eval_K(problem, t, X, v, lam, u_prev, C)

    def gradient(v):
        return grad_H_u(problem, t, X, v, lam) + 2.0 * C.diag * (v - u_prev)

    k_anchor = K(anchor)
    v, k_v, g = anchor, k_anchor, gradient(anchor)
    B = np.diag(2.0 * C.diag) + np.eye(problem.m)
    stalled = False

    for _ in range(settings.max_steps):
        if np.linalg.norm(v - control_set.project(v - g)) <= settings.step_tol:
            break
        if problem.hess_u is not None:
            B = problem.hess_u(t, X, v, lam) + np.diag(2.0 * C.diag)
        direction = _newton_direction(B, g, v, control_set, C)

        step = 1.0
        candidate = None
        for _ in range(MAX_HALVINGS):
            trial = control_set.project(v - step * direction)
            k_trial = K(trial)
            if k_trial <= min(k_v, k_v + ARMIJO * (g @ (trial - v))):
                candidate = trial
                break
            step *= 0.5
        if candidate is None:
            stalled = True
            break

        s = candidate - v
        g_new = gradient(candidate)
        if problem.hess_u is None:
            # Safeguarded BFGS secant on the m-dimensional node problem
            y = g_new - g
            sy = s @ y
            if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                Bs = B @ s
                B = B - np.outer(Bs, Bs) / (s @ Bs) + np.outer(y, y) / sy
        v, k_v, g = candidate, k_trial, g_new
        if np.linalg.norm(s) <= settings.step_tol:
            break

    if not k_v <= k_anchor or (stalled and k_v == k_anchor):
        message = f"Projected Newton made no progress at t={t:.6g}; keeping the previous control"
        if strict:
            raise InnerMinStall(message)
        logger.warning(message)
        return anchor
    if k_v == k_anchor:
        # Flat K: the point closest to u_prev wins
        return anchor
    return v
