"""Force-based balance and landing control.

A PD law on CoM position and body orientation produces desired linear and
angular accelerations; the linear force/moment model

    A F = [ sum_i F_i ; sum_i (p_i - p_c) x F_i ]

maps the stacked foot forces to the body wrench, and a QP distributes the
forces. The cost trades off tracking the desired wrench, force magnitude,
and change from the previous solution; constraints keep each stance force
inside its friction pyramid and normal-force bounds, and swing feet carry
exactly zero force.

The same controller doubles as the landing controller: the caller sets the
stance mask from detected contacts, and swing legs stay force-free until
their own touchdown.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .qpsolver import ActiveSetSolver, QpProblem, QpStatus
from .state import DesiredState, RobotState

__all__ = [
    "BalanceGains",
    "BodyModel",
    "FrictionSpec",
    "ForceDistributionError",
    "default_body_model",
    "pd_wrench",
    "build_force_model",
    "BalanceController",
    "balance_qp",
    "landing_switch",
    "knee_impact_detect",
]

CONTACT_FORCE_THRESHOLD = 20.0     # N, landing-switch default
KNEE_IMPACT_THRESHOLD = 5.0        # rad/s, impact-detection default


class ForceDistributionError(RuntimeError):
    """The force QP stayed infeasible even after backing off the target wrench."""


@dataclass
class BalanceGains:
    kp_pos: np.ndarray = field(default_factory=lambda: np.diag([50.0, 50.0, 120.0]))
    kd_pos: np.ndarray = field(default_factory=lambda: np.diag([15.0, 15.0, 25.0]))
    kp_orn: np.ndarray = field(default_factory=lambda: np.diag([300.0, 300.0, 200.0]))
    kd_orn: np.ndarray = field(default_factory=lambda: np.diag([40.0, 40.0, 30.0]))
    s_weight: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 1.0, 20.0, 20.0, 10.0]))
    alpha: float = 1e-4
    beta: float = 1e-4

    def __post_init__(self):
        for name in ("kp_pos", "kd_pos", "kp_orn", "kd_orn", "s_weight"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass
class BodyModel:
    """Mass, centroidal inertia (body frame), gravitational acceleration."""

    mass: float = 45.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.35, 2.1, 2.1]))
    g_vec: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        self.g_vec = np.asarray(self.g_vec, dtype=float).reshape(3)

    def inertia_world(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return r @ self.inertia @ r.T

    @property
    def weight(self) -> float:
        return self.mass * float(np.linalg.norm(self.g_vec))


def default_body_model() -> BodyModel:
    return BodyModel()


@dataclass
class FrictionSpec:
    mu: float = 0.6
    f_min: float = 0.0
    f_max: float = 500.0

    def __post_init__(self):
        if self.mu <= 0.0 or self.f_min < 0.0 or self.f_min >= self.f_max:
            raise ValueError("need mu > 0 and 0 <= f_min < f_max")


def pd_wrench(state: RobotState, des: DesiredState,
              gains: BalanceGains) -> tuple[np.ndarray, np.ndarray]:
    """Desired linear and angular accelerations from the PD law.

    Orientation feedback acts on log(R_d R^T), a world-frame axis-angle
    error; both outputs vanish when the state matches the target.
    """
    acc_lin = gains.kp_pos @ (des.pos - state.pos) + gains.kd_pos @ (des.vel - state.vel)
    err_rot = so3.log_map(des.rot @ state.rot.T)
    acc_ang = gains.kp_orn @ err_rot + gains.kd_orn @ (des.omega_world - state.omega_world())
    return acc_lin, acc_ang


def build_force_model(p_c: np.ndarray, feet: np.ndarray, model: BodyModel,
                      acc_lin: np.ndarray, acc_ang: np.ndarray,
                      r: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Force/moment map A (6x12) and target wrench b_d (6,).

    b_d = [m (acc_lin - g_vec); I_w acc_ang] with the inertia rotated to the
    world frame when ``r`` is given.
    """
    p_c = np.asarray(p_c, dtype=float).reshape(3)
    feet = np.asarray(feet, dtype=float).reshape(4, 3)
    a = np.zeros((6, 12))
    for i in range(4):
        a[0:3, 3 * i:3 * i + 3] = np.eye(3)
        a[3:6, 3 * i:3 * i + 3] = so3.hat(feet[i] - p_c)
    inertia = model.inertia if r is None else model.inertia_world(r)
    b_d = np.concatenate([model.mass * (np.asarray(acc_lin, dtype=float) - model.g_vec),
                          inertia @ np.asarray(acc_ang, dtype=float)])
    return a, b_d


def _friction_rows(n_stance: int, friction: FrictionSpec):
    rows, rhs = [], []
    for i in range(n_stance):
        base = 3 * i
        for sgn in (1.0, -1.0):
            for axis in (0, 1):
                r = np.zeros(3 * n_stance)
                r[base + axis] = sgn
                r[base + 2] = -friction.mu
                rows.append(r)
                rhs.append(0.0)
        r = np.zeros(3 * n_stance)
        r[base + 2] = 1.0
        rows.append(r)
        rhs.append(friction.f_max)
        r = np.zeros(3 * n_stance)
        r[base + 2] = -1.0
        rows.append(r)
        rhs.append(-friction.f_min)
    return np.array(rows), np.array(rhs)


def balance_qp(a: np.ndarray, b_d: np.ndarray, f_prev: np.ndarray,
               gains: BalanceGains, friction: FrictionSpec,
               stance_mask: np.ndarray, model: BodyModel | None = None,
               solver: ActiveSetSolver | None = None) -> np.ndarray:
    """Distribute foot forces minimizing the weighted wrench error.

    min (A F - b_d)^T S (A F - b_d) + alpha |F|^2 + beta |F - F_prev|^2
    s.t. friction pyramid and normal bounds per stance foot; F = 0 on swing
    feet (their variables are eliminated, so the zeros are exact).

    If the target wrench is unreachable, it is backed off toward pure
    gravity compensation until feasible; a fully infeasible problem raises
    :class:`ForceDistributionError`.
    """
    stance_mask = np.asarray(stance_mask, dtype=bool).reshape(4)
    if not stance_mask.any():
        raise ValueError("at least one stance leg required")
    f_prev = np.zeros(12) if f_prev is None else np.asarray(f_prev, dtype=float).reshape(12)
    solver = solver or ActiveSetSolver()

    stance = np.flatnonzero(stance_mask)
    cols = np.concatenate([[3 * i, 3 * i + 1, 3 * i + 2] for i in stance])
    a_s = a[:, cols]
    f_prev_s = f_prev[cols]
    s_w = gains.s_weight
    n = cols.size
    h = 2.0 * (a_s.T @ s_w @ a_s + (gains.alpha + gains.beta) * np.eye(n))
    c_ineq, d_ineq = _friction_rows(stance.size, friction)

    b_grav = None
    if model is not None:
        b_grav = np.concatenate([-model.mass * model.g_vec, np.zeros(3)])

    def attempt(b_target):
        g = -2.0 * (a_s.T @ (s_w @ b_target) + gains.beta * f_prev_s)
        qp = QpProblem(h=h, g=g, c_ineq=c_ineq, d_ineq=d_ineq)
        return solver.solve(qp, x0=f_prev_s if np.all(c_ineq @ f_prev_s <= d_ineq + 1e-9) else None)

    res = attempt(np.asarray(b_d, dtype=float))
    if res.status is not QpStatus.OPTIMAL and b_grav is not None:
        # back the commanded wrench off toward gravity compensation
        for scale in (0.5, 0.25, 0.1, 0.0):
            res = attempt(b_grav + scale * (b_d - b_grav))
            if res.status is QpStatus.OPTIMAL:
                break
    if res.status is not QpStatus.OPTIMAL:
        raise ForceDistributionError(f"force QP failed with status {res.status}")

    f = np.zeros(12)
    f[cols] = res.x
    return f


class BalanceController:
    """Stateful wrapper owning the warm-start cache (previous solution)."""

    def __init__(self, model: BodyModel, gains: BalanceGains | None = None,
                 friction: FrictionSpec | None = None):
        self.model = model
        self.gains = gains or BalanceGains()
        self.friction = friction or FrictionSpec()
        self.f_prev = np.zeros(12)
        self._solver = ActiveSetSolver()

    def reset(self):
        self.f_prev = np.zeros(12)

    def compute(self, state: RobotState, des: DesiredState,
                stance_mask: np.ndarray) -> np.ndarray:
        acc_lin, acc_ang = pd_wrench(state, des, self.gains)
        a, b_d = build_force_model(state.pos, state.feet, self.model,
                                   acc_lin, acc_ang, r=state.rot)
        f = balance_qp(a, b_d, self.f_prev, self.gains, self.friction,
                       stance_mask, model=self.model, solver=self._solver)
        self.f_prev = f
        return f


def landing_switch(contact_forces: np.ndarray, t: float, t_posing: float,
                   threshold: float = CONTACT_FORCE_THRESHOLD) -> bool:
    """True once past the posing instant and any foot force reaches the threshold."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    if t < t_posing:
        return False
    return bool(np.max(np.asarray(contact_forces, dtype=float)) >= threshold)


def knee_impact_detect(t: float, t_posing: float, knee_vel: np.ndarray,
                       threshold: float = KNEE_IMPACT_THRESHOLD) -> bool:
    """True once past the posing instant and any knee speed reaches the threshold."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    if t < t_posing:
        return False
    return bool(np.max(np.abs(np.asarray(knee_vel, dtype=float))) >= threshold)
