"""3-DOF leg kinematics, dynamics, and swing/stance torque laws.

Joint order per leg is [abduction, hip pitch, knee pitch]. The abduction
axis is the body x-axis through the hip; hip and knee rotate about the leg
plane's y-axis. At q = 0 the leg hangs straight down: the foot sits at
hip_offset - (0, 0, l1 + l2).

Leg inertia is modeled as two point masses at the link midpoints (the
abduction link is massless); this matches the light-limb design the force
controllers assume and gives closed-form mass/gravity terms. Coriolis terms
come from Christoffel symbols of the mass matrix (dM/dq by central
differences, error ~1e-9 at the chosen step).

Frames: everything here is in the body frame. Stance torque mapping and its
inverse convert between world-frame ground reaction forces and joint
torques through the foot Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3

__all__ = [
    "LegModel",
    "JointState",
    "UnreachableError",
    "default_leg_model",
    "hip_position",
    "leg_fk",
    "leg_ik",
    "leg_jacobian",
    "leg_dynamics_terms",
    "op_space_inertia",
    "swing_torque",
    "scale_gains",
    "jump_track_torque",
    "stance_torque",
    "grf_from_torque",
    "SwingTrajectory",
]

_DM_STEP = 1e-6       # central-difference step for dM/dq
_LAMBDA_DAMP = 1e-3   # damped inverse for the operational-space inertia


class UnreachableError(ValueError):
    """Commanded foot position lies outside the leg workspace."""


@dataclass
class LegModel:
    """Geometry and point-mass inertia of one leg family (all four identical)."""

    l1: float = 0.34
    l2: float = 0.34
    hip_offsets: np.ndarray = field(default_factory=lambda: np.array([
        [0.3, -0.128, 0.0],   # FR
        [0.3, 0.128, 0.0],    # FL
        [-0.3, -0.128, 0.0],  # BR
        [-0.3, 0.128, 0.0],   # BL
    ]))
    m1: float = 0.3375
    m2: float = 0.3375
    gravity: float = 9.81

    def hip(self, leg: int) -> np.ndarray:
        return np.asarray(self.hip_offsets, dtype=float)[leg]


def default_leg_model() -> LegModel:
    return LegModel()


@dataclass
class JointState:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(3)
        self.qd = np.asarray(self.qd, dtype=float).reshape(3)


def hip_position(leg: int, model: LegModel) -> np.ndarray:
    return model.hip(leg).copy()


def _planar_points(q1: float, q2: float, l1: float, l2: float):
    """Knee and foot positions in the leg plane (x, z), plus their q1/q2 columns."""
    s1, c1 = np.sin(q1), np.cos(q1)
    s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
    knee = np.array([-l1 * s1, 0.0, -l1 * c1])
    foot = knee + np.array([-l2 * s12, 0.0, -l2 * c12])
    return knee, foot, (s1, c1, s12, c12)


def leg_fk(q: np.ndarray, leg: int, model: LegModel) -> np.ndarray:
    """Body-frame foot position for joint angles ``q``."""
    q = np.asarray(q, dtype=float).reshape(3)
    _, foot, _ = _planar_points(q[1], q[2], model.l1, model.l2)
    return model.hip(leg) + so3.rot_x(q[0]) @ foot


def leg_jacobian(q: np.ndarray, leg: int, model: LegModel) -> np.ndarray:
    """Foot Jacobian d(foot)/dq, 3x3, body frame."""
    q = np.asarray(q, dtype=float).reshape(3)
    rx = so3.rot_x(q[0])
    _, foot, (s1, c1, s12, c12) = _planar_points(q[1], q[2], model.l1, model.l2)
    l1, l2 = model.l1, model.l2
    col0 = np.cross([1.0, 0.0, 0.0], rx @ foot)
    col1 = rx @ np.array([-l1 * c1 - l2 * c12, 0.0, l1 * s1 + l2 * s12])
    col2 = rx @ np.array([-l2 * c12, 0.0, l2 * s12])
    return np.column_stack([col0, col1, col2])


def leg_ik(p_body: np.ndarray, leg: int, model: LegModel,
           knee_sign: float = 1.0) -> np.ndarray:
    """Joint angles placing the foot at the body-frame position ``p_body``.

    Raises :class:`UnreachableError` when the target leaves the annular
    workspace |l1 - l2| <= r <= l1 + l2 about the hip.
    """
    d = np.asarray(p_body, dtype=float).reshape(3) - model.hip(leg)
    r = np.linalg.norm(d)
    l1, l2 = model.l1, model.l2
    if r > (l1 + l2) * (1.0 + 1e-9) or r < abs(l1 - l2) * (1.0 - 1e-9):
        raise UnreachableError(f"target at distance {r:.3f} m outside [{abs(l1-l2):.3f}, {l1+l2:.3f}]")

    q0 = np.arctan2(d[1], -d[2]) if (abs(d[1]) > 1e-15 or abs(d[2]) > 1e-15) else 0.0
    # in-plane coordinates after undoing abduction: y component vanishes
    vx = d[0]
    vz = -np.hypot(d[1], d[2])

    cos_knee = (vx * vx + vz * vz - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    cos_knee = min(1.0, max(-1.0, cos_knee))
    q2 = knee_sign * np.arccos(cos_knee)
    q1 = np.arctan2(-vx, -vz) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    return np.array([q0, q1, q2])


def _point_jacobians(q: np.ndarray, model: LegModel):
    """Jacobians of the two link-midpoint masses (hip offset drops out)."""
    q = np.asarray(q, dtype=float).reshape(3)
    rx = so3.rot_x(q[0])
    l1, l2 = model.l1, model.l2
    s1, c1 = np.sin(q[1]), np.cos(q[1])
    s12, c12 = np.sin(q[1] + q[2]), np.cos(q[1] + q[2])

    p1 = np.array([-0.5 * l1 * s1, 0.0, -0.5 * l1 * c1])
    p2 = np.array([-l1 * s1 - 0.5 * l2 * s12, 0.0, -l1 * c1 - 0.5 * l2 * c12])

    j1 = np.column_stack([
        np.cross([1.0, 0.0, 0.0], rx @ p1),
        rx @ np.array([-0.5 * l1 * c1, 0.0, 0.5 * l1 * s1]),
        np.zeros(3),
    ])
    j2 = np.column_stack([
        np.cross([1.0, 0.0, 0.0], rx @ p2),
        rx @ np.array([-l1 * c1 - 0.5 * l2 * c12, 0.0, l1 * s1 + 0.5 * l2 * s12]),
        rx @ np.array([-0.5 * l2 * c12, 0.0, 0.5 * l2 * s12]),
    ])
    return (rx @ p1, j1), (rx @ p2, j2)


def mass_matrix(q: np.ndarray, model: LegModel) -> np.ndarray:
    (_, j1), (_, j2) = _point_jacobians(q, model)
    return model.m1 * j1.T @ j1 + model.m2 * j2.T @ j2


def gravity_torque(q: np.ndarray, model: LegModel) -> np.ndarray:
    """Gradient of potential energy: torque needed to hold the leg statically."""
    (_, j1), (_, j2) = _point_jacobians(q, model)
    g = model.gravity
    return g * (model.m1 * j1[2, :] + model.m2 * j2[2, :])


def potential_energy(q: np.ndarray, model: LegModel) -> float:
    (p1, _), (p2, _) = _point_jacobians(q, model)
    return model.gravity * (model.m1 * p1[2] + model.m2 * p2[2])


def coriolis_vector(q: np.ndarray, qd: np.ndarray, model: LegModel) -> np.ndarray:
    """C(q, qd) qd from Christoffel symbols of the mass matrix."""
    qd = np.asarray(qd, dtype=float).reshape(3)
    dm = np.zeros((3, 3, 3))  # dm[k] = dM/dq_k
    for k in range(3):
        dq = np.zeros(3)
        dq[k] = _DM_STEP
        dm[k] = (mass_matrix(q + dq, model) - mass_matrix(q - dq, model)) / (2.0 * _DM_STEP)
    c = np.zeros(3)
    for i in range(3):
        acc = 0.0
        for j in range(3):
            for k in range(3):
                gamma = 0.5 * (dm[k][i, j] + dm[j][i, k] - dm[i][j, k])
                acc += gamma * qd[j] * qd[k]
        c[i] = acc
    return c


def op_space_inertia(q: np.ndarray, leg: int, model: LegModel) -> np.ndarray:
    """Operational-space inertia (J M^-1 J^T)^-1 with a damped inverse."""
    j = leg_jacobian(q, leg, model)
    m = mass_matrix(q, model)
    jmj = j @ np.linalg.solve(m + _LAMBDA_DAMP**2 * np.eye(3), j.T)
    return np.linalg.inv(jmj + _LAMBDA_DAMP**2 * np.eye(3))


def leg_dynamics_terms(q: np.ndarray, qd: np.ndarray, leg: int,
                       model: LegModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(operational-space inertia, Coriolis vector, gravity torque)."""
    return (op_space_inertia(q, leg, model),
            coriolis_vector(q, qd, model),
            gravity_torque(q, model))


def jdot_qd(q: np.ndarray, qd: np.ndarray, leg: int, model: LegModel,
            eps: float = 1e-6) -> np.ndarray:
    """dJ/dt * qd via a directional difference of J along qd."""
    qd = np.asarray(qd, dtype=float).reshape(3)
    jp = leg_jacobian(q + eps * qd, leg, model)
    jm = leg_jacobian(q - eps * qd, leg, model)
    return ((jp - jm) / (2.0 * eps)) @ qd


def swing_torque(q: np.ndarray, qd: np.ndarray, p_ref: np.ndarray, v_ref: np.ndarray,
                 a_ref: np.ndarray, kp: np.ndarray, kd: np.ndarray, leg: int,
                 model: LegModel) -> np.ndarray:
    """Cartesian PD with operational-space feedforward for a swing foot.

    tau = J^T [Kp (p_ref - p) + Kd (v_ref - v)]
        + J^T Lambda (a_ref - Jdot qd) + C qd + G
    """
    q = np.asarray(q, dtype=float).reshape(3)
    qd = np.asarray(qd, dtype=float).reshape(3)
    j = leg_jacobian(q, leg, model)
    lam, cqd, grav = leg_dynamics_terms(q, qd, leg, model)
    e_p = np.asarray(p_ref, dtype=float) - leg_fk(q, leg, model)
    e_v = np.asarray(v_ref, dtype=float) - j @ qd
    ff = j.T @ (lam @ (np.asarray(a_ref, dtype=float) - jdot_qd(q, qd, leg, model)))
    return j.T @ (np.asarray(kp) @ e_p + np.asarray(kd) @ e_v) + ff + cqd + grav


def scale_gains(omega_des: float, lam: np.ndarray) -> np.ndarray:
    """Diagonal Cartesian P gain scaled by apparent mass: Kp_jj = omega_des * Lambda_jj."""
    if omega_des <= 0.0:
        raise ValueError("omega_des must be positive")
    return np.diag(omega_des * np.diag(np.asarray(lam, dtype=float)))


def jump_track_torque(q: np.ndarray, qd: np.ndarray, refs: dict, gains: dict,
                      leg: int, model: LegModel) -> np.ndarray:
    """Reference-tracking torque for jump execution.

    ``refs`` carries q_d, qd_d, p_foot_d, v_foot_d, tau_d (body-frame foot
    targets, feedforward torque); ``gains`` carries kp_cart, kd_cart,
    kp_joint, kd_joint (3x3 or diagonal vectors). Cartesian PD plus the
    feedforward, plus a joint-space PD.
    """
    q = np.asarray(q, dtype=float).reshape(3)
    qd = np.asarray(qd, dtype=float).reshape(3)
    j = leg_jacobian(q, leg, model)
    p_f = leg_fk(q, leg, model)
    v_f = j @ qd

    def as_mat(g):
        g = np.asarray(g, dtype=float)
        return np.diag(g) if g.ndim == 1 else g

    kp_c, kd_c = as_mat(gains["kp_cart"]), as_mat(gains["kd_cart"])
    kp_j, kd_j = as_mat(gains["kp_joint"]), as_mat(gains["kd_joint"])
    tau_ff = j.T @ (kp_c @ (np.asarray(refs["p_foot_d"], dtype=float) - p_f)
                    + kd_c @ (np.asarray(refs["v_foot_d"], dtype=float) - v_f))
    tau_ff = tau_ff + np.asarray(refs["tau_d"], dtype=float)
    return tau_ff + kp_j @ (np.asarray(refs["q_d"], dtype=float) - q) \
        + kd_j @ (np.asarray(refs["qd_d"], dtype=float) - qd)


def stance_torque(q: np.ndarray, grf_world: np.ndarray, r_body: np.ndarray,
                  leg: int, model: LegModel) -> np.ndarray:
    """Joint torques commanding a world-frame ground reaction force on the body.

    tau = -J^T R^T F: the leg pushes against the ground so that the
    reaction on the body equals ``grf_world``.
    """
    j = leg_jacobian(q, leg, model)
    return -j.T @ (np.asarray(r_body, dtype=float).T @ np.asarray(grf_world, dtype=float))


def grf_from_torque(q: np.ndarray, tau: np.ndarray, r_body: np.ndarray,
                    leg: int, model: LegModel) -> np.ndarray:
    """Inverse of :func:`stance_torque`: world GRF implied by joint torques."""
    j = leg_jacobian(q, leg, model)
    f_body = np.linalg.solve(j.T, -np.asarray(tau, dtype=float))
    return np.asarray(r_body, dtype=float) @ f_body


class SwingTrajectory:
    """Foot trajectory from liftoff to a touchdown target.

    Minimum-jerk (quintic) time scaling between the endpoints plus a
    quartic clearance bump in z that peaks mid-swing; start and end
    velocities are zero.
    """

    def __init__(self, p_start: np.ndarray, p_end: np.ndarray, duration: float,
                 apex: float = 0.08):
        if duration <= 0.0:
            raise ValueError("duration must be positive")
        self.p0 = np.asarray(p_start, dtype=float).reshape(3)
        self.p1 = np.asarray(p_end, dtype=float).reshape(3)
        self.duration = float(duration)
        self.apex = float(apex)

    def _s(self, u: float) -> tuple[float, float, float]:
        s = u**3 * (10.0 - 15.0 * u + 6.0 * u * u)
        ds = 30.0 * u * u * (1.0 - u) ** 2
        dds = 60.0 * u * (1.0 - 3.0 * u + 2.0 * u * u)
        return s, ds, dds

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, velocity, acceleration at time ``t`` since liftoff."""
        u = min(1.0, max(0.0, t / self.duration))
        s, ds, dds = self._s(u)
        inv = 1.0 / self.duration
        pos = self.p0 + s * (self.p1 - self.p0)
        vel = ds * inv * (self.p1 - self.p0)
        acc = dds * inv * inv * (self.p1 - self.p0)
        bump = 16.0 * u * u * (1.0 - u) ** 2
        dbump = 32.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
        ddbump = 32.0 * (1.0 - 6.0 * u + 6.0 * u * u)
        pos = pos + np.array([0.0, 0.0, self.apex * bump])
        vel = vel + np.array([0.0, 0.0, self.apex * dbump * inv])
        acc = acc + np.array([0.0, 0.0, self.apex * ddbump * inv * inv])
        return pos, vel, acc
