"""Two-stage state estimation.

Stage one is a complementary orientation filter: gyro integration on SO(3)
with an accelerometer correction that pulls the estimated gravity direction
toward the measured one. The correction gain adapts down when the
accelerometer norm departs from g (highly dynamic motion), so the filter
trusts the gyro there. The de-drift time constant is approximately 1/kappa.

Stage two is a conventional (linear) Kalman filter over body position,
body velocity, and the four foot positions, all in the world frame:

    state   x = [p_b, v_b, p_1, p_2, p_3, p_4]           (18)
    process p_b' = v_b,  v_b' = R_hat a_b + a_g + w_v,  p_i' = w_pi
    meas    per foot: relative position, relative velocity (feet assumed
            pinned while in stance), and contact height     (28 rows)

The rotated accelerometer reading is treated as a known input, which keeps
the filter linear time invariant; measurement covariances for a foot are
inflated by a large factor during swing so its rows are effectively ignored.
State ordering is fixed as above for serialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from scipy.linalg import cho_factor, cho_solve

from . import so3
from .swing import LegModel, leg_fk, leg_jacobian

_EYE18 = np.eye(18)

__all__ = [
    "ImuSample",
    "OrientationFilter",
    "KfState",
    "LegMeasurement",
    "SingularInnovationError",
    "adaptive_kappa",
    "orientation_step",
    "kf_predict",
    "kf_update",
    "kf_default_state",
    "leg_measurement_from_kinematics",
    "leg_measurements_batch",
    "Q_ACCEL_DEFAULT",
    "Q_FOOT_STANCE_DEFAULT",
    "R_POS_DEFAULT",
    "R_VEL_DEFAULT",
    "R_HEIGHT_DEFAULT",
    "SWING_INFLATION_DEFAULT",
]

# default noise densities / covariances (tunable via scenario config)
Q_ACCEL_DEFAULT = 1e-2          # (m/s^2)^2 * s, accelerometer white noise
Q_FOOT_STANCE_DEFAULT = 1e-6    # m^2 * s, stance-foot position drift
R_POS_DEFAULT = 1e-4            # m^2
R_VEL_DEFAULT = 1e-3            # (m/s)^2
R_HEIGHT_DEFAULT = 1e-4         # m^2
SWING_INFLATION_DEFAULT = 1e6


class SingularInnovationError(np.linalg.LinAlgError):
    """Innovation covariance could not be inverted."""


@dataclass
class ImuSample:
    gyro: np.ndarray   # rad/s, body frame
    accel: np.ndarray  # m/s^2, body frame, includes the gravity reaction

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)


@dataclass
class OrientationFilter:
    r_hat: np.ndarray = field(default_factory=lambda: np.eye(3))
    kappa_ref: float = 0.1
    gravity: float = 9.81

    def __post_init__(self):
        self.r_hat = np.asarray(self.r_hat, dtype=float).reshape(3, 3)


def adaptive_kappa(accel: np.ndarray, kappa_ref: float, gravity: float) -> float:
    """Correction gain shrinking as |accel| departs from g.

    kappa = kappa_ref * clamp(1 - ||accel| - g| / g, 0, 1).
    """
    if gravity <= 0.0:
        raise ValueError("gravity must be positive")
    ratio = abs(float(np.linalg.norm(accel)) - gravity) / gravity
    return kappa_ref * min(1.0, max(0.0, 1.0 - ratio))


def orientation_step(f: OrientationFilter, imu: ImuSample, dt: float) -> OrientationFilter:
    """One filter update: R <- R exp((gyro + kappa * w_corr) dt), re-orthonormalized.

    w_corr = (a/|a|) x R^T e_z rotates the estimated gravity direction toward
    the measured one; it carries no yaw information when upright.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    a = imu.accel
    a_norm = float(np.linalg.norm(a))
    omega = imu.gyro.copy()
    if a_norm > 1e-9:
        kappa = adaptive_kappa(a, f.kappa_ref, f.gravity)
        an = a / a_norm
        rz = f.r_hat[2, :]  # R^T e_z is the third row
        w_corr = np.array([an[1] * rz[2] - an[2] * rz[1],
                           an[2] * rz[0] - an[0] * rz[2],
                           an[0] * rz[1] - an[1] * rz[0]])
        omega = omega + kappa * w_corr
    r_new = f.r_hat @ so3.exp_exact(omega * dt)
    # one polar-Newton step of renormalization: keeps the per-step
    # orthogonality defect at machine scale without an SVD
    r_new = r_new @ (1.5 * np.eye(3) - 0.5 * (r_new.T @ r_new))
    return replace(f, r_hat=r_new)


@dataclass
class KfState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(18)
        self.cov = np.asarray(self.cov, dtype=float).reshape(18, 18)

    @property
    def pos(self) -> np.ndarray:
        return self.mean[0:3]

    @property
    def vel(self) -> np.ndarray:
        return self.mean[3:6]

    def foot(self, i: int) -> np.ndarray:
        return self.mean[6 + 3 * i: 9 + 3 * i]


def kf_default_state(p_b: np.ndarray, feet: np.ndarray,
                     pos_var: float = 1e-4, vel_var: float = 1e-4,
                     foot_var: float = 1e-4) -> KfState:
    mean = np.concatenate([np.asarray(p_b, dtype=float).reshape(3), np.zeros(3),
                           np.asarray(feet, dtype=float).reshape(12)])
    cov = np.diag(np.concatenate([np.full(3, pos_var), np.full(3, vel_var),
                                  np.full(12, foot_var)]))
    return KfState(mean=mean, cov=cov)


@dataclass
class LegMeasurement:
    rel_pos: np.ndarray        # world frame, foot minus body, from kinematics
    rel_vel: np.ndarray        # world frame, d/dt of rel_pos, from kinematics
    contact_height: float      # assumed ground height of the foot
    in_stance: bool

    def __post_init__(self):
        self.rel_pos = np.asarray(self.rel_pos, dtype=float).reshape(3)
        self.rel_vel = np.asarray(self.rel_vel, dtype=float).reshape(3)


def leg_measurement_from_kinematics(q: np.ndarray, qd: np.ndarray, r_hat: np.ndarray,
                                    gyro: np.ndarray, leg: int, model: LegModel,
                                    contact_height: float, in_stance: bool) -> LegMeasurement:
    """Build a leg measurement from encoders, the orientation estimate, and gyro.

    rel_pos = R p_foot(q);  rel_vel = R (hat(gyro) p_foot(q) + J(q) qd).
    """
    p_body = leg_fk(q, leg, model)
    v_body = so3.hat(gyro) @ p_body + leg_jacobian(q, leg, model) @ np.asarray(qd, dtype=float)
    r_hat = np.asarray(r_hat, dtype=float)
    return LegMeasurement(rel_pos=r_hat @ p_body, rel_vel=r_hat @ v_body,
                          contact_height=contact_height, in_stance=in_stance)


def leg_measurements_batch(qs: np.ndarray, qds: np.ndarray, r_hat: np.ndarray,
                           gyro: np.ndarray, model: LegModel,
                           contact_heights: np.ndarray,
                           in_stance: np.ndarray) -> list[LegMeasurement]:
    """All four leg measurements with the kinematics vectorized across legs.

    Matches :func:`leg_measurement_from_kinematics` per leg; used by the
    1 kHz scenario loops.
    """
    qs = np.asarray(qs, dtype=float).reshape(4, 3)
    qds = np.asarray(qds, dtype=float).reshape(4, 3)
    r_hat = np.asarray(r_hat, dtype=float)
    gyro = np.asarray(gyro, dtype=float).reshape(3)
    l1, l2 = model.l1, model.l2
    s0, c0 = np.sin(qs[:, 0]), np.cos(qs[:, 0])
    s1, c1 = np.sin(qs[:, 1]), np.cos(qs[:, 1])
    s12, c12 = np.sin(qs[:, 1] + qs[:, 2]), np.cos(qs[:, 1] + qs[:, 2])

    ux = -l1 * s1 - l2 * s12
    uz = -l1 * c1 - l2 * c12
    rel = np.stack([ux, -s0 * uz, c0 * uz], axis=1)       # foot minus hip, body
    p_body = np.asarray(model.hip_offsets, dtype=float) + rel

    jac = np.zeros((4, 3, 3))
    jac[:, 1, 0] = -rel[:, 2]
    jac[:, 2, 0] = rel[:, 1]
    a1x, a1z = -l1 * c1 - l2 * c12, l1 * s1 + l2 * s12
    jac[:, 0, 1] = a1x
    jac[:, 1, 1] = -s0 * a1z
    jac[:, 2, 1] = c0 * a1z
    a2x, a2z = -l2 * c12, l2 * s12
    jac[:, 0, 2] = a2x
    jac[:, 1, 2] = -s0 * a2z
    jac[:, 2, 2] = c0 * a2z

    gx, gy, gz = gyro
    gyro_cross = np.stack([gy * p_body[:, 2] - gz * p_body[:, 1],
                           gz * p_body[:, 0] - gx * p_body[:, 2],
                           gx * p_body[:, 1] - gy * p_body[:, 0]], axis=1)
    v_body = gyro_cross + np.einsum("nij,nj->ni", jac, qds)
    rel_pos = p_body @ r_hat.T
    rel_vel = v_body @ r_hat.T
    return [LegMeasurement(rel_pos=rel_pos[i], rel_vel=rel_vel[i],
                           contact_height=float(contact_heights[i]),
                           in_stance=bool(in_stance[i])) for i in range(4)]


_PROC_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _process_matrices(dt: float, q_v: float, q_p: np.ndarray):
    key = (dt, q_v, tuple(np.asarray(q_p, dtype=float)))
    hit = _PROC_CACHE.get(key)
    if hit is not None:
        return hit
    a = np.eye(18)
    a[0:3, 3:6] = dt * np.eye(3)
    # exact discretization of white accel noise on the (p, v) block
    q = np.zeros((18, 18))
    q[0:3, 0:3] = q_v * dt**3 / 3.0 * np.eye(3)
    q[0:3, 3:6] = q_v * dt**2 / 2.0 * np.eye(3)
    q[3:6, 0:3] = q[0:3, 3:6]
    q[3:6, 3:6] = q_v * dt * np.eye(3)
    for i in range(4):
        s = 6 + 3 * i
        q[s:s + 3, s:s + 3] = q_p[i] * dt * np.eye(3)
    if len(_PROC_CACHE) < 64:
        _PROC_CACHE[key] = (a, q)
    return a, q


def kf_predict(s: KfState, r_hat: np.ndarray, accel: np.ndarray, dt: float,
               q_v: float = Q_ACCEL_DEFAULT,
               q_p: np.ndarray | None = None) -> KfState:
    """Propagate mean and covariance one step under the rotated accel input.

    ``q_p`` is the per-foot process noise density; inflate entries for swing
    feet so they are free to move.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if q_p is None:
        q_p = np.full(4, Q_FOOT_STANCE_DEFAULT)
    q_p = np.asarray(q_p, dtype=float).reshape(4)

    u = np.asarray(r_hat, dtype=float) @ np.asarray(accel, dtype=float) \
        + np.array([0.0, 0.0, -9.81])
    a, q = _process_matrices(dt, q_v, q_p)
    mean = s.mean.copy()
    mean[0:3] += dt * s.mean[3:6] + 0.5 * dt * dt * u
    mean[3:6] += dt * u
    cov = a @ s.cov @ a.T + q
    cov = 0.5 * (cov + cov.T)
    return KfState(mean=mean, cov=cov)


# measurement matrix is constant: rows per foot are [rel pos; rel vel; height]
def _measurement_matrix() -> np.ndarray:
    h = np.zeros((28, 18))
    for i in range(4):
        r0 = 7 * i
        f0 = 6 + 3 * i
        h[r0:r0 + 3, 0:3] = -np.eye(3)        # -(p_b)
        h[r0:r0 + 3, f0:f0 + 3] = np.eye(3)   # +p_i
        h[r0 + 3:r0 + 6, 3:6] = -np.eye(3)    # -(v_b)
        h[r0 + 6, f0 + 2] = 1.0               # p_i z
    return h


_H = _measurement_matrix()


def kf_update(s: KfState, r_hat: np.ndarray, meas: list[LegMeasurement],
              r_p: float = R_POS_DEFAULT, r_v: float = R_VEL_DEFAULT,
              r_h: float = R_HEIGHT_DEFAULT,
              swing_inflation: float = SWING_INFLATION_DEFAULT) -> KfState:
    """Innovation step over the stacked 28-row leg measurement.

    Swing feet keep their rows but with covariance scaled by
    ``swing_inflation`` so they carry (numerically) no information.
    Raises :class:`SingularInnovationError` if the innovation covariance
    cannot be factorized.
    """
    if len(meas) != 4:
        raise ValueError("expected one measurement per leg")
    z = np.zeros(28)
    r_diag = np.zeros(28)
    for i, m in enumerate(meas):
        r0 = 7 * i
        z[r0:r0 + 3] = m.rel_pos
        z[r0 + 3:r0 + 6] = m.rel_vel   # h(x) = -v_b: feet fixed => rel_vel = -v_b
        z[r0 + 6] = m.contact_height
        scale = 1.0 if m.in_stance else swing_inflation
        r_diag[r0:r0 + 3] = r_p * scale
        r_diag[r0 + 3:r0 + 6] = r_v * scale
        r_diag[r0 + 6] = r_h * scale

    innovation = z - _H @ s.mean
    pht = s.cov @ _H.T
    s_mat = _H @ pht
    s_mat[np.arange(28), np.arange(28)] += r_diag
    try:
        factor = cho_factor(s_mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError("innovation covariance not positive definite") from exc
    k = cho_solve(factor, pht.T, check_finite=False).T  # P H^T S^-1
    mean = s.mean + k @ innovation
    ikh = _EYE18 - k @ _H
    cov = ikh @ s.cov @ ikh.T + (k * r_diag) @ k.T  # Joseph form
    cov = 0.5 * (cov + cov.T)
    return KfState(mean=mean, cov=cov)
