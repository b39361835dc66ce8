"""Single-rigid-body quadruped simulator with kinematic point feet.

The body integrates under the applied ground reaction forces and gravity
with RK4; rotation is advanced multiplicatively with the exact exponential
of the RK4-averaged body rate, so the ground truth is strictly more
accurate than both the optimizer's Euler transcription and the estimator's
models. Feet are kinematic: stance feet stay pinned where they are (with
optional injected slip noise), swing feet follow the commanded targets. The
measured constraint force equals the commanded force.

Sensors are synthesized from the true state: IMU (gyro plus accelerometer
with the gravity reaction included, so a stationary upright reading is
(0, 0, g)), joint encoders via leg inverse kinematics, and a per-foot
contact force channel. When a swing foot's commanded target crosses the
ground plane, the foot is clamped to the surface and the contact channel
reports an impulse-scale spike for that step, which is what the landing
switch listens for.

Everything is deterministic for a fixed seed and configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .balance import BodyModel
from .estimation import ImuSample
from .swing import JointState, LegModel, leg_fk, leg_ik, leg_jacobian
from .state import RobotState
from .terrain import PlaneCoeffs

__all__ = ["SensorNoise", "SimWorld", "sim_step", "synth_imu", "synth_encoders"]


def _ik_batch(p_body: np.ndarray, model) -> np.ndarray:
    """Vectorized closed-form IK for all four legs (knee-forward branch)."""
    d = p_body - np.asarray(model.hip_offsets, dtype=float)
    r = np.sqrt(np.sum(d * d, axis=1))
    l1, l2 = model.l1, model.l2
    if np.any(r > (l1 + l2) * (1.0 + 1e-9)) or np.any(r < abs(l1 - l2) * (1.0 - 1e-9)):
        from .swing import UnreachableError

        bad = int(np.argmax(np.abs(r - 0.5 * (l1 + l2))))
        raise UnreachableError(
            f"leg {bad} target at distance {r[bad]:.3f} m outside workspace")
    q0 = np.arctan2(d[:, 1], -d[:, 2])
    vx = d[:, 0]
    vz = -np.hypot(d[:, 1], d[:, 2])
    cos_knee = np.clip((vx * vx + vz * vz - l1 * l1 - l2 * l2) / (2.0 * l1 * l2), -1.0, 1.0)
    q2 = np.arccos(cos_knee)
    q1 = np.arctan2(-vx, -vz) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    return np.stack([q0, q1, q2], axis=1)


def _cross3(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _cross_rows_sum(a, b):
    # sum_i a[i] x b[i] for (n, 3) arrays; np.cross is slow on tiny inputs
    return np.array([
        np.dot(a[:, 1], b[:, 2]) - np.dot(a[:, 2], b[:, 1]),
        np.dot(a[:, 2], b[:, 0]) - np.dot(a[:, 0], b[:, 2]),
        np.dot(a[:, 0], b[:, 1]) - np.dot(a[:, 1], b[:, 0]),
    ])


@dataclass
class SensorNoise:
    gyro_std: float = 0.0          # rad/s
    accel_std: float = 0.0         # m/s^2
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    foot_slip_std: float = 0.0     # m per sqrt(step), stance feet

    def __post_init__(self):
        self.accel_bias = np.asarray(self.accel_bias, dtype=float).reshape(3)
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float).reshape(3)


class SimWorld:
    """Owns the true robot state, the ground plane, sensors, and the clock."""

    def __init__(self, state: RobotState, model: BodyModel, dt: float = 1e-3,
                 ground: PlaneCoeffs | None = None, noise: SensorNoise | None = None,
                 seed: int = 0, leg_model: LegModel | None = None):
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        self.state = state.copy()
        self.model = model
        self.dt = float(dt)
        self.ground = ground or PlaneCoeffs()
        self.noise = noise or SensorNoise()
        self.leg_model = leg_model or LegModel()
        self.rng = np.random.default_rng(seed)
        self.t = 0.0
        self.last_accel = np.zeros(3)           # linear acceleration, world
        self.contact_forces = np.zeros(12)      # commanded forces on stance feet
        self.touched_down = np.zeros(4, dtype=bool)
        self._q_prev: np.ndarray | None = None
        self._inv_inertia = np.linalg.inv(self.model.inertia)

    # -- dynamics ----------------------------------------------------------

    def step(self, stance_forces: np.ndarray, stance_mask: np.ndarray,
             swing_targets: dict[int, np.ndarray] | None = None) -> "SimWorld":
        """Advance one step under the commanded stance forces.

        ``stance_forces`` is the stacked 12-vector of world-frame GRFs
        (must be zero for swing feet); ``swing_targets`` maps swing leg
        indices to commanded world foot positions for the end of the step.
        """
        stance_mask = np.asarray(stance_mask, dtype=bool).reshape(4)
        forces = np.asarray(stance_forces, dtype=float).reshape(12).copy()
        for i in range(4):
            if not stance_mask[i] and np.any(forces[3 * i:3 * i + 3] != 0.0):
                raise ValueError(f"nonzero force commanded on swing leg {i}")

        s = self.state
        model = self.model
        dt = self.dt
        inertia = model.inertia
        inv_inertia = self._inv_inertia

        # forces are zero-order held, so the world torque about the CoM (at
        # the step start) is constant over the step
        f4 = forces.reshape(4, 3)
        acc = f4.sum(axis=0) / model.mass + model.g_vec
        lever = s.feet - s.pos
        tau_w = _cross_rows_sum(lever, f4)

        def omega_dot(r, omega):
            i_om = inertia @ omega
            gyro = _cross3(omega, i_om)
            return inv_inertia @ (r.T @ tau_w - gyro)

        # RK4 on (p, v, Omega); rotation via exact exp of the averaged rate.
        # Translational part is exact for piecewise-constant force.
        p0, v0, om0, r0 = s.pos, s.vel, s.omega, s.rot
        k1o = omega_dot(r0, om0)
        e_half = so3.exp_exact(om0 * (dt / 2.0))
        r_half = r0 @ e_half
        k2o = omega_dot(r_half, om0 + 0.5 * dt * k1o)
        k3o = omega_dot(r_half, om0 + 0.5 * dt * k2o)
        r_full = r_half @ e_half
        k4o = omega_dot(r_full, om0 + dt * k3o)

        new_pos = p0 + dt * v0 + 0.5 * dt * dt * acc
        new_vel = v0 + dt * acc
        new_omega = om0 + dt / 6.0 * (k1o + 2 * k2o + 2 * k3o + k4o)
        new_rot = r0 @ so3.exp_exact(0.5 * (om0 + new_omega) * dt)

        s.pos, s.vel, s.omega, s.rot = new_pos, new_vel, new_omega, new_rot
        self.last_accel = acc

        # feet: stance pinned (plus optional slip), swing follow the command
        sensor = np.zeros(12)
        self.touched_down[:] = False
        for i in range(4):
            if stance_mask[i]:
                if self.noise.foot_slip_std > 0.0:
                    s.feet[i, 0:2] += self.rng.normal(size=2) * self.noise.foot_slip_std
                sensor[3 * i:3 * i + 3] = forces[3 * i:3 * i + 3]
            else:
                target = None if swing_targets is None else swing_targets.get(i)
                if target is not None:
                    prev = s.feet[i].copy()
                    s.feet[i] = np.asarray(target, dtype=float).reshape(3)
                    ground_z = self.ground.height(s.feet[i, 0], s.feet[i, 1])
                    if s.feet[i, 2] <= ground_z:
                        # touchdown: clamp to the surface, report an
                        # impulse-scale spike on the force channel
                        s.feet[i, 2] = ground_z
                        self.touched_down[i] = True
                        v_impact = abs(prev[2] - s.feet[i, 2]) / dt + abs(s.vel[2])
                        sensor[3 * i + 2] = model.mass / 4.0 * v_impact / dt

        self.contact_forces = sensor
        self.t += dt
        return self

    # -- sensors -----------------------------------------------------------

    def synth_imu(self) -> ImuSample:
        """Gyro and accelerometer in the body frame, noise per the config."""
        n = self.noise
        gyro = self.state.omega + n.gyro_bias
        if n.gyro_std > 0.0:
            gyro = gyro + self.rng.normal(size=3) * n.gyro_std
        accel = self.state.rot.T @ (self.last_accel - self.model.g_vec) + n.accel_bias
        if n.accel_std > 0.0:
            accel = accel + self.rng.normal(size=3) * n.accel_std
        return ImuSample(gyro=gyro, accel=accel)

    def synth_encoders(self) -> list[JointState]:
        """Joint states via leg IK of the body-frame foot positions.

        Velocities are backward differences of the joint angles, matching
        how encoder velocities are produced in practice. Raises
        :class:`quadstack.swing.UnreachableError` if a commanded foot left
        the workspace.
        """
        s = self.state
        p_body = (s.feet - s.pos) @ s.rot  # rows: R^T (foot - p)
        qs = _ik_batch(p_body, self.leg_model)
        if self._q_prev is None:
            qds = np.zeros((4, 3))
        else:
            qds = (qs - self._q_prev) / self.dt
        self._q_prev = qs.copy()
        return [JointState(q=qs[i], qd=qds[i]) for i in range(4)]

    def knee_velocities(self) -> np.ndarray:
        """Knee joint rates from the encoder channel (zeros before two samples)."""
        enc = self.synth_encoders()
        return np.array([e.qd[2] for e in enc])


def sim_step(world: SimWorld, stance_forces: np.ndarray, stance_mask: np.ndarray,
             swing_targets: dict[int, np.ndarray] | None = None) -> SimWorld:
    """Module-level convenience wrapper around :meth:`SimWorld.step`."""
    return world.step(stance_forces, stance_mask, swing_targets)


def synth_imu(world: SimWorld) -> ImuSample:
    return world.synth_imu()


def synth_encoders(world: SimWorld) -> list[JointState]:
    return world.synth_encoders()
