"""Contact-timing trajectory optimization over single-rigid-body dynamics.

Given a fixed contact sequence (phases, each with a stance-foot set and a
knot budget), this module optimizes the phase durations together with the
body trajectory and ground reaction forces. Orientation is carried as the
nine entries of a rotation matrix per knot; the manifold is enforced by the
equality constraint

    R_{k+1} = R_k * exp_taylor4(hat(Omega_k * h_i))

with the same degree-4 Taylor exponential exposed by :mod:`quadstack.so3`
(no explicit orthogonality constraints; the accumulated polynomial defect
is measured and reported). Translational and angular dynamics are
forward-Euler defects of

    p''  = sum_s f_s / m + g
    I Om' + Om x I Om = R^T sum_s f_s x (p - p_f^s)

Stance feet are phase parameters pinned at given world positions; flight
phases carry no force variables at all. Kinematic reach is kept by a
body-frame sphere constraint |R (p_f - p) - center|^2 <= r^2 at stance
knots, friction by the pyramid multiplied through the normal force
(requiring f_z >= f_min > 0 during stance), and the total duration by
T_min <= sum T_i <= T_max. Optional per-phase duration bounds and a CoM box
during contact are variable bounds.

Problem size, for phases i = 1..n_p with N_i intervals and n_i stance feet
(N = sum N_i intervals, N + 1 knots):

    variables    18 (N + 1) + 3 sum_i N_i n_i + n_p
    equalities   18 + 12 + 18 N (+3 for the initial angular-acceleration pin
                 when the first phase has stance feet)
    inequalities 4 sum_i N_i n_i + sphere rows + 2

The solver is an augmented-Lagrangian outer loop over the equality and
inequality constraints with projected quasi-Newton (L-BFGS-B) inner solves
over the variable bounds; gradients are analytic throughout. Returned
solutions are re-checked by an independent constraint evaluator that does
not share code with the solver path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import so3
from .balance import BodyModel

__all__ = [
    "ContactPhase",
    "JumpSpec",
    "SrbdState",
    "TimingSolution",
    "BodyReference",
    "SpecError",
    "NoConvergenceError",
    "srbd_residual",
    "rotation_defect",
    "trajectory_cost",
    "build_problem",
    "initial_guess",
    "solve_timing",
    "check_constraints",
    "export_reference",
]

_T_PHASE_MIN = 0.05   # vanishing phase guard, seconds


class SpecError(ValueError):
    """Inconsistent jump specification (phases, feet, bounds)."""


class NoConvergenceError(RuntimeError):
    """Solver stalled; carries diagnostics in ``args[1]``."""


@dataclass
class SrbdState:
    pos: np.ndarray
    vel: np.ndarray
    omega: np.ndarray   # body frame
    rot: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(3)
        self.vel = np.asarray(self.vel, dtype=float).reshape(3)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.rot = np.asarray(self.rot, dtype=float).reshape(3, 3)


@dataclass
class ContactPhase:
    feet: tuple[int, ...]          # stance foot indices, empty = flight
    n_knots: int = 30              # intervals in this phase
    t_min: float = _T_PHASE_MIN    # per-phase duration bounds
    t_max: float = np.inf
    feet_pos: np.ndarray | None = None   # world footholds; None = spec.feet_start

    def __post_init__(self):
        self.feet = tuple(int(f) for f in self.feet)
        if self.n_knots < 2:
            raise SpecError("each phase needs at least 2 intervals")
        if self.t_min < _T_PHASE_MIN:
            self.t_min = _T_PHASE_MIN
        if self.feet_pos is not None:
            self.feet_pos = np.asarray(self.feet_pos, dtype=float).reshape(4, 3)


_NOMINAL_FOOT_CENTERS = np.array([
    [0.3, -0.128, -0.45],
    [0.3, 0.128, -0.45],
    [-0.3, -0.128, -0.45],
    [-0.3, 0.128, -0.45],
])


@dataclass
class JumpSpec:
    phases: list[ContactPhase]
    p_start: np.ndarray
    r_start: np.ndarray
    p_goal: np.ndarray
    r_goal: np.ndarray
    feet_start: np.ndarray                     # (4, 3) world stance positions
    t_min: float = 0.5
    t_max: float = 1.5
    sphere_centers: np.ndarray = field(default_factory=lambda: _NOMINAL_FOOT_CENTERS.copy())
    sphere_radius: float = 0.16
    mu: float = 0.6
    f_min: float = 1.0                          # > 0: friction is multiplied through f_z
    f_max: float = 700.0
    com_min: np.ndarray | None = None           # CoM box during contact phases
    com_max: np.ndarray | None = None
    v_goal: np.ndarray | None = None            # optional final-velocity pin
    omega_goal: np.ndarray | None = None        # optional final body-rate pin
    eps_omega: float = 1e-2
    eps_force: float = 1e-6
    eps_rot: float = 1.0
    model: BodyModel = field(default_factory=BodyModel)

    def __post_init__(self):
        self.p_start = np.asarray(self.p_start, dtype=float).reshape(3)
        self.p_goal = np.asarray(self.p_goal, dtype=float).reshape(3)
        self.r_start = np.asarray(self.r_start, dtype=float).reshape(3, 3)
        self.r_goal = np.asarray(self.r_goal, dtype=float).reshape(3, 3)
        self.feet_start = np.asarray(self.feet_start, dtype=float).reshape(4, 3)
        self.sphere_centers = np.asarray(self.sphere_centers, dtype=float).reshape(4, 3)
        if self.v_goal is not None:
            self.v_goal = np.asarray(self.v_goal, dtype=float).reshape(3)
        if self.omega_goal is not None:
            self.omega_goal = np.asarray(self.omega_goal, dtype=float).reshape(3)
        if not self.phases:
            raise SpecError("need at least one contact phase")
        if self.t_min >= self.t_max:
            raise SpecError("t_min must be below t_max")
        if self.f_min <= 0.0:
            raise SpecError("f_min must be positive (friction is multiplied through f_z)")
        for ph in self.phases:
            if any(f < 0 or f > 3 for f in ph.feet):
                raise SpecError(f"bad foot index in phase {ph.feet}")
        if sum(ph.t_min for ph in self.phases) > self.t_max:
            raise SpecError("per-phase minimum durations exceed t_max")


@dataclass
class TimingSolution:
    durations: np.ndarray            # T_i per phase
    states: list[SrbdState]          # N + 1 knots
    forces: np.ndarray               # (N, 4, 3), zero on swing feet
    cost: float
    max_violation: float
    defect_norms: dict
    kkt_residual: float
    converged: bool
    outer_iterations: int
    ortho_defect: float              # max knot orthogonality defect


@dataclass
class BodyReference:
    t: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    rot: np.ndarray                  # (n, 3, 3)
    omega: np.ndarray
    forces: np.ndarray               # (n, 12)
    phase_times: np.ndarray          # cumulative phase end times


# -- per-step operations (also used by the independent checker) ------------


def srbd_residual(x_k: SrbdState, x_k1: SrbdState, f_k: np.ndarray,
                  feet: np.ndarray, h: float, model: BodyModel) -> np.ndarray:
    """Stacked forward-Euler defects of the velocity and body-rate rows.

    ``f_k`` is (4, 3) world GRFs (zero rows for swing feet), ``feet`` the
    (4, 3) world foot positions. Zero iff the step satisfies the discrete
    dynamics.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    f_k = np.asarray(f_k, dtype=float).reshape(4, 3)
    feet = np.asarray(feet, dtype=float).reshape(4, 3)
    u = f_k.sum(axis=0) / model.mass + model.g_vec
    c_vel = x_k1.vel - x_k.vel - h * u
    tau = np.zeros(3)
    for s in range(4):
        tau += np.cross(f_k[s], x_k.pos - feet[s])
    inertia = model.inertia
    om_dot = np.linalg.solve(inertia, x_k.rot.T @ tau - np.cross(x_k.omega, inertia @ x_k.omega))
    c_om = x_k1.omega - x_k.omega - h * om_dot
    return np.concatenate([c_vel, c_om])


def rotation_defect(r_k: np.ndarray, r_k1: np.ndarray, omega_k: np.ndarray,
                    h: float) -> np.ndarray:
    """Manifold defect R_{k+1} - R_k exp_taylor4(hat(omega_k h)); all 9 entries."""
    if h <= 0.0:
        raise ValueError("h must be positive")
    return np.asarray(r_k1, dtype=float) - np.asarray(r_k, dtype=float) @ so3.exp_taylor4(
        np.asarray(omega_k, dtype=float) * h)


def _smooth_log(m: np.ndarray) -> np.ndarray:
    """log(m)^vee for a near-rotation matrix, smooth in the entries."""
    c = min(1.0, max(-1.0 + 1e-9, (float(np.trace(m)) - 1.0) / 2.0))
    theta = np.arccos(c)
    s = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if theta < 1e-6:
        a = 0.5 + theta * theta / 12.0
    else:
        a = theta / (2.0 * np.sin(theta))
    return a * s


def trajectory_cost(states: list[SrbdState], forces: np.ndarray,
                    ref_rots: list[np.ndarray], eps_omega: float,
                    eps_force: float, eps_rot: float) -> float:
    """Sum of weighted squared body rates, forces, and rotation errors."""
    j = 0.0
    for k, x in enumerate(states):
        j += eps_omega * float(x.omega @ x.omega)
        e = _smooth_log(np.asarray(ref_rots[k]).T @ x.rot)
        j += eps_rot * float(e @ e)
    f = np.asarray(forces, dtype=float)
    j += eps_force * float(np.sum(f * f))
    return j


# -- problem construction ---------------------------------------------------


class TimingProblem:
    """Packed NLP: decision vector, bounds, cost/constraints with gradients.

    Layout: knots [p v omega R(9)] x (N+1), then scaled stance forces
    (f / (m g)) per stance interval and foot, then phase durations.
    """

    def __init__(self, spec: JumpSpec):
        self.spec = spec
        self.n_phases = len(spec.phases)
        self.n_int = sum(ph.n_knots for ph in spec.phases)
        self.n_knots = self.n_int + 1

        # interval -> phase, and per-interval stance feet
        self.int_phase = np.zeros(self.n_int, dtype=int)
        j = 0
        for i, ph in enumerate(spec.phases):
            self.int_phase[j:j + ph.n_knots] = i
            j += ph.n_knots
        self.phase_nk = np.array([ph.n_knots for ph in spec.phases], dtype=float)
        self.int_feet = [spec.phases[self.int_phase[j]].feet for j in range(self.n_int)]
        # world foothold positions per interval (phases may override)
        self.phase_feet_pos = [
            spec.feet_start if ph.feet_pos is None else ph.feet_pos
            for ph in spec.phases
        ]
        self.int_feet_pos = np.stack([
            self.phase_feet_pos[self.int_phase[j]] for j in range(self.n_int)
        ])

        # force variable table: (interval, foot) -> slice start
        self.force_index: dict[tuple[int, int], int] = {}
        nf = 0
        for j in range(self.n_int):
            for f in self.int_feet[j]:
                self.force_index[(j, f)] = nf
                nf += 3
        self.n_force = nf
        self.fi_j = np.array([j for (j, _f) in self.force_index], dtype=int)
        self.fi_f = np.array([f for (_j, f) in self.force_index], dtype=int)

        # stance-knot set: a knot is contact-constrained when an adjacent
        # interval has stance feet; footholds come from that interval
        self.stance_knots: list[tuple[int, int, np.ndarray]] = []  # (knot, foot, world pos)
        for k in range(self.n_knots):
            seen: dict[int, np.ndarray] = {}
            if k < self.n_int:
                for f in self.int_feet[k]:
                    seen[f] = self.int_feet_pos[k, f]
            if k > 0:
                for f in self.int_feet[k - 1]:
                    seen.setdefault(f, self.int_feet_pos[k - 1, f])
            for f in sorted(seen):
                self.stance_knots.append((k, f, seen[f]))
        if self.stance_knots:
            self.sk_k = np.array([k for k, _f, _p in self.stance_knots], dtype=int)
            self.sk_f = np.array([f for _k, f, _p in self.stance_knots], dtype=int)
            self.sk_pw = np.stack([p for _k, _f, p in self.stance_knots])
        else:
            self.sk_k = np.zeros(0, dtype=int)
            self.sk_f = np.zeros(0, dtype=int)
            self.sk_pw = np.zeros((0, 3))

        self.nk_off = 0
        self.nf_off = 18 * self.n_knots
        self.nt_off = self.nf_off + self.n_force
        self.n_vars = self.nt_off + self.n_phases

        self.f_scale = spec.model.mass * abs(spec.model.g_vec[2])
        self.ref_rots = np.stack([
            so3.interp_rotation(spec.r_start, spec.r_goal, k / self.n_int)
            for k in range(self.n_knots)
        ])

        self.n_goal_twist = (3 if spec.v_goal is not None else 0) + \
            (3 if spec.omega_goal is not None else 0)
        self.n_eq = 18 + 12 + self.n_goal_twist + 18 * self.n_int \
            + (3 if self.int_feet[0] else 0)
        self.n_ineq = 4 * (self.n_force // 3) + len(self.stance_knots) + 2

    # -- packing ------------------------------------------------------------

    def pack(self, pos, vel, omega, rots, forces, durations) -> np.ndarray:
        z = np.zeros(self.n_vars)
        knots = np.concatenate([
            np.asarray(pos).reshape(self.n_knots, 3),
            np.asarray(vel).reshape(self.n_knots, 3),
            np.asarray(omega).reshape(self.n_knots, 3),
            np.asarray(rots).reshape(self.n_knots, 9),
        ], axis=1)
        z[:self.nf_off] = knots.reshape(-1)
        forces = np.asarray(forces, dtype=float).reshape(self.n_int, 4, 3)
        z[self.nf_off:self.nt_off] = (forces[self.fi_j, self.fi_f] / self.f_scale).reshape(-1)
        z[self.nt_off:] = np.asarray(durations, dtype=float).reshape(self.n_phases)
        return z

    def unpack(self, z: np.ndarray):
        knots = z[:self.nf_off].reshape(self.n_knots, 18)
        pos = knots[:, 0:3]
        vel = knots[:, 3:6]
        omega = knots[:, 6:9]
        rots = knots[:, 9:18].reshape(self.n_knots, 3, 3)
        forces = np.zeros((self.n_int, 4, 3))
        if self.n_force:
            forces[self.fi_j, self.fi_f] = z[self.nf_off:self.nt_off].reshape(-1, 3) * self.f_scale
        durations = z[self.nt_off:].copy()
        return pos, vel, omega, rots, forces, durations

    def bounds(self) -> list[tuple[float, float]]:
        spec = self.spec
        lo = np.full(self.n_vars, -np.inf)
        hi = np.full(self.n_vars, np.inf)
        knots = np.arange(self.n_knots)
        # rotation entries live in [-1, 1] up to the Taylor defect
        for k in knots:
            base = 18 * k
            lo[base + 9:base + 18] = -1.2
            hi[base + 9:base + 18] = 1.2
            lo[base + 6:base + 9] = -60.0
            hi[base + 6:base + 9] = 60.0
        if spec.com_min is not None or spec.com_max is not None:
            cmin = -np.inf * np.ones(3) if spec.com_min is None else np.asarray(spec.com_min, dtype=float)
            cmax = np.inf * np.ones(3) if spec.com_max is None else np.asarray(spec.com_max, dtype=float)
            stance_set = {k for k, _, _ in self.stance_knots}
            for k in stance_set:
                base = 18 * k
                lo[base:base + 3] = cmin
                hi[base:base + 3] = cmax
        for (j, f), idx in self.force_index.items():
            col = self.nf_off + idx
            lo[col + 2] = spec.f_min / self.f_scale
            hi[col + 2] = spec.f_max / self.f_scale
            lo[col:col + 2] = -spec.f_max / self.f_scale
            hi[col:col + 2] = spec.f_max / self.f_scale
        for i, ph in enumerate(spec.phases):
            lo[self.nt_off + i] = ph.t_min
            hi[self.nt_off + i] = min(ph.t_max, spec.t_max)
        return list(zip(lo, hi))

    # -- vectorized evaluation ----------------------------------------------

    def _eval(self, z: np.ndarray, need_grad: bool):
        """Cost, equality residuals, inequality residuals, and a vjp closure."""
        spec = self.spec
        model = spec.model
        m, g_vec = model.mass, model.g_vec
        inertia = model.inertia
        inv_i = np.linalg.inv(inertia)
        pos, vel, omega, rots, forces, durations = self.unpack(z)
        n_int = self.n_int
        ph = self.int_phase
        h = durations[ph] / self.phase_nk[ph]          # (N,)

        fsum = forces.sum(axis=1)                      # (N, 3)
        u = fsum / m + g_vec                           # (N, 3)

        # torque about the CoM per interval, world frame
        lever = pos[:-1, None, :] - self.int_feet_pos             # (N, 4, 3)
        tau = np.cross(forces, lever).sum(axis=1)                 # (N, 3)
        r_k = rots[:-1]
        tau_b = np.einsum("nji,nj->ni", r_k, tau)                 # R^T tau
        i_om = omega[:-1] @ inertia.T
        gyro = np.cross(omega[:-1], i_om)
        om_dot = (tau_b - gyro) @ inv_i.T

        c_pos = pos[1:] - pos[:-1] - h[:, None] * vel[:-1]
        c_vel = vel[1:] - vel[:-1] - h[:, None] * u
        c_om = omega[1:] - omega[:-1] - h[:, None] * om_dot

        a_mat = _hat_batch(omega[:-1] * h[:, None])
        a2 = a_mat @ a_mat
        a3 = a2 @ a_mat
        a4 = a3 @ a_mat
        e_mat = (np.eye(3)[None] + a_mat + a2 / 2.0 + a3 / 6.0 + a4 / 24.0)
        c_rot = rots[1:] - r_k @ e_mat

        eq_parts = [
            pos[0] - spec.p_start,
            vel[0],
            omega[0],
            (rots[0] - spec.r_start).reshape(9),
            pos[-1] - spec.p_goal,
            (rots[-1] - spec.r_goal).reshape(9),
        ]
        if spec.v_goal is not None:
            eq_parts.append(vel[-1] - spec.v_goal)
        if spec.omega_goal is not None:
            eq_parts.append(omega[-1] - spec.omega_goal)
        eq_parts += [
            c_pos.reshape(-1),
            c_vel.reshape(-1),
            c_om.reshape(-1),
            c_rot.reshape(-1),
        ]
        if self.int_feet[0]:
            eq_parts.append(om_dot[0])
        c_eq = np.concatenate(eq_parts)

        # inequalities: friction pyramid per force variable block
        n_items = self.n_force // 3
        f_items = forces[self.fi_j, self.fi_f] if n_items else np.zeros((0, 3))
        mu_fz = spec.mu * f_items[:, 2]
        fric = np.stack([f_items[:, 0] - mu_fz, -f_items[:, 0] - mu_fz,
                         f_items[:, 1] - mu_fz, -f_items[:, 1] - mu_fz], axis=1)
        d_sph = self.sk_pw - pos[self.sk_k]
        u_sph = np.einsum("nij,nj->ni", rots[self.sk_k], d_sph) - spec.sphere_centers[self.sk_f]
        sph = np.sum(u_sph * u_sph, axis=1) - spec.sphere_radius**2
        t_total = float(durations.sum())
        ineq = np.concatenate([fric.reshape(-1), sph,
                               [spec.t_min - t_total, t_total - spec.t_max]])

        # cost
        m_err = np.einsum("nji,njk->nik", self.ref_rots, rots)  # ref^T R
        cost_rot, e_vecs, cost_rot_grads = _rot_cost_batch(m_err, spec.eps_rot, need_grad)
        cost = (spec.eps_omega * float(np.sum(omega * omega))
                + spec.eps_force * float(np.sum(forces * forces))
                + cost_rot)

        if not need_grad:
            return cost, c_eq, ineq, None

        def grad(y_eq: np.ndarray, y_in: np.ndarray) -> np.ndarray:
            """Gradient of cost + y_eq . c_eq + y_in . c_ineq."""
            g_pos = np.zeros_like(pos)
            g_vel = np.zeros_like(vel)
            g_om = np.zeros_like(omega)
            g_rot = np.zeros_like(rots)
            g_f = np.zeros_like(forces)
            g_t = np.zeros(self.n_phases)

            # cost terms
            g_om += 2.0 * spec.eps_omega * omega
            g_f += 2.0 * spec.eps_force * forces
            g_rot += np.einsum("nij,njk->nik", self.ref_rots, cost_rot_grads)

            o = 0
            g_pos[0] += y_eq[o:o + 3]; o += 3
            g_vel[0] += y_eq[o:o + 3]; o += 3
            g_om[0] += y_eq[o:o + 3]; o += 3
            g_rot[0] += y_eq[o:o + 9].reshape(3, 3); o += 9
            g_pos[-1] += y_eq[o:o + 3]; o += 3
            g_rot[-1] += y_eq[o:o + 9].reshape(3, 3); o += 9
            if spec.v_goal is not None:
                g_vel[-1] += y_eq[o:o + 3]; o += 3
            if spec.omega_goal is not None:
                g_om[-1] += y_eq[o:o + 3]; o += 3

            y_pos = y_eq[o:o + 3 * n_int].reshape(n_int, 3); o += 3 * n_int
            y_vel = y_eq[o:o + 3 * n_int].reshape(n_int, 3); o += 3 * n_int
            y_om = y_eq[o:o + 3 * n_int].reshape(n_int, 3); o += 3 * n_int
            y_rot = y_eq[o:o + 9 * n_int].reshape(n_int, 3, 3); o += 9 * n_int

            # position defects
            g_pos[1:] += y_pos
            g_pos[:-1] -= y_pos
            g_vel[:-1] -= h[:, None] * y_pos
            np.add.at(g_t, ph, -np.sum(y_pos * vel[:-1], axis=1) / self.phase_nk[ph])

            # velocity defects
            g_vel[1:] += y_vel
            g_vel[:-1] -= y_vel
            np.add.at(g_t, ph, -np.sum(y_vel * u, axis=1) / self.phase_nk[ph])
            if n_items:
                g_f[self.fi_j, self.fi_f] -= (h[self.fi_j, None] / m) * y_vel[self.fi_j]

            # omega defects (including the initial angular-acceleration pin)
            y_om_eff = y_om * h[:, None]
            if self.int_feet[0]:
                y_pin = y_eq[-3:]
                y_om_eff[0] -= y_pin  # pin enters as +om_dot[0], defect as -h*om_dot
            g_om[1:] += y_om
            g_om[:-1] -= y_om
            # d om_dot / d omega: -inv_i (hat(om) I - hat(I om))
            w_vec = np.einsum("ij,nj->ni", inv_i.T, y_om_eff)   # inv_i^T y
            hat_om = _hat_batch(omega[:-1])
            hat_iom = _hat_batch(i_om)
            d_gyro = hat_om @ inertia - hat_iom                 # (N,3,3)
            g_om[:-1] += np.einsum("nji,nj->ni", d_gyro, w_vec)
            # d om_dot / d R = inv_i d(R^T tau): grad_R -= outer(tau, w)
            g_rot[:-1] -= np.einsum("ni,nj->nij", tau, w_vec)
            # d om_dot / d pos via tau: dtau/dp = sum hat(f_s)
            hat_fsum = _hat_batch(forces.sum(axis=1))
            rw = np.einsum("nij,nj->ni", r_k, w_vec)            # R w
            g_pos[:-1] -= np.einsum("nji,nj->ni", hat_fsum, rw)
            # total term is -<R w, sum f_s x lever_s>; triple product gives
            # grad_f = rw x lever
            if n_items:
                g_f[self.fi_j, self.fi_f] += np.cross(rw[self.fi_j],
                                                      lever[self.fi_j, self.fi_f])
            np.add.at(g_t, ph, -np.sum(y_om * om_dot, axis=1) / self.phase_nk[ph])

            # rotation-manifold defects
            g_rot[1:] += y_rot
            g_rot[:-1] -= y_rot @ np.transpose(e_mat, (0, 2, 1))
            v_adj = np.einsum("nji,njk->nik", r_k, y_rot)       # R^T y
            grad_a = _dexp_taylor4_adjoint(a_mat, a2, a3, v_adj)
            vs = _vee_star_batch(grad_a)                        # (N,3)
            g_om[:-1] -= vs * h[:, None]
            np.add.at(g_t, ph, -np.sum(vs * omega[:-1], axis=1) * h / durations[ph])

            # friction rows
            if n_items:
                yf = y_in[:4 * n_items].reshape(-1, 4)
                g_f[self.fi_j, self.fi_f, 0] += yf[:, 0] - yf[:, 1]
                g_f[self.fi_j, self.fi_f, 1] += yf[:, 2] - yf[:, 3]
                g_f[self.fi_j, self.fi_f, 2] += -spec.mu * yf.sum(axis=1)
            # sphere rows
            y_sph = y_in[4 * n_items:4 * n_items + len(self.sk_k)]
            if len(self.sk_k):
                ru = np.einsum("nji,nj->ni", rots[self.sk_k], u_sph)
                np.add.at(g_pos, self.sk_k, -2.0 * y_sph[:, None] * ru)
                np.add.at(g_rot, self.sk_k,
                          2.0 * y_sph[:, None, None] * np.einsum("ni,nj->nij", u_sph, d_sph))
            # duration window rows
            g_t += -y_in[-2] + y_in[-1]

            gz = np.zeros(self.n_vars)
            gk = np.concatenate([g_pos, g_vel, g_om, g_rot.reshape(self.n_knots, 9)], axis=1)
            gz[:self.nf_off] = gk.reshape(-1)
            if n_items:
                gz[self.nf_off:self.nt_off] = (g_f[self.fi_j, self.fi_f] * self.f_scale).reshape(-1)
            gz[self.nt_off:] = g_t
            return gz

        return cost, c_eq, ineq, grad


def _hat_batch(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _vee_star_batch(g: np.ndarray) -> np.ndarray:
    """Adjoint of the hat map: <G, hat(w)> = vee_star(G) . w."""
    return np.stack([
        g[:, 2, 1] - g[:, 1, 2],
        g[:, 0, 2] - g[:, 2, 0],
        g[:, 1, 0] - g[:, 0, 1],
    ], axis=1)


def _dexp_taylor4_adjoint(a, a2, a3, v):
    """Gradient in A of <V, sum_{k<=4} A^k / k!> for batched 3x3 blocks."""
    at = np.transpose(a, (0, 2, 1))
    a2t = np.transpose(a2, (0, 2, 1))
    a3t = np.transpose(a3, (0, 2, 1))
    g = v.copy()
    g += 0.5 * (v @ at + at @ v)
    g += (v @ a2t + at @ v @ at + a2t @ v) / 6.0
    g += (v @ a3t + at @ v @ a2t + a2t @ v @ at + a3t @ v) / 24.0
    return g


def _rot_cost_batch(m_err: np.ndarray, eps_rot: float, need_grad: bool):
    """Rotation-error cost and its gradient in the error matrices."""
    tr = np.trace(m_err, axis1=1, axis2=2)
    c = np.clip((tr - 1.0) / 2.0, -1.0 + 1e-9, 1.0)
    theta = np.arccos(c)
    s_vec = _vee_star_batch(m_err)          # entries of M - M^T
    small = theta < 1e-6
    sin_t = np.sin(theta)
    a_fac = np.where(small, 0.5 + theta**2 / 12.0,
                     theta / (2.0 * np.where(sin_t < 1e-12, 1.0, sin_t)))
    e_vecs = a_fac[:, None] * s_vec
    cost = eps_rot * float(np.sum(e_vecs * e_vecs))
    if not need_grad:
        return cost, e_vecs, None
    w = 2.0 * eps_rot * e_vecs                              # dJ/de
    # de/dM = a * d(s)/dM + s outer da/dM
    grads = a_fac[:, None, None] * _hat_batch(w)
    ws = np.sum(w * s_vec, axis=1)
    da_dtheta = np.where(small, theta / 6.0,
                         (sin_t - theta * np.cos(theta)) / (2.0 * np.where(sin_t < 1e-12, 1.0, sin_t**2)))
    denom = np.sqrt(np.clip(1.0 - c * c, 1e-12, None))
    dtheta_dc = -1.0 / denom
    coef = ws * da_dtheta * dtheta_dc * 0.5
    grads += coef[:, None, None] * np.eye(3)[None]
    return cost, e_vecs, grads


# -- building, solving, checking --------------------------------------------


def build_problem(spec: JumpSpec) -> TimingProblem:
    """Assemble the packed NLP for a jump specification."""
    return TimingProblem(spec)


def initial_guess(problem: TimingProblem) -> np.ndarray:
    """Geodesic rotations, linear positions, gravity-support forces, mid durations.

    Rotation progress is weighted toward flight intervals (stance feet pin
    the body near its footholds, so most of a large reorientation must
    happen airborne); velocities and body rates are chosen consistent with
    the position and rotation defect chains of the guessed trajectory.
    """
    spec = problem.spec
    nk = problem.n_knots
    t_total0 = 0.5 * (spec.t_min + spec.t_max)
    durations = np.full(problem.n_phases, t_total0 / problem.n_phases)
    for i, ph in enumerate(spec.phases):
        durations[i] = min(max(durations[i], ph.t_min), min(ph.t_max, spec.t_max))
    h_int = durations[problem.int_phase] / problem.phase_nk[problem.int_phase]

    # rotation schedule: flight intervals carry 5x the progress of stance
    w_int = np.array([1.0 if problem.int_feet[j] else 5.0 for j in range(problem.n_int)])
    s = np.concatenate([[0.0], np.cumsum(w_int)])
    s /= s[-1]
    rots = np.stack([so3.interp_rotation(spec.r_start, spec.r_goal, si) for si in s])

    frac = np.arange(nk) / problem.n_int
    pos = spec.p_start[None, :] + frac[:, None] * (spec.p_goal - spec.p_start)[None, :]
    vel = np.zeros((nk, 3))
    vel[:-1] = (pos[1:] - pos[:-1]) / h_int[:, None]
    omega = np.zeros((nk, 3))
    for j in range(problem.n_int):
        omega[j] = so3.log_map(rots[j].T @ rots[j + 1]) / h_int[j]

    forces = np.zeros((problem.n_int, 4, 3))
    weight = spec.model.mass * abs(spec.model.g_vec[2])
    for j in range(problem.n_int):
        feet = problem.int_feet[j]
        for f in feet:
            forces[j, f, 2] = weight / len(feet)
    return problem.pack(pos, vel, omega, rots, forces, durations)


@dataclass
class SolveOptions:
    tol: float = 1e-5                 # target max constraint violation
    max_outer: int = 30
    max_inner: int = 2500             # L-BFGS-B iterations per subproblem
    rho0: float = 10.0
    rho_growth: float = 5.0
    rho_max: float = 1e9


def _row_scales(problem: TimingProblem, z: np.ndarray, n_probe: int = 16,
                lo: float = 0.3, hi: float = 50.0):
    """Constraint row-norm estimates by finite-difference probing.

    The constraint families have wildly different natural Jacobian scales
    (friction rows carry the force scale, the angular rows the inverse
    inertia); equilibrating them keeps the penalty Hessian workable for the
    quasi-Newton inner solver.
    """
    rng = np.random.default_rng(12345)
    _, c0_eq, c0_in, _ = problem._eval(z, need_grad=False)
    acc_eq = np.zeros_like(c0_eq)
    acc_in = np.zeros_like(c0_in)
    eps = 1e-6
    for _ in range(n_probe):
        u = rng.normal(size=problem.n_vars)
        u /= np.linalg.norm(u)
        _, ce, ci, _ = problem._eval(z + eps * u, need_grad=False)
        acc_eq += ((ce - c0_eq) / eps) ** 2
        acc_in += ((ci - c0_in) / eps) ** 2
    row_eq = np.sqrt(acc_eq / n_probe * problem.n_vars)
    row_in = np.sqrt(acc_in / n_probe * problem.n_vars)
    return 1.0 / np.clip(row_eq, lo, hi), 1.0 / np.clip(row_in, lo, hi)


def solve_timing(problem: TimingProblem | JumpSpec,
                 z0: np.ndarray | None = None,
                 opts: SolveOptions | None = None) -> TimingSolution:
    """Augmented-Lagrangian solve; returns the best feasible iterate found.

    Multipliers are updated every outer iteration; the penalty grows on a
    fixed cadence. Convergence is judged on the unscaled constraint
    violations. Raises :class:`NoConvergenceError` with diagnostics when
    the violation target cannot be met.
    """
    if isinstance(problem, JumpSpec):
        problem = build_problem(problem)
    opts = opts or SolveOptions()

    z = initial_guess(problem) if z0 is None else np.asarray(z0, dtype=float).copy()
    bounds = problem.bounds()
    z = np.clip(z, [b[0] for b in bounds], [b[1] for b in bounds])

    s_eq, s_in = _row_scales(problem, z)
    lam = np.zeros(problem.n_eq)
    mu = np.zeros(problem.n_ineq)
    rho = opts.rho0

    def al_value_grad(zv):
        cost, c_eq, c_in, grad = problem._eval(zv, need_grad=True)
        cs_eq = s_eq * c_eq
        cs_in = s_in * c_in
        y_eq = lam + rho * cs_eq
        y_in = np.maximum(0.0, mu + rho * cs_in)
        val = (cost + lam @ cs_eq + 0.5 * rho * float(cs_eq @ cs_eq)
               + float(np.sum(y_in**2 - mu**2)) / (2.0 * rho))
        return val, grad(s_eq * y_eq, s_in * y_in)

    def violation(zv):
        _, c_eq, c_in, _ = problem._eval(zv, need_grad=False)
        v_eq = float(np.max(np.abs(c_eq), initial=0.0))
        v_in = float(np.max(c_in, initial=0.0))
        return max(v_eq, v_in), c_eq, c_in

    best = None
    kkt = np.inf
    outer = 0
    for outer in range(1, opts.max_outer + 1):
        # early subproblems are solved loosely; precision ramps up with the
        # multiplier estimates
        maxiter = min(opts.max_inner, 400 * outer)
        res = minimize(al_value_grad, z, jac=True, method="L-BFGS-B",
                       bounds=bounds,
                       options={"maxiter": maxiter, "maxcor": 50,
                                "ftol": 1e-16, "gtol": 1e-10})
        z = res.x
        kkt = float(np.max(np.abs(res.jac)))
        viol, c_eq, c_in = violation(z)
        if best is None or viol < best[0]:
            best = (viol, z.copy())
        if viol <= opts.tol:
            break
        lam = lam + rho * s_eq * c_eq
        mu = np.maximum(0.0, mu + rho * s_in * c_in)
        if outer % 2 == 0:
            rho = min(rho * opts.rho_growth, opts.rho_max)

    viol, z = best
    pos, vel, omega, rots, forces, durations = problem.unpack(z)
    states = [SrbdState(pos=pos[k], vel=vel[k], omega=omega[k], rot=rots[k])
              for k in range(problem.n_knots)]
    cost, c_eq, c_in, _ = problem._eval(z, need_grad=False)
    defects = _defect_norms(problem, c_eq, c_in)
    ortho = max(so3.orthonormality_defect(r) for r in rots)
    sol = TimingSolution(
        durations=durations, states=states, forces=forces, cost=cost,
        max_violation=viol, defect_norms=defects, kkt_residual=kkt,
        converged=viol <= opts.tol, outer_iterations=outer, ortho_defect=ortho,
    )
    if not sol.converged:
        raise NoConvergenceError(
            f"timing optimization stalled at violation {viol:.3e} "
            f"(target {opts.tol:.1e}) after {outer} outer iterations",
            {"violation": viol, "durations": durations, "defects": defects},
        )
    return sol


def _defect_norms(problem: TimingProblem, c_eq: np.ndarray, c_in: np.ndarray) -> dict:
    n = problem.n_int
    o = 18 + 12
    return {
        "boundary": float(np.max(np.abs(c_eq[:o]), initial=0.0)),
        "position": float(np.max(np.abs(c_eq[o:o + 3 * n]), initial=0.0)),
        "velocity": float(np.max(np.abs(c_eq[o + 3 * n:o + 6 * n]), initial=0.0)),
        "body_rate": float(np.max(np.abs(c_eq[o + 6 * n:o + 9 * n]), initial=0.0)),
        "rotation": float(np.max(np.abs(c_eq[o + 9 * n:o + 18 * n]), initial=0.0)),
        "inequality": float(np.max(c_in, initial=0.0)),
    }


def check_constraints(spec: JumpSpec, sol: TimingSolution) -> dict:
    """Independent feasibility audit of a solution.

    Walks every constraint family directly from the solution data using the
    scalar per-step helpers; shares no evaluation code with the solver.
    Returns the worst violation per family.
    """
    phases = spec.phases
    report: dict[str, float] = {}
    states, forces, t = sol.states, sol.forces, sol.durations

    report["initial_pos"] = float(np.max(np.abs(states[0].pos - spec.p_start)))
    report["initial_vel"] = float(np.max(np.abs(states[0].vel)))
    report["initial_rate"] = float(np.max(np.abs(states[0].omega)))
    report["initial_rot"] = float(np.max(np.abs(states[0].rot - spec.r_start)))
    report["final_pos"] = float(np.max(np.abs(states[-1].pos - spec.p_goal)))
    report["final_rot"] = float(np.max(np.abs(states[-1].rot - spec.r_goal)))
    if spec.v_goal is not None:
        report["final_vel"] = float(np.max(np.abs(states[-1].vel - spec.v_goal)))
    if spec.omega_goal is not None:
        report["final_rate"] = float(np.max(np.abs(states[-1].omega - spec.omega_goal)))

    dyn, rotd, fric, fz_bounds, sphere, posd = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    j = 0
    for i, ph in enumerate(phases):
        h = float(t[i]) / ph.n_knots
        feet_pos = spec.feet_start if ph.feet_pos is None else ph.feet_pos
        for _ in range(ph.n_knots):
            xk, xk1 = states[j], states[j + 1]
            dyn = max(dyn, float(np.max(np.abs(
                srbd_residual(xk, xk1, forces[j], feet_pos, h, spec.model)))))
            rotd = max(rotd, float(np.max(np.abs(
                rotation_defect(xk.rot, xk1.rot, xk.omega, h)))))
            posd = max(posd, float(np.max(np.abs(
                xk1.pos - xk.pos - h * xk.vel))))
            for f in range(4):
                fx, fy, fz = forces[j, f]
                if f in ph.feet:
                    fric = max(fric, abs(fx) - spec.mu * fz, abs(fy) - spec.mu * fz)
                    fz_bounds = max(fz_bounds, spec.f_min - fz, fz - spec.f_max)
                else:
                    fric = max(fric, float(np.max(np.abs(forces[j, f]))))
            j += 1

    # kinematic sphere and CoM box at contact knots
    j = 0
    for i, ph in enumerate(phases):
        rng = range(j, j + ph.n_knots + 1)
        feet_pos = spec.feet_start if ph.feet_pos is None else ph.feet_pos
        for k in rng:
            if ph.feet:
                for f in ph.feet:
                    u = states[k].rot @ (feet_pos[f] - states[k].pos) - spec.sphere_centers[f]
                    sphere = max(sphere, float(np.linalg.norm(u)) - spec.sphere_radius)
                if spec.com_min is not None:
                    sphere_box = float(np.max(np.asarray(spec.com_min) - states[k].pos))
                    report["com_box_lo"] = max(report.get("com_box_lo", 0.0), sphere_box)
                if spec.com_max is not None:
                    report["com_box_hi"] = max(report.get("com_box_hi", 0.0),
                                               float(np.max(states[k].pos - np.asarray(spec.com_max))))
        j += ph.n_knots

    total = float(np.sum(t))
    report["duration_window"] = max(spec.t_min - total, total - spec.t_max, 0.0)
    report["dynamics"] = dyn
    report["position"] = posd
    report["rotation"] = rotd
    report["friction"] = max(fric, 0.0)
    report["force_bounds"] = max(fz_bounds, 0.0)
    report["foot_sphere"] = max(sphere, 0.0)
    report["max"] = max(v for v in report.values())
    return report


def export_reference(sol: TimingSolution, spec: JumpSpec, dt: float = 0.01) -> BodyReference:
    """Sample the solution on a uniform grid for the tracking controller.

    Positions and velocities are interpolated linearly between knots,
    rotations along the geodesic; knot times are reproduced exactly.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    knot_t = [0.0]
    for i, ph in enumerate(spec.phases):
        h = float(sol.durations[i]) / ph.n_knots
        knot_t.extend(knot_t[-1] + h * (np.arange(ph.n_knots) + 1.0))
    knot_t = np.asarray(knot_t)
    total = knot_t[-1]
    n = int(round(total / dt)) + 1
    ts = np.minimum(np.arange(n) * dt, total)

    pos = np.zeros((n, 3))
    vel = np.zeros((n, 3))
    omega = np.zeros((n, 3))
    rot = np.zeros((n, 3, 3))
    forces = np.zeros((n, 12))
    idx = np.clip(np.searchsorted(knot_t, ts, side="right") - 1, 0, len(knot_t) - 2)
    for i, t in enumerate(ts):
        k = int(idx[i])
        span = knot_t[k + 1] - knot_t[k]
        s = 0.0 if span <= 0.0 else (t - knot_t[k]) / span
        s = min(1.0, max(0.0, s))
        a, b = sol.states[k], sol.states[k + 1]
        pos[i] = (1 - s) * a.pos + s * b.pos
        vel[i] = (1 - s) * a.vel + s * b.vel
        omega[i] = (1 - s) * a.omega + s * b.omega
        ra = so3.project_so3(a.rot)
        rb = so3.project_so3(b.rot)
        rot[i] = so3.interp_rotation(ra, rb, s)
        forces[i] = sol.forces[min(k, sol.forces.shape[0] - 1)].reshape(12)

    phase_times = np.cumsum(sol.durations)
    return BodyReference(t=ts, pos=pos, vel=vel, rot=rot, omega=omega,
                         forces=forces, phase_times=phase_times)
