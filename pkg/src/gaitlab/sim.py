"""Batched toy physics for the planar biped.

Model: dynamic point-mass base with rotational inertia, PD-driven joints with
their own inertia, and spring-damper contact with tanh-regularized friction
at the heel and toe of each rigid foot plate plus the two torso endpoints
(hip and head), so quiet standing has a genuine support polygon and a fallen
body rests on the ground instead of spinning freely.  Ground reaction acts on
both sides of a contact: it pushes the base and brakes the leg joints through
the foot-point Jacobian.  Two backends share the integrator: ``reference``
(training) and a parameter-shifted ``variant`` used for sim-to-sim validation.

All state arrays carry a leading batch dimension; stepping is a pure
function of (state, targets, config), bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .robot import RobotModel

NUM_FEET = 2


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    physics_dt: float = 1.0 / 200.0
    control_decimation: int = 4
    contact_stiffness: float = 20000.0
    contact_damping: float = 300.0
    friction_mu: float = 0.8
    slip_velocity: float = 0.1
    gravity: float = 9.81
    actuator_lag_tau: float = 0.01
    # ground yields past this load; uncapped, a limb sweeping through the
    # plane during a tumble produces multi-kN impulses that catapult the base
    contact_force_cap: float = 500.0
    backend_id: str = "reference"

    def __post_init__(self):
        if self.physics_dt <= 0:
            raise SimError("physics_dt must be > 0")
        if self.control_decimation < 1:
            raise SimError("control_decimation must be >= 1")
        if min(self.contact_stiffness, self.contact_damping, self.friction_mu) < 0:
            raise SimError("contact parameters must be >= 0")
        if self.contact_force_cap <= 0:
            raise SimError("contact_force_cap must be > 0")

    @property
    def control_dt(self) -> float:
        return self.physics_dt * self.control_decimation


def make_variant_backend(config: SimConfig) -> SimConfig:
    """Parameter-shifted backend for sim-to-sim validation.

    Halves the physics step (doubling decimation so the control rate is
    unchanged), stiffens contact, reduces friction and doubles actuator lag.
    """
    if config.backend_id != "reference":
        raise SimError("variant backend can only be derived from the reference backend")
    return replace(
        config,
        physics_dt=config.physics_dt / 2,
        control_decimation=config.control_decimation * 2,
        contact_stiffness=config.contact_stiffness * 1.5,
        friction_mu=config.friction_mu * 0.8,
        actuator_lag_tau=config.actuator_lag_tau * 2,
        backend_id="variant",
    )


@dataclass
class SimState:
    """Batched simulator state; all arrays share the leading env dimension."""

    base: np.ndarray        # (N, 3) x, z, pitch
    base_vel: np.ndarray    # (N, 3)
    q: np.ndarray           # (N, J)
    qd: np.ndarray          # (N, J)
    qdd_last: np.ndarray    # (N, J) joint accel at the last substep
    tau: np.ndarray         # (N, J) applied (clamped) torque at the last substep
    targets_filt: np.ndarray  # (N, J) actuator-lag filter state
    contact_force: np.ndarray  # (N, 2 feet, 2) heel+toe total normal, tangential
    time: np.ndarray        # (N,)
    diverged: np.ndarray    # (N,) bool, sticky

    @property
    def n(self) -> int:
        return self.base.shape[0]

    def copy(self) -> "SimState":
        return SimState(**{k: v.copy() for k, v in self.__dict__.items()})

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.base).all()
            and np.isfinite(self.base_vel).all()
            and np.isfinite(self.q).all()
            and np.isfinite(self.qd).all()
        )


@dataclass
class SimParams:
    """Per-env multiplicative randomization scales (domain randomization)."""

    mass_scale: np.ndarray
    kc_scale: np.ndarray
    mu_scale: np.ndarray
    lag_scale: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "SimParams":
        one = np.ones(n)
        return cls(one.copy(), one.copy(), one.copy(), one.copy())


def sim_reset(model: RobotModel, config: SimConfig, n: int = 1,
              initial: SimState | None = None) -> SimState:
    """Fresh state at t=0: default standing pose, or a copy of ``initial``."""
    if initial is not None:
        if not initial.is_finite():
            raise SimError("initial state is not finite")
        out = initial.copy()
        out.time = np.zeros(out.n)
        out.diverged = np.zeros(out.n, dtype=bool)
        return out
    J = model.n_joints
    q = np.tile(model.default_pose, (n, 1))
    base = np.zeros((n, 3))
    base[:, 1] = model.nominal_height
    return SimState(
        base=base,
        base_vel=np.zeros((n, 3)),
        q=q,
        qd=np.zeros((n, J)),
        qdd_last=np.zeros((n, J)),
        tau=np.zeros((n, J)),
        targets_filt=q.copy(),
        contact_force=np.zeros((n, NUM_FEET, 2)),
        time=np.zeros(n),
        diverged=np.zeros(n, dtype=bool),
    )


def _foot_kinematics(model: RobotModel, base, base_vel, q, qd):
    """Heel and toe contact points of both feet with world velocities.

    Each foot is a rigid plate welded at the ankle, mounted so its sole is
    horizontal in the default stance; it extends foot_heel behind and
    foot_toe ahead of the ankle and rotates with the shank.  Returns
    (pos, vel, jac): pos and vel are (N, 2 feet, 2 points, 2); jac holds the
    point-position partials w.r.t. that leg's (hip, knee) angles.
    """
    lt = model.link_lengths["thigh"]
    ls = model.link_lengths["shank"]
    off = np.array([-model.foot_heel, model.foot_toe])
    x, z, pitch = base[:, 0], base[:, 1], base[:, 2]
    vx, vz, wp = base_vel[:, 0], base_vel[:, 1], base_vel[:, 2]
    n = base.shape[0]
    pos = np.empty((n, NUM_FEET, 2, 2))
    vel = np.empty_like(pos)
    # point-position partials w.r.t. (hip, knee), laid out (N, feet, pts, xz, joint)
    jac = np.empty((n, NUM_FEET, 2, 2, 2))
    for f, (ihip, iknee) in enumerate(((0, 1), (2, 3))):
        a1 = pitch + q[:, ihip]
        a2 = a1 + q[:, iknee]
        da1 = wp + qd[:, ihip]
        da2 = da1 + qd[:, iknee]
        s1, c1 = np.sin(a1), np.cos(a1)
        s2, c2 = np.sin(a2), np.cos(a2)
        # sole angle relative to the ground; zero in the default stance
        phi = a2 - (model.default_pose[ihip] + model.default_pose[iknee])
        sp, cp = np.sin(phi)[:, None], np.cos(phi)[:, None]
        ankle_x = (x + lt * s1 + ls * s2)[:, None]
        ankle_z = (z - lt * c1 - ls * c2)[:, None]
        ankle_vx = (vx + lt * c1 * da1 + ls * c2 * da2)[:, None]
        ankle_vz = (vz + lt * s1 * da1 + ls * s2 * da2)[:, None]
        pos[:, f, :, 0] = ankle_x + off * cp
        pos[:, f, :, 1] = ankle_z + off * sp
        vel[:, f, :, 0] = ankle_vx - off * sp * da2[:, None]
        vel[:, f, :, 1] = ankle_vz + off * cp * da2[:, None]
        jac[:, f, :, 0, 0] = (lt * c1 + ls * c2)[:, None] - off * sp
        jac[:, f, :, 1, 0] = (lt * s1 + ls * s2)[:, None] + off * cp
        jac[:, f, :, 0, 1] = (ls * c2)[:, None] - off * sp
        jac[:, f, :, 1, 1] = (ls * s2)[:, None] + off * cp
    return pos, vel, jac


def sim_step(model: RobotModel, config: SimConfig, state: SimState,
             joint_targets: np.ndarray,
             harness_wrench: np.ndarray | None = None,
             params: SimParams | None = None) -> SimState:
    """Advance one control step (``control_decimation`` physics substeps).

    ``joint_targets`` is (N, J); ``harness_wrench`` is (N, 2) = (torque, force)
    applied to the base, or None.  Non-finite results freeze the offending
    env at its last finite state with the sticky ``diverged`` flag set.
    """
    targets = np.asarray(joint_targets, dtype=np.float64)
    if targets.shape != state.q.shape:
        raise SimError(f"joint_targets shape {targets.shape} != {state.q.shape}")
    n = state.n
    if params is None:
        params = SimParams.identity(n)
    if harness_wrench is None:
        harness_wrench = np.zeros((n, 2))
    else:
        harness_wrench = np.asarray(harness_wrench, dtype=np.float64)

    dt = config.physics_dt
    kp = model.joint_array("kp")
    kd = model.joint_array("kd")
    inertia = model.joint_array("joint_inertia")
    damping = model.joint_array("damping")
    tq_lim = model.joint_array("torque_limit")
    lo = model.lower_limits
    hi = model.upper_limits
    mass = model.torso_mass * params.mass_scale
    k_c = config.contact_stiffness * params.kc_scale
    mu = config.friction_mu * params.mu_scale
    lag = config.actuator_lag_tau * params.lag_scale

    st = state.copy()
    base, base_vel = st.base, st.base_vel
    q, qd, tf = st.q, st.qd, st.targets_filt
    alive = ~st.diverged

    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.control_decimation):
            prev = (base.copy(), base_vel.copy(), q.copy(), qd.copy(), tf.copy())

            # (1) first-order actuator lag
            alpha = np.where(lag > 0, np.minimum(dt / np.maximum(lag, 1e-12), 1.0), 1.0)
            tf += alpha[:, None] * (targets - tf)

            # (2) joint PD torque
            tau = kp * (tf - q) - kd * qd
            tau = np.clip(tau, -tq_lim, tq_lim)

            # (3) contact geometry from the pre-step configuration: heel and
            # toe of each foot plus the torso endpoints (hip and head), so a
            # fallen body rests on the ground instead of spinning freely
            fpos, fvel, jac = _foot_kinematics(model, base, base_vel, q, qd)
            th = base[:, 2]
            w = base_vel[:, 2]
            L = model.torso_length
            head = base[:, :2] + L * np.stack([-np.sin(th), np.cos(th)], axis=-1)
            head_vel = base_vel[:, :2] + \
                L * w[:, None] * np.stack([-np.cos(th), -np.sin(th)], axis=-1)
            ppos = np.concatenate(
                [fpos.reshape(n, 4, 2),
                 np.stack([base[:, :2], head], axis=1)], axis=1)
            pvel = np.concatenate(
                [fvel.reshape(n, 4, 2),
                 np.stack([base_vel[:, :2], head_vel], axis=1)], axis=1)

            # elastic normal force; the spring is capped so deep penetration
            # during a tumble cannot catapult the base
            pen = -ppos[..., 1]
            in_c = pen > 0
            f_el = np.where(
                in_c,
                np.minimum(k_c[:, None] * pen, config.contact_force_cap), 0.0)

            # damping and friction enter as viscous coefficients resolved
            # against the post-step base velocity below; an explicit update
            # of these stiff terms rings and never lets the robot rest.
            # g_t is the secant slope of the regularized friction curve.
            avx = np.abs(pvel[..., 0])
            g_t = np.where(
                avx > 1e-9,
                mu[:, None] * f_el * np.tanh(avx / config.slip_velocity)
                / np.maximum(avx, 1e-9),
                mu[:, None] * f_el / config.slip_velocity)
            g_n = np.where(in_c & (pvel[..., 1] < 0.0),
                           config.contact_damping, 0.0)

            r = ppos - base[:, None, :2]
            rx, rz = r[..., 0], r[..., 1]
            # point velocity not explained by base motion (leg joints)
            u_x = pvel[..., 0] - (base_vel[:, None, 0] - w[:, None] * rz)
            u_z = pvel[..., 1] - (base_vel[:, None, 1] + w[:, None] * rx)

            # (4) base update: (M + dt*C) v' = M v + dt*F with C assembled
            # from per-contact viscous terms; unconditionally dissipative
            I_t = model.torso_inertia
            A = np.zeros((n, 3, 3))
            A[:, 0, 0] = mass + dt * g_t.sum(1)
            A[:, 0, 2] = A[:, 2, 0] = -dt * (g_t * rz).sum(1)
            A[:, 1, 1] = mass + dt * g_n.sum(1)
            A[:, 1, 2] = A[:, 2, 1] = dt * (g_n * rx).sum(1)
            A[:, 2, 2] = I_t + dt * ((g_t * rz ** 2).sum(1)
                                     + (g_n * rx ** 2).sum(1))
            rhs = np.empty((n, 3))
            rhs[:, 0] = mass * base_vel[:, 0] + dt * (-(g_t * u_x).sum(1))
            rhs[:, 1] = mass * base_vel[:, 1] + dt * (
                f_el.sum(1) - (g_n * u_z).sum(1) - mass * config.gravity
                + harness_wrench[:, 1])
            rhs[:, 2] = I_t * w + dt * (
                (f_el * rx).sum(1) - (g_n * u_z * rx).sum(1)
                + (g_t * u_x * rz).sum(1) + harness_wrench[:, 0])
            base_vel = np.linalg.solve(A, rhs)
            base = base + dt * base_vel

            # realized contact forces at the post-step base velocity
            vpx = base_vel[:, None, 0] - base_vel[:, None, 2] * rz + u_x
            vpz = base_vel[:, None, 1] + base_vel[:, None, 2] * rx + u_z
            f_t = -g_t * vpx
            f_n = np.maximum(f_el - g_n * vpz, 0.0)

            # (5) ground reaction on the leg joints (Jacobian transpose),
            # clamped like the actuators: a planted or scuffing foot brakes
            # its own leg instead of kicking the base for free.  The viscous
            # part is folded into the joint update implicitly.
            tau_r = np.zeros_like(q)
            c_imp = np.zeros_like(q)
            ft_feet = f_t[:, :4].reshape(n, 2, 2)
            fn_feet = f_n[:, :4].reshape(n, 2, 2)
            gt_feet = g_t[:, :4].reshape(n, 2, 2)
            gn_feet = g_n[:, :4].reshape(n, 2, 2)
            for f, (ihip, iknee) in enumerate(((0, 1), (2, 3))):
                jf = jac[:, f]
                fx, fz = ft_feet[:, f], fn_feet[:, f]
                tau_r[:, ihip] = (jf[..., 0, 0] * fx + jf[..., 1, 0] * fz).sum(1)
                tau_r[:, iknee] = (jf[..., 0, 1] * fx + jf[..., 1, 1] * fz).sum(1)
                gt_f, gn_f = gt_feet[:, f], gn_feet[:, f]
                c_imp[:, ihip] = (gt_f * jf[..., 0, 0] ** 2
                                  + gn_f * jf[..., 1, 0] ** 2).sum(1)
                c_imp[:, iknee] = (gt_f * jf[..., 0, 1] ** 2
                                   + gn_f * jf[..., 1, 1] ** 2).sum(1)
            tau_r = np.clip(tau_r, -tq_lim, tq_lim)

            qd_prev = qd
            qd = (qd + dt * (tau + tau_r - damping * qd_prev) / inertia) \
                / (1.0 + dt * c_imp / inertia)
            qdd = (qd - qd_prev) / dt
            q = q + dt * qd
            below = q < lo
            above = q > hi
            q = np.clip(q, lo, hi)
            qd = np.where(below | above, 0.0, qd)

            # divergence guard: freeze non-finite envs at their last state
            bad = ~(
                np.isfinite(base).all(axis=1)
                & np.isfinite(base_vel).all(axis=1)
                & np.isfinite(q).all(axis=1)
                & np.isfinite(qd).all(axis=1)
            )
            newly = bad & alive
            if newly.any():
                pbase, pvel, pq, pqd, ptf = prev
                base[newly] = pbase[newly]
                base_vel[newly] = pvel[newly]
                q[newly] = pq[newly]
                qd[newly] = pqd[newly]
                tf[newly] = ptf[newly]
                st.diverged |= newly
                alive = ~st.diverged
            frozen = st.diverged
            if frozen.any():
                pbase, pvel, pq, pqd, ptf = prev
                base[frozen] = pbase[frozen]
                base_vel[frozen] = pvel[frozen]
                q[frozen] = pq[frozen]
                qd[frozen] = pqd[frozen]
                tf[frozen] = ptf[frozen]

            st.qdd_last = np.where(alive[:, None], qdd, st.qdd_last)
            st.tau = np.where(alive[:, None], tau, st.tau)
            per_foot = np.stack(
                [fn_feet.sum(axis=2), ft_feet.sum(axis=2)], axis=-1)
            st.contact_force = np.where(
                alive[:, None, None], per_foot, st.contact_force
            )

    st.base, st.base_vel, st.q, st.qd, st.targets_filt = base, base_vel, q, qd, tf
    st.time = st.time + np.where(st.diverged, 0.0, config.control_dt)
    return st


def settle_under_gravity(model: RobotModel, config: SimConfig,
                         initial: SimState, duration: float):
    """Hold the default pose and let the robot settle for ``duration`` seconds.

    Returns (settled state, peak base linear speed observed while settling).
    """
    if duration <= 0:
        raise SimError("settle duration must be > 0")
    state = initial.copy()
    targets = np.tile(model.default_pose, (state.n, 1))
    steps = int(round(duration / config.control_dt))
    peak = np.zeros(state.n)
    for _ in range(max(steps, 1)):
        state = sim_step(model, config, state, targets)
        speed = np.linalg.norm(state.base_vel[:, :2], axis=1)
        peak = np.maximum(peak, speed)
    return state, peak
