"""Task definitions: cost suites, curriculum, samplers, and termination.

Cost convention: kernel-shaped tracking terms enter as |coeff| * K(x) with
K(x) = -1/(e^x + 2 + e^(-x)), so they are negative and bounded in
[-0.25 |coeff|, 0); quadratic and penalty terms enter positively. The total
cost is the plain sum and the reward is its negative. The curriculum factor
k_c multiplies every term except the task objective (base velocity tracking
for locomotion, base orientation for recovery).

Velocity-tracking arguments are l1 norms of errors expressed in the
yaw-aligned base frame (l2 available via a switch). Coefficients carry an
explicit factor of the policy time step, passed in as ``dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import RobotModel


def logistic_kernel(x):
    """K(x) = -1/(e^x + 2 + e^(-x)) = -0.25 sech^2(x/2), in [-0.25, 0)."""
    x = np.abs(x)
    s = 1.0 / np.cosh(np.minimum(x, 700.0) * 0.5)
    return -0.25 * s * s


def angle_diff(a, b):
    """Minimum absolute angular separation, in [0, pi]."""
    d = np.remainder(np.asarray(a, float) - np.asarray(b, float), 2.0 * np.pi)
    return np.abs(np.where(d > np.pi, d - 2.0 * np.pi, d))


# ---------------------------------------------------------------------------
# curriculum

@dataclass
class CurriculumState:
    k_c: float = 0.3
    k_d: float = 0.997
    iteration: int = 0

    def advanced(self) -> "CurriculumState":
        return replace(self, k_c=self.k_c ** self.k_d, iteration=self.iteration + 1)


def curriculum_factor(k0: float, kd: float, j: int) -> float:
    """Closed form of j multiplicative advances: k0 ** (kd ** j)."""
    return k0 ** (kd ** j)


# ---------------------------------------------------------------------------
# cost suites

@dataclass
class CostBreakdown:
    terms: dict[str, float]
    k_c: float

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))

    @property
    def reward(self) -> float:
        return -self.total


@dataclass
class LocomotionCoeffs:
    ang_vel: float = 6.0
    lin_vel: float = 10.0
    lin_scale: float = 4.0       # dimensionless kernel argument scale
    torque: float = 0.005
    joint_speed: float = 0.03
    clearance: float = 0.1
    clearance_height: float = 0.07
    slip: float = 2.0
    orientation: float = 0.4
    smoothness: float = 0.5
    use_l2: bool = False


def _vec_norm(v, use_l2):
    v = np.asarray(v, float)
    return float(np.linalg.norm(v)) if use_l2 else float(np.sum(np.abs(v)))


def yaw_of(quat: np.ndarray) -> float:
    w, x, y, z = quat
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def roll_of(quat: np.ndarray) -> float:
    w, x, y, z = quat
    return math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))


def locomotion_cost(*, dt: float, k_c: float, command: np.ndarray,
                    lin_vel_w: np.ndarray, ang_vel_w: np.ndarray, yaw: float,
                    gravity_body: np.ndarray,
                    tau: np.ndarray, tau_prev: np.ndarray,
                    joint_vel: np.ndarray,
                    foot_height: np.ndarray, foot_tan_speed: np.ndarray,
                    foot_contact: np.ndarray,
                    coeffs: LocomotionCoeffs | None = None) -> CostBreakdown:
    """Per-step locomotion cost.

    Velocities are world frame; they are rotated into the yaw-aligned frame
    here. foot_height is the clearance of each foot's lowest point above the
    ground; foot_contact marks feet with an active contact this step.
    """
    c = coeffs or LocomotionCoeffs()
    cy, sy = math.cos(yaw), math.sin(yaw)
    v_ya = np.array([cy * lin_vel_w[0] + sy * lin_vel_w[1],
                     -sy * lin_vel_w[0] + cy * lin_vel_w[1],
                     lin_vel_w[2]])
    w_ya = np.array([cy * ang_vel_w[0] + sy * ang_vel_w[1],
                     -sy * ang_vel_w[0] + cy * ang_vel_w[1],
                     ang_vel_w[2]])
    v_err = v_ya - np.array([command[0], command[1], 0.0])
    w_err = w_ya - np.array([0.0, 0.0, command[2]])

    terms = {}
    terms["ang_vel"] = c.ang_vel * dt * float(
        logistic_kernel(_vec_norm(w_err, c.use_l2)))
    terms["lin_vel"] = c.lin_vel * dt * float(
        logistic_kernel(c.lin_scale * _vec_norm(v_err, c.use_l2)))
    terms["torque"] = k_c * c.torque * dt * float(np.dot(tau, tau))
    terms["joint_speed"] = k_c * c.joint_speed * dt * float(np.dot(joint_vel, joint_vel))
    swing = ~np.asarray(foot_contact, bool)
    clr = (c.clearance_height - np.asarray(foot_height, float)) ** 2
    terms["clearance"] = k_c * c.clearance * dt * float(
        np.sum(clr[swing] * np.asarray(foot_tan_speed, float)[swing]))
    terms["slip"] = k_c * c.slip * dt * float(
        np.sum(np.asarray(foot_tan_speed, float)[~swing]))
    g_err = np.array([0.0, 0.0, -1.0]) - np.asarray(gravity_body, float)
    terms["orientation"] = k_c * c.orientation * dt * float(np.linalg.norm(g_err))
    dtau = np.asarray(tau_prev, float) - np.asarray(tau, float)
    terms["smoothness"] = k_c * c.smoothness * dt * float(np.dot(dtau, dtau))
    return CostBreakdown(terms, k_c)


@dataclass
class RecoveryCoeffs:
    torque: float = 0.0005
    joint_speed: float = 0.2
    joint_speed_max: float = 8.0
    joint_accel: float = 5e-7
    haa: float = 6.0
    hfe: float = 7.0
    kfe: float = 7.0
    hfe_target_mag: float = 0.5 * math.pi
    kfe_target_mag: float = 2.45
    contact_vel: float = 6.0
    impulse: float = 6.0
    internal: float = 6.0
    orientation: float = 6.0
    smoothness: float = 0.0025
    roll_gate: float = 0.25 * math.pi


def recovery_posture_targets(model: RobotModel,
                             coeffs: RecoveryCoeffs | None = None
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Folded-leg HFE/KFE targets (4 each), on each leg's habitual flexion
    side (sign taken from the nominal posture)."""
    c = coeffs or RecoveryCoeffs()
    nom = np.asarray(model.nominal_joint_position, float)
    hfe = np.sign(nom[1::3]) * c.hfe_target_mag
    kfe = np.sign(nom[2::3]) * c.kfe_target_mag
    return hfe, kfe


def recovery_cost_from_stats(*, dt: float, k_c: float, joint_pos: np.ndarray,
                             joint_vel: np.ndarray, joint_acc: np.ndarray,
                             tau: np.ndarray, tau_prev: np.ndarray,
                             roll: float, gravity_body: np.ndarray,
                             n_events: float, sum_speed_sq: float,
                             n_body: float, sum_body_impulse: float,
                             n_internal: float,
                             hfe_target: np.ndarray, kfe_target: np.ndarray,
                             coeffs: RecoveryCoeffs | None = None) -> CostBreakdown:
    """Recovery cost from pooled contact statistics (the rollout fast path)."""
    c = coeffs or RecoveryCoeffs()
    terms = {}
    terms["torque"] = k_c * c.torque * dt * float(np.dot(tau, tau))
    jv = np.asarray(joint_vel, float)
    over = np.abs(jv) > c.joint_speed_max
    terms["joint_speed"] = k_c * c.joint_speed * dt * float(np.sum(jv[over] ** 2))
    ja = np.asarray(joint_acc, float)
    terms["joint_accel"] = k_c * c.joint_accel * dt * float(np.dot(ja, ja))

    jp = np.asarray(joint_pos, float)
    if abs(roll) < c.roll_gate:
        terms["haa"] = k_c * c.haa * dt * float(
            np.sum(logistic_kernel(angle_diff(jp[0::3], 0.0))))
        terms["hfe"] = k_c * c.hfe * dt * float(
            np.sum(logistic_kernel(angle_diff(jp[1::3], hfe_target))))
        terms["kfe"] = k_c * c.kfe * dt * float(
            np.sum(logistic_kernel(angle_diff(jp[2::3], kfe_target))))
    else:
        terms["haa"] = terms["hfe"] = terms["kfe"] = 0.0

    terms["contact_vel"] = (k_c * c.contact_vel * dt * sum_speed_sq / n_events
                            if n_events else 0.0)
    terms["impulse"] = (k_c * c.impulse * dt * sum_body_impulse / n_body
                        if n_body else 0.0)
    terms["internal"] = k_c * c.internal * dt * float(n_internal)
    g_err = np.array([0.0, 0.0, -1.0]) - np.asarray(gravity_body, float)
    terms["orientation"] = c.orientation * dt * float(np.dot(g_err, g_err))
    dtau = np.asarray(tau_prev, float) - np.asarray(tau, float)
    terms["smoothness"] = k_c * c.smoothness * dt * float(np.dot(dtau, dtau))
    return CostBreakdown(terms, k_c)


def recovery_cost(*, dt: float, k_c: float, joint_pos: np.ndarray,
                  joint_vel: np.ndarray, joint_acc: np.ndarray,
                  tau: np.ndarray, tau_prev: np.ndarray,
                  roll: float, gravity_body: np.ndarray,
                  contact_speed: np.ndarray, contact_impulse: np.ndarray,
                  contact_is_foot: np.ndarray, n_internal: int,
                  hfe_target: np.ndarray, kfe_target: np.ndarray,
                  coeffs: RecoveryCoeffs | None = None) -> CostBreakdown:
    """Per-step recovery cost.

    contact_speed / contact_impulse / contact_is_foot describe the active
    contacts of this step (world-frame speed of the contact point on the
    robot, impulse magnitude, and foot classification); n_internal counts
    robot-robot contacts.
    """
    speed = np.asarray(contact_speed, float)
    isfoot = np.asarray(contact_is_foot, bool)
    imp = np.asarray(contact_impulse, float)
    return recovery_cost_from_stats(
        dt=dt, k_c=k_c, joint_pos=joint_pos, joint_vel=joint_vel,
        joint_acc=joint_acc, tau=tau, tau_prev=tau_prev, roll=roll,
        gravity_body=gravity_body,
        n_events=float(len(speed)), sum_speed_sq=float(np.sum(speed ** 2)),
        n_body=float(np.count_nonzero(~isfoot)),
        sum_body_impulse=float(np.sum(imp[~isfoot])),
        n_internal=float(n_internal),
        hfe_target=hfe_target, kfe_target=kfe_target, coeffs=coeffs)


# ---------------------------------------------------------------------------
# sampling

@dataclass
class CommandRanges:
    forward: tuple[float, float] = (-1.0, 1.0)
    lateral: tuple[float, float] = (-0.4, 0.4)
    turn: tuple[float, float] = (-1.2, 1.2)


HIGH_SPEED_COMMANDS = CommandRanges(forward=(-1.6, 1.6), lateral=(-0.2, 0.2),
                                    turn=(-0.3, 0.3))


def sample_command(ranges: CommandRanges, rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(*ranges.forward),
                     rng.uniform(*ranges.lateral),
                     rng.uniform(*ranges.turn)])


def point_in_convex_polygon(point: np.ndarray, poly: np.ndarray) -> bool:
    """poly (n, 2) counterclockwise convex; boundary counts as inside."""
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if (b[0] - a[0]) * (point[1] - a[1]) - (b[1] - a[1]) * (point[0] - a[0]) < -1e-12:
            return False
    return True


DEFAULT_PERIMETER = np.array([[-2.0, -2.0], [2.0, -2.0], [2.0, 2.0], [-2.0, 2.0]])


def sample_command_sequence_with_perimeter(
        ranges: CommandRanges, perimeter: np.ndarray, horizon: float,
        rng: np.random.Generator, hold_time: float = 2.0,
        sim_step: float = 0.1, max_resample: int = 1000
        ) -> list[np.ndarray]:
    """Draw a hold_time-spaced command sequence whose perfect-tracking path
    stays inside the perimeter polygon; offending commands are rejected, the
    virtual position rolls back, and the draw repeats."""
    n_cmd = int(round(horizon / hold_time))
    substeps = int(round(hold_time / sim_step))
    pos = np.zeros(2)
    yaw = 0.0
    out = []
    for _ in range(n_cmd):
        for attempt in range(max_resample + 1):
            if attempt == max_resample:
                raise RuntimeError("perimeter too restrictive: resample limit hit")
            cmd = sample_command(ranges, rng)
            p, y = pos.copy(), yaw
            ok = True
            for _ in range(substeps):
                y += cmd[2] * sim_step
                cy, sy = math.cos(y), math.sin(y)
                p += sim_step * np.array([cy * cmd[0] - sy * cmd[1],
                                          sy * cmd[0] + cy * cmd[1]])
                if not point_in_convex_polygon(p, perimeter):
                    ok = False
                    break
            if ok:
                pos, yaw = p, y
                out.append(cmd)
                break
    return out


@dataclass
class InitialStateDistribution:
    base_pos_mean: tuple[float, float, float] = (0.0, 0.0, 0.55)
    base_pos_std: float = 0.015
    orientation_angle_std: float = 0.06
    joint_pos_std: float = 0.25
    base_lin_vel_std: float = 0.012
    base_ang_vel_std: float = 0.4
    joint_vel_std: float = 2.0


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    while n < 1e-12:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
    return v / n


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    h = 0.5 * angle
    return np.concatenate([[math.cos(h)], math.sin(h) * axis])


def sample_initial_state(model: RobotModel, rng: np.random.Generator,
                         dist: InitialStateDistribution | None = None
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian initial state around the nominal standing posture. Joint
    draws are clipped to the limit boxes so no episode starts terminated."""
    d = dist or InitialStateDistribution()
    cm = model.compiled()
    q = np.zeros(model.nq)
    u = np.zeros(model.nu)
    q[0:3] = np.asarray(d.base_pos_mean) + rng.standard_normal(3) * d.base_pos_std
    angle = rng.standard_normal() * d.orientation_angle_std
    q[3:7] = quat_from_axis_angle(random_unit_vector(rng), angle)
    jp = cm.nominal_q[7:] + rng.standard_normal(model.nj) * d.joint_pos_std
    q[7:] = np.clip(jp, cm.limit_lo, cm.limit_hi)
    u[0:3] = rng.standard_normal(3) * d.base_lin_vel_std
    u[3:6] = rng.standard_normal(3) * d.base_ang_vel_std
    u[6:] = rng.standard_normal(model.nj) * d.joint_vel_std
    return q, u


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform over SO(3)."""
    u1, u2, u3 = rng.uniform(size=3)
    a, b = math.sqrt(1.0 - u1), math.sqrt(u1)
    return np.array([a * math.sin(2 * math.pi * u2), a * math.cos(2 * math.pi * u2),
                     b * math.sin(2 * math.pi * u3), b * math.cos(2 * math.pi * u3)])


def recovery_initial_states(model: RobotModel, count: int, seed: int = 0,
                            drop_height: float = 1.0, settle_time: float = 1.2,
                            max_internal_gap: float = -1e-3
                            ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Drop the robot with random orientation and joints, let it settle with
    zero torque, and keep the resulting resting states. States ending with
    internal interpenetration beyond 1 mm are discarded."""
    from .contact import Simulation, SimConfig, detect_contacts

    rng = np.random.default_rng(seed)
    sim = Simulation(model, SimConfig())
    cm = model.compiled()
    steps = int(round(settle_time / sim.config.dt))
    out = []
    tau = np.zeros(model.nu)
    while len(out) < count:
        q = np.zeros(model.nq)
        q[0:3] = (0.0, 0.0, drop_height)
        q[3:7] = random_quaternion(rng)
        q[7:] = rng.uniform(cm.limit_lo, cm.limit_hi)
        sim.set_state(q, np.zeros(model.nu))
        for _ in range(steps):
            sim.step(tau)
        qf, uf = sim.q.copy(), sim.u.copy()
        if not (np.all(np.isfinite(qf)) and np.all(np.isfinite(uf))):
            continue
        pts = detect_contacts(model, qf, margin=0.0)
        worst = min((p.gap for p in pts if p.body_b != -1), default=0.0)
        if worst < max_internal_gap:
            continue
        out.append((qf, uf))
    return out


# ---------------------------------------------------------------------------
# termination

TERMINAL_COST = 1.0


def check_termination(model: RobotModel, q: np.ndarray, u: np.ndarray,
                      contact_bodies: np.ndarray) -> bool:
    """True when the episode must end: joint outside its limits, any contact
    involving the base link, or a non-finite state."""
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(u))):
        return True
    cm = model.compiled()
    jp = q[7:]
    if np.any(jp < cm.limit_lo) or np.any(jp > cm.limit_hi):
        return True
    return bool(np.any(np.asarray(contact_bodies) == 0))
