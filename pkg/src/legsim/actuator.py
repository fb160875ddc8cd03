"""Actuator models: learned network, ideal PD, and a synthetic oracle.

The actuator network maps a short history of joint position errors and
velocities (taps at t, t-0.01 s, t-0.02 s) to a joint torque. Training data
comes either from hardware logs or, here, from a synthetic series-elastic
actuator with command delay, motor lag, a linear spring, torque saturation,
integral action, and friction; the network must beat the ideal PD baseline on
held-out data by a wide margin to be worth putting inside the simulation loop.

Feature order per joint: (err_t, err_t-1, err_t-2, vel_t, vel_t-1, vel_t-2),
where the tap spacing is 0.01 s.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .model import RobotModel

NET_SIZES = (6, 32, 32, 32, 1)
NET_ACTIVATION = "softsign"
TAP_SPACING = 0.01  # s between history taps
N_TAPS = 3


def softsign(x):
    """x / (1 + |x|): odd, bounded in (-1, 1), slope 1 at the origin."""
    return x / (1.0 + np.abs(x))


def ideal_actuator(target: np.ndarray, pos: np.ndarray, vel: np.ndarray,
                   kp: float = 50.0, kd: float = 0.1,
                   limit: float = 40.0) -> np.ndarray:
    """Analytic baseline: tau = kp (target - pos) - kd vel, clipped."""
    return np.clip(kp * (np.asarray(target) - np.asarray(pos)) - kd * np.asarray(vel),
                   -limit, limit)


@dataclass
class ActuatorNet:
    """Learned joint-level actuator; one shared network applied per joint."""
    params_flat: np.ndarray
    torque_limit: float = 40.0
    sizes: tuple[int, ...] = NET_SIZES
    activation: str = NET_ACTIVATION

    def __post_init__(self):
        expect = mlp.param_count(self.sizes)
        if self.params_flat.shape != (expect,):
            raise ValueError(f"actuator net needs {expect} parameters, "
                             f"got {self.params_flat.shape}")
        self._params = mlp.unflatten(self.params_flat, self.sizes)

    @property
    def param_count(self) -> int:
        return self.params_flat.size

    def __call__(self, features: np.ndarray) -> np.ndarray:
        """features (n, 6) -> torque (n,), clipped to the limit."""
        y = mlp.forward(self._params, np.atleast_2d(features), self.activation)[:, 0]
        return np.clip(y, -self.torque_limit, self.torque_limit)

    @classmethod
    def initialized(cls, rng: np.random.Generator, torque_limit: float = 40.0):
        return cls(mlp.flatten(mlp.init_params(rng, NET_SIZES)), torque_limit)


class HistoryBuffer:
    """Ring buffer of (position error, velocity) pairs pushed at the sim rate.

    Resetting fills the whole window with the first sample, so the taps are
    well defined from the first step.
    """

    def __init__(self, nj: int, dt: float, span: float = 2 * TAP_SPACING):
        self.nj = nj
        self.dt = dt
        self.tap = max(1, int(round(TAP_SPACING / dt)))
        self.size = 2 * self.tap + 1
        self.err = np.zeros((self.size, nj))
        self.vel = np.zeros((self.size, nj))
        self.head = 0
        self._primed = False

    def reset(self) -> None:
        self._primed = False

    def push(self, err: np.ndarray, vel: np.ndarray) -> None:
        if not self._primed:
            self.err[:] = err
            self.vel[:] = vel
            self._primed = True
        else:
            self.head = (self.head + 1) % self.size
            self.err[self.head] = err
            self.vel[self.head] = vel

    def taps(self) -> tuple[np.ndarray, np.ndarray]:
        """(err, vel) each (nj, 3): columns at t, t-0.01, t-0.02."""
        idx = [(self.head - k * self.tap) % self.size for k in range(N_TAPS)]
        return self.err[idx].T.copy(), self.vel[idx].T.copy()

    def features(self) -> np.ndarray:
        """(nj, 6) actuator-net features in the canonical order."""
        e, v = self.taps()
        return np.concatenate([e, v], axis=1)


@dataclass
class SeaConfig:
    delay: float = 0.005        # command transport delay, s
    lag: float = 0.01           # motor velocity first-order lag, s
    track: float = 0.01         # motor position loop time constant, s
    spring: float = 400.0       # series spring stiffness, N m / rad
    saturation: float = 40.0    # output torque clip, N m
    kp: float = 50.0            # PD stage (matches the ideal actuator)
    kd: float = 0.1
    ki: float = 40.0            # integral gain on torque error, 1/s
    integral_clamp: float = 10.0  # clamp of the integral torque correction, N m
    motor_vel_limit: float = 20.0  # rad/s
    coulomb: float = 1.0        # N m
    viscous: float = 0.05       # N m s / rad


class SeaOracle:
    """Synthetic series-elastic actuator bank (vector over joints).

    The PD stage computes a desired torque from the (delayed) target; the
    motor tracks the spring deflection that realizes it, with velocity lag and
    saturation; integral action removes steady-state droop, so with the joint
    held still the output converges exactly to the PD-stage value. Friction
    (Coulomb + viscous on joint velocity) is subtracted after the spring.
    """

    def __init__(self, nj: int, dt: float, config: SeaConfig | None = None):
        self.cfg = config or SeaConfig()
        self.nj = nj
        self.dt = dt
        self.delay_steps = max(0, int(round(self.cfg.delay / dt)))
        self.reset()

    def reset(self, joint_pos: np.ndarray | None = None) -> None:
        pos = np.zeros(self.nj) if joint_pos is None else np.asarray(joint_pos, float)
        self.theta = pos.copy()          # motor-side position
        self.dtheta = np.zeros(self.nj)  # motor-side velocity
        self.integral = np.zeros(self.nj)
        self.fifo = [pos.copy() for _ in range(self.delay_steps)]

    def spring_torque(self, joint_pos: np.ndarray) -> np.ndarray:
        """Exposed for linearity checks: torque of the series spring alone."""
        return self.cfg.spring * (self.theta - np.asarray(joint_pos))

    def step(self, target: np.ndarray, pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
        c = self.cfg
        self.fifo.append(np.asarray(target, float).copy())
        delayed = self.fifo.pop(0) if self.delay_steps else self.fifo.pop()
        tau_des = c.kp * (delayed - pos) - c.kd * vel
        corr = np.clip(c.ki * self.integral, -c.integral_clamp, c.integral_clamp)
        theta_des = pos + (tau_des + corr) / c.spring
        omega_cmd = np.clip((theta_des - self.theta) / c.track,
                            -c.motor_vel_limit, c.motor_vel_limit)
        self.dtheta += (omega_cmd - self.dtheta) * (self.dt / c.lag)
        self.theta += self.dtheta * self.dt
        tau_spring = c.spring * (self.theta - pos)
        tau_out = np.clip(tau_spring, -c.saturation, c.saturation)
        tau_out = tau_out - c.coulomb * np.tanh(vel / 0.1) - c.viscous * vel
        self.integral += (tau_des - tau_out) * self.dt
        np.clip(self.integral, -c.integral_clamp / c.ki, c.integral_clamp / c.ki,
                out=self.integral)
        return tau_out


# ---------------------------------------------------------------------------
# leg inverse kinematics (for the excitation trajectories)

@dataclass
class LegGeometry:
    hip: np.ndarray        # HAA origin in the base frame
    lateral: float         # signed HFE offset along the hip y axis
    l1: float              # thigh length
    l2: float              # shank length (to the foot center)
    knee_sign: float       # -1 knee backward (front legs), +1 forward (hind)
    limits: np.ndarray     # (3, 2)


def leg_geometry(model: RobotModel, leg: int) -> LegGeometry:
    j0, j1, j2 = model.joints[3 * leg:3 * leg + 3]
    foot_col = next(c for c in model.collision if c.name == model.feet[leg])
    return LegGeometry(
        hip=j0.origin.copy(),
        lateral=float(j1.origin[1]),
        l1=float(-j2.origin[2]),
        l2=float(-foot_col.pos[2]),
        knee_sign=float(np.sign(model.nominal_joint_position[3 * leg + 2])),
        limits=np.array([j0.limits, j1.limits, j2.limits]),
    )


def leg_forward_kinematics(geom: LegGeometry, angles: np.ndarray) -> np.ndarray:
    """Foot center in the base frame for one leg."""
    a, h, k = angles
    ca, sa = math.cos(a), math.sin(a)
    x = -geom.l1 * math.sin(h) - geom.l2 * math.sin(h + k)
    zp = -geom.l1 * math.cos(h) - geom.l2 * math.cos(h + k)
    y = geom.lateral
    # rotate (y, zp) by the HAA angle about x
    yw = y * ca - zp * sa
    zw = y * sa + zp * ca
    return geom.hip + np.array([x, yw, zw])


def _planar_solution(geom: LegGeometry, alpha: float, x: float, zp: float,
                     knee_sign: float) -> np.ndarray:
    d2 = x * x + zp * zp
    reach_hi = (geom.l1 + geom.l2) * 0.9999
    reach_lo = abs(geom.l1 - geom.l2) * 1.0001
    dd = math.sqrt(d2)
    if dd > reach_hi or dd < reach_lo:
        dd = min(max(dd, reach_lo), reach_hi)
        scale = dd / max(math.sqrt(d2), 1e-12)
        x *= scale
        zp *= scale
        d2 = dd * dd
    ck = (d2 - geom.l1 ** 2 - geom.l2 ** 2) / (2.0 * geom.l1 * geom.l2)
    knee = knee_sign * math.acos(min(max(ck, -1.0), 1.0))
    hip = (math.atan2(-x, -zp)
           - math.atan2(geom.l2 * math.sin(knee), geom.l1 + geom.l2 * math.cos(knee)))
    out = np.array([alpha, hip, knee])
    return np.clip(out, geom.limits[:, 0], geom.limits[:, 1])


def leg_inverse_kinematics(geom: LegGeometry, target: np.ndarray) -> np.ndarray:
    """Joint angles (HAA, HFE, KFE) reaching a base-frame foot-center target.

    Both leg-plane orientations and both knee branches are tried (the leg's
    habitual branch first); the candidate with the smaller residual after
    joint-limit clipping wins. Unreachable targets are clamped to the
    reachable annulus.
    """
    tgt = np.asarray(target, float)
    r = tgt - geom.hip
    rho = math.hypot(r[1], r[2])
    d = geom.lateral
    rho = max(rho, abs(d) + 1e-9)
    phi0 = math.atan2(r[2], r[1])
    off = math.acos(min(max(d / rho, -1.0), 1.0))
    best = None
    for alpha in (phi0 + off, phi0 - off):
        alpha = math.atan2(math.sin(alpha), math.cos(alpha))
        zp = -r[1] * math.sin(alpha) + r[2] * math.cos(alpha)
        for ks in (geom.knee_sign, -geom.knee_sign):
            cand = _planar_solution(geom, alpha, r[0], zp, ks)
            err = float(np.sum((leg_forward_kinematics(geom, cand) - tgt) ** 2))
            if best is None or err < best[0] - 1e-15:
                best = (err, cand)
    return best[1]


# ---------------------------------------------------------------------------
# dataset collection and network training

@dataclass
class ActuatorDataset:
    features: np.ndarray   # (n, 6) float32
    torque: np.ndarray     # (n,) float32
    split: np.ndarray      # (n,) uint8, 0 train / 1 validation
    rate_hz: float = 400.0

    @property
    def rows(self) -> int:
        return len(self.torque)

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == 0
        return self.features[m].astype(np.float64), self.torque[m].astype(np.float64)

    def val_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == 1
        return self.features[m].astype(np.float64), self.torque[m].astype(np.float64)


def collect_dataset(model: RobotModel, duration: float, seed: int = 0,
                    sea_config: SeaConfig | None = None,
                    val_block: int = 10, block_s: float = 2.0) -> ActuatorDataset:
    """Run the standing robot tracking foot-tip sine trajectories driven by
    the synthetic actuator, logging (history features, output torque) per
    joint at the simulation rate.

    Amplitudes are drawn from 5-10 cm and frequencies from 1-25 Hz per block,
    so the data covers the actuator's tracking, lag, and saturation regimes.
    Every ``val_block``-th time block is labeled validation.
    """
    from .contact import Simulation, SimConfig

    rng = np.random.default_rng(seed)
    sim = Simulation(model, SimConfig())
    dt = sim.config.dt
    q0, u0 = model.nominal_state()
    sim.set_state(q0, u0)
    nj = model.nj
    geoms = [leg_geometry(model, leg) for leg in range(4)]
    feet0 = [leg_forward_kinematics(geoms[leg], q0[7 + 3 * leg:10 + 3 * leg])
             for leg in range(4)]
    hist = HistoryBuffer(nj, dt)
    hist.push(np.zeros(nj), np.zeros(nj))
    sea = SeaOracle(nj, dt, sea_config)
    sea.reset(q0[7:])

    steps = int(round(duration / dt))
    block_steps = int(round(block_s / dt))
    feats = np.zeros((steps * nj, 6), dtype=np.float32)
    torq = np.zeros(steps * nj, dtype=np.float32)
    split = np.zeros(steps * nj, dtype=np.uint8)

    amp = np.zeros((4, 3))
    freq = np.zeros((4, 3))
    phase = np.zeros((4, 3))
    target = q0[7:].copy()
    for k in range(steps):
        if k % block_steps == 0:
            amp = rng.uniform(0.05, 0.10, (4, 3))
            freq = rng.uniform(1.0, 25.0, (4, 3))
            phase = rng.uniform(0.0, 2.0 * np.pi, (4, 3))
            # excite mostly vertically, with some horizontal content
            amp[:, 0] *= 0.4
            amp[:, 1] *= 0.25
        t = k * dt
        for leg in range(4):
            offs = amp[leg] * np.sin(2.0 * np.pi * freq[leg] * t + phase[leg])
            target[3 * leg:3 * leg + 3] = leg_inverse_kinematics(
                geoms[leg], feet0[leg] + offs)
        pos = sim.q[7:].copy()
        vel = sim.u[6:].copy()
        hist.push(target - pos, vel)
        tau = sea.step(target, pos, vel)
        rows = slice(k * nj, (k + 1) * nj)
        feats[rows] = hist.features()
        torq[rows] = tau
        if (k // block_steps) % val_block == val_block - 1:
            split[rows] = 1
        sim.step_joint_torque(tau)
    return ActuatorDataset(feats, torq, split, rate_hz=1.0 / dt)


@dataclass
class ActuatorTrainReport:
    val_rms: float
    train_rms: float
    ideal_rms: float
    torque_range: float
    epochs: int
    seconds: float
    curve: list[tuple[int, float, float]] = field(default_factory=list)


def ideal_baseline_rms(features: np.ndarray, torque: np.ndarray,
                       kp: float = 50.0, kd: float = 0.1,
                       limit: float = 40.0) -> float:
    """RMS error of the analytic PD actuator on dataset rows."""
    pred = np.clip(kp * features[:, 0] - kd * features[:, 3], -limit, limit)
    return float(np.sqrt(np.mean((pred - torque) ** 2)))


def train_actuator_net(dataset: ActuatorDataset, seed: int = 0, epochs: int = 40,
                       batch: int = 512, lr: float = 1e-3,
                       torque_limit: float = 40.0
                       ) -> tuple[ActuatorNet, ActuatorTrainReport]:
    """Adam on mean squared torque error; returns the net and a report with
    the validation RMS and the ideal-actuator baseline on the same split."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    xt, yt = dataset.train_arrays()
    xv, yv = dataset.val_arrays()
    params = mlp.init_params(rng, NET_SIZES)
    vec = mlp.flatten(params)
    opt = mlp.Adam(lr=lr)
    n = len(yt)
    curve = []
    for ep in range(epochs):
        order = rng.permutation(n)
        for k in range(0, n, batch):
            idx = order[k:k + batch]
            params = mlp.unflatten(vec, NET_SIZES)
            pred, cache = mlp.forward_cache(params, xt[idx], NET_ACTIVATION)
            err = pred[:, 0] - yt[idx]
            dy = (2.0 / len(idx)) * err[:, None]
            grads, _ = mlp.backward(params, cache, dy, NET_ACTIVATION)
            vec = opt.step(vec, mlp.flatten(grads))
        params = mlp.unflatten(vec, NET_SIZES)
        tr = float(np.sqrt(np.mean((mlp.forward(params, xt, NET_ACTIVATION)[:, 0] - yt) ** 2)))
        vr = float(np.sqrt(np.mean((mlp.forward(params, xv, NET_ACTIVATION)[:, 0] - yv) ** 2)))
        curve.append((ep + 1, tr, vr))
    net = ActuatorNet(vec, torque_limit)
    report = ActuatorTrainReport(
        val_rms=curve[-1][2], train_rms=curve[-1][1],
        ideal_rms=ideal_baseline_rms(xv, yv),
        torque_range=2.0 * torque_limit, epochs=epochs,
        seconds=time.perf_counter() - t0, curve=curve)
    return net, report
