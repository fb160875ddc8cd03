"""Episodic training environments for the locomotion and recovery tasks.

Each policy step runs the compiled substep kernel (actuator at the simulation
rate, hard-contact dynamics, history ring, pooled contact statistics), then
builds the observation and the cost breakdown in Python. Episode services:
command resampling every hold period, scheduled base pushes scaled by the
curriculum factor, per-episode friction randomization, 50/50 replay-pool
initial states (locomotion), and drop-pool initial states with collision-body
randomization (recovery).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _dynamics as dk
from . import _contact as ck
from . import _math as mk
from . import _step
from . import policy as P
from . import tasks as T
from .actuator import NET_SIZES, ActuatorNet, TAP_SPACING
from .contact import SimConfig, Simulation
from .model import RobotModel, randomize_collision
from . import mlp


@dataclass
class EnvConfig:
    task: str = P.LOCOMOTION
    control_rate: float = 200.0
    episode_length: float = 6.0
    actuator: str = "ideal"          # "ideal" | "net"
    commands: T.CommandRanges = field(default_factory=T.CommandRanges)
    command_hold: float = 2.0
    obs_noise: bool = True
    noise: P.NoiseConfig = field(default_factory=P.NoiseConfig)
    randomize_friction: bool = True
    friction_range: tuple[float, float] = (0.6, 1.0)
    pushes: bool = True
    push_force_max: float = 80.0
    push_duration: float = 0.1
    push_period: float = 2.0
    push_offset: float = 1.0
    randomize_collision: bool = False
    sim: SimConfig = field(default_factory=SimConfig)


def recovery_config(**overrides) -> EnvConfig:
    """Defaults for the recovery task: 20 Hz control, randomized collision
    bodies, no commands or pushes."""
    cfg = EnvConfig(task=P.RECOVERY, control_rate=20.0, pushes=False,
                    randomize_collision=True)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


class ReplayPool:
    """Ring buffer of (q, u) states harvested from rollouts."""

    def __init__(self, capacity: int = 2000):
        self.capacity = capacity
        self._states: list[tuple[np.ndarray, np.ndarray]] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._states)

    def add(self, q: np.ndarray, u: np.ndarray) -> None:
        item = (q.copy(), u.copy())
        if len(self._states) < self.capacity:
            self._states.append(item)
        else:
            self._states[self._next] = item
            self._next = (self._next + 1) % self.capacity

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        q, u = self._states[rng.integers(len(self._states))]
        return q.copy(), u.copy()


class LeggedEnv:
    """One robot, one episode at a time.

    step(action) -> (obs, reward, done, timeout, breakdown). ``done`` marks
    true failures that carry the extra terminal cost: joint limits and base
    contact for locomotion, numerical divergence for every task; ``timeout``
    marks the episode-length cutoff, whose value should be bootstrapped.
    """

    HARVEST_EVERY = 50  # control steps between replay-pool deposits

    def __init__(self, model: RobotModel, config: EnvConfig | None = None,
                 seed: int = 0, actuator_net: ActuatorNet | None = None,
                 replay_pool: ReplayPool | None = None,
                 initial_pool: list[tuple[np.ndarray, np.ndarray]] | None = None):
        self.base_model = model
        self.cfg = config or EnvConfig()
        if self.cfg.task not in P.TASKS:
            raise ValueError(f"unknown task {self.cfg.task!r}")
        self.rng = np.random.default_rng(seed)
        self.replay_pool = replay_pool
        self.initial_pool = initial_pool
        self.k_c = 1.0

        self.dt_policy = 1.0 / self.cfg.control_rate
        self.nsub = int(round(self.dt_policy / self.cfg.sim.dt))
        if self.nsub < 1 or abs(self.nsub * self.cfg.sim.dt - self.dt_policy) > 1e-9:
            raise ValueError("control rate must be an integer divisor of the sim rate")
        self.episode_steps = int(round(self.cfg.episode_length / self.dt_policy))
        self.hold_steps = max(1, int(round(self.cfg.command_hold / self.dt_policy)))
        self.push_period_steps = max(1, int(round(self.cfg.push_period / self.dt_policy)))
        self.push_offset_steps = int(round(self.cfg.push_offset / self.dt_policy))
        self.push_duration_steps = max(1, int(round(self.cfg.push_duration / self.dt_policy)))

        self.use_net = self.cfg.actuator == "net"
        if self.use_net and actuator_net is None:
            raise ValueError("actuator='net' requires an actuator_net")
        if actuator_net is not None:
            pp = mlp.unflatten(actuator_net.params_flat, NET_SIZES)
            self._net = tuple(np.ascontiguousarray(a) for Wb in pp for a in Wb)
            self._net_clip = actuator_net.torque_limit
        else:
            z = [(np.zeros((6, 32)), np.zeros(32)), (np.zeros((32, 32)), np.zeros(32)),
                 (np.zeros((32, 32)), np.zeros(32)), (np.zeros((32, 1)), np.zeros(1))]
            self._net = tuple(a for Wb in z for a in Wb)
            self._net_clip = 40.0

        self._bind_model(model)
        nj = model.nj
        self.tap = max(1, int(round(TAP_SPACING / self.cfg.sim.dt)))
        self.ring_size = 2 * self.tap + 1
        self.err_ring = np.zeros((self.ring_size, nj))
        self.vel_ring = np.zeros((self.ring_size, nj))
        self.head = np.zeros(1, dtype=np.int64)

        self._obs_scale = P.obs_scales(self.cfg.task)
        self._noise_sigma = P.noise_sigma(self.cfg.task, self.cfg.noise)
        self._lay = P.obs_layout(self.cfg.task)
        self._hfe_t, self._kfe_t = T.recovery_posture_targets(model)
        self._foot_radius = np.array(
            [self.cm.col_size[ci, 0] for ci in self.cm.foot_cols])

        # kernel scratch
        self.tau_full = np.zeros(model.nu)
        self.xbuf = np.zeros(6)
        self.h1 = np.zeros(32)
        self.h2 = np.zeros(32)
        self.h3 = np.zeros(32)
        self.tau_mean = np.zeros(nj)
        self.foot_flag = np.zeros(4)
        self.foot_gap = np.zeros(4)
        self.foot_vel = np.zeros((4, 3))
        self.kout = np.zeros(_step.OUT_SIZE)
        self._rot = np.zeros((3, 3))
        self._base_force = np.zeros(3)
        self._gravity = np.asarray(self.cfg.sim.gravity, float)

        self.total_steps = 0
        self._terminated = True  # force reset before first step

    def _bind_model(self, model: RobotModel) -> None:
        self.model = model
        self.cm = model.compiled()
        self.sim = Simulation(model, self.cfg.sim)

    # -- episode services ---------------------------------------------------
    def set_curriculum(self, k_c: float) -> None:
        self.k_c = float(k_c)

    def _sample_push(self) -> None:
        mag = self.rng.uniform(0.0, self.cfg.push_force_max) * self.k_c
        az = self.rng.uniform(0.0, 2.0 * math.pi)
        self._push_force = np.array([mag * math.cos(az), mag * math.sin(az), 0.0])

    def reset(self, q: np.ndarray | None = None, u: np.ndarray | None = None
              ) -> np.ndarray:
        cfg = self.cfg
        if cfg.randomize_collision:
            self._bind_model(randomize_collision(self.base_model, self.rng))
        if q is None:
            if cfg.task == P.RECOVERY:
                if self.initial_pool:
                    q, u = self.initial_pool[self.rng.integers(len(self.initial_pool))]
                else:
                    q, u = self.model.nominal_state()
            elif (self.replay_pool is not None and len(self.replay_pool)
                    and self.rng.uniform() < 0.5):
                q, u = self.replay_pool.sample(self.rng)
            else:
                q, u = T.sample_initial_state(self.model, self.rng)
        elif u is None:
            u = np.zeros(self.model.nu)
        self.sim.set_state(np.asarray(q, float), np.asarray(u, float))
        if cfg.randomize_friction:
            self.sim.friction = self.rng.uniform(*cfg.friction_range)

        nom = self.cm.nominal_q[7:]
        self.err_ring[:] = nom - self.sim.q[7:]
        self.vel_ring[:] = self.sim.u[6:]
        self.head[0] = 0
        self.tau_mean[:] = 0.0
        self._tau_prev = np.zeros(self.model.nj)
        self._prev_action = np.zeros(self.model.nj)
        self._prev_joint_vel = self.sim.u[6:].copy()
        self.steps = 0
        self._terminated = False
        self.command = (T.sample_command(cfg.commands, self.rng)
                        if cfg.task == P.LOCOMOTION else np.zeros(3))
        self._sample_push()
        if cfg.task == P.LOCOMOTION:
            self._height = P.height_estimate(self.model, self.sim.q)
        return self._observe()

    # -- stepping -------------------------------------------------------------
    def step(self, action: np.ndarray
             ) -> tuple[np.ndarray, float, bool, bool, T.CostBreakdown]:
        if self._terminated:
            raise RuntimeError("episode finished; call reset()")
        cfg = self.cfg
        if (cfg.task == P.LOCOMOTION and self.steps
                and self.steps % self.hold_steps == 0):
            self.command = T.sample_command(cfg.commands, self.rng)
        if cfg.pushes:
            phase = (self.steps - self.push_offset_steps) % self.push_period_steps
            if phase == 0 and self.steps >= self.push_offset_steps:
                self._sample_push()
            active = (self.steps >= self.push_offset_steps
                      and phase < self.push_duration_steps)
            self._base_force[:] = self._push_force if active else 0.0
        else:
            self._base_force[:] = 0.0

        target = P.action_to_target(self.cm.nominal_q[7:], np.asarray(action, float),
                                    self.cm.limit_lo, self.cm.limit_hi)
        sim = self.sim
        W1, b1, W2, b2, W3, b3, W4, b4 = self._net
        _step.policy_step(
            self.cm, sim.q, sim.u, target, self.model.kp, self.model.kd,
            self.nsub, self.use_net, W1, b1, W2, b2, W3, b3, W4, b4,
            self._net_clip, self.err_ring, self.vel_ring, self.head, self.tap,
            self._base_force, self._gravity, sim.friction, cfg.sim.dt,
            cfg.sim.erp, cfg.sim.margin, cfg.sim.solver_tol, cfg.sim.max_sweeps,
            sim.ws, sim.cw, sim._q_next, sim._u_next, self.tau_full,
            self.xbuf, self.h1, self.h2, self.h3,
            self.tau_mean, self.foot_flag, self.foot_gap, self.foot_vel, self.kout)
        sim.time += self.nsub * cfg.sim.dt
        self.steps += 1
        self.total_steps += 1
        if cfg.task == P.LOCOMOTION:
            self._height = sim.q[2] - np.min(self.foot_gap)

        diverged = self._diverged()
        # a diverged state has no meaningful cost; the episode just ends with
        # the terminal cost
        breakdown = T.CostBreakdown({}, self.k_c) if diverged else self._cost()
        self._tau_prev = self.tau_mean.copy()
        self._prev_joint_vel = sim.u[6:].copy()
        self._prev_action = np.asarray(action, float).copy()

        done = diverged or self._check_failure()
        timeout = (not done) and self.steps >= self.episode_steps
        reward = breakdown.reward - (T.TERMINAL_COST if done else 0.0)
        self._terminated = done or timeout
        if (self.replay_pool is not None and not self._terminated
                and self.total_steps % self.HARVEST_EVERY == 0):
            self.replay_pool.add(sim.q, sim.u)
        obs = self._observe()
        return obs, reward, done, timeout, breakdown

    def _diverged(self) -> bool:
        q, u = self.sim.q, self.sim.u
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(u))):
            return True
        return np.max(np.abs(u)) > 1e4

    def _check_failure(self) -> bool:
        """Joint-limit and base-contact failures apply to locomotion only;
        a recovering robot lies on its base by design and its unactuated fall
        may leave joints outside their limit boxes."""
        if self.cfg.task == P.RECOVERY:
            return False
        q = self.sim.q
        jp = q[7:]
        if np.any(jp < self.cm.limit_lo) or np.any(jp > self.cm.limit_hi):
            return True
        return self.kout[_step.OUT_BASE_CONTACT] > 0.0

    # -- outputs --------------------------------------------------------------
    def _cost(self) -> T.CostBreakdown:
        sim = self.sim
        q, u = sim.q, sim.u
        mk.quat_to_rot(q[3:7], self._rot)
        gravity_body = -self._rot[2]
        if self.cfg.task == P.LOCOMOTION:
            return T.locomotion_cost(
                dt=self.dt_policy, k_c=self.k_c, command=self.command,
                lin_vel_w=u[0:3], ang_vel_w=self._rot @ u[3:6],
                yaw=T.yaw_of(q[3:7]), gravity_body=gravity_body,
                tau=self.tau_mean, tau_prev=self._tau_prev, joint_vel=u[6:],
                foot_height=self.foot_gap,
                foot_tan_speed=np.hypot(self.foot_vel[:, 0], self.foot_vel[:, 1]),
                foot_contact=self.foot_flag > 0.0)
        ko = self.kout
        return T.recovery_cost_from_stats(
            dt=self.dt_policy, k_c=self.k_c, joint_pos=q[7:], joint_vel=u[6:],
            joint_acc=(u[6:] - self._prev_joint_vel) / self.dt_policy,
            tau=self.tau_mean, tau_prev=self._tau_prev, roll=T.roll_of(q[3:7]),
            gravity_body=gravity_body,
            n_events=ko[_step.OUT_N_EVENTS],
            sum_speed_sq=ko[_step.OUT_SUM_SPEED_SQ],
            n_body=ko[_step.OUT_N_BODY],
            sum_body_impulse=ko[_step.OUT_SUM_BODY_IMP],
            n_internal=ko[_step.OUT_SUM_INTERNAL] / self.nsub,
            hfe_target=self._hfe_t, kfe_target=self._kfe_t)

    def _observe(self) -> np.ndarray:
        q, u = self.sim.q, self.sim.u
        lay = self._lay
        obs = np.zeros(self._obs_scale.size)
        mk.quat_to_rot(q[3:7], self._rot)
        r = self._rot
        if self.cfg.task == P.LOCOMOTION:
            obs[lay["command"]] = self.command
        obs[lay["gravity"]] = -r[2]
        obs[lay["lin_vel"]] = r.T @ u[0:3]
        obs[lay["ang_vel"]] = u[3:6]
        obs[lay["joint_pos"]] = q[7:]
        obs[lay["joint_vel"]] = u[6:]
        h = self.head[0]
        obs[lay["err_hist"]] = np.concatenate(
            [self.err_ring[(h - self.tap) % self.ring_size],
             self.err_ring[(h - 2 * self.tap) % self.ring_size]])
        obs[lay["vel_hist"]] = np.concatenate(
            [self.vel_ring[(h - self.tap) % self.ring_size],
             self.vel_ring[(h - 2 * self.tap) % self.ring_size]])
        obs[lay["prev_action"]] = self._prev_action
        if self.cfg.task == P.LOCOMOTION:
            obs[lay["height"]] = self._height
        if self.cfg.obs_noise:
            obs += self.rng.standard_normal(obs.size) * self._noise_sigma
        return obs * self._obs_scale
