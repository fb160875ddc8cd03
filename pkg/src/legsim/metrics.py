"""Evaluation protocols, gait analysis, and power accounting.

Two evaluation drivers run trained policies under deterministic conditions
(no observation noise, no pushes, fixed friction, nominal model, mean
actions): run_command_eval tracks a command protocol with a locomotion
policy, run_recovery_eval drops the robot into randomized fallen states and
times how fast it gets back upright. Both produce an EvalReport whose
aggregate numbers are pure functions of the per-step log they carry, so the
same numbers can be recomputed from a persisted copy of the log.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import _math as mk
from . import policy as P
from . import tasks as T
from .actuator import ActuatorNet
from .env import EnvConfig, LeggedEnv, recovery_config
from .model import RobotModel

FOOT_LABELS = ("LF", "RF", "LH", "RH")
STEP_LEVELS = (0.25, 0.5, 0.75, 1.0)
STEP_HOLD = 4.5          # s per speed level in the step protocol
RANDOM_DURATION = 30.0   # s of random commands
RANDOM_HOLD = 2.0        # s between command switches
UPRIGHT_THRESHOLD = 0.25  # rad of gravity-direction error counted as upright
UPRIGHT_SUSTAIN = 1.0     # s the error must stay below the threshold


# -- power ---------------------------------------------------------------

def mechanical_power(tau: np.ndarray, joint_vel: np.ndarray,
                     positive_work: bool = True) -> float:
    """Actuator mechanical power, summed over joints and averaged over time.

    positive_work counts only work done by the actuators on the joints,
    sum(max(tau * vel, 0)); with positive_work=False both signs count via
    sum(|tau * vel|). Accepts single rows (nj,) or series (steps, nj).
    """
    p = np.atleast_2d(np.asarray(tau, float) * np.asarray(joint_vel, float))
    per_step = (np.sum(np.maximum(p, 0.0), axis=1) if positive_work
                else np.sum(np.abs(p), axis=1))
    return float(np.mean(per_step)) if per_step.size else 0.0


# -- gait ----------------------------------------------------------------

def _debounce(x: np.ndarray, min_run: int) -> np.ndarray:
    """Remove contact chatter: fill interior gaps shorter than min_run
    samples, then drop stance runs shorter than min_run samples."""
    y = x.astype(bool).copy()
    if min_run <= 1 or y.size == 0:
        return y
    for target, fill, interior in ((False, True, True), (True, False, False)):
        edges = np.flatnonzero(np.diff(y.astype(np.int8))) + 1
        bounds = np.concatenate(([0], edges, [y.size]))
        for s, e in zip(bounds[:-1], bounds[1:]):
            if y[s] != target or e - s >= min_run:
                continue
            if interior and (s == 0 or e == y.size):
                continue
            y[s:e] = fill
    return y


@dataclass
class GaitDiagram:
    """Per-foot boolean contact series at a fixed sampling rate.

    Column order follows ``labels`` (left-front, right-front, left-hind,
    right-hind for the packaged quadruped). The diagram is a pure function
    of the contact log it was built from.
    """
    contact: np.ndarray                       # (steps, n_feet) bool
    rate: float                               # samples per second
    labels: tuple[str, ...] = FOOT_LABELS

    def __post_init__(self) -> None:
        self.contact = np.asarray(self.contact).astype(bool)
        if self.contact.ndim != 2 or self.contact.shape[1] != len(self.labels):
            raise ValueError("contact log must be (steps, %d)" % len(self.labels))

    @property
    def steps(self) -> int:
        return self.contact.shape[0]

    def duty_factor(self) -> np.ndarray:
        """Fraction of time each foot spends in contact."""
        return self.contact.mean(axis=0)

    def flight_fraction(self) -> float:
        """Fraction of time no foot touches the ground."""
        return float(np.mean(~self.contact.any(axis=1)))

    def stride_period(self) -> float | None:
        """Dominant repeat period of the contact pattern, in seconds.

        Estimated from the summed per-foot autocorrelation: the period is
        the best-correlated lag after the pattern first decorrelates. None
        when the log holds fewer than two strides (no lag up to half the
        log length shows a prominent repeat) or the pattern is constant.
        """
        x = self.contact.astype(float)
        x -= x.mean(axis=0)
        n = self.steps
        max_lag = n // 2
        if max_lag < 2:
            return None
        c = np.zeros(max_lag + 1)
        for f in range(x.shape[1]):
            col = x[:, f]
            c += np.correlate(col, col, "full")[n - 1:n + max_lag]
        if c[0] <= 1e-12:        # constant pattern, e.g. standing
            return None
        c /= c[0]
        below = np.flatnonzero(c < 0.0)
        if below.size == 0:      # never decorrelates inside the log
            return None
        start = below[0]
        peak = start + int(np.argmax(c[start:]))
        if c[peak] < 0.25:       # no prominent repeat: fewer than two strides
            return None
        return peak / self.rate

    def cycle_periods(self, foot: int, min_event_steps: int = 3) -> np.ndarray:
        """Touchdown-to-touchdown durations for one foot, in seconds.

        Contact chatter shorter than min_event_steps samples is removed
        before edge detection.
        """
        x = _debounce(self.contact[:, foot], min_event_steps)
        touchdowns = np.flatnonzero(np.diff(x.astype(np.int8)) == 1) + 1
        return np.diff(touchdowns) / self.rate

    def period_stability(self, min_event_steps: int = 3) -> float | None:
        """Largest relative deviation of any foot's cycle period from that
        foot's median period. None when some foot shows fewer than two full
        cycles, in which case stability is not measurable."""
        worst = 0.0
        for f in range(self.contact.shape[1]):
            p = self.cycle_periods(f, min_event_steps)
            if p.size < 2:
                return None
            med = float(np.median(p))
            if med <= 0.0:
                return None
            worst = max(worst, float(np.max(np.abs(p - med)) / med))
        return worst


# -- reports -------------------------------------------------------------

@dataclass
class EvalReport:
    """Aggregate evaluation numbers plus the per-step log behind them.

    The four mean fields and the per-level rows in ``outcomes`` are pure
    functions of ``log`` (see report_from_command_log / recovery_outcome),
    so a persisted copy of the log reproduces them exactly. Velocity-error
    fields are NaN for recovery reports, where no command is tracked.
    """
    task: str
    protocol: str
    rate: float                      # control/sampling rate, Hz
    duration: float                  # simulated seconds actually logged
    mean_lin_vel_error: float        # m/s, horizontal plane, heading frame
    mean_yaw_rate_error: float       # rad/s
    mean_abs_torque: float           # N*m, averaged over joints and time
    mean_mech_power: float           # W
    outcomes: list[dict]             # per episode / trial / command level
    gait: GaitDiagram | None = None
    log: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def success_rate(self) -> float:
        """Fraction of trials marked successful; NaN when none carry one."""
        s = [bool(o["success"]) for o in self.outcomes if "success" in o]
        return float(np.mean(s)) if s else float("nan")

    def summary_lines(self) -> list[str]:
        out = [f"task={self.task} protocol={self.protocol} rate={self.rate:g} "
               f"duration={self.duration:.2f}",
               f"lin_vel_err={self.mean_lin_vel_error:.4f} "
               f"yaw_rate_err={self.mean_yaw_rate_error:.4f} "
               f"abs_torque={self.mean_abs_torque:.3f} "
               f"mech_power={self.mean_mech_power:.2f}"]
        if self.gait is not None:
            duty = " ".join(f"{l}={d:.2f}" for l, d in
                            zip(self.gait.labels, self.gait.duty_factor()))
            period = self.gait.stride_period()
            out.append(f"duty {duty} stride_period="
                       + (f"{period:.3f}" if period is not None else "none"))
        if not math.isnan(self.success_rate):
            out.append(f"success_rate={self.success_rate:.3f}")
        for o in self.outcomes:
            out.append(" ".join(f"{k}={_fmt(v)}" for k, v in o.items()))
        return out


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report_from_command_log(log: dict[str, np.ndarray], *, protocol: str,
                            rate: float, outcomes: list[dict] | None = None,
                            positive_work: bool = True) -> EvalReport:
    """Build a command-tracking EvalReport purely from a per-step log.

    The log needs columns t, command (steps, 3), v_fwd, v_lat, yaw_rate,
    tau (steps, nj), joint_vel (steps, nj), contact (steps, 4). Velocity
    errors compare the heading-frame planar velocity and the world yaw rate
    against the active command, matching the tracking costs. For the step
    protocol a per-level row (mean speed, torque, power) is appended for
    each distinct forward command, in order of first appearance.
    """
    cmd = np.asarray(log["command"], float)
    lin_err = np.hypot(log["v_fwd"] - cmd[:, 0], log["v_lat"] - cmd[:, 1])
    yaw_err = np.abs(log["yaw_rate"] - cmd[:, 2])
    tau = np.asarray(log["tau"], float)
    jv = np.asarray(log["joint_vel"], float)
    rows = list(outcomes or [])
    if protocol == "step":
        levels = cmd[np.sort(np.unique(cmd[:, 0], return_index=True)[1]), 0]
        for lvl in levels:
            m = cmd[:, 0] == lvl
            rows.append({
                "command": float(lvl),
                "mean_speed": float(np.mean(log["v_fwd"][m])),
                "mean_abs_torque": float(np.mean(np.abs(tau[m]))),
                "mean_mech_power": mechanical_power(tau[m], jv[m], positive_work),
            })
    return EvalReport(
        task=P.LOCOMOTION, protocol=protocol, rate=rate,
        duration=cmd.shape[0] / rate,
        mean_lin_vel_error=float(np.mean(lin_err)),
        mean_yaw_rate_error=float(np.mean(yaw_err)),
        mean_abs_torque=float(np.mean(np.abs(tau))),
        mean_mech_power=mechanical_power(tau, jv, positive_work),
        outcomes=rows,
        gait=GaitDiagram(np.asarray(log["contact"]) > 0.5, rate),
        log=log)


# -- evaluation drivers ---------------------------------------------------

def evaluation_env_config(base: EnvConfig | None = None, *,
                          task: str = P.LOCOMOTION,
                          control_rate: float | None = None,
                          episode_length: float = RANDOM_DURATION) -> EnvConfig:
    """Deterministic evaluation variant of an environment config: noise,
    pushes, friction randomization, and collision-geometry randomization
    off; command resampling disabled (the protocol drives the command)."""
    if base is None:
        base = recovery_config() if task == P.RECOVERY else EnvConfig()
    cfg = dataclasses.replace(base)
    cfg.task = task
    if control_rate is None:
        control_rate = 200.0 if task == P.LOCOMOTION else 100.0
    cfg.control_rate = control_rate
    cfg.episode_length = episode_length
    cfg.command_hold = 2.0 * episode_length  # never resampled internally
    cfg.obs_noise = False
    cfg.randomize_friction = False
    cfg.pushes = False
    cfg.randomize_collision = False
    return cfg


def _action_fn(policy):
    """Accept a policy object (deterministic mean action) or a raw callable."""
    return policy.mean if hasattr(policy, "mean") else policy


def _yaw_aligned_rates(q: np.ndarray, u: np.ndarray,
                       rot: np.ndarray) -> tuple[float, float, float]:
    """(forward, lateral, yaw-rate) of the base in the heading frame."""
    mk.quat_to_rot(q[3:7], rot)
    yaw = T.yaw_of(q[3:7])
    cy, sy = math.cos(yaw), math.sin(yaw)
    v_fwd = cy * u[0] + sy * u[1]
    v_lat = -sy * u[0] + cy * u[1]
    w_world = rot @ u[3:6]
    return v_fwd, v_lat, float(w_world[2])


def _track_commands(env: LeggedEnv, policy, commands: list[np.ndarray],
                    hold_steps: int, n_steps: int
                    ) -> tuple[dict[str, np.ndarray], dict]:
    """Run one episode following a fixed command schedule; returns the
    per-step log and an outcome dict. The command for step i takes effect
    in that step's tracking error while the policy first sees it in the
    observation produced by step i, mirroring training."""
    act = _action_fn(policy)
    q, u = env.model.nominal_state()
    obs = env.reset(q, u)
    env.command = commands[0]
    obs = env._observe()
    nj = env.model.nj
    log = {
        "t": np.zeros(n_steps), "command": np.zeros((n_steps, 3)),
        "v_fwd": np.zeros(n_steps), "v_lat": np.zeros(n_steps),
        "yaw_rate": np.zeros(n_steps), "tau": np.zeros((n_steps, nj)),
        "joint_vel": np.zeros((n_steps, nj)),
        "contact": np.zeros((n_steps, 4)),
    }
    rot = np.zeros((3, 3))
    fell = False
    done_steps = 0
    for i in range(n_steps):
        a = act(obs)
        env.command = commands[min(i // hold_steps, len(commands) - 1)]
        obs, _, done, timeout, _ = env.step(a)
        q, u = env.sim.q, env.sim.u
        v_fwd, v_lat, yaw_rate = _yaw_aligned_rates(q, u, rot)
        log["t"][i] = (i + 1) / env.cfg.control_rate
        log["command"][i] = env.command
        log["v_fwd"][i] = v_fwd
        log["v_lat"][i] = v_lat
        log["yaw_rate"][i] = yaw_rate
        log["tau"][i] = env.tau_mean
        log["joint_vel"][i] = u[6:]
        log["contact"][i] = env.foot_flag > 0.0
        done_steps = i + 1
        if done:
            fell = True
            break
        if timeout:
            break
    if done_steps < n_steps:
        log = {k: v[:done_steps] for k, v in log.items()}
    outcome = {"episode": 0, "commands": len(commands), "fell": fell,
               "time": done_steps / env.cfg.control_rate}
    return log, outcome


def run_command_eval(model: RobotModel, policy, protocol: str = "random",
                     seed: int = 0, *, env_config: EnvConfig | None = None,
                     actuator_net: ActuatorNet | None = None,
                     duration: float = RANDOM_DURATION,
                     hold_time: float = RANDOM_HOLD,
                     step_levels: tuple[float, ...] = STEP_LEVELS,
                     step_hold: float = STEP_HOLD,
                     positive_work: bool = True) -> EvalReport:
    """Evaluate a locomotion policy on a command protocol.

    protocol "random" draws a new command every hold_time seconds for
    duration seconds, rejection-sampled so the perfect-tracking path stays
    inside the standard test perimeter. protocol "step" holds pure forward
    commands at each of step_levels for step_hold seconds and reports a
    per-level row. The policy runs deterministically (mean actions) at
    200 Hz with noise, pushes, and randomization off.
    """
    if protocol not in ("random", "step"):
        raise ValueError(f"unknown protocol {protocol!r}")
    rng = np.random.default_rng(seed)
    if protocol == "random":
        cmds = T.sample_command_sequence_with_perimeter(
            (env_config or EnvConfig()).commands, T.DEFAULT_PERIMETER,
            duration, rng, hold_time)
        hold, total = hold_time, duration
    else:
        cmds = [np.array([v, 0.0, 0.0]) for v in step_levels]
        hold, total = step_hold, step_hold * len(step_levels)
    cfg = evaluation_env_config(env_config, task=P.LOCOMOTION,
                                episode_length=total)
    env = LeggedEnv(model, cfg, seed=seed, actuator_net=actuator_net)
    hold_steps = max(1, int(round(hold * cfg.control_rate)))
    n_steps = int(round(total * cfg.control_rate))
    log, outcome = _track_commands(env, policy, cmds, hold_steps, n_steps)
    return report_from_command_log(log, protocol=protocol,
                                   rate=cfg.control_rate, outcomes=[outcome],
                                   positive_work=positive_work)


# -- recovery ------------------------------------------------------------

def upright_error(quat: np.ndarray) -> float:
    """Angle between the body-frame gravity direction and its upright
    value, in radians. Zero when the base z-axis points straight up."""
    w, x, y, z = quat
    r22 = 1.0 - 2.0 * (x * x + y * y)
    return math.acos(min(1.0, max(-1.0, r22)))


def time_to_upright(err: np.ndarray, rate: float,
                    threshold: float = UPRIGHT_THRESHOLD,
                    sustain: float = UPRIGHT_SUSTAIN) -> float | None:
    """First time the upright error drops below threshold and stays there
    for the sustain window; None if the series never sustains it. err[k]
    is the error at time k/rate."""
    w = max(1, int(round(sustain * rate)))
    run = 0
    for i, good in enumerate(np.asarray(err) < threshold):
        run = run + 1 if good else 0
        if run >= w + 1:      # w+1 samples span the sustain window
            return (i - w) / rate
    return None


def recovery_outcome(err: np.ndarray, rate: float, time_limit: float,
                     threshold: float = UPRIGHT_THRESHOLD,
                     sustain: float = UPRIGHT_SUSTAIN) -> tuple[bool, float | None]:
    """(success, time_to_upright) for one trial's upright-error series.
    Success means the sustained-upright timer starts within the limit."""
    t_up = time_to_upright(err, rate, threshold, sustain)
    return (t_up is not None and t_up <= time_limit + 1e-9), t_up


def run_recovery_eval(model: RobotModel, policy, count: int = 50,
                      time_limit: float = 5.0, seed: int = 0, *,
                      env_config: EnvConfig | None = None,
                      actuator_net: ActuatorNet | None = None,
                      control_rate: float = 100.0,
                      threshold: float = UPRIGHT_THRESHOLD,
                      sustain: float = UPRIGHT_SUSTAIN,
                      initial_states: list | None = None,
                      positive_work: bool = True) -> EvalReport:
    """Evaluate a recovery policy from randomized fallen states.

    Each trial starts from a settled post-drop state, runs mean actions at
    control_rate, and succeeds when the gravity-direction error drops below
    threshold and stays there for the sustain window starting within
    time_limit. Each trial simulates time_limit + sustain seconds so a
    window opened right at the limit can still be verified. The log gains
    a t=0 row per trial (zero torque) recording the initial state.
    """
    act = _action_fn(policy)
    if initial_states is None:
        initial_states = T.recovery_initial_states(model, count, seed=seed)
    cfg = evaluation_env_config(env_config, task=P.RECOVERY,
                                control_rate=control_rate,
                                episode_length=time_limit + sustain)
    env = LeggedEnv(model, cfg, seed=seed, actuator_net=actuator_net)
    n_steps = int(round((time_limit + sustain) * control_rate))
    nj = model.nj
    chunks: list[dict[str, np.ndarray]] = []
    outcomes = []
    for k, (q0, u0) in enumerate(initial_states[:count]):
        obs = env.reset(q0, u0)
        rows = n_steps + 1
        trial = {
            "trial": np.full(rows, k, float), "t": np.zeros(rows),
            "upright_err": np.zeros(rows), "tau": np.zeros((rows, nj)),
            "joint_vel": np.zeros((rows, nj)), "contact": np.zeros((rows, 4)),
        }
        trial["upright_err"][0] = upright_error(env.sim.q[3:7])
        trial["joint_vel"][0] = env.sim.u[6:]
        used = 1
        for i in range(n_steps):
            obs, _, done, timeout, _ = env.step(act(obs))
            trial["t"][used] = (i + 1) / control_rate
            trial["upright_err"][used] = upright_error(env.sim.q[3:7])
            trial["tau"][used] = env.tau_mean
            trial["joint_vel"][used] = env.sim.u[6:]
            trial["contact"][used] = env.foot_flag > 0.0
            used += 1
            if done or timeout:
                break
        trial = {k2: v[:used] for k2, v in trial.items()}
        success, t_up = recovery_outcome(trial["upright_err"], control_rate,
                                         time_limit, threshold, sustain)
        outcomes.append({"trial": k, "success": success,
                         "time_to_upright": t_up})
        chunks.append(trial)
    log = {k2: np.concatenate([c[k2] for c in chunks]) for k2 in chunks[0]}
    step_rows = log["t"] > 0.0   # aggregate actuation over acted steps only
    tau, jv = log["tau"][step_rows], log["joint_vel"][step_rows]
    return EvalReport(
        task=P.RECOVERY, protocol="recovery", rate=control_rate,
        duration=float(np.sum(step_rows)) / control_rate,
        mean_lin_vel_error=float("nan"), mean_yaw_rate_error=float("nan"),
        mean_abs_torque=float(np.mean(np.abs(tau))) if tau.size else 0.0,
        mean_mech_power=mechanical_power(tau, jv, positive_work),
        outcomes=outcomes, gait=None, log=log)
