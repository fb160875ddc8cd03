"""Observation construction and the Gaussian control policy.

Observation layout (locomotion, 97 dims; recovery drops the command and the
height estimate for 93):

    command            3   target (vx, vy, yaw rate), omitted for recovery
    gravity direction  3   unit gravity vector expressed in the base frame
    base lin velocity  3   base frame, scaled 0.5
    base ang velocity  3   base frame, scaled 0.5
    joint positions   12
    joint velocities  12   scaled 0.5
    error history     24   position-error taps at t-0.01 s and t-0.02 s
    velocity history  24   velocity taps at t-0.01 s and t-0.02 s, scaled 0.5
    previous action   12   last position target offset
    height estimate    1   kinematic, scaled 5, omitted for recovery

The height estimate assumes the lowest foot touches the ground: it is the
maximum over feet of (foot radius - (R_base p_foot_base)_z), which is exact
for whichever foot is in contact. Training noise is added (in physical units,
before scaling) only to the current velocity channels: base linear, base
angular, and joint velocities.

Actions are position-target offsets from the nominal joint configuration; the
policy is Gaussian with a state-independent learned log standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mlp
from .dynamics import frame_kinematics
from .model import RobotModel

LOCOMOTION = "locomotion"
RECOVERY = "recovery"
TASKS = (LOCOMOTION, RECOVERY)

VEL_SCALE = 0.5
HEIGHT_SCALE = 5.0


def obs_dim(task: str) -> int:
    if task == LOCOMOTION:
        return 97
    if task == RECOVERY:
        return 93
    raise ValueError(f"unknown task {task!r}")


def obs_layout(task: str) -> dict[str, slice]:
    """Named channel slices into the observation vector."""
    names = [("command", 3)] if task == LOCOMOTION else []
    names += [("gravity", 3), ("lin_vel", 3), ("ang_vel", 3),
              ("joint_pos", 12), ("joint_vel", 12),
              ("err_hist", 24), ("vel_hist", 24), ("prev_action", 12)]
    if task == LOCOMOTION:
        names.append(("height", 1))
    out, k = {}, 0
    for name, w in names:
        out[name] = slice(k, k + w)
        k += w
    assert k == obs_dim(task)
    return out


def obs_scales(task: str) -> np.ndarray:
    lay = obs_layout(task)
    s = np.ones(obs_dim(task))
    for name in ("lin_vel", "ang_vel", "joint_vel", "vel_hist"):
        s[lay[name]] = VEL_SCALE
    if task == LOCOMOTION:
        s[lay["height"]] = HEIGHT_SCALE
    return s


@dataclass
class NoiseConfig:
    lin_vel: float = 0.08   # m/s
    ang_vel: float = 0.16   # rad/s
    joint_vel: float = 0.16  # rad/s


def noise_sigma(task: str, cfg: NoiseConfig | None = None) -> np.ndarray:
    """Per-channel physical-unit noise sigma (zero outside velocity channels)."""
    cfg = cfg or NoiseConfig()
    lay = obs_layout(task)
    s = np.zeros(obs_dim(task))
    s[lay["lin_vel"]] = cfg.lin_vel
    s[lay["ang_vel"]] = cfg.ang_vel
    s[lay["joint_vel"]] = cfg.joint_vel
    return s


def height_estimate(model: RobotModel, q: np.ndarray) -> float:
    """Kinematic base height: exact when the lowest foot is on the ground."""
    cm = model.compiled()
    fk = frame_kinematics(model, q)
    base_r = fk.rot[0]
    base_p = fk.pos[0]
    best = -np.inf
    for ci in cm.foot_cols:
        b = cm.col_body[ci]
        center_w = fk.pos[b] + fk.rot[b] @ cm.col_pos[ci]
        p_base = base_r.T @ (center_w - base_p)
        best = max(best, cm.col_size[ci, 0] - (base_r @ p_base)[2])
    return float(best)


def build_observation(model: RobotModel, task: str, q: np.ndarray, u: np.ndarray,
                      command: np.ndarray | None,
                      err_hist: np.ndarray, vel_hist: np.ndarray,
                      prev_action: np.ndarray,
                      rng: np.random.Generator | None = None,
                      noise: NoiseConfig | None = None) -> np.ndarray:
    """Reference observation builder (the batched rollout kernel mirrors it).

    err_hist and vel_hist are (12, 2): taps at t-0.01 s and t-0.02 s.
    """
    lay = obs_layout(task)
    obs = np.zeros(obs_dim(task))
    fk = frame_kinematics(model, q)
    r0 = fk.rot[0]
    if task == LOCOMOTION:
        obs[lay["command"]] = command
    obs[lay["gravity"]] = r0.T @ np.array([0.0, 0.0, -1.0])
    obs[lay["lin_vel"]] = r0.T @ u[0:3]
    obs[lay["ang_vel"]] = u[3:6]
    obs[lay["joint_pos"]] = q[7:]
    obs[lay["joint_vel"]] = u[6:]
    obs[lay["err_hist"]] = err_hist.T.ravel()   # tap-major: 12 at t-0.01, 12 at t-0.02
    obs[lay["vel_hist"]] = vel_hist.T.ravel()
    obs[lay["prev_action"]] = prev_action
    if task == LOCOMOTION:
        obs[lay["height"]] = height_estimate(model, q)
    if rng is not None:
        obs += rng.standard_normal(obs.size) * noise_sigma(task, noise)
    return obs * obs_scales(task)


# ---------------------------------------------------------------------------
# Gaussian policy

POLICY_SIZES_HIDDEN = (64, 64)
LOG_STD_INIT = float(np.log(0.3))


class GaussianPolicy:
    """Diagonal-Gaussian policy: mean from an MLP, state-independent log std.

    The flat parameter vector is (mean-net weights, log std); the Fisher
    product uses the Gauss-Newton form J^T diag(1/sigma^2) J on the mean
    block and the exact constant 2 I on the log-std block.
    """

    def __init__(self, obs_size: int, act_size: int = 12,
                 hidden: tuple[int, ...] = POLICY_SIZES_HIDDEN,
                 activation: str = "tanh",
                 log_std_init: float = LOG_STD_INIT,
                 seed: int = 0):
        self.sizes = (obs_size,) + tuple(hidden) + (act_size,)
        self.activation = activation
        self.obs_size = obs_size
        self.act_size = act_size
        rng = np.random.default_rng(seed)
        self._mean_flat = mlp.flatten(mlp.init_params(rng, self.sizes, scale_last=0.1))
        self._log_std = np.full(act_size, log_std_init)

    # -- parameter vector ---------------------------------------------------
    @property
    def n_mean(self) -> int:
        return self._mean_flat.size

    @property
    def n_params(self) -> int:
        return self._mean_flat.size + self.act_size

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self._mean_flat, self._log_std])

    def set_flat(self, vec: np.ndarray) -> None:
        if vec.shape != (self.n_params,):
            raise ValueError("parameter vector size mismatch")
        self._mean_flat = vec[:self.n_mean].copy()
        self._log_std = vec[self.n_mean:].copy()

    @property
    def log_std(self) -> np.ndarray:
        return self._log_std.copy()

    @property
    def std(self) -> np.ndarray:
        return np.exp(self._log_std)

    def _params(self):
        return mlp.unflatten(self._mean_flat, self.sizes)

    # -- distribution -------------------------------------------------------
    def mean(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic action(s). obs (d,) -> (act,), (n, d) -> (n, act)."""
        single = obs.ndim == 1
        out = mlp.forward(self._params(), np.atleast_2d(obs), self.activation)
        return out[0] if single else out

    def sample(self, obs: np.ndarray, rng: np.random.Generator
               ) -> tuple[np.ndarray, np.ndarray]:
        """Draw actions and their log probabilities."""
        mu = self.mean(np.atleast_2d(obs))
        a = mu + rng.standard_normal(mu.shape) * self.std
        lp = self.log_prob(np.atleast_2d(obs), a, mean=mu)
        if obs.ndim == 1:
            return a[0], lp[0]
        return a, lp

    def log_prob(self, obs: np.ndarray, act: np.ndarray,
                 mean: np.ndarray | None = None) -> np.ndarray:
        mu = self.mean(obs) if mean is None else mean
        z = (act - mu) / self.std
        return (-0.5 * np.sum(z * z, axis=-1)
                - np.sum(self._log_std)
                - 0.5 * self.act_size * np.log(2.0 * np.pi))

    def entropy(self) -> float:
        return float(np.sum(self._log_std) +
                     0.5 * self.act_size * (1.0 + np.log(2.0 * np.pi)))

    def kl(self, obs: np.ndarray, old_mean: np.ndarray, old_log_std: np.ndarray
           ) -> float:
        """Mean KL(old || current) over a batch of observations."""
        mu = self.mean(obs)
        var = np.exp(2.0 * self._log_std)
        old_var = np.exp(2.0 * old_log_std)
        per = (self._log_std - old_log_std
               + (old_var + (mu - old_mean) ** 2) / (2.0 * var) - 0.5)
        return float(np.mean(np.sum(per, axis=-1)))

    # -- gradients ----------------------------------------------------------
    def logp_weighted_grad(self, obs: np.ndarray, act: np.ndarray,
                           weights: np.ndarray) -> np.ndarray:
        """Gradient of (1/n) sum_i w_i log pi(a_i | s_i) w.r.t. flat params."""
        n = len(obs)
        params = self._params()
        mu, cache = mlp.forward_cache(params, obs, self.activation)
        inv_var = np.exp(-2.0 * self._log_std)
        dmu = (act - mu) * inv_var * (weights[:, None] / n)
        grads, _ = mlp.backward(params, cache, dmu, self.activation)
        z2 = ((act - mu) ** 2) * inv_var
        dls = np.sum((z2 - 1.0) * (weights[:, None] / n), axis=0)
        return np.concatenate([mlp.flatten(grads), dls])

    def fisher_vector_product(self, obs: np.ndarray, vec: np.ndarray,
                              damping: float = 0.0) -> np.ndarray:
        """F v for the mean KL at the current parameters (Gauss-Newton form)."""
        n = len(obs)
        params = self._params()
        v_mean = mlp.unflatten(vec[:self.n_mean], self.sizes)
        jv = mlp.jvp(params, obs, v_mean, self.activation)
        inv_var = np.exp(-2.0 * self._log_std)
        _, cache = mlp.forward_cache(params, obs, self.activation)
        grads, _ = mlp.backward(params, cache, jv * inv_var / n, self.activation)
        out_mean = mlp.flatten(grads)
        out_std = 2.0 * vec[self.n_mean:]
        out = np.concatenate([out_mean, out_std])
        if damping:
            out = out + damping * vec
        return out

    # -- persistence ----------------------------------------------------------
    def state_dict(self) -> dict:
        return dict(sizes=list(self.sizes), activation=self.activation,
                    mean_flat=self._mean_flat.copy(), log_std=self._log_std.copy())

    @classmethod
    def from_state(cls, state: dict) -> "GaussianPolicy":
        sizes = tuple(int(s) for s in state["sizes"])
        pol = cls(sizes[0], sizes[-1], hidden=sizes[1:-1],
                  activation=str(state["activation"]))
        pol._mean_flat = np.asarray(state["mean_flat"], float).copy()
        pol._log_std = np.asarray(state["log_std"], float).copy()
        return pol


def action_to_target(nominal_q: np.ndarray, action: np.ndarray,
                     limit_lo: np.ndarray, limit_hi: np.ndarray) -> np.ndarray:
    """Map a policy action (offset) to a clipped joint position target."""
    return np.clip(nominal_q + action, limit_lo, limit_hi)
