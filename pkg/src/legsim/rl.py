"""Trust-region policy search with generalized advantage estimation.

One training iteration: collect a fixed budget of transitions from a pool of
environments built on perturbed copies of the robot model, estimate advantages
with GAE against a learned value function, take one KL-constrained
natural-gradient policy step (conjugate gradient + backtracking line search),
refit the value function on bootstrapped empirical returns, and advance the
cost curriculum one notch.

Collection is sequential but ordered as if parallel: the batch is assembled
environment-major (all of environment 0's steps, then environment 1's, ...),
so the result does not depend on how the work would be scheduled across
workers. Episodes that outlive an iteration's budget are cut at the boundary,
bootstrapped with the value function, and resume in the next iteration.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from . import policy as P
from . import tasks as T
from .actuator import ActuatorNet
from .env import EnvConfig, LeggedEnv, ReplayPool, recovery_config
from .model import RobotModel, randomize_model


# ---------------------------------------------------------------------------
# returns and advantages

def discounted_return(rewards, gamma: float) -> float:
    """Sum of gamma^t * r_t over one reward sequence."""
    out = 0.0
    disc = 1.0
    for r in np.asarray(rewards, float):
        out += disc * r
        disc *= gamma
    return out


def gae_advantages(rew: np.ndarray, values: np.ndarray, next_values: np.ndarray,
                   done: np.ndarray, last: np.ndarray,
                   gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates over a flat batch of segments.

    done marks true failures (no bootstrap); last marks every segment
    boundary (failure, timeout, or batch cut), where the recursion restarts.
    next_values holds the value of the observation after each transition;
    lam=0 gives one-step TD residuals, lam=1 bootstrapped returns minus the
    baseline.
    """
    n = len(rew)
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        delta = rew[t] - values[t]
        if not done[t]:
            delta += gamma * next_values[t]
        acc = delta if last[t] else delta + gamma * lam * acc
        adv[t] = acc
    return adv


def bootstrapped_returns(rew: np.ndarray, next_values: np.ndarray,
                         done: np.ndarray, last: np.ndarray,
                         gamma: float) -> np.ndarray:
    """Empirical discounted returns; cut segments continue through the value
    estimate of the observation past the boundary (failures bootstrap zero)."""
    n = len(rew)
    ret = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        if last[t]:
            acc = 0.0 if done[t] else gamma * next_values[t]
        else:
            acc *= gamma
        acc += rew[t]
        ret[t] = acc
    return ret


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Shift/scale to zero mean and unit variance (constant batches map to 0)."""
    return (adv - np.mean(adv)) / (np.std(adv) + 1e-8)


# ---------------------------------------------------------------------------
# rollout collection

@dataclass
class RolloutBatch:
    """Flat transition arrays, environment-major, plus episode accounting.

    next_obs[t] is the observation produced by step t (same episode, before
    any reset); done flags true failures, last flags segment boundaries.
    episode_returns / episode_lengths cover episodes that finished during
    collection (discounted returns accumulate across batch cuts); head_rows
    indexes the first transition of every segment, where a bootstrapped
    return reads as an episode-return estimate even when nothing finished.
    """
    obs: np.ndarray
    act: np.ndarray
    logp: np.ndarray
    rew: np.ndarray
    done: np.ndarray
    last: np.ndarray
    next_obs: np.ndarray
    episode_returns: np.ndarray
    episode_lengths: np.ndarray
    head_rows: np.ndarray
    term_means: dict[str, float]

    @property
    def size(self) -> int:
        return len(self.rew)


class RolloutCollector:
    """Owns an environment pool and the episode state that persists between
    collect() calls. Each environment has its own action-noise stream, so a
    batch is a deterministic function of (seed, pool size, policy)."""

    def __init__(self, envs: list[LeggedEnv], gamma: float, seed: int = 0):
        self.envs = envs
        self.gamma = gamma
        ss = np.random.SeedSequence(seed)
        self.rngs = [np.random.default_rng(c) for c in ss.spawn(len(envs))]
        self._cur_obs: list[np.ndarray | None] = [None] * len(envs)
        self._ep_ret = np.zeros(len(envs))
        self._ep_disc = np.ones(len(envs))
        self._ep_len = np.zeros(len(envs), dtype=int)

    def set_curriculum(self, k_c: float) -> None:
        for env in self.envs:
            env.set_curriculum(k_c)

    def collect(self, policy: P.GaussianPolicy, n_transitions: int) -> RolloutBatch:
        n_envs = len(self.envs)
        steps = -(-n_transitions // n_envs) if n_transitions > 0 else 0
        total = steps * n_envs
        d_obs = policy.obs_size
        d_act = policy.act_size
        obs = np.zeros((total, d_obs))
        act = np.zeros((total, d_act))
        logp = np.zeros(total)
        rew = np.zeros(total)
        done = np.zeros(total, dtype=bool)
        last = np.zeros(total, dtype=bool)
        next_obs = np.zeros((total, d_obs))
        ep_returns: list[float] = []
        ep_lengths: list[int] = []
        head_rows: list[int] = []
        term_sums: dict[str, float] = {}

        k = 0
        for i, env in enumerate(self.envs):
            rng = self.rngs[i]
            for t in range(steps):
                if t == 0 or self._cur_obs[i] is None:
                    head_rows.append(k)
                if self._cur_obs[i] is None:
                    self._cur_obs[i] = env.reset()
                    self._ep_ret[i] = 0.0
                    self._ep_disc[i] = 1.0
                    self._ep_len[i] = 0
                o = self._cur_obs[i]
                a, lp = policy.sample(o, rng)
                o2, r, dn, timeout, br = env.step(a)
                obs[k] = o
                act[k] = a
                logp[k] = lp
                rew[k] = r
                done[k] = dn
                last[k] = dn or timeout or t == steps - 1
                next_obs[k] = o2
                for name, v in br.terms.items():
                    term_sums[name] = term_sums.get(name, 0.0) + v
                self._ep_ret[i] += self._ep_disc[i] * r
                self._ep_disc[i] *= self.gamma
                self._ep_len[i] += 1
                if dn or timeout:
                    ep_returns.append(self._ep_ret[i])
                    ep_lengths.append(int(self._ep_len[i]))
                    self._cur_obs[i] = None
                else:
                    self._cur_obs[i] = o2
                k += 1

        term_means = {name: v / total for name, v in term_sums.items()} if total else {}
        return RolloutBatch(obs, act, logp, rew, done, last, next_obs,
                            np.asarray(ep_returns), np.asarray(ep_lengths, dtype=int),
                            np.asarray(head_rows, dtype=int), term_means)


# ---------------------------------------------------------------------------
# value function

class ValueFunction:
    """State-value regressor: MLP with two 128-unit tanh layers, fit by Adam
    on mean squared error against empirical returns.

    The net regresses targets in normalized units (the target mean/std are
    refreshed from each fit batch); predict() maps back to return units, so
    the regression is well-conditioned however large the returns are.
    """

    def __init__(self, obs_size: int, hidden: tuple[int, ...] = (128, 128),
                 lr: float = 1e-3, seed: int = 0):
        self.sizes = (obs_size,) + tuple(hidden) + (1,)
        rng = np.random.default_rng(seed)
        self._flat = mlp.flatten(mlp.init_params(rng, self.sizes))
        self.opt = mlp.Adam(lr=lr)
        self._mu = 0.0
        self._sigma = 1.0

    def predict(self, obs: np.ndarray) -> np.ndarray:
        params = mlp.unflatten(self._flat, self.sizes)
        out = mlp.forward(params, np.atleast_2d(obs), "tanh")[:, 0]
        return self._mu + self._sigma * out

    def fit(self, obs: np.ndarray, targets: np.ndarray, epochs: int = 10,
            batch: int = 512, rng: np.random.Generator | None = None) -> float:
        """Minibatch regression; returns the post-fit mean squared error
        (in return units)."""
        rng = rng or np.random.default_rng(0)
        self._mu = float(np.mean(targets))
        self._sigma = max(float(np.std(targets)), 1e-6)
        t_norm = (targets - self._mu) / self._sigma
        n = len(obs)
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch):
                idx = order[lo:lo + batch]
                params = mlp.unflatten(self._flat, self.sizes)
                pred, cache = mlp.forward_cache(params, obs[idx], "tanh")
                err = pred[:, 0] - t_norm[idx]
                grads, _ = mlp.backward(params, cache,
                                        (2.0 / len(idx)) * err[:, None], "tanh")
                self._flat = self.opt.step(self._flat, mlp.flatten(grads))
        resid = self.predict(obs) - targets
        return float(np.mean(resid * resid))

    def state_dict(self) -> dict:
        return dict(sizes=list(self.sizes), flat=self._flat.copy(),
                    mu=self._mu, sigma=self._sigma,
                    adam_m=None if self.opt.m is None else self.opt.m.copy(),
                    adam_v=None if self.opt.v is None else self.opt.v.copy(),
                    adam_t=self.opt.t, lr=self.opt.lr)

    @classmethod
    def from_state(cls, state: dict) -> "ValueFunction":
        sizes = tuple(int(s) for s in state["sizes"])
        vf = cls(sizes[0], hidden=sizes[1:-1], lr=float(state.get("lr", 1e-3)))
        vf._flat = np.asarray(state["flat"], float).copy()
        vf._mu = float(state.get("mu", 0.0))
        vf._sigma = float(state.get("sigma", 1.0))
        if state.get("adam_m") is not None:
            vf.opt.m = np.asarray(state["adam_m"], float).copy()
            vf.opt.v = np.asarray(state["adam_v"], float).copy()
            vf.opt.t = int(state["adam_t"])
        return vf


def compute_advantages(batch: RolloutBatch, value_fn: ValueFunction,
                       gamma: float, lam: float, normalize: bool = True
                       ) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages (normalized per batch by default) and the bootstrapped
    empirical returns used as value-regression targets."""
    values = value_fn.predict(batch.obs)
    next_values = value_fn.predict(batch.next_obs)
    adv = gae_advantages(batch.rew, values, next_values, batch.done, batch.last,
                         gamma, lam)
    ret = bootstrapped_returns(batch.rew, next_values, batch.done, batch.last,
                               gamma)
    if normalize:
        adv = normalize_advantages(adv)
    return adv, ret


# ---------------------------------------------------------------------------
# trust-region update

def conjugate_gradient(matvec, b: np.ndarray, iters: int = 10,
                       tol: float = 1e-10) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A given only x -> A x.
    Stops after iters rounds or when the squared residual drops below tol."""
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = float(r @ r)
    for _ in range(iters):
        if rr < tol:
            break
        ap = matvec(p)
        alpha = rr / float(p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class TrpoStats:
    accepted: bool
    kl: float
    improvement: float
    expected_improvement: float
    grad_norm: float
    step_scale: float
    backtracks: int


def surrogate_loss(policy: P.GaussianPolicy, obs: np.ndarray, act: np.ndarray,
                   logp_old: np.ndarray, adv: np.ndarray) -> float:
    """Importance-weighted policy objective mean(exp(logp - logp_old) * adv)."""
    ratio = np.exp(policy.log_prob(obs, act) - logp_old)
    return float(np.mean(ratio * adv))


def trpo_update(policy: P.GaussianPolicy, obs: np.ndarray, act: np.ndarray,
                logp_old: np.ndarray, adv: np.ndarray, *,
                kl_limit: float = 0.01, cg_iters: int = 10,
                backtracks: int = 10, damping: float = 0.1) -> TrpoStats:
    """One KL-constrained natural-gradient step, in place.

    The conjugate-gradient solve uses the Fisher-vector product; the line
    search halves the step until mean KL <= kl_limit and the surrogate does
    not decrease. If no scale qualifies the parameters are restored unchanged
    (accepted=False).
    """
    g = policy.logp_weighted_grad(obs, act, adv)
    gnorm = float(np.linalg.norm(g))
    if gnorm < 1e-12:
        return TrpoStats(True, 0.0, 0.0, 0.0, gnorm, 0.0, 0)

    def fvp(v):
        return policy.fisher_vector_product(obs, v, damping)

    s = conjugate_gradient(fvp, g, cg_iters)
    shs = float(s @ fvp(s))
    if not np.isfinite(shs) or shs <= 0.0:
        return TrpoStats(False, 0.0, 0.0, 0.0, gnorm, 0.0, 0)
    beta = math.sqrt(2.0 * kl_limit / shs)
    expected = beta * float(g @ s)

    old_flat = policy.get_flat()
    old_mean = policy.mean(obs)
    old_log_std = policy.log_std
    l_old = float(np.mean(adv))  # ratio is 1 at the old parameters
    for i in range(backtracks):
        scale = 0.5 ** i
        policy.set_flat(old_flat + (scale * beta) * s)
        l_new = surrogate_loss(policy, obs, act, logp_old, adv)
        kl = policy.kl(obs, old_mean, old_log_std)
        if (np.isfinite(l_new) and np.isfinite(kl)
                and kl <= kl_limit and l_new - l_old >= 0.0):
            return TrpoStats(True, kl, l_new - l_old, expected, gnorm, scale, i)
    policy.set_flat(old_flat)
    return TrpoStats(False, 0.0, 0.0, expected, gnorm, 0.0, backtracks)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainingConfig:
    gamma: float = 0.9988
    lam: float = 0.95
    batch_transitions: int = 20000
    kl_limit: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtracks: int = 10
    value_epochs: int = 10
    value_batch: int = 512
    value_lr: float = 1e-3
    n_envs: int = 30
    randomize_models: bool = True
    plateau_window: int = 300
    plateau_threshold: float = 0.0   # 0 disables the plateau stop
    curriculum: T.CurriculumState = field(default_factory=T.CurriculumState)


def default_training_config(task: str) -> TrainingConfig:
    """Per-task defaults; the discount half-life is a few seconds for both
    control rates (0.9988 at 200 Hz, 0.993 at 20 Hz)."""
    if task == P.LOCOMOTION:
        return TrainingConfig(gamma=0.9988)
    if task == P.RECOVERY:
        return TrainingConfig(gamma=0.993)
    raise ValueError(f"unknown task {task!r}")


@dataclass
class IterationStats:
    iteration: int
    transitions: int
    episodes: int
    mean_return: float
    mean_length: float
    kl: float
    improvement: float
    accepted: bool
    value_loss: float
    k_c: float
    wall_time: float
    term_means: dict[str, float] = field(default_factory=dict)

    def as_line(self) -> str:
        return (f"iter={self.iteration} return={self.mean_return:.6f} "
                f"episodes={self.episodes} kl={self.kl:.3e} "
                f"improve={self.improvement:.3e} accepted={int(self.accepted)} "
                f"vloss={self.value_loss:.4e} k_c={self.k_c:.6f} "
                f"steps={self.transitions} wall={self.wall_time:.2f}")


def make_env_pool(model: RobotModel, env_config: EnvConfig, n_envs: int,
                  seed: int, actuator_net: ActuatorNet | None = None,
                  randomize_models: bool = True,
                  replay_pool: ReplayPool | None = None,
                  initial_pool: list | None = None) -> list[LeggedEnv]:
    """n_envs environments on independently perturbed copies of the model,
    with deterministic per-environment seeds."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_envs + 1)
    model_rng = np.random.default_rng(children[0])
    envs = []
    for i in range(n_envs):
        m = randomize_model(model, model_rng) if randomize_models else model
        env_seed = int(children[i + 1].generate_state(1)[0])
        envs.append(LeggedEnv(m, env_config, seed=env_seed,
                              actuator_net=actuator_net,
                              replay_pool=replay_pool,
                              initial_pool=initial_pool))
    return envs


class Trainer:
    """Owns the policy, value function, environment pool, and curriculum.

    run() iterates collect -> advantages -> policy step -> value fit ->
    curriculum advance, recording one IterationStats per iteration. Stops at
    the iteration budget or when the best mean return has improved by less
    than plateau_threshold over the last plateau_window iterations.
    """

    def __init__(self, model: RobotModel, task: str = P.LOCOMOTION,
                 config: TrainingConfig | None = None,
                 env_config: EnvConfig | None = None, seed: int = 0,
                 actuator_net: ActuatorNet | None = None,
                 n_drop_states: int = 100):
        self.task = task
        self.cfg = config or default_training_config(task)
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        s_policy, s_value, s_envs, s_collect, s_fit, s_drop = ss.spawn(6)

        if env_config is None:
            env_config = EnvConfig() if task == P.LOCOMOTION else recovery_config()
        self.env_config = env_config
        self.replay_pool = ReplayPool() if task == P.LOCOMOTION else None
        initial_pool = None
        if task == P.RECOVERY:
            initial_pool = T.recovery_initial_states(
                model, n_drop_states, seed=int(s_drop.generate_state(1)[0]))
        self.envs = make_env_pool(
            model, env_config, self.cfg.n_envs,
            int(s_envs.generate_state(1)[0]), actuator_net=actuator_net,
            randomize_models=self.cfg.randomize_models,
            replay_pool=self.replay_pool, initial_pool=initial_pool)
        self.collector = RolloutCollector(self.envs, self.cfg.gamma,
                                          seed=int(s_collect.generate_state(1)[0]))

        d = P.obs_dim(task)
        self.policy = P.GaussianPolicy(d, model.nj,
                                       seed=int(s_policy.generate_state(1)[0]))
        self.value = ValueFunction(d, lr=self.cfg.value_lr,
                                   seed=int(s_value.generate_state(1)[0]))
        self._fit_rng = np.random.default_rng(s_fit)
        self.curriculum = self.cfg.curriculum
        self.curve: list[IterationStats] = []

    @property
    def iteration(self) -> int:
        return self.curriculum.iteration

    def step(self) -> IterationStats:
        """One full training iteration."""
        t0 = time.perf_counter()
        cfg = self.cfg
        self.collector.set_curriculum(self.curriculum.k_c)
        batch = self.collector.collect(self.policy, cfg.batch_transitions)
        adv, vtarget = compute_advantages(batch, self.value, cfg.gamma, cfg.lam)
        tstats = trpo_update(self.policy, batch.obs, batch.act, batch.logp, adv,
                             kl_limit=cfg.kl_limit, cg_iters=cfg.cg_iters,
                             backtracks=cfg.backtracks, damping=cfg.cg_damping)
        vloss = self.value.fit(batch.obs, vtarget, epochs=cfg.value_epochs,
                               batch=cfg.value_batch, rng=self._fit_rng)
        if len(batch.episode_returns):
            mean_return = float(np.mean(batch.episode_returns))
        elif len(batch.head_rows):
            # no episode finished this iteration: estimate from the
            # bootstrapped returns at the segment heads
            mean_return = float(np.mean(vtarget[batch.head_rows]))
        else:
            mean_return = float("nan")
        stats = IterationStats(
            iteration=self.curriculum.iteration,
            transitions=batch.size,
            episodes=len(batch.episode_returns),
            mean_return=mean_return,
            mean_length=(float(np.mean(batch.episode_lengths))
                         if len(batch.episode_lengths) else float("nan")),
            kl=tstats.kl, improvement=tstats.improvement,
            accepted=tstats.accepted, value_loss=vloss,
            k_c=self.curriculum.k_c,
            wall_time=time.perf_counter() - t0,
            term_means=batch.term_means)
        self.curriculum = self.curriculum.advanced()
        self.curve.append(stats)
        return stats

    def _plateaued(self) -> bool:
        cfg = self.cfg
        if cfg.plateau_threshold <= 0.0 or len(self.curve) <= cfg.plateau_window:
            return False
        returns = np.array([s.mean_return for s in self.curve])
        best = np.fmax.accumulate(np.where(np.isnan(returns), -np.inf, returns))
        return bool(best[-1] - best[-1 - cfg.plateau_window] < cfg.plateau_threshold)

    def run(self, iterations: int, on_iteration=None, log=None
            ) -> list[IterationStats]:
        """Train until the iteration budget or the plateau rule fires.
        on_iteration(trainer, stats) runs after every iteration (checkpoint
        hook); log(line) receives one machine-parsable line per iteration."""
        for _ in range(iterations):
            stats = self.step()
            if log is not None:
                log(stats.as_line())
            if on_iteration is not None:
                on_iteration(self, stats)
            if self._plateaued():
                break
        return self.curve

    # -- persistence ----------------------------------------------------------
    def state_dict(self) -> dict:
        return dict(task=self.task,
                    policy=self.policy.state_dict(),
                    value=self.value.state_dict(),
                    k_c=self.curriculum.k_c,
                    k_d=self.curriculum.k_d,
                    iteration=self.curriculum.iteration)

    def load_state(self, state: dict) -> None:
        if state["task"] != self.task:
            raise ValueError("checkpoint task does not match trainer task")
        self.policy = P.GaussianPolicy.from_state(state["policy"])
        self.value = ValueFunction.from_state(state["value"])
        self.curriculum = T.CurriculumState(
            k_c=float(state["k_c"]), k_d=float(state["k_d"]),
            iteration=int(state["iteration"]))
