"""Training loops: the replay-based actor-critic with clipped-surrogate
policy steps, and an on-policy clipped-surrogate baseline.

Both runners share the observation-normalization scheme, the event log,
and the mean-action evaluation helper.  A run is strictly sequential and
fully determined by (seed, config): every random draw flows from
generators spawned off the seed, so repeated runs produce identical logs.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .evaluation import (
    MinPairQ,
    QFunction,
    ReplayBuffer,
    Transition,
    ValueFunction,
    gae_advantage,
    mc_advantage,
    q_regression_step,
    retrace_window_targets,
    stack_transitions,
    td_target,
)
from .nn import Adam, clip_gradients
from .policies import CategoricalPolicy, GaussianPolicy, ppo_clip_loss

CRITIC_MODES = ("m_regressions", "mstep_retrace")


# ---------------------------------------------------------------------------
# observation normalization


class RunningStat:
    """Streaming per-dimension mean and standard deviation (Welford).

    Before two samples have been seen the std reports 1, so freshly
    initialized stats leave observations unchanged apart from the zero
    mean shift.
    """

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self._m2 = self._m2 + delta * (x - self.mean)

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(self._m2 / self.count)


def normalize_obs(state, running_stats: RunningStat):
    """(s - mean) / max(std, 1e-8) with the stats as they currently stand."""
    state = np.asarray(state, dtype=np.float64)
    return (state - running_stats.mean) / np.maximum(running_stats.std, 1e-8)


def _make_transform(stats):
    if stats is None:
        return lambda s: np.asarray(s, dtype=np.float64)
    return lambda s: normalize_obs(s, stats)


# ---------------------------------------------------------------------------
# run log


@dataclass
class RunLog:
    """Append-only record of one training run.

    Events (episode completions and evaluation points) are kept in arrival
    order; to_csv writes one row per event with columns
    step, episodic_return, eval_return, entropy.
    """

    seed: int
    algo: str
    env_name: str = ""
    rewards: list = field(default_factory=list)
    events: list = field(default_factory=list)
    halted: str = "max_steps"
    wall_clock: float = 0.0

    def log_reward(self, r: float):
        self.rewards.append(float(r))

    def log_episode(self, step: int, ep_return: float):
        self.events.append(("episode", int(step), float(ep_return)))

    def log_eval(self, step: int, eval_return: float, entropy: float):
        self.events.append(("eval", int(step), float(eval_return), float(entropy)))

    def episode_series(self):
        rows = [(e[1], e[2]) for e in self.events if e[0] == "episode"]
        steps = np.array([s for s, _ in rows], dtype=np.int64)
        return steps, np.array([r for _, r in rows])

    def eval_series(self):
        rows = [(e[1], e[2]) for e in self.events if e[0] == "eval"]
        steps = np.array([s for s, _ in rows], dtype=np.int64)
        return steps, np.array([r for _, r in rows])

    def last_eval(self) -> float:
        _, returns = self.eval_series()
        if returns.size == 0:
            raise ValueError("run logged no evaluation points")
        return float(returns[-1])

    def to_csv(self, path):
        lines = ["step,episodic_return,eval_return,entropy"]
        for event in self.events:
            if event[0] == "episode":
                lines.append(f"{event[1]},{event[2]!r},,")
            else:
                lines.append(f"{event[1]},,{event[2]!r},{event[3]!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# configs


@dataclass
class MoppoConfig:
    """Replay-based runner configuration; defaults follow the reference
    hyper-parameter table's Hopper column."""

    train_freq: int = 150
    m: int = 5
    q_steps: int = 50
    pol_steps: int = 500
    clip_ratio: float = 0.005
    buffer_size: int = 20_000
    batch_size: int = 250
    gamma: float = 0.99
    lr_critic: float = 1e-3
    lr_policy: float = 1e-4
    normalize_observations: bool = True
    dual_q: bool = False
    grad_clip: float = 0.5
    entropy_stop_threshold: float | None = None  # None: -1 nat/action dim (Gaussian)
    max_steps: int = 200_000
    critic_mode: str = "m_regressions"
    n_expect: int = 8
    n_pol: int = 8
    hidden_policy: tuple = (64, 64)
    hidden_critic: tuple = (400, 300)
    log_std_init: float = 0.0
    eval_every: int = 1000
    eval_episodes: int = 5

    def __post_init__(self):
        for name in ("train_freq", "m", "q_steps", "buffer_size", "batch_size",
                     "max_steps", "n_expect", "n_pol", "eval_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pol_steps < 0:
            raise ValueError(f"pol_steps must be >= 0, got {self.pol_steps}")
        if self.clip_ratio <= 0.0:
            raise ValueError(f"clip_ratio must be positive, got {self.clip_ratio}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.critic_mode not in CRITIC_MODES:
            raise ValueError(f"critic_mode must be one of {CRITIC_MODES}")
        self.hidden_policy = tuple(self.hidden_policy)
        self.hidden_critic = tuple(self.hidden_critic)


@dataclass
class PpoConfig:
    """On-policy baseline configuration."""

    horizon: int = 2048
    epochs: int = 10
    minibatch_size: int = 64
    clip_ratio: float = 0.2
    lam: float = 0.95
    gamma: float = 0.99
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    grad_clip: float = 0.5
    normalize_observations: bool = True
    normalize_advantages: bool = True
    hidden_policy: tuple = (64, 64)
    hidden_value: tuple = (64, 64)
    log_std_init: float = 0.0
    max_steps: int = 200_000
    eval_every: int = 1000
    eval_episodes: int = 5

    def __post_init__(self):
        for name in ("horizon", "epochs", "minibatch_size", "max_steps",
                     "eval_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.clip_ratio <= 0.0:
            raise ValueError(f"clip_ratio must be positive, got {self.clip_ratio}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        self.hidden_policy = tuple(self.hidden_policy)
        self.hidden_value = tuple(self.hidden_value)


# Config files use the hyper-parameter table's row names for the fields it
# covers; remaining fields go by their attribute names.
TABLE_KEY_TO_FIELD = {
    "train_freq": "train_freq",
    "m": "m",
    "q_steps": "q_steps",
    "pol_steps": "pol_steps",
    "clip ratio": "clip_ratio",
    "buffer size": "buffer_size",
    "batch size": "batch_size",
    "normalized obs.": "normalize_observations",
    "dual Q-Networks": "dual_q",
    "discount factor": "gamma",
    "gradient clipping": "grad_clip",
}
OPTIMIZER_KEYS = {"optimizer(Q)": "lr_critic", "optimizer(Policy)": "lr_policy"}


def _parse_optimizer(text: str) -> float:
    match = re.fullmatch(r"\s*Adam\(([^)]+)\)\s*", str(text))
    if not match:
        raise ValueError(f"cannot parse optimizer spec {text!r}; expected 'Adam(lr)'")
    return float(match.group(1))


def moppo_config_from_dict(raw: dict) -> MoppoConfig:
    known = {f.name for f in fields(MoppoConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key in TABLE_KEY_TO_FIELD:
            kwargs[TABLE_KEY_TO_FIELD[key]] = value
        elif key in OPTIMIZER_KEYS:
            kwargs[OPTIMIZER_KEYS[key]] = _parse_optimizer(value)
        elif key in known:
            kwargs[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return MoppoConfig(**kwargs)


def load_moppo_config(path) -> MoppoConfig:
    with open(path) as fh:
        return moppo_config_from_dict(json.load(fh))


def save_moppo_config(config: MoppoConfig, path):
    field_to_table = {v: k for k, v in TABLE_KEY_TO_FIELD.items()}
    out = {}
    for f in fields(MoppoConfig):
        value = getattr(config, f.name)
        if f.name == "lr_critic":
            out["optimizer(Q)"] = f"Adam({value})"
        elif f.name == "lr_policy":
            out["optimizer(Policy)"] = f"Adam({value})"
        elif f.name in field_to_table:
            out[field_to_table[f.name]] = value
        else:
            out[f.name] = value
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")


def load_ppo_config(path) -> PpoConfig:
    with open(path) as fh:
        raw = json.load(fh)
    known = {f.name for f in fields(PpoConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    return PpoConfig(**raw)


def save_ppo_config(config: PpoConfig, path):
    with open(path, "w") as fh:
        json.dump(asdict(config), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared runner pieces


def build_policy(env_spec, hidden, log_std_init, rng):
    if env_spec.discrete:
        return CategoricalPolicy(env_spec.state_dim, env_spec.n_actions,
                                 hidden=hidden, rng=rng)
    return GaussianPolicy(env_spec.state_dim, env_spec.action_dim, hidden=hidden,
                          rng=rng, log_std_init=log_std_init)


def evaluate_mean_action(policy, env, episodes, rng, transform=None):
    """Mean undiscounted return over episodes, acting with the mean action.

    Runs on a caller-provided environment instance and touches no training
    state; pass a transform that reads frozen normalization stats.
    """
    transform = transform or (lambda s: s)
    total = 0.0
    for _ in range(episodes):
        obs = env.reset(rng)
        done = truncated = False
        while not (done or truncated):
            action = policy.mean_action(transform(obs))
            obs, reward, done, truncated = env.step(action)
            total += reward
    return total / episodes


class _Collector:
    """Environment interaction bookkeeping shared by both runners:
    raw-observation storage, normalization-stat updates, episode returns,
    periodic mean-action evaluation."""

    def __init__(self, env, config, log, stats, env_rng, eval_rng, recent_cap=256):
        self.env = env
        self.config = config
        self.log = log
        self.stats = stats
        self.env_rng = env_rng
        self.eval_rng = eval_rng
        self.eval_env = env.clone()
        self.transform = _make_transform(stats)
        self.obs = env.reset(env_rng)
        self._track(self.obs)
        self.ep_return = 0.0
        self.step_count = 0
        self.recent = []
        self._recent_cap = recent_cap

    def _track(self, obs):
        if self.stats is not None:
            self.stats.update(obs)

    def policy_entropy(self, policy):
        if hasattr(policy, "entropy"):
            return policy.entropy()
        probe = np.asarray(self.recent[-self._recent_cap:])
        return policy.mean_entropy(self.transform(probe))

    def step(self, policy, action_rng) -> Transition:
        """One environment step with the current policy; logs, stores stats,
        runs the periodic evaluation, and resets finished episodes."""
        obs = self.obs
        self.recent.append(np.asarray(obs, dtype=np.float64))
        if len(self.recent) > self._recent_cap:
            self.recent.pop(0)
        action, log_prob = policy.sample(self.transform(obs), action_rng)
        next_obs, reward, done, truncated = self.env.step(action)
        self._track(next_obs)
        self.step_count += 1
        self.ep_return += reward
        self.log.log_reward(reward)
        transition = Transition(np.asarray(obs, dtype=np.float64), action,
                                float(reward),
                                np.asarray(next_obs, dtype=np.float64),
                                done=done, truncated=truncated,
                                log_prob=float(log_prob))
        if done or truncated:
            self.log.log_episode(self.step_count, self.ep_return)
            self.ep_return = 0.0
            self.obs = self.env.reset(self.env_rng)
            self._track(self.obs)
        else:
            self.obs = next_obs
        if self.step_count % self.config.eval_every == 0:
            score = evaluate_mean_action(policy, self.eval_env,
                                         self.config.eval_episodes,
                                         self.eval_rng, self.transform)
            self.log.log_eval(self.step_count, score, self.policy_entropy(policy))
        return transition


def _streams(seed, names):
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


# ---------------------------------------------------------------------------
# replay-based runner


def _critic_phase(qnets, targets, policy, buffer, config, opts, rng, transform):
    """Partial evaluation of the current policy.

    m_regressions: m rounds of q_steps TD fits, syncing targets after each
    round.  mstep_retrace: one regression of m*q_steps minibatches toward
    m-step window targets computed from the frozen targets, synced once.
    """
    target_values = MinPairQ(*targets) if len(targets) == 2 else targets[0]
    if config.critic_mode == "m_regressions":
        for _ in range(config.m):
            for _ in range(config.q_steps):
                batch = buffer.sample_arrays(config.batch_size, rng)
                states = transform(batch["states"])
                batch = dict(batch, states=states,
                             next_states=transform(batch["next_states"]))
                y = td_target(batch, policy, target_values, config.gamma,
                              config.n_expect, rng)
                enc = policy.action_input(batch["actions"])
                for qnet, opt in zip(qnets, opts):
                    q_regression_step(qnet, states, enc, y, opt, config.grad_clip)
            for qnet, target in zip(qnets, targets):
                target.copy_from(qnet)
    else:
        for _ in range(config.m * config.q_steps):
            windows = buffer.sample_windows(config.batch_size, config.m, rng)
            y = retrace_window_targets(windows, policy, target_values,
                                       config.gamma, config.n_expect, rng,
                                       transform)
            heads = stack_transitions([w[0] for w in windows])
            states = transform(heads["states"])
            enc = policy.action_input(heads["actions"])
            for qnet, opt in zip(qnets, opts):
                q_regression_step(qnet, states, enc, y, opt, config.grad_clip)
        for qnet, target in zip(qnets, targets):
            target.copy_from(qnet)
    return MinPairQ(*targets) if len(targets) == 2 else targets[0]


def run_moppo(env, config: MoppoConfig, seed: int, phase_callback=None,
              policy_step_hook=None) -> RunLog:
    """Replay-based loop: interact every step; every train_freq steps run the
    critic phase (partial evaluation of the current policy) and then
    pol_steps clipped-surrogate ascent steps against the frozen reference
    policy, syncing the reference once at the end of the phase.

    phase_callback(info) fires after each update phase with the live
    networks; policy_step_hook(phase, j, reference_policy) fires before
    each policy minibatch.  Both are instrumentation for tests and the
    harness and default to no-ops.
    """
    start = time.monotonic()
    rngs = _streams(seed, ["policy_init", "critic_init", "critic_init_b", "env",
                           "action", "critic", "policy_batch", "advantage", "eval"])
    log = RunLog(seed=seed, algo="moppo", env_name=type(env).__name__)

    policy = build_policy(env.spec, config.hidden_policy, config.log_std_init,
                          rngs["policy_init"])
    reference = policy.copy()  # the clipping anchor, synced per phase
    action_dim_in = policy.action_input_dim
    qnets = [QFunction.for_dims(env.spec.state_dim, action_dim_in,
                                config.hidden_critic, "relu", rngs["critic_init"])]
    if config.dual_q:
        qnets.append(QFunction.for_dims(env.spec.state_dim, action_dim_in,
                                        config.hidden_critic, "relu",
                                        rngs["critic_init_b"]))
    targets = [q.copy() for q in qnets]
    critic_opts = [Adam(q.params, config.lr_critic) for q in qnets]
    policy_opt = Adam(policy.params, config.lr_policy)

    stats = RunningStat(env.spec.state_dim) if config.normalize_observations else None
    buffer = ReplayBuffer(config.buffer_size)
    collector = _Collector(env, config, log, stats, rngs["env"], rngs["eval"])

    stop_threshold = config.entropy_stop_threshold
    if stop_threshold is None and hasattr(policy, "entropy"):
        stop_threshold = -1.0 * env.spec.action_dim

    phase_index = 0
    try:
        for t in range(1, config.max_steps + 1):
            transition = collector.step(policy, rngs["action"])
            transition.policy_id = phase_index
            buffer.push(transition)

            if t % config.train_freq != 0 or len(buffer) < config.batch_size:
                continue

            advantage_q = _critic_phase(qnets, targets, policy, buffer, config,
                                        critic_opts, rngs["critic"],
                                        collector.transform)
            last_batch_ids = None
            for j in range(config.pol_steps):
                if policy_step_hook is not None:
                    policy_step_hook(phase_index, j, reference)
                batch = buffer.sample_arrays(config.batch_size, rngs["policy_batch"])
                states = collector.transform(batch["states"])
                actions = batch["actions"]
                adv = mc_advantage(advantage_q, reference, states, actions,
                                   config.n_pol, rngs["advantage"])
                old_lp = reference.log_probs(states, actions)
                loss, grads = ppo_clip_loss(policy, old_lp, states, actions, adv,
                                            config.clip_ratio)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite policy loss {loss}")
                clip_gradients(grads, config.grad_clip)
                policy_opt.step(policy.params, grads)
                policy.clamp_log_std()
                last_batch_ids = batch["policy_ids"]
            reference.copy_from(policy)
            phase_index += 1

            entropy = collector.policy_entropy(policy)
            if phase_callback is not None:
                phase_callback({
                    "step": t,
                    "phase_index": phase_index,
                    "policy": policy,
                    "reference": reference,
                    "qnets": qnets,
                    "targets": targets,
                    "buffer": buffer,
                    "entropy": entropy,
                    "last_policy_batch_ids": last_batch_ids,
                })
            if stop_threshold is not None and entropy < stop_threshold:
                log.halted = "entropy_stop"
                break
    except FloatingPointError as exc:
        log.halted = f"non_finite: {exc}"
    log.wall_clock = time.monotonic() - start
    return log


# ---------------------------------------------------------------------------
# on-policy baseline


def _value_regression_step(vnet, states, targets, optimizer, grad_clip):
    pred = vnet.net.forward(states).ravel()
    err = pred - targets
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite value loss {loss}")
    grads = vnet.net.backward((2.0 / err.size) * err[:, None])
    if grad_clip is not None:
        clip_gradients(grads, grad_clip)
    optimizer.step(vnet.params, grads)
    return loss


def run_ppo(env, config: PpoConfig, seed: int) -> RunLog:
    """On-policy baseline: collect a fixed-horizon segment, compute
    lambda-weighted advantages with pre-update values, then run clipped
    surrogate epochs jointly with value regression on the lambda-returns.
    Segments are discarded after use."""
    start = time.monotonic()
    rngs = _streams(seed, ["policy_init", "value_init", "env", "action",
                           "shuffle", "eval"])
    log = RunLog(seed=seed, algo="ppo", env_name=type(env).__name__)

    policy = build_policy(env.spec, config.hidden_policy, config.log_std_init,
                          rngs["policy_init"])
    vnet = ValueFunction.for_dims(env.spec.state_dim, config.hidden_value,
                                  "tanh", rngs["value_init"])
    policy_opt = Adam(policy.params, config.lr_policy)
    value_opt = Adam(vnet.params, config.lr_value)

    stats = RunningStat(env.spec.state_dim) if config.normalize_observations else None
    collector = _Collector(env, config, log, stats, rngs["env"], rngs["eval"])

    try:
        while collector.step_count < config.max_steps:
            segment = []
            while (len(segment) < config.horizon
                   and collector.step_count < config.max_steps):
                segment.append(collector.step(policy, rngs["action"]))
            if len(segment) < config.minibatch_size:
                break

            adv = gae_advantage(segment, vnet, config.gamma, config.lam,
                                collector.transform)
            batch = stack_transitions(segment)
            states = collector.transform(batch["states"])
            actions = batch["actions"]
            old_lp = batch["log_probs"]
            returns = adv + vnet.values(states)  # lambda-returns, pre-update values
            if config.normalize_advantages:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)

            n = len(segment)
            for _ in range(config.epochs):
                order = rngs["shuffle"].permutation(n)
                for lo in range(0, n, config.minibatch_size):
                    idx = order[lo:lo + config.minibatch_size]
                    loss, grads = ppo_clip_loss(policy, old_lp[idx], states[idx],
                                                actions[idx], adv[idx],
                                                config.clip_ratio)
                    if not np.isfinite(loss):
                        raise FloatingPointError(f"non-finite policy loss {loss}")
                    clip_gradients(grads, config.grad_clip)
                    policy_opt.step(policy.params, grads)
                    policy.clamp_log_std()
                    _value_regression_step(vnet, states[idx], returns[idx],
                                           value_opt, config.grad_clip)
    except FloatingPointError as exc:
        log.halted = f"non_finite: {exc}"
    log.wall_clock = time.monotonic() - start
    return log
