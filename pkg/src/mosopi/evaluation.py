"""Replay storage, critics, TD regression targets, and advantage estimators.

Two partial-evaluation strategies are provided for the critic phase:

  * m regressions: fit the critic toward one-step TD targets, copy it into
    the target net, repeat m times (partial_eval_m_regressions);
  * m-step rollouts: single regression toward m-step return targets with
    per-step importance weights capped at 1 (mstep_retrace_targets).

Convention: critics consume already-encoded actions; use
policy.action_input to encode raw actions (identity for continuous
actions, one-hot for discrete ones).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Adam, Mlp, clip_gradients, mlp_from_payload, mlp_payload


@dataclass
class Transition:
    state: np.ndarray
    action: object
    reward: float
    next_state: np.ndarray
    done: bool
    truncated: bool = False
    log_prob: float = 0.0
    policy_id: int = 0


def _identity(x):
    return x


class ReplayBuffer:
    """Fixed-capacity ring buffer with strictly FIFO eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self._slots = [None] * self.capacity
        self._count = 0

    def __len__(self):
        return min(self._count, self.capacity)

    @property
    def inserted(self) -> int:
        return self._count

    def push(self, transition: Transition):
        self._slots[self._count % self.capacity] = transition
        self._count += 1

    def get(self, abs_index: int) -> Transition:
        lo = max(0, self._count - self.capacity)
        if not lo <= abs_index < self._count:
            raise IndexError(f"transition {abs_index} not stored (have [{lo}, {self._count}))")
        return self._slots[abs_index % self.capacity]

    def sample(self, n: int, rng) -> list:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        lo = max(0, self._count - self.capacity)
        ids = rng.integers(lo, self._count, size=n)
        return [self._slots[i % self.capacity] for i in ids]

    def sample_arrays(self, n: int, rng) -> dict:
        return stack_transitions(self.sample(n, rng))

    def sample_windows(self, n: int, m: int, rng) -> list:
        """n windows of up to m consecutive same-episode transitions."""
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        lo = max(0, self._count - self.capacity)
        starts = rng.integers(lo, self._count, size=n)
        windows = []
        for s in starts:
            window = []
            for k in range(s, min(s + m, self._count)):
                t = self._slots[k % self.capacity]
                window.append(t)
                if t.done or t.truncated:
                    break
            windows.append(window)
        return windows


def stack_transitions(transitions) -> dict:
    if not transitions:
        raise ValueError("empty transition batch")
    return {
        "states": np.stack([np.asarray(t.state, dtype=np.float64) for t in transitions]),
        "actions": np.stack([np.asarray(t.action) for t in transitions]),
        "rewards": np.array([t.reward for t in transitions], dtype=np.float64),
        "next_states": np.stack(
            [np.asarray(t.next_state, dtype=np.float64) for t in transitions]
        ),
        "dones": np.array([t.done for t in transitions], dtype=bool),
        "truncateds": np.array([t.truncated for t in transitions], dtype=bool),
        "log_probs": np.array([t.log_prob for t in transitions], dtype=np.float64),
        "policy_ids": np.array([t.policy_id for t in transitions], dtype=np.int64),
    }


class QFunction:
    """State-action critic: an Mlp over featurized (state, action) pairs.

    feature_fn(states, encoded_actions) -> net input rows; the default is
    plain concatenation.  The target-network pattern uses copy_from, i.e.
    whole-parameter assignment, never incremental mixing.
    """

    def __init__(self, net: Mlp, feature_fn=None):
        self.net = net
        self.feature_fn = feature_fn

    @classmethod
    def for_dims(cls, state_dim, action_input_dim, hidden=(400, 300), activation="relu", rng=0):
        widths = [state_dim + action_input_dim, *hidden, 1]
        acts = [activation] * len(hidden) + ["linear"]
        return cls(Mlp(widths, acts, rng=rng))

    def features(self, states, encoded_actions):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        encoded_actions = np.atleast_2d(np.asarray(encoded_actions, dtype=np.float64))
        if self.feature_fn is not None:
            return self.feature_fn(states, encoded_actions)
        return np.concatenate([states, encoded_actions], axis=1)

    def values(self, states, encoded_actions) -> np.ndarray:
        return self.net.forward(self.features(states, encoded_actions)).ravel()

    @property
    def params(self):
        return self.net.params

    def copy(self) -> "QFunction":
        return QFunction(self.net.copy(), self.feature_fn)

    def copy_from(self, other: "QFunction"):
        self.net.copy_from(other.net)

    def save(self, path):
        np.savez(path, **mlp_payload(self.net))

    @classmethod
    def load(cls, path, feature_fn=None):
        with np.load(path, allow_pickle=False) as data:
            return cls(mlp_from_payload(data), feature_fn)


class MinPairQ:
    """Elementwise minimum of two critics; used for dual-critic targets."""

    def __init__(self, first: QFunction, second: QFunction):
        self.first = first
        self.second = second

    def values(self, states, encoded_actions):
        return np.minimum(
            self.first.values(states, encoded_actions),
            self.second.values(states, encoded_actions),
        )


class ValueFunction:
    """State-value net for the on-policy baseline."""

    def __init__(self, net: Mlp):
        self.net = net

    @classmethod
    def for_dims(cls, state_dim, hidden=(64, 64), activation="tanh", rng=0):
        widths = [state_dim, *hidden, 1]
        acts = [activation] * len(hidden) + ["linear"]
        return cls(Mlp(widths, acts, rng=rng))

    def values(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.net.forward(states).ravel()

    @property
    def params(self):
        return self.net.params


def expected_q(q, policy, states, n_samples, rng) -> np.ndarray:
    """Monte-Carlo estimate of E_{a ~ pi(.|s)} Q(s, a) per state row."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    acts = policy.sample_batch(states, n_samples, rng)
    flat = acts.reshape((n_samples * states.shape[0],) + acts.shape[2:])
    enc = policy.action_input(flat)
    tiled = np.tile(states, (n_samples, 1))
    return q.values(tiled, enc).reshape(n_samples, states.shape[0]).mean(axis=0)


def td_target(batch, policy, target_q, gamma, n_expect, rng) -> np.ndarray:
    """One-step regression targets y = r + gamma * E_pi targetQ(s', .).

    The expectation over next actions is a Monte-Carlo average of n_expect
    policy samples; y = r exactly on terminal transitions.
    """
    if n_expect < 1:
        raise ValueError(f"n_expect must be >= 1, got {n_expect}")
    rewards = batch["rewards"]
    if rewards.size == 0:
        raise ValueError("empty batch")
    boot = expected_q(target_q, policy, batch["next_states"], n_expect, rng)
    return rewards + gamma * np.where(batch["dones"], 0.0, boot)


def q_regression_step(qnet, states, encoded_actions, targets, optimizer, grad_clip=None):
    """One minibatch MSE step; returns the pre-step loss."""
    feats = qnet.features(states, encoded_actions)
    pred = qnet.net.forward(feats).ravel()
    err = pred - targets
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite critic loss {loss}")
    grads = qnet.net.backward((2.0 / err.size) * err[:, None])
    if grad_clip is not None:
        clip_gradients(grads, grad_clip)
    optimizer.step(qnet.params, grads)
    return loss


def fit_q_once(
    qnet,
    target_q,
    policy,
    buffer,
    q_steps,
    batch_size,
    optimizer,
    gamma,
    n_expect=8,
    rng=None,
    grad_clip=None,
    transform=None,
):
    """q_steps minibatch regressions of qnet toward td_target.

    policy and target_q are held fixed throughout: this is one application
    of the approximate evaluation operator.  transform, when given, maps
    raw stored states to network inputs (observation normalization).
    """
    if len(buffer) < batch_size:
        raise ValueError(
            f"buffer holds {len(buffer)} transitions, need at least {batch_size}"
        )
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    transform = transform or _identity
    for _ in range(q_steps):
        batch = buffer.sample_arrays(batch_size, rng)
        batch["states"] = transform(batch["states"])
        batch["next_states"] = transform(batch["next_states"])
        y = td_target(batch, policy, target_q, gamma, n_expect, rng)
        enc = policy.action_input(batch["actions"])
        q_regression_step(qnet, batch["states"], enc, y, optimizer, grad_clip)
    return qnet


def partial_eval_m_regressions(
    qnet,
    target_q,
    policy,
    buffer,
    m,
    q_steps,
    batch_size,
    optimizer,
    gamma,
    n_expect=8,
    rng=None,
    grad_clip=None,
    transform=None,
):
    """m successive TD regressions, syncing the target net after each.

    Approximates m applications of the evaluation operator for the fixed
    policy; m=1 is exactly fit_q_once plus one target sync.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    for _ in range(m):
        fit_q_once(
            qnet,
            target_q,
            policy,
            buffer,
            q_steps,
            batch_size,
            optimizer,
            gamma,
            n_expect=n_expect,
            rng=rng,
            grad_clip=grad_clip,
            transform=transform,
        )
        target_q.copy_from(qnet)
    return qnet


def mstep_retrace_targets(
    trajectory,
    policy_new,
    behavior_log_probs,
    q,
    gamma,
    m,
    n_expect=8,
    rng=None,
    transform=None,
):
    """m-step return targets with per-step importance weights capped at 1.

    For a window starting at i (the first action is conditioned on, so it
    carries no weight):

        y_i = sum_{t=0}^{w-1} gamma^t (prod_{j=1}^{t} c_{i+j}) r_{i+t}
              + gamma^w (prod_{j=1}^{w-1} c_{i+j}) E_pi Q(s_{i+w}, .)

    with c_k = min(1, pi_new(a_k|s_k) / behavior(a_k|s_k)) and w the window
    length (m, shortened at the trajectory end).  The bootstrap term is
    dropped when the window ends on a terminal transition.  Behavior equal
    to pi_new gives the plain uncorrected m-step return; m=1 reduces to the
    one-step TD target.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    n = len(trajectory)
    if n == 0:
        raise ValueError("empty trajectory")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    transform = transform or _identity
    batch = stack_transitions(trajectory)
    states = transform(batch["states"])
    next_states = transform(batch["next_states"])
    behavior_log_probs = np.asarray(behavior_log_probs, dtype=np.float64)
    if behavior_log_probs.shape != (n,):
        raise ValueError(f"need one behavior log-prob per transition, got {behavior_log_probs.shape}")
    new_lp = policy_new.log_probs(states, batch["actions"])
    weights = np.minimum(1.0, np.exp(new_lp - behavior_log_probs))
    boot = expected_q(q, policy_new, next_states, n_expect, rng)
    rewards = batch["rewards"]
    dones = batch["dones"]
    y = np.zeros(n)
    for i in range(n):
        acc = 0.0
        disc = 1.0
        w = 1.0
        terminal = False
        last = i
        for t in range(i, min(i + m, n)):
            if t > i:
                w *= weights[t]
            acc += disc * w * rewards[t]
            disc *= gamma
            last = t
            if dones[t]:
                terminal = True
                break
        if not terminal:
            acc += disc * w * boot[last]
        y[i] = acc
    return y


def retrace_window_targets(windows, policy_new, q, gamma, n_expect=8, rng=None,
                           transform=None) -> np.ndarray:
    """Start-state m-step targets for a batch of sampled windows.

    Equivalent to mstep_retrace_targets(w, ...)[0] for each window w, with
    behavior log-probs read from the stored transitions, but vectorized
    across the batch.  The bootstrap expectation is estimated once for all
    windows, so the rng draw count is independent of window contents.
    """
    if not windows or any(len(w) == 0 for w in windows):
        raise ValueError("windows must be non-empty")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    transform = transform or _identity
    lens = np.array([len(w) for w in windows])
    n_windows, max_len = len(windows), int(lens.max())

    flat = stack_transitions([t for w in windows for t in w])
    states = transform(flat["states"])
    next_states = transform(flat["next_states"])
    lp_new = policy_new.log_probs(states, flat["actions"])
    c_flat = np.minimum(1.0, np.exp(lp_new - flat["log_probs"]))

    rewards = np.zeros((n_windows, max_len))
    weights = np.ones((n_windows, max_len))
    mask = np.zeros((n_windows, max_len), dtype=bool)
    last_rows = np.zeros(n_windows, dtype=int)
    offset = 0
    for b, k in enumerate(lens):
        rewards[b, :k] = flat["rewards"][offset : offset + k]
        cw = c_flat[offset : offset + k].copy()
        cw[0] = 1.0  # the first action is conditioned on, not reweighted
        weights[b, :k] = np.cumprod(cw)
        mask[b, :k] = True
        last_rows[b] = offset + k - 1
        offset += k

    discounts = gamma ** np.arange(max_len)
    y = np.sum(mask * weights * rewards * discounts, axis=1)

    boot = expected_q(q, policy_new, next_states[last_rows], n_expect, rng)
    needs_boot = ~flat["dones"][last_rows]
    tail_weight = weights[np.arange(n_windows), lens - 1]
    return y + needs_boot * gamma**lens * tail_weight * boot


def mc_advantage(q, policy, states, actions, n_pol, rng) -> np.ndarray:
    """Advantage by Monte-Carlo centering of the critic under the policy:
    A(s, a) = Q(s, a) - (1/n_pol) sum_j Q(s, a_j), a_j ~ pi(.|s)."""
    if n_pol < 1:
        raise ValueError(f"n_pol must be >= 1, got {n_pol}")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    q_sa = q.values(states, policy.action_input(actions))
    baseline = expected_q(q, policy, states, n_pol, rng)
    return q_sa - baseline


def gae_advantage(trajectory, vnet, gamma, lam, transform=None) -> np.ndarray:
    """Lambda-weighted advantage over one collected segment.

    delta_i = r_i + gamma * v(s'_i) - v(s_i) with the bootstrap zeroed on
    terminal transitions; the recursion trace resets at episode boundaries
    (terminal or time-limit) while truncation keeps its bootstrap.
    """
    batch = stack_transitions(trajectory)
    transform = transform or _identity
    states = transform(batch["states"])
    next_states = transform(batch["next_states"])
    v = vnet.values(states)
    v_next = vnet.values(next_states)
    delta = batch["rewards"] + gamma * np.where(batch["dones"], 0.0, v_next) - v
    boundary = batch["dones"] | batch["truncateds"]
    adv = np.zeros(len(trajectory))
    acc = 0.0
    for i in range(len(trajectory) - 1, -1, -1):
        if boundary[i]:
            acc = 0.0
        acc = delta[i] + gamma * lam * acc
        adv[i] = acc
    return adv
