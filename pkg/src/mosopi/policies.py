"""Stochastic policies and the clipped-surrogate policy loss.

Both policy classes share the same surface: sample / log_probs /
mean_action, logprob_grads for weighted score backprop, action_input to
encode actions for a state-action critic, and copy / copy_from for frozen
reference snapshots.
"""

from __future__ import annotations

import numpy as np

from .nn import Mlp, mlp_from_payload, mlp_payload

LOG_2PI = float(np.log(2.0 * np.pi))
MAX_LOG_RATIO = 50.0


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {name}")
    return arr


class GaussianPolicy:
    """Diagonal Gaussian: state-dependent mean, state-independent log-std.

    The log-std vector is a learnable parameter clamped to [-20, 2]; the
    clamp is re-applied after every optimizer step (clamp_log_std) rather
    than through the gradient.
    """

    LOG_STD_MIN = -20.0
    LOG_STD_MAX = 2.0

    def __init__(
        self,
        state_dim,
        action_dim,
        hidden=(64, 64),
        activation="tanh",
        rng=0,
        log_std_init=0.0,
    ):
        widths = [state_dim, *hidden, action_dim]
        acts = [activation] * len(hidden) + ["linear"]
        self.mean_net = Mlp(widths, acts, rng=rng)
        self.log_std = np.full(action_dim, float(log_std_init))
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)

    @property
    def params(self):
        return self.mean_net.params + [self.log_std]

    def clamp_log_std(self):
        np.clip(self.log_std, self.LOG_STD_MIN, self.LOG_STD_MAX, out=self.log_std)

    def stds(self):
        return np.exp(np.clip(self.log_std, self.LOG_STD_MIN, self.LOG_STD_MAX))

    def _means(self, states):
        states = np.asarray(states, dtype=np.float64)
        mu = self.mean_net.forward(states)
        return _check_finite("policy mean", mu)

    def sample(self, state, rng):
        mu = self._means(state)
        std = self.stds()
        action = mu + std * rng.standard_normal(self.action_dim)
        return action, self._log_prob_given_mean(mu, action)

    def sample_batch(self, states, n_samples, rng):
        """n_samples actions per state; shape (n_samples, n_states, adim)."""
        mu = self._means(states)
        noise = rng.standard_normal((n_samples,) + mu.shape)
        return mu[None, :, :] + self.stds() * noise

    def _log_prob_given_mean(self, mu, actions):
        std = self.stds()
        z = (actions - mu) / std
        logs = np.sum(np.clip(self.log_std, self.LOG_STD_MIN, self.LOG_STD_MAX))
        return -0.5 * np.sum(z * z, axis=-1) - logs - 0.5 * self.action_dim * LOG_2PI

    def log_probs(self, states, actions):
        actions = np.asarray(actions, dtype=np.float64)
        mu = self._means(states)
        if actions.shape != mu.shape:
            raise ValueError(f"action shape {actions.shape} != mean shape {mu.shape}")
        return self._log_prob_given_mean(mu, actions)

    def log_prob(self, state, action):
        return float(self.log_probs(np.asarray(state)[None], np.asarray(action)[None])[0])

    def mean_actions(self, states):
        return self._means(states)

    def mean_action(self, state):
        return self._means(state)

    def entropy(self):
        """Differential entropy; independent of the state."""
        logs = np.clip(self.log_std, self.LOG_STD_MIN, self.LOG_STD_MAX)
        return float(np.sum(logs) + 0.5 * self.action_dim * (1.0 + LOG_2PI))

    def mean_entropy(self, states=None):
        return self.entropy()

    def logprob_grads(self, states, actions, coeffs):
        """Parameter gradients of sum_i coeffs[i] * log pi(a_i | s_i)."""
        actions = np.asarray(actions, dtype=np.float64)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        mu = self._means(states)
        std = self.stds()
        z = (actions - mu) / std
        grad_mu = coeffs[:, None] * z / std
        net_grads = self.mean_net.backward(grad_mu)
        grad_log_std = np.sum(coeffs[:, None] * (z * z - 1.0), axis=0)
        return net_grads + [grad_log_std]

    def action_input(self, actions):
        """Critic-side encoding of actions (identity for continuous)."""
        actions = np.asarray(actions, dtype=np.float64)
        return actions.reshape(-1, self.action_dim)

    @property
    def action_input_dim(self):
        return self.action_dim

    def copy(self):
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.mean_net = self.mean_net.copy()
        other.log_std = self.log_std.copy()
        other.state_dim = self.state_dim
        other.action_dim = self.action_dim
        return other

    def copy_from(self, other):
        self.mean_net.copy_from(other.mean_net)
        self.log_std[...] = other.log_std

    def save(self, path):
        payload = mlp_payload(self.mean_net, prefix="mean_")
        payload["log_std"] = self.log_std
        payload["kind"] = np.array("gaussian")
        np.savez(path, **payload)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            net = mlp_from_payload(data, prefix="mean_")
            log_std = np.array(data["log_std"])
        policy = cls.__new__(cls)
        policy.mean_net = net
        policy.log_std = log_std
        policy.state_dim = net.widths[0]
        policy.action_dim = net.widths[-1]
        return policy


class CategoricalPolicy:
    """Softmax policy over a finite action set; actions are integer indices."""

    def __init__(self, state_dim, n_actions, hidden=(64, 64), activation="tanh", rng=0):
        widths = [state_dim, *hidden, n_actions]
        acts = [activation] * len(hidden) + ["linear"]
        self.logits_net = Mlp(widths, acts, rng=rng)
        self.state_dim = int(state_dim)
        self.n_actions = int(n_actions)

    @property
    def params(self):
        return self.logits_net.params

    def clamp_log_std(self):
        pass

    def _logits(self, states):
        states = np.asarray(states, dtype=np.float64)
        z = self.logits_net.forward(states)
        return _check_finite("policy logits", z)

    @staticmethod
    def _log_softmax(z):
        z = z - np.max(z, axis=-1, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

    def probs(self, states):
        return np.exp(self._log_softmax(self._logits(states)))

    def sample(self, state, rng):
        ls = self._log_softmax(self._logits(state))
        p = np.exp(ls)
        action = int(np.searchsorted(np.cumsum(p), rng.random()))
        action = min(action, self.n_actions - 1)
        return action, float(ls[action])

    def sample_batch(self, states, n_samples, rng):
        """n_samples integer actions per state; shape (n_samples, n_states)."""
        p = self.probs(states)
        cum = np.cumsum(p, axis=1)
        u = rng.random((n_samples, p.shape[0]))
        idx = np.sum(u[:, :, None] > cum[None, :, :], axis=2)
        return np.minimum(idx, self.n_actions - 1)

    def log_probs(self, states, actions):
        actions = np.asarray(actions)
        ls = self._log_softmax(self._logits(states))
        if actions.ndim != 1 or actions.shape[0] != ls.shape[0]:
            raise ValueError(f"need one integer action per state, got {actions.shape}")
        return ls[np.arange(ls.shape[0]), actions.astype(int)]

    def log_prob(self, state, action):
        return float(self.log_probs(np.asarray(state)[None], np.array([action]))[0])

    def mean_action(self, state):
        """Highest-probability action (the deterministic evaluation choice)."""
        return int(np.argmax(self._logits(state)))

    def entropies(self, states):
        ls = self._log_softmax(self._logits(states))
        return -np.sum(np.exp(ls) * ls, axis=-1)

    def mean_entropy(self, states):
        return float(np.mean(self.entropies(states)))

    def logprob_grads(self, states, actions, coeffs):
        actions = np.asarray(actions).astype(int)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        p = self.probs(states)
        grad_logits = -p
        grad_logits[np.arange(p.shape[0]), actions] += 1.0
        grad_logits *= coeffs[:, None]
        return self.logits_net.backward(grad_logits)

    def action_input(self, actions):
        """Critic-side one-hot encoding of integer actions."""
        actions = np.asarray(actions).astype(int).ravel()
        out = np.zeros((actions.shape[0], self.n_actions))
        out[np.arange(actions.shape[0]), actions] = 1.0
        return out

    @property
    def action_input_dim(self):
        return self.n_actions

    def copy(self):
        other = CategoricalPolicy.__new__(CategoricalPolicy)
        other.logits_net = self.logits_net.copy()
        other.state_dim = self.state_dim
        other.n_actions = self.n_actions
        return other

    def copy_from(self, other):
        self.logits_net.copy_from(other.logits_net)

    def save(self, path):
        payload = mlp_payload(self.logits_net, prefix="logits_")
        payload["kind"] = np.array("categorical")
        np.savez(path, **payload)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            net = mlp_from_payload(data, prefix="logits_")
        policy = cls.__new__(cls)
        policy.logits_net = net
        policy.state_dim = net.widths[0]
        policy.n_actions = net.widths[-1]
        return policy


def load_policy(path):
    """Load either policy kind from a checkpoint written by save()."""
    with np.load(path, allow_pickle=False) as data:
        kind = str(data["kind"])
    if kind == "gaussian":
        return GaussianPolicy.load(path)
    if kind == "categorical":
        return CategoricalPolicy.load(path)
    raise ValueError(f"unknown policy kind {kind!r}")


def ppo_clip_loss(policy_new, old_log_probs, states, actions, advantages, epsilon):
    """Clipped-surrogate loss and its gradients w.r.t. policy_new.

    loss = -mean_i min(r_i A_i, clip(r_i, 1 - eps, 1 + eps) A_i) with
    r_i = exp(log pi_new(a_i|s_i) - old_log_probs[i]).  Gradients flow only
    through pi_new, and only for samples where the unclipped branch attains
    the min: the surrogate saturates at (1 + eps) A for positive advantages
    and (1 - eps) A for negative ones.  epsilon = inf recovers the plain
    importance-sampled surrogate.
    """
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    old_log_probs = np.asarray(old_log_probs, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    new_log_probs = policy_new.log_probs(states, actions)
    if not old_log_probs.shape == advantages.shape == new_log_probs.shape:
        raise ValueError(
            f"batch arrays misaligned: old {old_log_probs.shape}, "
            f"adv {advantages.shape}, new {new_log_probs.shape}"
        )
    gap = new_log_probs - old_log_probs
    worst = float(np.max(np.abs(gap)))
    if worst > MAX_LOG_RATIO:
        raise FloatingPointError(
            f"log-probability gap {worst:.1f} exceeds {MAX_LOG_RATIO}; "
            "the policy has collapsed away from its reference"
        )
    ratio = np.exp(gap)
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    surr = ratio * advantages
    surr_clipped = clipped * advantages
    n = ratio.shape[0]
    loss = -float(np.mean(np.minimum(surr, surr_clipped)))
    # gradient flows where the unclipped branch attains the min (ties safe:
    # inside the clip interval both branches coincide)
    active = surr <= surr_clipped
    coeffs = np.where(active, ratio * advantages, 0.0) * (-1.0 / n)
    grads = policy_new.logprob_grads(states, actions, coeffs)
    return loss, grads
