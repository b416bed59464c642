"""Tabular MDP model and exact Bellman operator algebra.

Array conventions, all float64:

    value function v : (n_states,)
    Q table          : (n_states, n_actions)
    policy           : (n_states, n_actions), rows sum to 1

Operators:

    one_step_backup(v)[s, a] = r(s, a) + gamma * sum_s' P(s'|s, a) v(s')
    bellman_eval(pi, v)[s]   = sum_a pi(a|s) * one_step_backup(v)[s, a]
    bellman_opt(v)[s]        = max_a  one_step_backup(v)[s, a]

Every function is pure; inputs are never mutated.  bellman_opt and
bellman_eval share one_step_backup, so applying bellman_eval with the
greedy policy reproduces bellman_opt bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_SUM_TOL = 1e-12
FIXED_POINT_TOL = 1e-10


@dataclass
class TabularMdp:
    """Finite MDP with dense transition and reward tables.

    transition[s, a, s'] = P(s' | s, a); reward[s, a]; 0 < gamma < 1.
    """

    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        self.transition = np.ascontiguousarray(self.transition, dtype=np.float64)
        self.reward = np.ascontiguousarray(self.reward, dtype=np.float64)
        self.gamma = float(self.gamma)
        s, a = self.n_states, self.n_actions
        if s < 1 or a < 1:
            raise ValueError("need at least one state and one action")
        if self.transition.shape != (s, a, s):
            raise ValueError(
                f"transition shape {self.transition.shape} != {(s, a, s)}"
            )
        if self.reward.shape != (s, a):
            raise ValueError(f"reward shape {self.reward.shape} != {(s, a)}")
        if not np.all(np.isfinite(self.transition)):
            raise ValueError("non-finite transition probabilities")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("non-finite rewards")
        if np.any(self.transition < 0.0):
            raise ValueError("negative transition probabilities")
        row_err = np.max(np.abs(self.transition.sum(axis=2) - 1.0))
        if row_err > ROW_SUM_TOL:
            raise ValueError(f"transition rows must sum to 1 (max error {row_err:g})")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")

    @classmethod
    def from_arrays(cls, transition, reward, gamma) -> "TabularMdp":
        transition = np.asarray(transition, dtype=np.float64)
        reward = np.asarray(reward, dtype=np.float64)
        if transition.ndim != 3 or reward.ndim != 2:
            raise ValueError("transition must be 3-d and reward 2-d")
        s, a = reward.shape
        return cls(s, a, transition, reward, gamma)

    def save_text(self, path) -> None:
        """Write the MDP in the plain-text format read by load_text."""
        lines = [
            "# tabular mdp: header line is 'n_states n_actions gamma'",
            f"{self.n_states} {self.n_actions} {self.gamma!r}",
            f"# reward: {self.n_states} rows x {self.n_actions} cols",
        ]
        for s in range(self.n_states):
            lines.append(" ".join(repr(float(x)) for x in self.reward[s]))
        for a in range(self.n_actions):
            lines.append(
                f"# transition action {a}: row s gives P(. | s, a)"
            )
            for s in range(self.n_states):
                lines.append(" ".join(repr(float(x)) for x in self.transition[s, a]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_text(cls, path) -> "TabularMdp":
        with open(path) as fh:
            tokens = []
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if line:
                    tokens.extend(line.split())
        if len(tokens) < 3:
            raise ValueError(f"truncated mdp file {path}")
        s, a = int(tokens[0]), int(tokens[1])
        gamma = float(tokens[2])
        need = 3 + s * a + a * s * s
        if len(tokens) != need:
            raise ValueError(
                f"mdp file {path} has {len(tokens)} values, expected {need}"
            )
        flat = np.array([float(t) for t in tokens[3:]])
        reward = flat[: s * a].reshape(s, a)
        transition = flat[s * a :].reshape(a, s, s).transpose(1, 0, 2)
        return cls(s, a, transition, reward, gamma)


def check_value(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (mdp.n_states,):
        raise ValueError(f"value shape {v.shape} != {(mdp.n_states,)}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite value function")
    return v


def check_policy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.shape} != {(mdp.n_states, mdp.n_actions)}"
        )
    if np.any(policy < 0.0) or not np.all(np.isfinite(policy)):
        raise ValueError("policy rows must be finite and non-negative")
    row_err = np.max(np.abs(policy.sum(axis=1) - 1.0))
    if row_err > 1e-9:
        raise ValueError(f"policy rows must sum to 1 (max error {row_err:g})")
    return policy


def one_step_backup(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """Q table of the one-step look-ahead: r + gamma * P v."""
    v = check_value(mdp, v)
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def bellman_eval(mdp: TabularMdp, policy: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One application of the evaluation operator for the given policy."""
    policy = check_policy(mdp, policy)
    return np.sum(policy * one_step_backup(mdp, v), axis=1)


def bellman_opt(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """One application of the optimality operator: state-wise max backup."""
    return np.max(one_step_backup(mdp, v), axis=1)


def greedy(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """Deterministic greedy policy w.r.t. the one-step backup of v.

    Ties break toward the lowest action index (np.argmax convention), so
    the result is a deterministic function of v.
    """
    backup = one_step_backup(mdp, v)
    best = np.argmax(backup, axis=1)
    policy = np.zeros((mdp.n_states, mdp.n_actions))
    policy[np.arange(mdp.n_states), best] = 1.0
    return policy


def policy_value(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Exact fixed point of the evaluation operator via a direct linear solve.

    Solves (I - gamma * P_pi) v = r_pi and verifies the residual
    ||v - bellman_eval(pi, v)||_inf < 1e-10.
    """
    policy = check_policy(mdp, policy)
    # P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a),  r_pi[s] = sum_a pi(a|s) r(s, a)
    p_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = np.sum(policy * mdp.reward, axis=1)
    lhs = np.eye(mdp.n_states) - mdp.gamma * p_pi
    v = np.linalg.solve(lhs, r_pi)
    residual = np.max(np.abs(v - bellman_eval(mdp, policy, v)))
    if residual >= FIXED_POINT_TOL:
        raise RuntimeError(
            f"policy evaluation solve left residual {residual:g} >= {FIXED_POINT_TOL:g}"
        )
    return v


def q_from_v(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """Q table induced by a value function (alias of the one-step backup)."""
    return one_step_backup(mdp, v)


def advantage(q: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """Advantage table: q(s, a) minus the policy's average q at s."""
    q = np.asarray(q, dtype=np.float64)
    policy = np.asarray(policy, dtype=np.float64)
    if q.shape != policy.shape:
        raise ValueError(f"q shape {q.shape} != policy shape {policy.shape}")
    return q - np.sum(policy * q, axis=1, keepdims=True)
