"""Exact dynamic-programming schemes with machine-checkable monotonicity.

All schemes iterate

    pi_{k+1} = improvement step on (pi_k, v_k)
    v_{k+1}  = m applications of the evaluation operator for pi_{k+1}

and differ only in the improvement step and in m.  Pure greedy improvement
with m = 1 is value iteration, m = infinity (exact evaluation) is policy
iteration.  Soft improvement steps only need to satisfy

    bellman_eval(pi_{k+1}, v_k) >= bellman_eval(pi_k, v_k)   elementwise,

which, together with bellman_eval(pi_0, v_0) >= v_0 at the start, forces
v_k to climb monotonically toward the optimum.  run_mosopi checks the
inequality at every iteration and refuses to continue on a violation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    TabularMdp,
    bellman_eval,
    bellman_opt,
    check_policy,
    check_value,
    greedy,
    one_step_backup,
    policy_value,
)

STOP_TOL = 1e-10
IMPROVEMENT_SLACK = 1e-12


@dataclass
class SchemeTrace:
    """Per-iteration record of a scheme run.

    values[k] is v_k (length K+1 including the start), policies[k] is the
    policy produced at iteration k (length K), improvement_gaps[k] is
    min_s [T_{pi_{k+1}} v_k - T_{pi_k} v_k](s) (nan when there is no
    predecessor policy), value_deltas[k] = ||v_{k+1} - v_k||_inf, and
    bellman_residuals[k] = ||v_k - v_star||_inf (nan when v_star unknown).
    """

    scheme: str
    values: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    improvement_gaps: list = field(default_factory=list)
    value_deltas: list = field(default_factory=list)
    bellman_residuals: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_iterations(self) -> int:
        return len(self.policies)

    @property
    def final_value(self) -> np.ndarray:
        return self.values[-1]

    @property
    def final_policy(self) -> np.ndarray:
        return self.policies[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["iteration", "improvement_gap", "bellman_residual", "value_delta"]
            )
            for k in range(self.n_iterations):
                writer.writerow(
                    [
                        k,
                        repr(float(self.improvement_gaps[k])),
                        repr(float(self.bellman_residuals[k])),
                        repr(float(self.value_deltas[k])),
                    ]
                )


class SoftGreedyRule:
    """Improvement step interface: produce pi_{k+1} from (pi_k, v_k)."""

    def improved_policy(
        self, mdp: TabularMdp, policy: np.ndarray, v: np.ndarray, k: int
    ) -> np.ndarray:
        raise NotImplementedError


class ExactGreedy(SoftGreedyRule):
    """Full greedy step; ignores the incumbent policy."""

    def improved_policy(self, mdp, policy, v, k):
        return greedy(mdp, v)


class CpiMixture(SoftGreedyRule):
    """Conservative mixture pi_{k+1} = (1 - a_k) pi_k + a_k greedy(v_k).

    alpha may be a constant in (0, 1], a sequence (held at its last entry
    once exhausted), or a callable k -> alpha_k.
    """

    def __init__(self, alpha=0.1):
        self.alpha = alpha

    def alpha_at(self, k: int) -> float:
        if callable(self.alpha):
            a = float(self.alpha(k))
        elif np.isscalar(self.alpha):
            a = float(self.alpha)
        else:
            seq = self.alpha
            a = float(seq[min(k, len(seq) - 1)])
        if not 0.0 < a <= 1.0:
            raise ValueError(f"mixture coefficient must lie in (0, 1], got {a}")
        return a

    def improved_policy(self, mdp, policy, v, k):
        a = self.alpha_at(k)
        return (1.0 - a) * policy + a * greedy(mdp, v)


class RatioClipGreedy(SoftGreedyRule):
    """Best policy whose probability ratios to the incumbent stay within
    [1 - epsilon, 1 + epsilon].

    Solved exactly per state by water filling: start every action at its
    lower cap, then pour the remaining mass onto actions in decreasing
    backup order up to their upper caps.  This tabular construction is a
    bridge to the clipped-surrogate policy update used by the neural lane;
    it is a definition made for this library, not a standard scheme.
    Actions outside the incumbent's support stay outside forever.
    """

    def __init__(self, epsilon: float):
        if not epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.epsilon = float(epsilon)

    def improved_policy(self, mdp, policy, v, k):
        backup = one_step_backup(mdp, v)
        lo = max(0.0, 1.0 - self.epsilon) * policy
        hi = (1.0 + self.epsilon) * policy
        out = lo.copy()
        for s in range(mdp.n_states):
            spare = 1.0 - lo[s].sum()
            # stable argsort on the negated backup: ties go to lower index
            for a in np.argsort(-backup[s], kind="stable"):
                if spare <= 0.0:
                    break
                add = min(spare, hi[s, a] - lo[s, a])
                out[s, a] += add
                spare -= add
            # water filling always has room: sum hi >= 1 whenever rows sum to 1
            out[s] /= out[s].sum()
        return out


def check_init(mdp: TabularMdp, pi0: np.ndarray, v0: np.ndarray, tol: float = 1e-12) -> bool:
    """Whether one evaluation sweep does not decrease v0 anywhere.

    The tolerance absorbs roundoff from the shift construction; it matches
    the slack used by the per-iteration monotonicity checks.
    """
    gap = bellman_eval(mdp, pi0, v0) - check_value(mdp, v0)
    return bool(np.min(gap) >= -tol)


def shift_constant(mdp: TabularMdp, pi0: np.ndarray, v0: np.ndarray) -> float:
    """Smallest uniform downward shift that makes (pi0, v0) admissible.

    c = max(0, max_s [v0 - T_{pi0} v0](s) / (1 - gamma)); subtracting c
    from v0 leaves the evaluation sweep's improvement at least 0 because a
    uniform shift of -c changes the sweep by -gamma * c.
    """
    violation = np.max(check_value(mdp, v0) - bellman_eval(mdp, pi0, v0))
    return max(0.0, violation / (1.0 - mdp.gamma))


def shift_init(mdp: TabularMdp, pi0: np.ndarray, v0: np.ndarray) -> np.ndarray:
    """v0 shifted down just enough to pass check_init."""
    return check_value(mdp, v0) - shift_constant(mdp, pi0, v0)


def _finish(trace: SchemeTrace, v_star) -> SchemeTrace:
    if v_star is not None:
        trace.bellman_residuals.append(float(np.max(np.abs(trace.values[-1] - v_star))))
    else:
        trace.bellman_residuals.append(float("nan"))
    return trace


def _record(trace, v, pi_prev, pi_next, v_next, mdp, v_star):
    if pi_prev is None:
        gap = float("nan")
    else:
        gap = float(
            np.min(bellman_eval(mdp, pi_next, v) - bellman_eval(mdp, pi_prev, v))
        )
    trace.policies.append(pi_next)
    trace.improvement_gaps.append(gap)
    trace.value_deltas.append(float(np.max(np.abs(v_next - v))))
    if v_star is not None:
        trace.bellman_residuals.append(float(np.max(np.abs(v - v_star))))
    else:
        trace.bellman_residuals.append(float("nan"))
    trace.values.append(v_next)


def run_pi(mdp: TabularMdp, v0, max_iter: int = 1000, v_star=None) -> SchemeTrace:
    """Policy iteration: greedy step, then exact evaluation by linear solve.

    Stops as soon as the greedy policy repeats.
    """
    v = check_value(mdp, v0)
    trace = SchemeTrace(scheme="pi", values=[v])
    pi_prev = None
    for _ in range(max_iter):
        pi = greedy(mdp, v)
        if pi_prev is not None and np.array_equal(pi, pi_prev):
            trace.converged = True
            break
        v_next = policy_value(mdp, pi)
        _record(trace, v, pi_prev, pi, v_next, mdp, v_star)
        v = v_next
        pi_prev = pi
    return _finish(trace, v_star)


def run_vi(
    mdp: TabularMdp, v0, max_iter: int = 100_000, tol: float = STOP_TOL, v_star=None
) -> SchemeTrace:
    """Value iteration: v_{k+1} = max-backup of v_k."""
    v = check_value(mdp, v0)
    trace = SchemeTrace(scheme="vi", values=[v])
    pi_prev = None
    for _ in range(max_iter):
        pi = greedy(mdp, v)
        v_next = bellman_opt(mdp, v)
        _record(trace, v, pi_prev, pi, v_next, mdp, v_star)
        pi_prev = pi
        if np.max(np.abs(v_next - v)) < tol:
            v = v_next
            trace.converged = True
            break
        v = v_next
    return _finish(trace, v_star)


def _repeat_eval(mdp, pi, v, m):
    for _ in range(m):
        v = bellman_eval(mdp, pi, v)
    return v


def run_mpi(
    mdp: TabularMdp,
    v0,
    m: int,
    max_iter: int = 100_000,
    tol: float = STOP_TOL,
    v_star=None,
) -> SchemeTrace:
    """Modified policy iteration: greedy step, then m evaluation sweeps.

    m = 1 reproduces run_vi bitwise (greedy evaluation of the backup equals
    the max backup); large m approaches run_pi.
    """
    if not (isinstance(m, (int, np.integer)) and m >= 1):
        raise ValueError(f"m must be a positive integer, got {m}")
    v = check_value(mdp, v0)
    trace = SchemeTrace(scheme=f"mpi(m={m})", values=[v])
    pi_prev = None
    for _ in range(max_iter):
        pi = greedy(mdp, v)
        v_next = _repeat_eval(mdp, pi, v, m)
        _record(trace, v, pi_prev, pi, v_next, mdp, v_star)
        pi_prev = pi
        if np.max(np.abs(v_next - v)) < tol:
            v = v_next
            trace.converged = True
            break
        v = v_next
    return _finish(trace, v_star)


def run_mosopi(
    mdp: TabularMdp,
    pi0,
    v0,
    m: int,
    rule: SoftGreedyRule,
    max_iter: int = 100_000,
    tol: float = STOP_TOL,
    v_star=None,
    slack: float = IMPROVEMENT_SLACK,
) -> SchemeTrace:
    """Soft greedy scheme: any rule-produced policy that does not decrease
    the one-sweep backup, then m evaluation sweeps.

    Requires check_init(mdp, pi0, v0); every iteration re-checks that the
    rule's policy improves the sweep and aborts loudly if it does not.
    With rule=ExactGreedy() the value sequence reproduces run_mpi bitwise.
    """
    if not (isinstance(m, (int, np.integer)) and m >= 1):
        raise ValueError(f"m must be a positive integer, got {m}")
    pi = check_policy(mdp, pi0)
    v = check_value(mdp, v0)
    if not check_init(mdp, pi, v, tol=slack):
        worst = float(np.min(bellman_eval(mdp, pi, v) - v))
        raise ValueError(
            f"(pi0, v0) violate the starting condition: one evaluation sweep "
            f"decreases v0 by {-worst:g} somewhere; shift_init repairs this"
        )
    trace = SchemeTrace(scheme=f"mosopi(m={m}, rule={type(rule).__name__})", values=[v])
    for k in range(max_iter):
        pi_next = check_policy(mdp, rule.improved_policy(mdp, pi, v, k))
        gap = float(np.min(bellman_eval(mdp, pi_next, v) - bellman_eval(mdp, pi, v)))
        if gap < -slack:
            raise RuntimeError(
                f"improvement rule {type(rule).__name__} decreased the sweep "
                f"by {-gap:g} at iteration {k} (allowed slack {slack:g})"
            )
        v_next = _repeat_eval(mdp, pi_next, v, m)
        _record(trace, v, pi, pi_next, v_next, mdp, v_star)
        pi = pi_next
        if np.max(np.abs(v_next - v)) < tol:
            v = v_next
            trace.converged = True
            break
        v = v_next
    return _finish(trace, v_star)


def verify_convergence_chain(
    mdp: TabularMdp, trace: SchemeTrace, v_star: np.ndarray, slack: float = IMPROVEMENT_SLACK
) -> list:
    """Check the monotone-convergence chain on a recorded run.

    For every iteration k:
      (a) one sweep under the new policy does not fall below v_k,
      (b) v_{k+1} >= v_k,
      (c) v_k <= v_star.
    Returns a list of human-readable violations (empty when clean).
    """
    problems = []
    for k in range(trace.n_iterations):
        v_k = trace.values[k]
        v_next = trace.values[k + 1]
        pi_next = trace.policies[k]
        sweep = bellman_eval(mdp, pi_next, v_k)
        worst = float(np.min(sweep - v_k))
        if worst < -slack:
            problems.append(f"iter {k}: sweep below v_k by {-worst:g}")
        worst = float(np.min(v_next - v_k))
        if worst < -slack:
            problems.append(f"iter {k}: v_{k + 1} below v_k by {-worst:g}")
        worst = float(np.max(v_k - v_star))
        if worst > slack:
            problems.append(f"iter {k}: v_k above v_star by {worst:g}")
    if trace.values:
        worst = float(np.max(trace.values[-1] - v_star))
        if worst > slack:
            problems.append(f"final value above v_star by {worst:g}")
    return problems
