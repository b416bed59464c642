"""Replay buffer, TD targets, partial evaluation, and advantage estimators.

Oracles used here:
  * Gauss-Hermite quadrature for the expectation over next actions in the
    one-step TD target (Gaussian policy, 1-d action);
  * exact tabular backup iteration for the m-regression procedure on a
    deterministic finite MDP with a tabular-capacity critic;
  * explicit windowed-sum formulas for the m-step importance-capped targets;
  * enumeration over discrete actions for the Monte-Carlo advantage;
  * a naive quadratic-time double loop for the lambda-weighted advantage.
"""

import numpy as np
import pytest
from scipy import stats

from mosopi.evaluation import (
    MinPairQ,
    QFunction,
    ReplayBuffer,
    Transition,
    ValueFunction,
    fit_q_once,
    gae_advantage,
    mc_advantage,
    mstep_retrace_targets,
    partial_eval_m_regressions,
    retrace_window_targets,
    stack_transitions,
    td_target,
)
from mosopi.nn import Adam, Mlp
from mosopi.policies import CategoricalPolicy, GaussianPolicy


def make_transition(i, state_dim=3, action=None, reward=None, done=False, truncated=False,
                    rng=None, log_prob=0.0):
    rng = rng or np.random.default_rng(i)
    return Transition(
        state=rng.normal(size=state_dim),
        action=action if action is not None else rng.normal(size=1),
        reward=float(reward) if reward is not None else float(rng.normal()),
        next_state=rng.normal(size=state_dim),
        done=done,
        truncated=truncated,
        log_prob=log_prob,
    )


def zeroed(net):
    for p in net.params:
        p *= 0.0
    return net


def constant_q(state_dim, action_dim, value):
    net = zeroed(Mlp([state_dim + action_dim, 1], ["linear"]))
    net.params[1][:] = value
    return QFunction(net)


# ---------------------------------------------------------------------------
# replay buffer


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=5)
    for i in range(8):
        buf.push(make_transition(i, reward=i))
    assert len(buf) == 5
    assert buf.inserted == 8
    for i in range(3, 8):
        assert buf.get(i).reward == i
    with pytest.raises(IndexError):
        buf.get(2)
    with pytest.raises(IndexError):
        buf.get(8)


def test_buffer_sampling_is_uniform():
    n_stored = 50
    buf = ReplayBuffer(capacity=n_stored)
    for i in range(n_stored):
        buf.push(make_transition(i, reward=i))
    rng = np.random.default_rng(0)
    draws = buf.sample(20000, rng)
    counts = np.bincount([int(t.reward) for t in draws], minlength=n_stored)
    assert counts.sum() == 20000
    result = stats.chisquare(counts)
    assert result.pvalue > 0.001


def test_buffer_sampling_covers_survivors_after_eviction():
    buf = ReplayBuffer(capacity=10)
    for i in range(25):
        buf.push(make_transition(i, reward=i))
    rng = np.random.default_rng(1)
    rewards = {int(t.reward) for t in buf.sample(5000, rng)}
    assert rewards == set(range(15, 25))


def test_buffer_windows_are_consecutive_and_stop_at_episode_end():
    buf = ReplayBuffer(capacity=32)
    for i in range(12):
        buf.push(make_transition(i, reward=i, done=(i == 4), truncated=(i == 9)))
    rng = np.random.default_rng(3)
    for window in buf.sample_windows(200, 5, rng):
        ids = [int(t.reward) for t in window]
        assert ids == list(range(ids[0], ids[0] + len(ids)))
        assert len(window) <= 5
        assert ids[-1] <= 11
        for t in window[:-1]:
            assert not t.done and not t.truncated
        if len(window) < 5 and ids[-1] != 11:
            assert window[-1].done or window[-1].truncated


def test_buffer_empty_raises():
    buf = ReplayBuffer(capacity=4)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        buf.sample(1, rng)
    with pytest.raises(ValueError):
        buf.sample_windows(1, 3, rng)
    with pytest.raises(ValueError):
        stack_transitions([])
    with pytest.raises(ValueError):
        ReplayBuffer(capacity=0)


# ---------------------------------------------------------------------------
# critics


def test_qfunction_default_features_are_concatenation():
    q = QFunction.for_dims(3, 2, hidden=(8,), activation="tanh", rng=0)
    states = np.random.default_rng(0).normal(size=(5, 3))
    acts = np.random.default_rng(1).normal(size=(5, 2))
    feats = q.features(states, acts)
    assert feats.shape == (5, 5)
    np.testing.assert_array_equal(feats, np.concatenate([states, acts], axis=1))
    assert q.values(states, acts).shape == (5,)


def test_qfunction_custom_feature_fn_is_used():
    def cross(states, acts):
        return np.einsum("bi,bj->bij", states, acts).reshape(states.shape[0], -1)

    q = QFunction(Mlp([6, 1], ["linear"], rng=0), feature_fn=cross)
    states = np.eye(3)[[0, 2]]
    acts = np.eye(2)[[1, 0]]
    feats = q.features(states, acts)
    assert feats.shape == (2, 6)
    assert feats[0, 1] == 1.0 and feats[0].sum() == 1.0


def test_qfunction_copy_and_target_sync():
    q = QFunction.for_dims(2, 1, hidden=(4,), rng=0)
    target = q.copy()
    q.params[0][0, 0] += 1.0
    assert target.params[0][0, 0] != q.params[0][0, 0]
    target.copy_from(q)
    for p, t in zip(q.params, target.params):
        np.testing.assert_array_equal(p, t)


def test_qfunction_save_load_roundtrip(tmp_path):
    q = QFunction.for_dims(3, 2, hidden=(5, 4), rng=7)
    path = tmp_path / "critic.npz"
    q.save(path)
    loaded = QFunction.load(path)
    states = np.random.default_rng(2).normal(size=(6, 3))
    acts = np.random.default_rng(3).normal(size=(6, 2))
    np.testing.assert_array_equal(q.values(states, acts), loaded.values(states, acts))


def test_min_pair_q_takes_elementwise_minimum():
    low = constant_q(2, 1, 1.0)
    high = constant_q(2, 1, 2.0)
    high.net.params[0][0, 0] = -10.0
    pair = MinPairQ(low, high)
    states = np.array([[0.0, 0.0], [1.0, 0.0]])
    acts = np.zeros((2, 1))
    got = pair.values(states, acts)
    np.testing.assert_array_equal(
        got, np.minimum(low.values(states, acts), high.values(states, acts))
    )
    assert got[0] == 1.0 and got[1] == -8.0


# ---------------------------------------------------------------------------
# one-step TD targets


def test_td_target_constant_critic_arithmetic():
    target_q = constant_q(2, 1, 2.0)
    policy = GaussianPolicy(2, 1, hidden=(4,), rng=0)
    batch = stack_transitions(
        [Transition(np.zeros(2), np.zeros(1), 1.0, np.ones(2), done=False)]
    )
    y = td_target(batch, policy, target_q, gamma=0.99, n_expect=8,
                  rng=np.random.default_rng(0))
    assert y.shape == (1,)
    assert y[0] == pytest.approx(2.98, abs=1e-12)


def test_td_target_terminal_is_reward_exactly():
    target_q = constant_q(2, 1, 1e6)
    policy = GaussianPolicy(2, 1, hidden=(4,), rng=0)
    batch = stack_transitions(
        [Transition(np.zeros(2), np.zeros(1), 0.125, np.ones(2), done=True)]
    )
    y = td_target(batch, policy, target_q, gamma=0.99, n_expect=8,
                  rng=np.random.default_rng(0))
    assert y[0] == 0.125


def test_td_target_matches_gauss_hermite_quadrature():
    rng = np.random.default_rng(11)
    policy = GaussianPolicy(2, 1, hidden=(8,), rng=4)
    q = QFunction.for_dims(2, 1, hidden=(16,), activation="tanh", rng=5)
    states = rng.normal(size=(4, 2))
    transitions = [
        Transition(np.zeros(2), np.zeros(1), float(rng.normal()), s, done=False)
        for s in states
    ]
    batch = stack_transitions(transitions)
    gamma = 0.9

    nodes, weights = np.polynomial.hermite.hermgauss(80)
    mus = policy.mean_actions(states)
    sigma = policy.stds()[0]
    exact = np.zeros(len(states))
    second = np.zeros(len(states))
    for i, s in enumerate(states):
        a = mus[i, 0] + np.sqrt(2.0) * sigma * nodes
        vals = q.values(np.tile(s, (len(a), 1)), a[:, None])
        exact[i] = np.sum(weights * vals) / np.sqrt(np.pi)
        second[i] = np.sum(weights * vals**2) / np.sqrt(np.pi)
    y_exact = batch["rewards"] + gamma * exact

    n_expect = 20000
    y_mc = td_target(batch, policy, q, gamma=gamma, n_expect=n_expect,
                     rng=np.random.default_rng(42))
    se = gamma * np.sqrt(np.maximum(second - exact**2, 0.0) / n_expect)
    assert np.all(np.abs(y_mc - y_exact) < 5.0 * se + 1e-9)


def test_td_target_validates_n_expect():
    policy = GaussianPolicy(2, 1, hidden=(4,), rng=0)
    batch = stack_transitions([make_transition(0, state_dim=2)])
    with pytest.raises(ValueError):
        td_target(batch, policy, constant_q(2, 1, 0.0), 0.99, 0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# critic regression


def test_fit_q_once_single_state_converges_to_target():
    # One state, one stored action, reward 1, gamma 0.5, frozen target critic
    # at zero: every regression target is exactly 1.
    state = np.zeros(1)
    action = np.array([0.3])
    buf = ReplayBuffer(capacity=128)
    for _ in range(100):
        buf.push(Transition(state, action, 1.0, state, done=False))
    qnet = QFunction.for_dims(1, 1, hidden=(32, 32), activation="relu", rng=0)
    target = QFunction(zeroed(qnet.net.copy()))
    policy = GaussianPolicy(1, 1, hidden=(4,), rng=1)
    opt = Adam(qnet.params, lr=1e-2)
    fit_q_once(qnet, target, policy, buf, q_steps=500, batch_size=32,
               optimizer=opt, gamma=0.5, n_expect=4, rng=0)
    got = qnet.values(state[None, :], action[None, :])[0]
    assert abs(got - 1.0) < 0.05


def test_fit_q_once_underfull_buffer_raises():
    buf = ReplayBuffer(capacity=8)
    buf.push(make_transition(0, state_dim=1))
    qnet = QFunction.for_dims(1, 1, hidden=(4,), rng=0)
    with pytest.raises(ValueError):
        fit_q_once(qnet, qnet.copy(), GaussianPolicy(1, 1, hidden=(4,), rng=0),
                   buf, q_steps=1, batch_size=4, optimizer=Adam(qnet.params, 1e-3),
                   gamma=0.9)


def test_fit_q_once_leaves_target_untouched():
    buf = ReplayBuffer(capacity=16)
    for i in range(16):
        buf.push(make_transition(i, state_dim=2))
    qnet = QFunction.for_dims(2, 1, hidden=(8,), rng=0)
    target = qnet.copy()
    before = [p.copy() for p in target.params]
    fit_q_once(qnet, target, GaussianPolicy(2, 1, hidden=(4,), rng=3), buf,
               q_steps=20, batch_size=8, optimizer=Adam(qnet.params, 1e-3), gamma=0.9)
    for p, b in zip(target.params, before):
        np.testing.assert_array_equal(p, b)


class TablePolicy:
    """Deterministic discrete policy over one-hot states, for exact tests."""

    def __init__(self, action_of_state, n_actions):
        self.action_of_state = np.asarray(action_of_state)
        self.n_actions = n_actions

    def sample_batch(self, states, n_samples, rng):
        acts = self.action_of_state[np.asarray(states).argmax(axis=1)]
        return np.tile(acts, (n_samples, 1))

    def action_input(self, actions):
        actions = np.asarray(actions).reshape(-1).astype(int)
        out = np.zeros((actions.size, self.n_actions))
        out[np.arange(actions.size), actions] = 1.0
        return out


def test_partial_eval_m_regressions_matches_tabular_operator_power():
    # Deterministic 4-state 2-action MDP, deterministic policy, critic with
    # one parameter per (state, action) pair: the m-regression procedure must
    # reproduce m exact evaluation backups from the zero critic.
    n_states, n_actions, gamma, m = 4, 2, 0.9, 3
    next_state = np.array([[1, 2], [3, 0], [0, 1], [2, 3]])
    reward = np.array([[1.0, 0.0], [0.5, 0.25], [0.0, 1.0], [0.75, 0.5]])
    pol = np.array([0, 1, 1, 0])

    q_exact = np.zeros((n_states, n_actions))
    for _ in range(m):
        ns = next_state
        q_exact = reward + gamma * q_exact[ns, pol[ns]]

    def cross(states, acts):
        return np.einsum("bi,bj->bij", states, acts).reshape(states.shape[0], -1)

    qnet = QFunction(zeroed(Mlp([n_states * n_actions, 1], ["linear"], rng=0)), cross)
    target = qnet.copy()
    policy = TablePolicy(pol, n_actions)
    eye = np.eye(n_states)

    buf = ReplayBuffer(capacity=64)
    for _ in range(4):
        for s in range(n_states):
            for a in range(n_actions):
                buf.push(Transition(eye[s], a, reward[s, a], eye[next_state[s, a]],
                                    done=False))
    opt = Adam(qnet.params, lr=0.05)
    partial_eval_m_regressions(qnet, target, policy, buf, m=m, q_steps=400,
                               batch_size=16, optimizer=opt, gamma=gamma,
                               n_expect=1, rng=0)

    states = np.repeat(eye, n_actions, axis=0)
    acts = policy.action_input(np.tile(np.arange(n_actions), n_states))
    got = qnet.values(states, acts).reshape(n_states, n_actions)
    assert np.max(np.abs(got - q_exact)) < 1e-2


def test_partial_eval_validates_m():
    qnet = QFunction.for_dims(1, 1, hidden=(4,), rng=0)
    buf = ReplayBuffer(capacity=4)
    buf.push(make_transition(0, state_dim=1))
    with pytest.raises(ValueError):
        partial_eval_m_regressions(qnet, qnet.copy(),
                                   GaussianPolicy(1, 1, hidden=(4,), rng=0), buf,
                                   m=0, q_steps=1, batch_size=1,
                                   optimizer=Adam(qnet.params, 1e-3), gamma=0.9)


# ---------------------------------------------------------------------------
# m-step importance-capped targets


def make_trajectory(policy, n, rng, state_dim=2, done_at=()):
    traj = []
    for i in range(n):
        s = rng.normal(size=state_dim)
        a, lp = policy.sample(s, rng)
        traj.append(Transition(s, a, float(rng.normal()), rng.normal(size=state_dim),
                               done=i in done_at, log_prob=float(lp)))
    return traj


def test_retrace_on_policy_is_uncorrected_mstep_return():
    rng = np.random.default_rng(2)
    policy = GaussianPolicy(2, 1, hidden=(6,), rng=1)
    traj = make_trajectory(policy, 6, rng)
    batch = stack_transitions(traj)
    behavior = policy.log_probs(batch["states"], batch["actions"])
    c0, gamma, m = 0.7, 0.9, 3
    q = constant_q(2, 1, c0)

    y = mstep_retrace_targets(traj, policy, behavior, q, gamma, m, n_expect=2, rng=0)

    rewards = batch["rewards"]
    expect = np.zeros(6)
    for i in range(6):
        end = min(i + m, 6)
        expect[i] = sum(gamma ** (t - i) * rewards[t] for t in range(i, end))
        expect[i] += gamma ** (end - i) * c0
    np.testing.assert_allclose(y, expect, atol=1e-12)


def test_retrace_m1_equals_td_target_bitwise():
    rng = np.random.default_rng(5)
    policy = CategoricalPolicy(3, 2, hidden=(8,), rng=2)
    traj = []
    for i in range(5):
        s = rng.normal(size=3)
        a, _ = policy.sample(s, rng)
        traj.append(Transition(s, a, float(rng.normal()), rng.normal(size=3),
                               done=(i == 2)))
    batch = stack_transitions(traj)
    behavior = policy.log_probs(batch["states"], batch["actions"])
    q = QFunction.for_dims(3, 2, hidden=(8,), rng=3)
    gamma = 0.95

    y_retrace = mstep_retrace_targets(traj, policy, behavior, q, gamma, m=1,
                                      n_expect=8, rng=np.random.default_rng(7))
    y_td = td_target(batch, policy, q, gamma, n_expect=8, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(y_retrace, y_td)


def test_retrace_terminal_cuts_rewards_and_bootstrap():
    rng = np.random.default_rng(9)
    policy = GaussianPolicy(2, 1, hidden=(4,), rng=0)
    traj = make_trajectory(policy, 5, rng, done_at={2})
    batch = stack_transitions(traj)
    behavior = policy.log_probs(batch["states"], batch["actions"])
    gamma, big = 0.9, 100.0
    y = mstep_retrace_targets(traj, policy, behavior, constant_q(2, 1, big),
                              gamma, m=4, n_expect=2, rng=0)
    r = batch["rewards"]
    # Window from 0 stops after the terminal step 2: three rewards, no bootstrap.
    assert y[0] == pytest.approx(r[0] + gamma * r[1] + gamma**2 * r[2], abs=1e-12)
    assert y[2] == pytest.approx(r[2], abs=1e-12)
    # From 3 the episode tail is short but non-terminal: bootstrap present.
    assert y[3] > big / 2


def test_retrace_caps_weights_at_one():
    # A behavior that claims lower likelihood than the current policy pushes
    # every ratio above 1; capping must make the result identical to the
    # on-policy target computed with the same expectation samples.
    rng = np.random.default_rng(12)
    policy = GaussianPolicy(2, 1, hidden=(6,), rng=4)
    traj = make_trajectory(policy, 6, rng)
    batch = stack_transitions(traj)
    on_policy = policy.log_probs(batch["states"], batch["actions"])
    q = QFunction.for_dims(2, 1, hidden=(8,), rng=5)
    y_capped = mstep_retrace_targets(traj, policy, on_policy - 3.0, q, 0.9, m=3,
                                     n_expect=4, rng=np.random.default_rng(1))
    y_on = mstep_retrace_targets(traj, policy, on_policy, q, 0.9, m=3,
                                 n_expect=4, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(y_capped, y_on)


def test_retrace_downweights_unlikely_tails():
    # Zero rewards and a positive constant critic: smaller weights can only
    # shrink the bootstrap term, never flip its sign.
    rng = np.random.default_rng(3)
    policy = GaussianPolicy(2, 1, hidden=(6,), rng=6)
    traj = make_trajectory(policy, 5, rng)
    for t in traj:
        t.reward = 0.0
    batch = stack_transitions(traj)
    on_policy = policy.log_probs(batch["states"], batch["actions"])
    q = constant_q(2, 1, 2.0)
    y_on = mstep_retrace_targets(traj, policy, on_policy, q, 0.9, m=3,
                                 n_expect=2, rng=0)
    y_off = mstep_retrace_targets(traj, policy, on_policy + 1.5, q, 0.9, m=3,
                                  n_expect=2, rng=0)
    assert np.all(y_off <= y_on + 1e-12)
    assert np.all(y_off >= 0.0)
    assert np.any(y_off < y_on - 1e-6)


class FrozenSamplePolicy:
    """Always samples action 0 but scores log-probs by a state feature, so
    importance weights are nontrivial while the bootstrap expectation is
    sample-independent.  Lets the batched window targets be compared to the
    per-window reference exactly."""

    n_actions = 2

    def sample_batch(self, states, n_samples, rng):
        return np.zeros((n_samples, np.atleast_2d(states).shape[0]), dtype=int)

    def log_probs(self, states, actions):
        return np.atleast_2d(states)[:, 0] * 0.3

    def action_input(self, actions):
        actions = np.asarray(actions).reshape(-1).astype(int)
        out = np.zeros((actions.size, self.n_actions))
        out[np.arange(actions.size), actions] = 1.0
        return out


def test_retrace_window_targets_match_per_window_reference():
    rng = np.random.default_rng(13)
    policy = FrozenSamplePolicy()
    q = QFunction.for_dims(2, 2, hidden=(8,), rng=6)

    windows = []
    for k in (1, 3, 4, 2, 4):
        window = []
        for j in range(k):
            done = j == k - 1 and k % 2 == 0  # some windows end terminally
            window.append(Transition(rng.normal(size=2), 0, float(rng.normal()),
                                     rng.normal(size=2), done=done,
                                     log_prob=float(rng.normal(scale=0.5))))
        windows.append(window)

    got = retrace_window_targets(windows, policy, q, gamma=0.9, n_expect=3, rng=0)
    for b, window in enumerate(windows):
        behavior = np.array([t.log_prob for t in window])
        ref = mstep_retrace_targets(window, policy, behavior, q, gamma=0.9,
                                    m=len(window), n_expect=3, rng=0)
        assert got[b] == pytest.approx(ref[0], abs=1e-12)


def test_retrace_window_targets_validate_inputs():
    with pytest.raises(ValueError):
        retrace_window_targets([], FrozenSamplePolicy(),
                               QFunction.for_dims(2, 2, hidden=(4,), rng=0), 0.9)
    with pytest.raises(ValueError):
        retrace_window_targets([[]], FrozenSamplePolicy(),
                               QFunction.for_dims(2, 2, hidden=(4,), rng=0), 0.9)


def test_retrace_validates_inputs():
    policy = GaussianPolicy(2, 1, hidden=(4,), rng=0)
    traj = [make_transition(0, state_dim=2)]
    with pytest.raises(ValueError):
        mstep_retrace_targets([], policy, np.zeros(0), constant_q(2, 1, 0.0), 0.9, 1)
    with pytest.raises(ValueError):
        mstep_retrace_targets(traj, policy, np.zeros(3), constant_q(2, 1, 0.0), 0.9, 1)
    with pytest.raises(ValueError):
        mstep_retrace_targets(traj, policy, np.zeros(1), constant_q(2, 1, 0.0), 0.9, 0)


# ---------------------------------------------------------------------------
# advantages


def test_mc_advantage_matches_enumeration():
    rng = np.random.default_rng(6)
    policy = CategoricalPolicy(3, 4, hidden=(8,), rng=1)
    q = QFunction.for_dims(3, 4, hidden=(12,), rng=2)
    states = rng.normal(size=(5, 3))
    actions = rng.integers(0, 4, size=5)

    probs = policy.probs(states)
    all_q = np.zeros((5, 4))
    for a in range(4):
        enc = policy.action_input(np.full(5, a))
        all_q[:, a] = q.values(states, enc)
    baseline = (probs * all_q).sum(axis=1)
    exact = all_q[np.arange(5), actions] - baseline

    n_pol = 20000
    got = mc_advantage(q, policy, states, actions, n_pol, np.random.default_rng(8))
    var = (probs * (all_q - baseline[:, None]) ** 2).sum(axis=1)
    se = np.sqrt(var / n_pol)
    assert np.all(np.abs(got - exact) < 5.0 * se + 1e-9)


def test_mc_advantage_validates_n_pol():
    policy = CategoricalPolicy(2, 2, hidden=(4,), rng=0)
    q = QFunction.for_dims(2, 2, hidden=(4,), rng=0)
    with pytest.raises(ValueError):
        mc_advantage(q, policy, np.zeros((1, 2)), np.zeros(1, dtype=int), 0,
                     np.random.default_rng(0))


def test_gae_lambda_zero_is_one_step_residual():
    rng = np.random.default_rng(4)
    vnet = ValueFunction.for_dims(3, hidden=(8,), rng=1)
    traj = [make_transition(i, done=(i == 3)) for i in range(7)]
    adv = gae_advantage(traj, vnet, gamma=0.97, lam=0.0)
    batch = stack_transitions(traj)
    v = vnet.values(batch["states"])
    v_next = vnet.values(batch["next_states"])
    delta = batch["rewards"] + 0.97 * np.where(batch["dones"], 0.0, v_next) - v
    np.testing.assert_array_equal(adv, delta)


def test_gae_lambda_one_zero_values_is_return_to_go():
    vnet = ValueFunction(zeroed(Mlp([2, 1], ["linear"], rng=0)))
    traj = [make_transition(i, state_dim=2, reward=r) for i, r in
            enumerate([1.0, -2.0, 0.5, 3.0])]
    gamma = 0.9
    adv = gae_advantage(traj, vnet, gamma=gamma, lam=1.0)
    rewards = [t.reward for t in traj]
    expect = np.zeros(4)
    for i in range(4):
        expect[i] = sum(gamma ** (t - i) * rewards[t] for t in range(i, 4))
    np.testing.assert_allclose(adv, expect, atol=1e-12)


def test_gae_matches_naive_double_loop():
    rng = np.random.default_rng(8)
    n = 40
    vnet = ValueFunction.for_dims(3, hidden=(8, 8), rng=2)
    traj = []
    for _ in range(n):
        done = rng.random() < 0.15
        truncated = (not done) and rng.random() < 0.1
        traj.append(Transition(rng.normal(size=3), np.zeros(1), float(rng.normal()),
                               rng.normal(size=3), done=done, truncated=truncated))
    gamma, lam = 0.99, 0.95
    adv = gae_advantage(traj, vnet, gamma=gamma, lam=lam)

    batch = stack_transitions(traj)
    v = vnet.values(batch["states"])
    v_next = vnet.values(batch["next_states"])
    delta = batch["rewards"] + gamma * np.where(batch["dones"], 0.0, v_next) - v
    boundary = batch["dones"] | batch["truncateds"]
    naive = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(i, n):
            acc += (gamma * lam) ** (t - i) * delta[t]
            if boundary[t]:
                break
        naive[i] = acc
    np.testing.assert_allclose(adv, naive, atol=1e-12)


def test_gae_truncation_keeps_bootstrap_but_resets_trace():
    vnet = ValueFunction(zeroed(Mlp([2, 1], ["linear"], rng=0)))
    vnet.net.params[1][:] = 10.0  # constant value 10 everywhere
    make = lambda done, truncated: Transition(np.zeros(2), np.zeros(1), 1.0,
                                              np.ones(2), done=done,
                                              truncated=truncated)
    gamma = 0.9
    adv_trunc = gae_advantage([make(False, True)], vnet, gamma, lam=0.95)
    adv_done = gae_advantage([make(True, False)], vnet, gamma, lam=0.95)
    assert adv_trunc[0] == pytest.approx(1.0 + gamma * 10.0 - 10.0, abs=1e-12)
    assert adv_done[0] == pytest.approx(1.0 - 10.0, abs=1e-12)
    # The trace does not leak across a truncation boundary.
    two = [make(False, True), make(False, False)]
    adv_two = gae_advantage(two, vnet, gamma, lam=0.95)
    assert adv_two[0] == adv_trunc[0]
