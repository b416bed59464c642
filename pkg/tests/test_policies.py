"""Policy distributions and the clipped surrogate, against closed forms,
Monte-Carlo oracles, and finite differences."""

import numpy as np
import pytest

from mosopi.policies import (
    CategoricalPolicy,
    GaussianPolicy,
    load_policy,
    ppo_clip_loss,
)

LOG_2PI = float(np.log(2.0 * np.pi))


def fd_logprob_grads(policy, state, action, h=1e-6):
    """Central differences of log_prob through every parameter coordinate."""
    grads = []
    for p in policy.params:
        g = np.zeros_like(p)
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + h
            up = policy.log_prob(state, action)
            p.flat[i] = orig - h
            dn = policy.log_prob(state, action)
            p.flat[i] = orig
            g.flat[i] = (up - dn) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(a, b, rel_tol=1e-4):
    for ga, gb in zip(a, b):
        scale = np.maximum(np.maximum(np.abs(ga), np.abs(gb)), 1e-8)
        worst = np.max(np.abs(ga - gb) / scale)
        assert worst < rel_tol, f"gradient mismatch {worst:g}"


class TestGaussian:
    def test_sample_mean_monte_carlo(self):
        policy = GaussianPolicy(3, 2, hidden=(8,), rng=0, log_std_init=-0.5)
        state = np.array([0.3, -1.0, 0.7])
        mu = policy.mean_action(state)
        rng = np.random.default_rng(1)
        n = 100_000
        draws = np.stack([policy.sample(state, rng)[0] for _ in range(n)])
        sigma = policy.stds()
        bound = 3.0 * sigma / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - mu) < bound)

    def test_log_prob_at_mean_closed_form(self):
        policy = GaussianPolicy(2, 3, hidden=(4,), rng=2, log_std_init=0.3)
        state = np.array([0.1, 0.2])
        mu = policy.mean_action(state)
        expect = -np.sum(policy.log_std) - 1.5 * LOG_2PI
        assert abs(policy.log_prob(state, mu) - expect) < 1e-12

    def test_one_sigma_offset_costs_half_per_dim(self):
        policy = GaussianPolicy(2, 3, hidden=(4,), rng=3, log_std_init=-0.2)
        state = np.array([0.4, -0.6])
        mu = policy.mean_action(state)
        at_mean = policy.log_prob(state, mu)
        offset = policy.log_prob(state, mu + policy.stds())
        assert abs((at_mean - offset) - 1.5) < 1e-12

    def test_sampling_logprob_consistency(self):
        policy = GaussianPolicy(3, 2, hidden=(6,), rng=4)
        rng = np.random.default_rng(5)
        state = rng.normal(size=3)
        for _ in range(10):
            action, lp = policy.sample(state, rng)
            assert abs(lp - policy.log_prob(state, action)) < 1e-12

    def test_logprob_gradient_finite_differences(self):
        policy = GaussianPolicy(3, 2, hidden=(8, 8), rng=6, log_std_init=-0.3)
        rng = np.random.default_rng(7)
        state = rng.normal(size=3)
        action = rng.normal(size=2)
        analytic = policy.logprob_grads(state[None], action[None], np.ones(1))
        fd = fd_logprob_grads(policy, state, action)
        assert_grads_close(analytic, fd)

    def test_entropy_closed_form(self):
        policy = GaussianPolicy(2, 2, hidden=(4,), rng=8, log_std_init=0.1)
        expect = 2 * 0.1 + 0.5 * 2 * (1.0 + LOG_2PI)
        assert abs(policy.entropy() - expect) < 1e-12

    def test_log_std_clamped(self):
        policy = GaussianPolicy(2, 1, hidden=(4,), rng=9)
        policy.log_std[...] = 11.0
        policy.clamp_log_std()
        assert policy.log_std[0] == GaussianPolicy.LOG_STD_MAX
        policy.log_std[...] = -100.0
        assert policy.stds()[0] == np.exp(GaussianPolicy.LOG_STD_MIN)

    def test_checkpoint_round_trip(self, tmp_path):
        policy = GaussianPolicy(3, 2, hidden=(8,), rng=10, log_std_init=-0.7)
        path = tmp_path / "pi.npz"
        policy.save(path)
        back = load_policy(path)
        state = np.array([0.5, 0.5, -0.5])
        action = np.array([0.1, -0.1])
        assert back.log_prob(state, action) == policy.log_prob(state, action)


class TestCategorical:
    def zero_logit_policy(self, n_actions=2):
        policy = CategoricalPolicy(2, n_actions, hidden=(4,), rng=0)
        policy.logits_net.weights[-1][...] = 0.0
        policy.logits_net.biases[-1][...] = 0.0
        return policy

    def test_uniform_frequencies(self):
        policy = self.zero_logit_policy()
        rng = np.random.default_rng(11)
        state = np.zeros(2)
        draws = np.array([policy.sample(state, rng)[0] for _ in range(10_000)])
        freq = np.mean(draws == 0)
        assert abs(freq - 0.5) < 0.01

    def test_log_probs_sum_to_one(self):
        policy = CategoricalPolicy(3, 4, hidden=(6,), rng=12)
        states = np.random.default_rng(13).normal(size=(5, 3))
        p = policy.probs(states)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_sampling_logprob_consistency(self):
        policy = CategoricalPolicy(2, 3, hidden=(5,), rng=14)
        rng = np.random.default_rng(15)
        state = rng.normal(size=2)
        for _ in range(10):
            action, lp = policy.sample(state, rng)
            assert abs(lp - policy.log_prob(state, action)) < 1e-12

    def test_mean_action_is_argmax(self):
        policy = CategoricalPolicy(2, 3, hidden=(5,), rng=16)
        state = np.array([0.2, -0.4])
        probs = policy.probs(state[None])[0]
        assert policy.mean_action(state) == int(np.argmax(probs))

    def test_logprob_gradient_finite_differences(self):
        policy = CategoricalPolicy(3, 3, hidden=(8,), rng=17)
        rng = np.random.default_rng(18)
        state = rng.normal(size=3)
        analytic = policy.logprob_grads(state[None], np.array([1]), np.ones(1))
        fd = fd_logprob_grads(policy, state, 1)
        assert_grads_close(analytic, fd)

    def test_sample_batch_matches_probs(self):
        policy = CategoricalPolicy(2, 3, hidden=(5,), rng=19)
        states = np.random.default_rng(20).normal(size=(4, 2))
        p = policy.probs(states)
        draws = policy.sample_batch(states, 20_000, np.random.default_rng(21))
        for s in range(4):
            freq = np.bincount(draws[:, s], minlength=3) / 20_000
            assert np.max(np.abs(freq - p[s])) < 0.015

    def test_entropy_uniform(self):
        policy = self.zero_logit_policy(n_actions=4)
        states = np.zeros((3, 2))
        np.testing.assert_allclose(policy.entropies(states), np.log(4.0), atol=1e-12)

    def test_checkpoint_round_trip(self, tmp_path):
        policy = CategoricalPolicy(2, 3, hidden=(5,), rng=22)
        path = tmp_path / "pi.npz"
        policy.save(path)
        back = load_policy(path)
        state = np.array([0.3, 0.9])
        np.testing.assert_array_equal(back.probs(state[None]), policy.probs(state[None]))


class TestClipLoss:
    def gaussian_setup(self, seed=30, n=6):
        policy = GaussianPolicy(2, 1, hidden=(6,), rng=seed, log_std_init=-0.1)
        rng = np.random.default_rng(seed + 1)
        states = rng.normal(size=(n, 2))
        actions = policy.mean_actions(states) + 0.3 * rng.normal(size=(n, 1))
        return policy, states, actions

    def test_ratio_one_reduces_to_plain_surrogate(self):
        policy, states, actions = self.gaussian_setup()
        adv = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -1.0])
        old = policy.log_probs(states, actions)
        loss, grads = ppo_clip_loss(policy, old, states, actions, adv, 0.2)
        assert abs(loss - (-np.mean(adv))) < 1e-12
        expect = policy.logprob_grads(states, actions, -adv / adv.shape[0])
        assert_grads_close(grads, expect, rel_tol=1e-12)

    def test_positive_advantage_saturates_above(self):
        # ratio 1.3, eps 0.2, advantage +1: contribution min(1.3, 1.2) = 1.2
        policy, states, actions = self.gaussian_setup(seed=32, n=1)
        new = policy.log_probs(states, actions)
        old = new - np.log(1.3)
        loss, grads = ppo_clip_loss(policy, old, states, actions, np.array([1.0]), 0.2)
        assert abs(loss - (-1.2)) < 1e-12
        for g in grads:
            np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_negative_advantage_saturates_below(self):
        # ratio 0.7, eps 0.2, advantage -1: min(-0.7, -0.8) = -0.8, clipped
        policy, states, actions = self.gaussian_setup(seed=33, n=1)
        new = policy.log_probs(states, actions)
        old = new - np.log(0.7)
        loss, grads = ppo_clip_loss(policy, old, states, actions, np.array([-1.0]), 0.2)
        assert abs(loss - 0.8) < 1e-12
        for g in grads:
            np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_clipped_samples_have_zero_fd_gradient(self):
        # both clipped regimes: A>0 with ratio above, A<0 with ratio below
        policy, states, actions = self.gaussian_setup(seed=34, n=2)
        new = policy.log_probs(states, actions)
        old = new - np.array([np.log(1.5), np.log(0.5)])
        adv = np.array([2.0, -2.0])

        def loss_at():
            return ppo_clip_loss(policy, old, states, actions, adv, 0.2)[0]

        h = 1e-6
        for p in policy.params:
            for i in range(min(p.size, 5)):
                orig = p.flat[i]
                p.flat[i] = orig + h
                up = loss_at()
                p.flat[i] = orig - h
                dn = loss_at()
                p.flat[i] = orig
                assert abs(up - dn) / (2 * h) < 1e-6

    def test_epsilon_inf_is_plain_importance_surrogate(self):
        policy, states, actions = self.gaussian_setup(seed=35)
        adv = np.linspace(-1, 1, 6)
        old = policy.log_probs(states, actions) - 0.3
        loss, _ = ppo_clip_loss(policy, old, states, actions, adv, np.inf)
        ratio = np.exp(policy.log_probs(states, actions) - old)
        assert abs(loss - (-np.mean(ratio * adv))) < 1e-12

    def test_baseline_shift_invariance_at_ratio_one(self):
        # uniform categorical, both actions of one state in the batch: a
        # per-state constant added to advantages shifts the loss by its
        # mean and leaves the gradient untouched
        policy = CategoricalPolicy(2, 2, hidden=(4,), rng=36)
        policy.logits_net.weights[-1][...] = 0.0
        policy.logits_net.biases[-1][...] = 0.0
        states = np.zeros((2, 2))
        actions = np.array([0, 1])
        old = policy.log_probs(states, actions)
        adv = np.array([1.0, -0.5])
        c = 3.0
        loss_a, grads_a = ppo_clip_loss(policy, old, states, actions, adv, 0.2)
        loss_b, grads_b = ppo_clip_loss(policy, old, states, actions, adv + c, 0.2)
        assert abs((loss_b - loss_a) - (-c)) < 1e-12
        for ga, gb in zip(grads_a, grads_b):
            np.testing.assert_allclose(ga, gb, atol=1e-12)

    def test_collapse_guard(self):
        policy, states, actions = self.gaussian_setup(seed=37, n=2)
        old = policy.log_probs(states, actions) + 60.0
        with pytest.raises(FloatingPointError, match="collapsed"):
            ppo_clip_loss(policy, old, states, actions, np.ones(2), 0.2)

    def test_epsilon_validation(self):
        policy, states, actions = self.gaussian_setup(seed=38, n=2)
        old = policy.log_probs(states, actions)
        with pytest.raises(ValueError, match="epsilon"):
            ppo_clip_loss(policy, old, states, actions, np.ones(2), 0.0)

    def test_misaligned_batch_rejected(self):
        policy, states, actions = self.gaussian_setup(seed=39, n=3)
        old = policy.log_probs(states, actions)
        with pytest.raises(ValueError, match="misaligned"):
            ppo_clip_loss(policy, old, states, actions, np.ones(2), 0.2)
