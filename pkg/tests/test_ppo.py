"""Policy head, GAE, clipped loss, update behaviour."""

import numpy as np
import pytest

from rankalloc import autodiff as ad
from rankalloc import ppo
from _oracles import brute_force_gae, check_gradients


def tiny_policy(obs=3, act=2, hidden=8, seed=0, **kw):
    return ppo.GaussianPolicy(obs, act, hidden, np.random.default_rng(seed), **kw)


def tiny_value(obs=3, hidden=8, seed=1):
    return ppo.ValueNet(obs, hidden, np.random.default_rng(seed))


# === action sampling ===


def test_act_with_tiny_std_returns_mean():
    pol = tiny_policy(log_std_init=np.log(1e-8))
    feat = np.array([0.1, -0.2, 0.3])
    mean = pol.mean_np(feat)[0]
    a, _ = pol.act(feat, np.random.default_rng(2))
    np.testing.assert_allclose(a, mean, atol=1e-6)


def test_log_prob_of_mean_with_unit_std():
    pol = tiny_policy(act=4, log_std_init=0.0)
    feat = np.zeros(3)
    mean = pol.mean_np(feat)[0]
    lp = float(ad.gaussian_log_prob(mean, mean, pol.log_std.data))
    assert lp == pytest.approx(-2.0 * np.log(2.0 * np.pi))


def test_act_sample_mean_matches_policy_mean():
    pol = tiny_policy(seed=3)
    feat = np.array([0.5, 0.5, -1.0])
    mean = pol.mean_np(feat)[0]
    rng = np.random.default_rng(4)
    draws = np.array([pol.act(feat, rng)[0] for _ in range(100_000)])
    se = np.exp(pol.log_std.data) / np.sqrt(draws.shape[0])
    np.testing.assert_array_less(np.abs(draws.mean(axis=0) - mean), 3.5 * se)


def test_stored_log_prob_matches_tape_recompute():
    # the ratio at the first update epoch must be 1 (bookkeeping check)
    pol = tiny_policy(seed=5)
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(16, 3))
    actions, logps = zip(*(pol.act(f, rng) for f in feats))
    tape_lp = pol.log_prob_tape(ad.constant(feats), np.array(actions))
    ratio = np.exp(tape_lp.data - np.array(logps))
    np.testing.assert_allclose(ratio, 1.0, rtol=1e-12)


# === GAE ===


def test_gae_single_terminal_step():
    adv = ppo.gae([1.0], [0.5], bootstrap_value=0.0, gamma=0.95, decay=0.95)
    assert adv[0] == pytest.approx(0.5)


def test_gae_decay_zero_is_one_step_td():
    rng = np.random.default_rng(7)
    r, v = rng.normal(size=5), rng.normal(size=5)
    boot = 0.3
    adv = ppo.gae(r, v, boot, gamma=0.9, decay=0.0)
    vals = np.append(v, boot)
    np.testing.assert_allclose(adv, r + 0.9 * vals[1:] - v, rtol=1e-12)


def test_gae_matches_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(200):
        n = int(rng.integers(1, 11))
        r = rng.normal(size=n)
        v = rng.normal(size=n)
        boot = float(rng.normal())
        gamma = float(rng.uniform(0.5, 0.999))
        decay = float(rng.uniform(0.0, 1.0))
        got = ppo.gae(r, v, boot, gamma, decay)
        want = brute_force_gae(r, v, boot, gamma, decay)
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_gae_decay_one_terminal_is_return_minus_value():
    rng = np.random.default_rng(9)
    r = rng.normal(size=6)
    v = rng.normal(size=6)
    adv = ppo.gae(r, v, 0.0, gamma=0.9, decay=1.0)
    disc = np.array([sum(0.9**k * r[t + k] for k in range(6 - t)) for t in range(6)])
    np.testing.assert_allclose(adv, disc - v, rtol=1e-10, atol=1e-12)


def test_gae_dones_cut_the_recursion():
    r = np.array([1.0, 1.0])
    v = np.array([0.5, 0.25])
    dones = np.array([True, True])
    adv = ppo.gae(r, v, bootstrap_value=9.9, gamma=0.9, decay=0.9, dones=dones)
    np.testing.assert_allclose(adv, r - v)


# === losses ===


def _controlled_batch(pol, valnet, ratio_target, advantages):
    """Craft old log-probs so the first-epoch ratio is exactly ratio_target."""
    rng = np.random.default_rng(10)
    n = len(advantages)
    feats = rng.normal(size=(n, 3))
    actions = rng.normal(size=(n, pol.act_dim))
    lp_now = pol.log_prob_tape(ad.constant(feats), actions).data
    old = lp_now - np.log(ratio_target)
    returns = valnet.value_np(feats)  # zero value error
    return feats, actions, old, np.asarray(advantages, dtype=float), returns


def test_ppo_loss_ratio_one_uses_unclipped_branch():
    pol, valnet = tiny_policy(seed=11), tiny_value(seed=12)
    cfg = ppo.PpoConfig(clip_ratio=0.2)
    batch = _controlled_batch(pol, valnet, 1.0, [1.0, -1.0, 0.5, 2.0])
    loss, diag = ppo.ppo_loss(pol, valnet, *batch, cfg)
    assert loss.data == pytest.approx(-np.mean([1.0, -1.0, 0.5, 2.0]), abs=1e-9)
    assert diag["clip_fraction"] == 0.0


def test_ppo_loss_clips_large_ratio():
    # r=1.3, clip 0.2, A=1 -> surrogate uses 1.2*A
    pol, valnet = tiny_policy(seed=13), tiny_value(seed=14)
    cfg = ppo.PpoConfig(clip_ratio=0.2)
    batch = _controlled_batch(pol, valnet, 1.3, [1.0])
    loss, diag = ppo.ppo_loss(pol, valnet, *batch, cfg)
    assert loss.data == pytest.approx(-1.2, abs=1e-9)
    assert diag["clip_fraction"] == 1.0


def test_ppo_loss_negative_advantage_clip_floor():
    # r=0.5, A=-1: min(r*A, clip(r)*A) = min(-0.5, -0.8) = -0.8 -> loss 0.8
    pol, valnet = tiny_policy(seed=15), tiny_value(seed=16)
    cfg = ppo.PpoConfig(clip_ratio=0.2)
    batch = _controlled_batch(pol, valnet, 0.5, [-1.0])
    loss, _ = ppo.ppo_loss(pol, valnet, *batch, cfg)
    assert loss.data == pytest.approx(0.8, abs=1e-9)


def test_ppo_loss_gradients_match_fd():
    rng = np.random.default_rng(17)
    pol, valnet = tiny_policy(seed=18), tiny_value(seed=19)
    cfg = ppo.PpoConfig(clip_ratio=0.2)
    checked = 0
    while checked < 20:
        feats = rng.normal(size=(6, 3))
        actions = rng.normal(size=(6, 2))
        lp = pol.log_prob_tape(ad.constant(feats), actions).data
        old = lp - rng.uniform(-0.15, 0.15, size=6)
        ratio = np.exp(lp - old)
        # stay away from the clip kinks so central differences are valid
        if np.any(np.abs(ratio - 0.8) < 2e-3) or np.any(np.abs(ratio - 1.2) < 2e-3):
            continue
        adv = rng.normal(size=6)
        rets = rng.normal(size=6)
        params = list(pol.params().values()) + list(valnet.params().values())
        check_gradients(
            lambda: ppo.ppo_loss(pol, valnet, feats, actions, old, adv, rets, cfg)[0],
            params,
        )
        checked += 1


def test_advantage_normalization_is_scale_invariant():
    adv = np.array([1.0, -2.0, 0.5, 3.0])
    a = ppo.normalize_advantages(adv)
    b = ppo.normalize_advantages(37.5 * adv)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_zero_advantage_batch_leaves_policy_gradient_zero():
    pol, valnet = tiny_policy(seed=20), tiny_value(seed=21)
    cfg = ppo.PpoConfig()
    batch = _controlled_batch(pol, valnet, 1.1, [0.0, 0.0, 0.0])
    feats, actions, old, adv, _ = batch
    rets = np.array([1.0, 2.0, 3.0])  # value loss alone must not move the policy
    loss, _ = ppo.ppo_loss(pol, valnet, feats, actions, old, adv, rets, cfg)
    ad.backward(loss)
    for p in pol.params().values():
        assert not p.grad.any()
    assert any(p.grad.any() for p in valnet.params().values())


def test_update_runs_and_reports_diagnostics():
    pol, valnet = tiny_policy(seed=22), tiny_value(seed=23)
    cfg = ppo.PpoConfig(epochs=2, minibatch=8, lr=1e-3)
    opt_p = ad.Adam(pol.params(), lr=cfg.lr)
    opt_v = ad.Adam(valnet.params(), lr=cfg.lr)
    rng = np.random.default_rng(24)
    feats = rng.normal(size=(16, 3))
    acts_lps = [pol.act(f, rng) for f in feats]
    actions = np.array([a for a, _ in acts_lps])
    logps = np.array([lp for _, lp in acts_lps])
    rewards = rng.normal(size=16)
    values = valnet.value_np(feats)
    diag = ppo.update(
        pol, valnet, opt_p, opt_v, feats, actions, logps, rewards, values, 0.0, cfg,
        np.random.default_rng(25),
    )
    assert 0.0 <= diag["clip_fraction"] <= 1.0
    assert np.isfinite(diag["loss"])


def test_update_determinism():
    def run():
        pol, valnet = tiny_policy(seed=26), tiny_value(seed=27)
        cfg = ppo.PpoConfig(epochs=3, minibatch=4, lr=1e-3)
        opt_p = ad.Adam(pol.params(), lr=cfg.lr)
        opt_v = ad.Adam(valnet.params(), lr=cfg.lr)
        rng = np.random.default_rng(28)
        feats = rng.normal(size=(12, 3))
        actions = rng.normal(size=(12, 2))
        logps = pol.log_prob_tape(ad.constant(feats), actions).data
        ppo.update(
            pol, valnet, opt_p, opt_v, feats, actions, logps,
            rng.normal(size=12), valnet.value_np(feats), 0.1, cfg,
            np.random.default_rng(29),
        )
        return pol.w2.data.copy()

    assert np.array_equal(run(), run())


def test_policy_improves_on_bandit():
    # one-dimensional bandit: reward -|a - 3|; the mean should approach 3
    pol = tiny_policy(obs=1, act=1, hidden=16, seed=30)
    valnet = ppo.ValueNet(1, 16, np.random.default_rng(31))
    cfg = ppo.PpoConfig(epochs=4, minibatch=32, lr=0.02, gamma=0.99, gae_decay=0.95)
    opt_p = ad.Adam(pol.params(), lr=cfg.lr)
    opt_v = ad.Adam(valnet.params(), lr=cfg.lr)
    rng = np.random.default_rng(32)
    feat = np.ones((32, 1))
    dones = np.ones(32, dtype=bool)
    for _ in range(400):
        acts_lps = [pol.act(f, rng) for f in feat]
        actions = np.array([a for a, _ in acts_lps])
        logps = np.array([lp for _, lp in acts_lps])
        rewards = -np.abs(actions[:, 0] - 3.0)
        values = valnet.value_np(feat)
        ppo.update(
            pol, valnet, opt_p, opt_v, feat, actions, logps, rewards, values,
            0.0, cfg, rng, dones=dones,
        )
    assert abs(pol.mean_np(np.ones(1))[0][0] - 3.0) < 0.5
