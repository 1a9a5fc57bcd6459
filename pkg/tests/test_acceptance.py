"""End-to-end checks of the shipped system, one concern per test.

The multi-minute comparison protocols run once inside module-scoped fixtures
and every audit that needs their artifacts shares them.  Everything else is
sized to finish in seconds.
"""

import json
import math
import time

import numpy as np
import pytest

from rankalloc import autodiff as ad
from rankalloc import channel as ch
from rankalloc import diffusion as df
from rankalloc import ppo
from rankalloc.env import EnvConfig
from rankalloc.trainer import Trainer, TrainerConfig
from _oracles import brute_force_gae, check_gradients

SEEDS = (42, 43, 44)
HIDDEN_DIM = 2048
LAYERS = 24
N_MODULES = LAYERS * 6


def _eval_records(out_dir):
    with open(out_dir / "metrics.jsonl") as fh:
        return [json.loads(l) for l in fh if '"type":"eval"' in l]


def _step_records(out_dir):
    with open(out_dir / "metrics.jsonl") as fh:
        return [json.loads(l) for l in fh if '"type":"step"' in l]


# === adapter upload accounting ===


def test_param_count_uniform_rank_grid():
    # two rank-r factors per module: sum over modules of r * 2 * d_h
    expected = {8: 4_718_592, 16: 9_437_184, 32: 18_874_368}
    for r, want in expected.items():
        ranks = np.full(N_MODULES, r)
        assert ch.param_count(ranks, HIDDEN_DIM, "pq_only") == want


@pytest.mark.xfail(
    strict=True,
    reason="recorded total 63,870,464 is not 144*128*2*2048; "
    "the uniform-rank formula gives 75,497,472",
)
def test_param_count_r128_recorded_total():
    ranks = np.full(N_MODULES, 128)
    assert ch.param_count(ranks, HIDDEN_DIM, "pq_only") == 63_870_464


def test_param_count_scaling_terms_accounting():
    # with_lambda adds one r-length scaling vector per module
    for r in (8, 16, 32, 128):
        ranks = np.full(N_MODULES, r)
        pq = ch.param_count(ranks, HIDDEN_DIM, "pq_only")
        full = ch.param_count(ranks, HIDDEN_DIM, "with_lambda")
        assert full - pq == int(ranks.sum())
    assert ch.param_count(np.full(N_MODULES, 128), HIDDEN_DIM, "with_lambda") == 75_515_904


# === link model ===


def test_capacity_reference_point_and_snr_monotonicity():
    t0 = time.monotonic()
    assert ch.capacity_bps(0.0, 1e8) == 1e8  # log2(1 + 1) is exactly one
    grid = [ch.capacity_bps(s, 1e8) for s in (-5.0, 0.0, 5.0, 10.0, 15.0)]
    assert all(a < b for a, b in zip(grid, grid[1:]))
    assert time.monotonic() - t0 < 3.0


def test_transmit_eta_linearity():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    cap = ch.capacity_bps(5.0, 1e8)
    for _ in range(1000):
        a = rng.uniform(0.0, 128.0, N_MODULES)
        b = rng.uniform(0.0, 128.0, N_MODULES)
        s = rng.uniform(0.1, 4.0)
        ab = ch.comm_cost(a + b, cap, 1.0, HIDDEN_DIM)
        parts = ch.comm_cost(a, cap, 1.0, HIDDEN_DIM) + ch.comm_cost(b, cap, 1.0, HIDDEN_DIM)
        assert abs(ab - parts) <= 1e-12 * abs(parts)
        scaled = ch.comm_cost(s * a, cap, 1.0, HIDDEN_DIM)
        assert abs(scaled - s * ch.comm_cost(a, cap, 1.0, HIDDEN_DIM)) <= 1e-12 * abs(scaled)
    assert time.monotonic() - t0 < 3.0


# === advantage estimation ===


def test_gae_matches_double_sum():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 11))
        rewards = rng.normal(size=n)
        values = rng.normal(size=n)
        boot = float(rng.normal())
        gamma = float(rng.uniform(0.8, 1.0))
        decay = float(rng.uniform(0.8, 1.0))
        got = ppo.gae(rewards, values, boot, gamma, decay)
        want = brute_force_gae(rewards, values, boot, gamma, decay)
        np.testing.assert_allclose(got, want, atol=1e-10)
    assert time.monotonic() - t0 < 3.0


# === gradient fidelity ===


def test_gradient_checks_activations():
    t0 = time.monotonic()
    rng = np.random.default_rng(4)
    for act in (ad.tanh, ad.sigmoid, ad.silu):
        for _ in range(20):
            x = ad.Value(rng.normal(size=(3, 5)))
            w = ad.Value(rng.normal(size=5))
            check_gradients(lambda: ad.vmean(ad.square(act(ad.mul(x, w)))), [x, w])
    assert time.monotonic() - t0 < 90.0


def test_gradient_checks_policy_and_value_losses():
    t0 = time.monotonic()
    rng = np.random.default_rng(5)
    cfg = ppo.PpoConfig()
    for i in range(20):
        pol = ppo.GaussianPolicy(4, 3, 6, np.random.default_rng(100 + i))
        val = ppo.ValueNet(4, 6, np.random.default_rng(200 + i))
        feats = rng.normal(size=(5, 4))
        actions = rng.normal(size=(5, 3))
        old_logp = rng.normal(size=5)
        adv = rng.normal(size=5)
        rets = rng.normal(size=5)
        check_gradients(
            lambda: ppo.ppo_loss(pol, val, feats, actions, old_logp, adv, rets, cfg)[0],
            list(pol.params().values()) + list(val.params().values()),
        )
        # value regression alone, against the same oracle
        x = ad.constant(feats)
        check_gradients(
            lambda: ad.vmean(ad.square(ad.sub(val.value_tape(x), ad.constant(rets)))),
            list(val.params().values()),
        )
    assert time.monotonic() - t0 < 90.0


def test_gradient_checks_refiner_loss():
    t0 = time.monotonic()
    rng = np.random.default_rng(6)
    sch = df.build_schedule("linear", 40)
    for i in range(21):
        prediction = df.PREDICTION_TYPES[i % 3]
        den = df.Denoiser(4, np.random.default_rng(300 + i), d_latent=6, embed_dim=4,
                          input_scale=0.125)
        x0 = rng.uniform(0.0, 8.0, (3, 4))
        cond = rng.uniform(0.0, 8.0, (3, 4))
        rewards = rng.normal(size=3)
        taus = rng.integers(1, 41, size=3)
        eps = rng.standard_normal((3, 4))
        drop = np.array([True, False, False])
        check_gradients(
            lambda: df.ddim_loss(x0, cond, rewards, den, sch, prediction=prediction,
                                 kappa=0.3, temp=1.0, draws=(taus, eps, drop))[0],
            list(den.params().values()),
        )
    assert time.monotonic() - t0 < 90.0


# === reverse-process identities ===


def test_alpha_bar_strictly_decreasing_all_schedules():
    t0 = time.monotonic()
    for kind in df.SCHEDULE_KINDS:
        for steps in (600, 800, 1000):
            sch = df.build_schedule(kind, steps)
            bars = np.array([sch.alpha_bar(t) for t in range(steps + 1)])
            assert np.all(np.diff(bars) < 0), (kind, steps)
    assert time.monotonic() - t0 < 30.0


class _ExactDenoiser:
    """Predicts the precise noise implied by a known clean vector."""

    def __init__(self, x0_true, schedule, prediction):
        self.x0 = np.asarray(x0_true, dtype=np.float64)
        self.schedule = schedule
        self.prediction = prediction
        self.act_dim = self.x0.size

    def _raw(self, x, tau):
        ab = self.schedule.alpha_bar(tau)
        eps = (x - math.sqrt(ab) * self.x0) / math.sqrt(1 - ab)
        if self.prediction == "epsilon":
            return eps
        if self.prediction == "x0":
            return self.x0.copy()
        return math.sqrt(ab) * eps - math.sqrt(1 - ab) * self.x0

    def predict(self, x, tau, cond=None):
        return self._raw(x, tau)

    def predict_pair(self, x, tau, cond):
        raw = self._raw(x, tau)
        return raw, raw


@pytest.mark.parametrize("prediction", df.PREDICTION_TYPES)
def test_perfect_denoiser_full_chain_recovers_target(prediction):
    t0 = time.monotonic()
    sch = df.build_schedule("cosine", 1000)
    x0_true = np.array([0.5, 7.0, 3.25, 1.0, 4.0, 6.5])
    den = _ExactDenoiser(x0_true, sch, prediction)
    cfg = df.SamplerConfig(infer_steps=1000, eta=0.0, guidance=1.5, prediction=prediction)
    got = df.sample(np.zeros(6), cfg, sch, den, np.random.default_rng(1))
    np.testing.assert_allclose(got, x0_true, atol=1e-6)
    assert time.monotonic() - t0 < 30.0


def test_parameterizations_cross_convert():
    rng = np.random.default_rng(8)
    for _ in range(200):
        x0 = rng.normal(size=6)
        eps = rng.standard_normal(6)
        ab = float(rng.uniform(1e-4, 1.0))
        x_tau = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
        v = math.sqrt(ab) * eps - math.sqrt(1 - ab) * x0
        outs = [
            df.convert(eps, "epsilon", x_tau, ab),
            df.convert(x0, "x0", x_tau, ab),
            df.convert(v, "v", x_tau, ab),
        ]
        for eps_hat, x0_hat in outs:
            np.testing.assert_allclose(eps_hat, eps, rtol=1e-9, atol=1e-9)
            np.testing.assert_allclose(x0_hat, x0, rtol=1e-9, atol=1e-9)


def test_deterministic_sampling_bit_reproducible():
    sch = df.build_schedule("cosine", 400)
    den = df.Denoiser(12, np.random.default_rng(9), d_latent=32, embed_dim=8,
                      input_scale=0.125)
    cond = np.full(12, 4.0)
    for eta in (0.0, 0.4):
        cfg = df.SamplerConfig(infer_steps=25, eta=eta, guidance=1.5)
        a = df.sample(cond, cfg, sch, den, np.random.default_rng(77))
        b = df.sample(cond, cfg, sch, den, np.random.default_rng(77))
        np.testing.assert_array_equal(a, b)


# === comparison protocol runs (shared fixtures) ===


def _protocol_config(mode, seed):
    common = dict(
        mode=mode, seed=seed, total_steps=30000, eval_every=1000,
        eval_episodes=2, early_stop=False,
    )
    if mode == "ppo_ddim":
        # refiner settings sized for this environment; the coarse learner
        # keeps its defaults in both arms so the comparison is like for like
        common.update(
            ddim_warmup_steps=3000, prediction="x0", guidance=0.25,
            infer_steps=10, lr_ddim=2e-3, ddim_batches=16,
            reward_temp=0.02, kappa=1.0, buffer_capacity=40000,
        )
    return TrainerConfig(**common)


@pytest.fixture(scope="module")
def comparison_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("comparison")
    out = {}
    for mode in ("ppo", "ppo_ddim"):
        for seed in SEEDS:
            out_dir = root / f"{mode}_{seed}"
            tr = Trainer(
                EnvConfig(projection="hard"),
                ch.params_for_snr_db(5.0),
                _protocol_config(mode, seed),
                out_dir,
            )
            result = tr.train()
            assert result.status == "completed"
            out[(mode, seed)] = out_dir
    return out


@pytest.fixture(scope="module")
def constrained_channel_run(tmp_path_factory):
    # low capacity: mid-range rank vectors exceed the time budget, so the
    # greedy repair has to fire on essentially every step
    out_dir = tmp_path_factory.mktemp("constrained") / "run"
    cfg = TrainerConfig(mode="ppo", seed=0, total_steps=2000, eval_every=1000,
                        eval_episodes=2, early_stop=False)
    tr = Trainer(EnvConfig(projection="hard"), ch.params_for_snr_db(-5.0), cfg, out_dir)
    result = tr.train()
    assert result.status == "completed"
    return out_dir


def _audit_time_budget(out_dir):
    """Recompute every deployed configuration's upload time from scratch."""
    env_defaults = EnvConfig()
    projected = 0
    steps = 0
    for rec in _step_records(out_dir):
        cap = ch.capacity_bps(rec["snr_db"], 1e8)
        _, total = ch.transmit_time(
            np.asarray(rec["ranks"], dtype=np.float64), cap,
            env_defaults.hidden_dim, env_defaults.bits_per_param,
        )
        assert total <= env_defaults.t_max_s + 1e-9, (out_dir, rec["step"])
        projected += bool(rec["projected"])
        steps += 1
    return steps, projected


def test_hard_projection_never_exceeds_budget(comparison_runs, constrained_channel_run):
    for out_dir in comparison_runs.values():
        steps, _ = _audit_time_budget(out_dir)
        assert steps >= 30000
    steps, projected = _audit_time_budget(constrained_channel_run)
    assert steps >= 2000
    assert projected > 0  # the repair path actually ran


def test_refined_policy_beats_coarse_policy(comparison_runs):
    finals = {}
    curves = {}
    for (mode, seed), out_dir in comparison_runs.items():
        rewards = [e["mean_reward"] for e in _eval_records(out_dir)]
        finals[(mode, seed)] = rewards[-1]
        curves[(mode, seed)] = np.mean(rewards)  # area under the eval curve
    wins = sum(finals[("ppo_ddim", s)] >= finals[("ppo", s)] for s in SEEDS)
    assert wins >= 2, finals
    aurc_refined = np.mean([curves[("ppo_ddim", s)] for s in SEEDS])
    aurc_coarse = np.mean([curves[("ppo", s)] for s in SEEDS])
    assert aurc_refined >= aurc_coarse, (aurc_refined, aurc_coarse)


# === cost-weight trade-off ===


@pytest.fixture(scope="module")
def lambda_grid_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("lambda_grid")
    out = {}
    for lam in (1.0, 0.1, 0.01):
        for seed in SEEDS:
            out_dir = root / f"lam{lam}_{seed}"
            cfg = TrainerConfig(mode="ppo", seed=seed, total_steps=30000,
                                eval_every=1000, eval_episodes=2, early_stop=False)
            tr = Trainer(EnvConfig(cost_lambda=lam), ch.params_for_snr_db(5.0),
                         cfg, out_dir)
            result = tr.train()
            assert result.status == "completed"
            out[(lam, seed)] = out_dir
    return out


def test_eta_tradeoff_monotone_in_lambda(lambda_grid_runs):
    # converged eta: mean upload cost over the final three evals
    seed_mean = {}
    for lam in (1.0, 0.1, 0.01):
        tails = []
        for seed in SEEDS:
            evs = _eval_records(lambda_grid_runs[(lam, seed)])
            tails.append(np.mean([e["mean_comm_cost"] for e in evs[-3:]]))
        seed_mean[lam] = float(np.mean(tails))
    assert seed_mean[1.0] <= seed_mean[0.1] <= seed_mean[0.01], seed_mean


# === stopping contract ===


def test_early_stop_halts_before_budget(tmp_path):
    # cheap task, zero upload pressure: reward clears -0.5 immediately
    env = EnvConfig(cost_lambda=0.0, base_loss=0.05, weight_base=0.05)
    cfg = TrainerConfig(mode="ppo", seed=0, total_steps=15000, eval_every=200,
                        eval_episodes=2, early_stop=True, patience=5)
    tr = Trainer(env, ch.params_for_snr_db(5.0), cfg, tmp_path / "halting")
    t0 = time.monotonic()
    result = tr.train()
    assert result.status == "stopped_early"
    assert result.stopped_early
    assert result.steps < 15000
    # replay the rule over the recorded evals: the run must end at the first
    # eval that clears the target and closes a patience-length plateau
    rewards = [e["mean_reward"] for e in _eval_records(tmp_path / "halting")]
    best = -np.inf
    streak = 0
    stop_at = None
    for i, r in enumerate(rewards):
        if r > best:
            best, streak = r, 0
        else:
            streak += 1
        if r > -0.5 and streak >= cfg.patience:
            stop_at = i
            break
    assert stop_at == len(rewards) - 1
    assert time.monotonic() - t0 < 120.0


def test_early_stop_runs_to_budget_when_below_target(tmp_path):
    # floor of two keeps every reward under the -0.5 target
    env = EnvConfig(base_loss=2.0)
    cfg = TrainerConfig(mode="ppo", seed=0, total_steps=3000, eval_every=500,
                        eval_episodes=2, early_stop=True, patience=5)
    tr = Trainer(env, ch.params_for_snr_db(5.0), cfg, tmp_path / "nonhalting")
    t0 = time.monotonic()
    result = tr.train()
    assert result.status == "completed"
    assert not result.stopped_early
    assert result.steps >= 3000
    assert all(e["mean_reward"] < -0.5 for e in _eval_records(tmp_path / "nonhalting"))
    assert time.monotonic() - t0 < 120.0


# === determinism ===


def test_metrics_bit_reproducible(tmp_path):
    cfg = dict(
        mode="ppo_ddim", seed=7, total_steps=1200, eval_every=300,
        eval_episodes=2, early_stop=False, ddim_warmup_steps=600,
        schedule_steps=100, infer_steps=5, d_latent=32, embed_dim=16,
        ddim_batches=4, ddim_batch_size=16,
    )
    outs = []
    for name in ("first", "second"):
        tr = Trainer(EnvConfig(), ch.params_for_snr_db(5.0),
                     TrainerConfig(**cfg), tmp_path / name)
        result = tr.train()
        assert result.status == "completed"
        outs.append(tmp_path / name)
    for fname in ("metrics.jsonl", "evals.csv"):
        a = (outs[0] / fname).read_bytes()
        b = (outs[1] / fname).read_bytes()
        assert a == b, fname
