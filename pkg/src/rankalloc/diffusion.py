"""Conditional DDIM refiner over rank vectors.

Forward corruption x_tau = sqrt(ab_tau) x0 + sqrt(1 - ab_tau) eps with
ab_0 := 1.  A residual MLP predicts epsilon / x0 / v (configurable); outputs
are converted to (eps_hat, x0_hat), guided classifier-free as
eps_tilde = (1 + w) eps_cond - w eps_uncond, and stepped by

    x_{tau'} = sqrt(ab') x0_hat + sqrt(1 - ab' - sigma^2) eps_tilde + sigma z
    sigma = eta * sqrt((1-ab')/(1-ab)) * sqrt(1 - ab/ab')

down a uniform-stride timestep subsequence that always contains the largest
step.  The sampled x0 decodes to integer ranks by floor + clip.  Training
minimizes a reward-weighted denoising MSE: weights exp(clamp((R - mean R)/
temp, -5, 5)) are normalized to mean one and blended in with strength kappa
(kappa = 0 recovers the plain MSE).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rankalloc import _kernels as K
from rankalloc import autodiff as ad
from rankalloc.env import RankVector

SCHEDULE_KINDS = ("linear", "scaled_linear", "cosine")
PREDICTION_TYPES = ("epsilon", "x0", "v")

_BETA_START = 1e-4
_BETA_END = 2e-2
_COSINE_S = 0.008


@dataclass
class NoiseSchedule:
    kind: str
    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, tau: int) -> float:
        """ab_tau with the ab_0 := 1 boundary convention."""
        if tau == 0:
            return 1.0
        if not 1 <= tau <= self.steps:
            raise ValueError(f"timestep {tau} outside [0, {self.steps}]")
        return float(self.alpha_bars[tau - 1])


def build_schedule(kind: str, steps: int) -> NoiseSchedule:
    if steps < 1:
        raise ValueError("schedule needs at least one step")
    if kind == "linear":
        betas = np.linspace(_BETA_START, _BETA_END, steps)
    elif kind == "scaled_linear":
        betas = np.linspace(math.sqrt(_BETA_START), math.sqrt(_BETA_END), steps) ** 2
    elif kind == "cosine":
        t = np.arange(steps + 1, dtype=np.float64)
        f = np.cos(((t / steps + _COSINE_S) / (1.0 + _COSINE_S)) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], None, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if (betas <= 0).any() or (betas >= 1).any():
        raise ValueError("derived betas left (0, 1)")
    alphas = 1.0 - betas
    return NoiseSchedule(kind, steps, betas, alphas, np.cumprod(alphas))


def forward_sample(x0: np.ndarray, tau: int, schedule: NoiseSchedule, eps: np.ndarray):
    """q(x_tau | x0) reparameterized with the supplied noise."""
    if tau < 1:
        raise ValueError("forward_sample needs tau >= 1")
    ab = schedule.alpha_bar(tau)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def timestep_embedding(taus, dim: int) -> np.ndarray:
    """Sinusoidal features, (B, dim); dim must be even."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    ang = taus[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Residual MLP f_psi(x_tau, e_tau, cond) with a learned null condition.

    Rank-unit inputs are scaled by input_scale (1/r_max in practice) before
    entering the network; the null-condition embedding lives directly in that
    scaled space.  Two pre-activation residual blocks of width d_latent, SiLU
    throughout, linear head.
    """

    def __init__(self, act_dim, rng, d_latent=256, embed_dim=64, input_scale=1.0):
        in_dim = act_dim + embed_dim + act_dim
        s_in = 1.0 / math.sqrt(in_dim)
        s_lat = 1.0 / math.sqrt(d_latent)
        self.act_dim = act_dim
        self.embed_dim = embed_dim
        self.d_latent = d_latent
        self.input_scale = float(input_scale)
        self.w_in = ad.Value(rng.normal(0.0, s_in, (in_dim, d_latent)))
        self.b_in = ad.Value(np.zeros(d_latent))
        self.w1a = ad.Value(rng.normal(0.0, s_lat, (d_latent, d_latent)))
        self.b1a = ad.Value(np.zeros(d_latent))
        self.w1b = ad.Value(rng.normal(0.0, s_lat, (d_latent, d_latent)))
        self.b1b = ad.Value(np.zeros(d_latent))
        self.w2a = ad.Value(rng.normal(0.0, s_lat, (d_latent, d_latent)))
        self.b2a = ad.Value(np.zeros(d_latent))
        self.w2b = ad.Value(rng.normal(0.0, s_lat, (d_latent, d_latent)))
        self.b2b = ad.Value(np.zeros(d_latent))
        # near-zero head: an untrained net predicts ~zero noise
        self.w_out = ad.Value(rng.normal(0.0, s_lat, (d_latent, act_dim)) * 0.01)
        self.b_out = ad.Value(np.zeros(act_dim))
        self.null_cond = ad.Value(rng.normal(0.0, 0.1, act_dim))
        self._cache = K.PackCache()

    def params(self) -> dict:
        return {
            "w_in": self.w_in, "b_in": self.b_in,
            "w1a": self.w1a, "b1a": self.b1a, "w1b": self.w1b, "b1b": self.b1b,
            "w2a": self.w2a, "b2a": self.b2a, "w2b": self.w2b, "b2b": self.b2b,
            "w_out": self.w_out, "b_out": self.b_out,
            "null_cond": self.null_cond,
        }

    # === inference path (kernel backend) ===

    def _packed(self):
        ps = [self.w_in, self.w1a, self.w1b, self.w2a, self.w2b, self.w_out]
        return self._cache.get(ps, lambda d: tuple(K.pack_transposed(w) for w in d))

    def _forward_rows(self, z: np.ndarray) -> np.ndarray:
        wt_in, wt1a, wt1b, wt2a, wt2b, wt_out = self._packed()
        h = K.affine_act(np.ascontiguousarray(z), wt_in, self.b_in.data, K.SILU)
        h = K.residual_block(h, wt1a, self.b1a.data, wt1b, self.b1b.data, K.SILU)
        h = K.residual_block(h, wt2a, self.b2a.data, wt2b, self.b2b.data, K.SILU)
        return K.affine_act(h, wt_out, self.b_out.data, K.IDENTITY)

    def _cond_rows(self, cond, n: int) -> np.ndarray:
        if cond is None:
            return np.tile(self.null_cond.data, (n, 1))
        return np.tile(np.asarray(cond, dtype=np.float64) * self.input_scale, (n, 1))

    def predict(self, x_tau: np.ndarray, tau: int, cond=None) -> np.ndarray:
        """Raw prediction (in the configured parameterization's units)."""
        x = np.atleast_2d(np.asarray(x_tau, dtype=np.float64)) * self.input_scale
        e = timestep_embedding(np.full(x.shape[0], tau), self.embed_dim)
        z = np.concatenate([x, e, self._cond_rows(cond, x.shape[0])], axis=1)
        out = self._forward_rows(z)
        return out[0] if np.asarray(x_tau).ndim == 1 else out

    def predict_pair(self, x_tau: np.ndarray, tau: int, cond) -> tuple:
        """(conditional, unconditional) raw predictions in one batched pass."""
        x = np.asarray(x_tau, dtype=np.float64) * self.input_scale
        e = timestep_embedding([tau], self.embed_dim)[0]
        c = np.asarray(cond, dtype=np.float64) * self.input_scale
        z = np.stack(
            [
                np.concatenate([x, e, c]),
                np.concatenate([x, e, self.null_cond.data]),
            ]
        )
        out = self._forward_rows(z)
        return out[0], out[1]

    # === training path (autodiff tape) ===

    def predict_tape(self, x_tau_rows, taus, cond_rows, drop_mask) -> ad.Value:
        """Batched tape forward; drop_mask rows use the null embedding."""
        n = x_tau_rows.shape[0]
        e = timestep_embedding(taus, self.embed_dim)
        keep = (~np.asarray(drop_mask, dtype=bool)).astype(np.float64)[:, None]
        cond_fixed = ad.constant(
            np.asarray(cond_rows, dtype=np.float64) * self.input_scale * keep
        )
        cond_mix = ad.add(cond_fixed, ad.mul(ad.constant(1.0 - keep), self.null_cond))
        z = ad.concat(
            [ad.constant(x_tau_rows * self.input_scale), ad.constant(e), cond_mix],
            axis=1,
        )
        h = ad.silu(ad.add(ad.matmul(z, self.w_in), self.b_in))
        for wa, ba, wb, bb in (
            (self.w1a, self.b1a, self.w1b, self.b1b),
            (self.w2a, self.b2a, self.w2b, self.b2b),
        ):
            t = ad.silu(ad.add(ad.matmul(h, wa), ba))
            h = ad.add(h, ad.add(ad.matmul(t, wb), bb))
        return ad.add(ad.matmul(h, self.w_out), self.b_out)

    # === persistence ===

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params().items()}

    def load_state(self, arrays: dict):
        for k, v in self.params().items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != v.data.shape:
                raise ValueError(f"denoiser parameter {k}: shape {a.shape} != {v.data.shape}")
            v.data = a.copy()
            v.version += 1


def convert(pred: np.ndarray, prediction_type: str, x_tau: np.ndarray, alpha_bar: float):
    """Map a raw prediction to (eps_hat, x0_hat) at noise level alpha_bar."""
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError("alpha_bar must lie in (0, 1]")
    sab = math.sqrt(alpha_bar)
    s1m = math.sqrt(1.0 - alpha_bar)
    if prediction_type == "epsilon":
        eps = pred
        x0 = (x_tau - s1m * eps) / sab
    elif prediction_type == "x0":
        x0 = pred
        # at alpha_bar == 1 the noise is unidentifiable; zero is its mean
        eps = (x_tau - sab * x0) / s1m if alpha_bar < 1.0 else np.zeros_like(x_tau)
    elif prediction_type == "v":
        eps = sab * pred + s1m * x_tau
        x0 = sab * x_tau - s1m * pred
    else:
        raise ValueError(f"unknown prediction type {prediction_type!r}")
    return eps, x0


def v_target(x0: np.ndarray, eps: np.ndarray, alpha_bar) -> np.ndarray:
    """v = sqrt(ab) eps - sqrt(1 - ab) x0."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    return np.sqrt(ab) * eps - np.sqrt(1.0 - ab) * x0


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance: float):
    """eps_tilde = (1 + w) eps_cond - w eps_uncond."""
    return (1.0 + guidance) * eps_cond - guidance * eps_uncond


def posterior_mean(x_tau, tau: int, eps_hat, schedule: NoiseSchedule):
    """mu = (x_tau - (1 - alpha_tau)/sqrt(1 - ab_tau) * eps_hat)/sqrt(alpha_tau)."""
    if tau < 1:
        raise ValueError("posterior_mean needs tau >= 1")
    alpha = float(schedule.alphas[tau - 1])
    ab = schedule.alpha_bar(tau)
    return (x_tau - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)


def ddim_sigma(ab_t: float, ab_prev: float, eta: float) -> float:
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)


@dataclass
class SamplerConfig:
    infer_steps: int = 50
    eta: float = 0.0
    guidance: float = 1.5
    prediction: str = "epsilon"
    x0_estimator: str = "inversion"  # "inversion" | "posterior_mean"
    clip_x0: tuple | None = None

    def validate(self, schedule_steps: int | None = None):
        if self.infer_steps < 1:
            raise ValueError("sampler.infer_steps must be >= 1")
        if schedule_steps is not None and self.infer_steps > schedule_steps:
            raise ValueError("sampler.infer_steps cannot exceed the schedule length")
        if self.eta < 0:
            raise ValueError("sampler.eta must be non-negative")
        if self.prediction not in PREDICTION_TYPES:
            raise ValueError(f"unknown prediction type {self.prediction!r}")
        if self.x0_estimator not in ("inversion", "posterior_mean"):
            raise ValueError(f"unknown x0 estimator {self.x0_estimator!r}")
        if self.clip_x0 is not None and self.clip_x0[0] >= self.clip_x0[1]:
            raise ValueError("clip_x0 bounds must be increasing")


def ddim_step(x_tau, tau: int, tau_prev: int, eps_tilde, x0_hat, cfg: SamplerConfig,
              schedule: NoiseSchedule, rng=None):
    """One deterministic-or-stochastic DDIM update from tau to tau_prev."""
    if not 0 <= tau_prev < tau:
        raise ValueError("need 0 <= tau_prev < tau")
    ab_t = schedule.alpha_bar(tau)
    ab_p = schedule.alpha_bar(tau_prev)
    sigma = ddim_sigma(ab_t, ab_p, cfg.eta)
    rad = 1.0 - ab_p - sigma * sigma
    if rad < -1e-12:
        raise ValueError("sigma^2 exceeds 1 - alpha_bar_prev")
    out = math.sqrt(ab_p) * x0_hat + math.sqrt(max(rad, 0.0)) * eps_tilde
    if sigma > 0.0:
        if rng is None:
            raise ValueError("stochastic step (eta > 0) needs an rng")
        out = out + sigma * rng.standard_normal(np.shape(x_tau))
    return out


def timestep_subsequence(schedule_steps: int, n: int) -> np.ndarray:
    """Uniform stride over [1, T], always containing T; strictly increasing."""
    if not 1 <= n <= schedule_steps:
        raise ValueError("need 1 <= infer_steps <= schedule steps")
    if n == 1:
        return np.array([schedule_steps], dtype=np.int64)
    taus = np.rint(np.linspace(1, schedule_steps, n)).astype(np.int64)
    return taus


def sample(cond, cfg: SamplerConfig, schedule: NoiseSchedule, denoiser: Denoiser, rng):
    """Draw x_T ~ N(0, I) and run the guided reverse chain; returns x0."""
    cfg.validate(schedule.steps)
    taus = timestep_subsequence(schedule.steps, cfg.infer_steps)
    x = rng.standard_normal(denoiser.act_dim)
    for i in range(len(taus) - 1, -1, -1):
        tau = int(taus[i])
        tau_prev = int(taus[i - 1]) if i > 0 else 0
        ab_t = schedule.alpha_bar(tau)
        if cfg.guidance == 0.0:
            raw_c = denoiser.predict(x, tau, cond)
            eps_tilde, _ = convert(raw_c, cfg.prediction, x, ab_t)
        else:
            raw_c, raw_u = denoiser.predict_pair(x, tau, cond)
            eps_c, _ = convert(raw_c, cfg.prediction, x, ab_t)
            eps_u, _ = convert(raw_u, cfg.prediction, x, ab_t)
            eps_tilde = cfg_combine(eps_c, eps_u, cfg.guidance)
        if cfg.x0_estimator == "posterior_mean":
            x0_hat = posterior_mean(x, tau, eps_tilde, schedule)
        else:
            x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_tilde) / math.sqrt(ab_t)
        if cfg.clip_x0 is not None:
            x0_hat = np.clip(x0_hat, cfg.clip_x0[0], cfg.clip_x0[1])
        x = ddim_step(x, tau, tau_prev, eps_tilde, x0_hat, cfg, schedule, rng)
    return x


def decode(x0: np.ndarray, r_max: int) -> RankVector:
    """Integer ranks: clip(floor(x0), 0, r_max)."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.size % 6:
        raise ValueError("rank vector length must be a multiple of 6")
    ranks = np.clip(np.floor(x0), 0, r_max).astype(np.int64)
    return RankVector(ranks, r_max=r_max, layers=x0.size // 6)


def reward_weights(rewards: np.ndarray, temp: float, kappa: float) -> np.ndarray:
    """exp(clamp(centered/temp, +/-5)) -> mean-one -> tempered by kappa."""
    if temp <= 0:
        raise ValueError("reward temperature must be positive")
    r = np.asarray(rewards, dtype=np.float64)
    w = np.exp(np.clip((r - r.mean()) / temp, -5.0, 5.0))
    w = w / w.mean()
    return w**kappa


def ddim_loss(
    x0_batch,
    cond_batch,
    rewards,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    prediction: str = "epsilon",
    kappa: float = 0.1,
    p_uncond: float = 0.1,
    temp: float = 1.0,
    rng=None,
    draws=None,
):
    """Reward-weighted denoising loss over a transition batch.

    draws=(taus, eps, drop_mask) pins the stochastic pieces (for gradient
    checks); otherwise they come from rng.  Returns (loss Value, diag).
    """
    x0 = np.asarray(x0_batch, dtype=np.float64)
    cond = np.asarray(cond_batch, dtype=np.float64)
    n, d = x0.shape
    if prediction not in PREDICTION_TYPES:
        raise ValueError(f"unknown prediction type {prediction!r}")
    if draws is not None:
        taus, eps, drop = draws
    else:
        taus = rng.integers(1, schedule.steps + 1, size=n)
        eps = rng.standard_normal((n, d))
        drop = rng.random(n) < p_uncond
    ab = schedule.alpha_bars[np.asarray(taus) - 1][:, None]
    x_tau = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    if prediction == "epsilon":
        target = eps
    elif prediction == "x0":
        target = x0
    else:
        target = v_target(x0, eps, ab)
    w = reward_weights(rewards, temp, kappa)
    pred = denoiser.predict_tape(x_tau, taus, cond, drop)
    per_sample = ad.vsum(ad.square(ad.sub(pred, ad.constant(target))), axis=1)
    loss = ad.vmean(ad.mul(per_sample, ad.constant(w / d)))
    diag = {
        "weight_min": float(w.min()),
        "weight_max": float(w.max()),
        "drop_fraction": float(np.mean(drop)),
    }
    return loss, diag
