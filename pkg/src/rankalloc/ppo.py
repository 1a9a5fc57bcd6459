"""Coarse continuous policy: PPO with a diagonal Gaussian head.

Both networks are two-layer tanh perceptrons.  Training forwards run on the
autodiff tape; rollout forwards use the packed kernel backend.  Advantages
come from generalized advantage estimation

    A_t = sum_k (gamma * decay)^k delta_{t+k},
    delta_t = R_t + gamma * V_old(s_{t+1}) - V_old(s_t)

and the update minimizes

    E[-min(ratio * A, clip(ratio, 1 -/+ eps) * A)] + w_v * (V - (A + V_old))^2

with batch-normalized advantages in the policy term only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rankalloc import _kernels as K
from rankalloc import autodiff as ad


@dataclass
class PpoConfig:
    gamma: float = 0.95
    gae_decay: float = 0.95
    clip_ratio: float = 0.2
    lr: float = 1e-4
    epochs: int = 4
    minibatch: int = 32
    value_weight: float = 1.0
    entropy_weight: float = 0.0
    hidden: int = 256
    log_std_init: float = 0.0

    def validate(self):
        if not 0.0 < self.gamma <= 1.0 or not 0.0 <= self.gae_decay <= 1.0:
            raise ValueError("ppo.gamma must be in (0,1], gae_decay in [0,1]")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("ppo.clip_ratio must be in (0,1)")
        if self.lr <= 0 or self.epochs < 1 or self.minibatch < 1 or self.hidden < 1:
            raise ValueError("ppo.lr, epochs, minibatch and hidden must be positive")


class _TwoLayerNet:
    """Shared plumbing: params dict, tape forward, packed kernel forward."""

    def __init__(self, in_dim, out_dim, hidden, rng, head_scale=1.0, head_bias=0.0):
        self.w1 = ad.Value(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden)))
        self.b1 = ad.Value(np.zeros(hidden))
        self.w2 = ad.Value(
            rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, out_dim)) * head_scale
        )
        self.b2 = ad.Value(np.full(out_dim, float(head_bias)))
        self._cache = K.PackCache()

    def _core_params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward_tape(self, x: ad.Value) -> ad.Value:
        h = ad.tanh(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        wt1, b1, wt2, b2 = self._cache.get(
            self._core_params(),
            lambda d: (K.pack_transposed(d[0]), d[1], K.pack_transposed(d[2]), d[3]),
        )
        x = np.ascontiguousarray(np.atleast_2d(x))
        h = K.affine_act(x, wt1, b1, K.TANH)
        return K.affine_act(h, wt2, b2, K.IDENTITY)


class GaussianPolicy(_TwoLayerNet):
    """State -> action mean; a learned per-dimension log-std handles spread."""

    def __init__(self, obs_dim, act_dim, hidden, rng, log_std_init=0.0, mean_bias=0.0):
        # small head keeps the initial mean near its bias (mid-range ranks)
        super().__init__(obs_dim, act_dim, hidden, rng, head_scale=0.1, head_bias=mean_bias)
        self.log_std = ad.Value(np.full(act_dim, float(log_std_init)))
        self.act_dim = act_dim
        self.obs_dim = obs_dim

    def params(self) -> dict:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "log_std": self.log_std,
        }

    def mean_np(self, feats: np.ndarray) -> np.ndarray:
        return self.forward_np(feats)

    def act(self, feat: np.ndarray, rng):
        """Sample a ~ N(mean(s), diag(std^2)); returns (action, log_prob)."""
        mean = self.mean_np(feat)[0]
        std = np.exp(self.log_std.data)
        action = mean + std * rng.standard_normal(self.act_dim)
        logp = float(ad.gaussian_log_prob(action, mean, self.log_std.data))
        return action, logp

    def log_prob_tape(self, x: ad.Value, actions: np.ndarray) -> ad.Value:
        mean = self.forward_tape(x)
        inv_std = ad.exp(ad.neg(self.log_std))
        z = ad.mul(ad.sub(ad.constant(actions), mean), inv_std)
        per_dim = ad.sub(
            ad.mul(ad.constant(-0.5), ad.square(z)),
            ad.add(self.log_std, ad.constant(0.5 * np.log(2.0 * np.pi))),
        )
        return ad.vsum(per_dim, axis=1)

    def entropy(self) -> float:
        """Diagonal Gaussian entropy, nats."""
        return float(self.log_std.data.sum() + 0.5 * self.act_dim * (1.0 + np.log(2.0 * np.pi)))

    def entropy_tape(self) -> ad.Value:
        return ad.add(
            ad.vsum(self.log_std),
            ad.constant(0.5 * self.act_dim * (1.0 + np.log(2.0 * np.pi))),
        )


class ValueNet(_TwoLayerNet):
    def __init__(self, obs_dim, hidden, rng):
        super().__init__(obs_dim, 1, hidden, rng)

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def value_np(self, feats: np.ndarray) -> np.ndarray:
        return self.forward_np(feats)[:, 0]

    def value_tape(self, x: ad.Value) -> ad.Value:
        return ad.vsum(self.forward_tape(x), axis=1)  # (B,1) -> (B,)


def gae(rewards, values, bootstrap_value, gamma, decay, dones=None) -> np.ndarray:
    """Backward recursion A_t = delta_t + gamma*decay*(1 - done_t)*A_{t+1}."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal length")
    n = rewards.size
    if dones is None:
        dones = np.zeros(n, dtype=bool)
    adv = np.zeros(n)
    next_value = float(bootstrap_value)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        acc = delta + gamma * decay * live * acc
        adv[t] = acc
        next_value = values[t]
    return adv


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


def ppo_loss(
    policy: GaussianPolicy,
    valuenet: ValueNet,
    feats,
    actions,
    old_log_probs,
    advantages,
    returns,
    cfg: PpoConfig,
):
    """Clipped-surrogate + value regression loss on the tape.

    Returns (loss Value, diagnostics dict).
    """
    x = ad.constant(feats)
    logp = policy.log_prob_tape(x, actions)
    ratio = ad.exp(ad.sub(logp, ad.constant(old_log_probs)))
    adv = ad.constant(advantages)
    unclipped = ad.mul(ratio, adv)
    clipped = ad.mul(
        ad.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio), adv
    )
    policy_term = ad.neg(ad.vmean(ad.minimum(unclipped, clipped)))
    value_term = ad.vmean(ad.square(ad.sub(valuenet.value_tape(x), ad.constant(returns))))
    loss = ad.add(policy_term, ad.mul(ad.constant(cfg.value_weight), value_term))
    if cfg.entropy_weight:
        loss = ad.sub(loss, ad.mul(ad.constant(cfg.entropy_weight), policy.entropy_tape()))
    diag = {
        "policy_loss": float(policy_term.data),
        "value_loss": float(value_term.data),
        "clip_fraction": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_ratio)),
    }
    return loss, diag


def update(
    policy: GaussianPolicy,
    valuenet: ValueNet,
    opt_policy: ad.Adam,
    opt_value: ad.Adam,
    feats,
    actions,
    old_log_probs,
    rewards,
    values,
    bootstrap_value,
    cfg: PpoConfig,
    rng,
    dones=None,
) -> dict:
    """Multi-epoch minibatch PPO update over one rollout buffer."""
    feats = np.asarray(feats, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    old_log_probs = np.asarray(old_log_probs, dtype=np.float64)
    adv = gae(rewards, values, bootstrap_value, cfg.gamma, cfg.gae_decay, dones)
    returns = adv + np.asarray(values, dtype=np.float64)
    norm_adv = normalize_advantages(adv)

    n = feats.shape[0]
    agg = {"loss": 0.0, "policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0}
    steps = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            idx = order[lo : lo + cfg.minibatch]
            loss, diag = ppo_loss(
                policy,
                valuenet,
                feats[idx],
                actions[idx],
                old_log_probs[idx],
                norm_adv[idx],
                returns[idx],
                cfg,
            )
            if not np.isfinite(loss.data):
                raise FloatingPointError("non-finite PPO loss")
            ad.backward(loss)
            opt_policy.step()
            opt_value.step()
            agg["loss"] += float(loss.data)
            for k in ("policy_loss", "value_loss", "clip_fraction"):
                agg[k] += diag[k]
            steps += 1
    return {k: v / steps for k, v in agg.items()}
