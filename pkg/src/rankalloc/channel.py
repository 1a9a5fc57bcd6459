"""Wireless link model: slow-fading AWGN capacity and adapter upload costs.

Capacity C = E_h[W * log2(1 + |h|^2 P / sigma^2)] bit/s, estimated by Monte
Carlo over `expectation_draws` gain draws (one draw with a fixed gain is the
degenerate case).  Uploading the factors of a rank-r adapter for one module
moves r*(2*d_h + 1) parameters at b bits each, so its transmit time is
r*(2*d_h+1)*b / C seconds; the communication cost eta is total time divided
by the latency budget T_max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# per-layer adapted modules, in vector order (layer-major)
MODULE_KINDS = ("q", "k", "v", "o", "fc1", "fc2")
MODULES_PER_LAYER = len(MODULE_KINDS)


@dataclass
class ChannelParams:
    bandwidth_hz: float = 1e8
    power: float = 1.0
    noise_power: float = 1.0
    fading: str = "fixed"  # "fixed" | "rayleigh"
    fixed_gain: float = 1.0  # |h| when fading == "fixed"
    rayleigh_scale: float = 0.5**0.5  # per-component std; E|h|^2 = 2*scale^2
    expectation_draws: int = 1

    def validate(self):
        if self.bandwidth_hz <= 0:
            raise ValueError("channel.bandwidth_hz must be positive")
        if self.power <= 0 or self.noise_power <= 0:
            raise ValueError("channel power terms must be positive")
        if self.fading not in ("fixed", "rayleigh"):
            raise ValueError(f"unknown fading law {self.fading!r}")
        if self.expectation_draws < 1:
            raise ValueError("channel.expectation_draws must be >= 1")


@dataclass
class ChannelRealization:
    """One coherence block: the exposed gain plus the MC capacity estimate."""

    gain: float  # |h| of the block the state exposes
    snr_linear: float
    snr_db: float
    capacity_bps: float


def params_for_snr_db(snr_db: float, base: ChannelParams | None = None) -> ChannelParams:
    """Fixed-gain params hitting an exact target SNR: |h| = sqrt(snr*sigma^2/P)."""
    p = base or ChannelParams()
    snr = 10.0 ** (snr_db / 10.0)
    return ChannelParams(
        bandwidth_hz=p.bandwidth_hz,
        power=p.power,
        noise_power=p.noise_power,
        fading="fixed",
        fixed_gain=math.sqrt(snr * p.noise_power / p.power),
        expectation_draws=1,
    )


def _draw_gains(params: ChannelParams, rng, n: int) -> np.ndarray:
    if params.fading == "fixed":
        return np.full(n, params.fixed_gain, dtype=np.float64)
    re = rng.normal(0.0, params.rayleigh_scale, size=n)
    im = rng.normal(0.0, params.rayleigh_scale, size=n)
    return np.hypot(re, im)


def realize(params: ChannelParams, rng) -> ChannelRealization:
    """Draw a coherence block and estimate capacity over expectation_draws."""
    params.validate()
    gains = _draw_gains(params, rng, params.expectation_draws)
    snrs = gains**2 * params.power / params.noise_power
    capacity = float(np.mean(params.bandwidth_hz * np.log2(1.0 + snrs)))
    snr0 = float(snrs[0])
    snr_db = 10.0 * math.log10(snr0) if snr0 > 0 else float("-inf")
    return ChannelRealization(
        gain=float(gains[0]), snr_linear=snr0, snr_db=snr_db, capacity_bps=capacity
    )


def capacity_bps(snr_db: float, bandwidth_hz: float) -> float:
    """Deterministic single-gain capacity W * log2(1 + snr)."""
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    return bandwidth_hz * math.log2(1.0 + 10.0 ** (snr_db / 10.0))


def transmit_time(
    ranks: np.ndarray, capacity: float, hidden_dim: int, bits_per_param: float = 32.0
):
    """Per-module and total upload seconds: r*(2*d_h+1)*b / C each.

    Returns (per_module_seconds, total_seconds).
    """
    if capacity <= 0:
        raise ValueError("capacity must be positive to transmit")
    ranks = np.asarray(ranks, dtype=np.float64)
    if (ranks < 0).any():
        raise ValueError("ranks must be non-negative")
    per = ranks * (2.0 * hidden_dim + 1.0) * bits_per_param / capacity
    return per, float(per.sum())


def comm_cost(
    ranks: np.ndarray,
    capacity: float,
    t_max: float,
    hidden_dim: int,
    bits_per_param: float = 32.0,
) -> float:
    """eta = total transmit time / T_max (dimensionless; >1 means over budget)."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    _, total = transmit_time(ranks, capacity, hidden_dim, bits_per_param)
    return total / t_max


def param_count(ranks: np.ndarray, hidden_dim: int, mode: str = "pq_only") -> int:
    """Transmitted adapter parameters.

    pq_only counts the two rank-r factors (sum r*2*d_h); with_lambda also
    counts one r-vector of scaling terms per module (sum r*(2*d_h+1)).
    """
    ranks = np.asarray(ranks)
    if (ranks < 0).any():
        raise ValueError("ranks must be non-negative")
    total_rank = int(ranks.sum())
    if mode == "pq_only":
        return total_rank * 2 * hidden_dim
    if mode == "with_lambda":
        return total_rank * (2 * hidden_dim + 1)
    raise ValueError(f"unknown param_count mode {mode!r}")


def received_signal(codeword: np.ndarray, gain: complex, noise_power: float, rng):
    """y = h*c + n with n ~ CN(0, sigma^2 I) (per-component variance sigma^2/2)."""
    codeword = np.asarray(codeword)
    if noise_power < 0:
        raise ValueError("noise_power must be non-negative")
    scale = math.sqrt(noise_power / 2.0)
    noise = scale * (rng.normal(size=codeword.shape) + 1j * rng.normal(size=codeword.shape))
    return gain * codeword + noise
