"""Rank-allocation MDP over a simulated link and a surrogate task loss.

State: {SNR_dB, bandwidth, lexical entropy, OOV rate, current ranks}.
Action: a real vector of proposed ranks, one per adapted module (layer-major,
module order q,k,v,o,fc1,fc2), decoded by floor + clip.  Reward:
R = -U - lambda * eta, where U is the surrogate fine-tuning loss and eta the
communication cost of uploading the chosen adapter factors this step.

The surrogate loss saturates harmonically in each rank:

    U = u0 + c(H, rho) * mean_i( w_i / (1 + r_i) ) + noise
    c(H, rho) = 1 + a_H * H / log2|V| + a_rho * rho

so more complex text (higher entropy, more OOV) raises the stakes of
under-provisioned ranks, and the importance weights w_i decide which modules
deserve rank.  A subprocess oracle speaking line-delimited JSON can replace
the analytic model.
"""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass, field

import numpy as np

from rankalloc import channel
from rankalloc.channel import MODULE_KINDS, MODULES_PER_LAYER
from rankalloc.corpus import ComplexityStats, SyntheticCorpus, SyntheticCorpusConfig


@dataclass
class RankVector:
    """Integer ranks for every adapted module of every layer (length 6L)."""

    ranks: np.ndarray
    r_max: int
    layers: int

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks)
        if not np.issubdtype(self.ranks.dtype, np.integer):
            raise ValueError("ranks must be integers")
        self.ranks = self.ranks.astype(np.int64)
        if self.ranks.shape != (self.layers * MODULES_PER_LAYER,):
            raise ValueError(
                f"rank vector must have length {self.layers * MODULES_PER_LAYER}, "
                f"got {self.ranks.shape}"
            )
        if (self.ranks < 0).any() or (self.ranks > self.r_max).any():
            raise ValueError(f"ranks must lie in [0, {self.r_max}]")

    def as_matrix(self) -> np.ndarray:
        """(layers, 6) view; columns follow MODULE_KINDS order."""
        return self.ranks.reshape(self.layers, MODULES_PER_LAYER)


@dataclass
class EnvState:
    snr_db: float
    bandwidth_hz: float
    entropy_bits: float
    oov_rate: float
    ranks: RankVector


@dataclass
class StepOutcome:
    next_state: EnvState
    reward: float
    task_loss: float
    comm_cost: float
    projected: bool
    done: bool


@dataclass
class SurrogateLossModel:
    base_loss: float
    weights: np.ndarray  # importance per module, length 6L
    entropy_gain: float
    oov_gain: float
    obs_noise: float
    entropy_norm_bits: float  # log2 |V|
    saturation: str = "harmonic"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.base_loss <= 0:
            raise ValueError("surrogate base_loss must be positive")
        if (self.weights < 0).any():
            raise ValueError("surrogate weights must be non-negative")
        if self.saturation != "harmonic":
            raise ValueError(f"unknown saturation form {self.saturation!r}")
        if self.entropy_norm_bits <= 0:
            raise ValueError("entropy_norm_bits must be positive")


def complexity_gain(stats: ComplexityStats, model: SurrogateLossModel) -> float:
    """c(H, rho) = 1 + a_H * H/log2|V| + a_rho * rho."""
    return (
        1.0
        + model.entropy_gain * stats.entropy_bits / model.entropy_norm_bits
        + model.oov_gain * stats.oov_rate
    )


def surrogate_loss(ranks, stats: ComplexityStats, model: SurrogateLossModel, rng=None):
    """U >= u0; clamp guards the lower bound against observation noise."""
    r = np.asarray(ranks, dtype=np.float64)
    if r.shape != model.weights.shape:
        raise ValueError("rank vector and weight vector lengths differ")
    sat = float(np.mean(model.weights / (1.0 + r)))
    u = model.base_loss + complexity_gain(stats, model) * sat
    if model.obs_noise > 0 and rng is not None:
        u += rng.normal(0.0, model.obs_noise)
    return max(u, model.base_loss)


def importance_profile(
    layers: int,
    kind: str = "critical2x",
    base: float = 0.22,
    layer_gain_first: float = 1.5,
    layer_gain_last: float = 0.5,
) -> np.ndarray:
    """Per-module importance weights.

    "critical2x" doubles the attention-output and first MLP projections;
    "flat" weights every module equally.  A linear per-layer gain (first ->
    last) makes early layers matter more, so good allocations are structured
    rather than uniform.
    """
    if kind == "critical2x":
        module_factor = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 1.0])
    elif kind == "flat":
        module_factor = np.ones(MODULES_PER_LAYER)
    else:
        raise ValueError(f"unknown importance profile {kind!r}")
    layer_factor = np.linspace(layer_gain_first, layer_gain_last, layers)
    return base * np.outer(layer_factor, module_factor).ravel()


def project_to_budget(
    ranks, capacity: float, t_max: float, hidden_dim: int, bits_per_param: float = 32.0
):
    """Greedy repair: decrement the largest rank (ties -> lowest index) until
    the total transmit time fits the budget.  Returns (ranks, changed)."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    r = np.array(ranks, dtype=np.int64, copy=True)
    changed = False
    while channel.transmit_time(r, capacity, hidden_dim, bits_per_param)[1] > t_max:
        if not r.any():
            break  # all-zero is always feasible; guard against bad inputs
        r[int(np.argmax(r))] -= 1
        changed = True
    return r, changed


def encode_state(state: EnvState, vocab_size: int) -> np.ndarray:
    """Fixed normalizers: [snr/20, W/1e8, H/log2|V|, rho, ranks/r_max]."""
    feats = np.concatenate(
        [
            [
                state.snr_db / 20.0,
                state.bandwidth_hz / 1e8,
                state.entropy_bits / math.log2(vocab_size),
                state.oov_rate,
            ],
            state.ranks.ranks / state.ranks.r_max,
        ]
    )
    if not np.isfinite(feats).all():
        raise ValueError("state features must be finite")
    return feats


@dataclass
class EnvConfig:
    layers: int = 24
    hidden_dim: int = 2048
    r_max: int = 8
    t_max_s: float = 1.0
    cost_lambda: float = 0.1
    horizon: int = 32
    projection: str = "soft"  # "soft": eta penalty only; "hard": greedy repair
    min_rank: int = 0
    init_ranks: str = "half"  # "half" | "zero" | "max"
    bits_per_param: float = 32.0
    base_loss: float = 0.25
    entropy_gain: float = 0.5
    oov_gain: float = 1.0
    obs_noise: float = 0.005
    weight_profile: str = "critical2x"
    weight_base: float = 0.5
    layer_gain_first: float = 1.5
    layer_gain_last: float = 0.5
    corpus: SyntheticCorpusConfig = field(default_factory=SyntheticCorpusConfig)

    def validate(self):
        if self.layers < 1 or self.hidden_dim < 1 or self.r_max < 1:
            raise ValueError("layers, hidden_dim and r_max must be positive")
        if self.t_max_s <= 0:
            raise ValueError("t_max_s must be positive")
        if self.cost_lambda < 0:
            raise ValueError("lambda must be non-negative")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.projection not in ("soft", "hard"):
            raise ValueError(f"unknown projection mode {self.projection!r}")
        if self.min_rank not in (0, 1):
            raise ValueError("min_rank must be 0 or 1")
        if self.init_ranks not in ("half", "zero", "max"):
            raise ValueError(f"unknown init_ranks policy {self.init_ranks!r}")
        self.corpus.validate()

    @property
    def n_modules(self) -> int:
        return self.layers * MODULES_PER_LAYER

    def build_surrogate(self) -> SurrogateLossModel:
        return SurrogateLossModel(
            base_loss=self.base_loss,
            weights=importance_profile(
                self.layers,
                self.weight_profile,
                self.weight_base,
                self.layer_gain_first,
                self.layer_gain_last,
            ),
            entropy_gain=self.entropy_gain,
            oov_gain=self.oov_gain,
            obs_noise=self.obs_noise,
            entropy_norm_bits=math.log2(self.corpus.vocab_size),
        )


class RankAllocationEnv:
    """Episodic wrapper: horizon-length episodes of a continuing task.

    Channel realization and corpus statistics are resampled every step;
    the deployed ranks carry over as the next state's configuration.
    """

    def __init__(self, cfg: EnvConfig, channel_params, rng, corpus_provider=None, oracle=None):
        cfg.validate()
        channel_params.validate()
        self.cfg = cfg
        self.channel_params = channel_params
        self.rng = rng
        self.corpus = corpus_provider or SyntheticCorpus(cfg.corpus)
        self.oracle = oracle
        self.model = cfg.build_surrogate()
        self._state = None
        self._realization = None
        self._stats = None
        self._t = 0

    def _init_ranks(self) -> np.ndarray:
        n = self.cfg.n_modules
        if self.cfg.init_ranks == "zero":
            return np.zeros(n, dtype=np.int64)
        if self.cfg.init_ranks == "max":
            return np.full(n, self.cfg.r_max, dtype=np.int64)
        return np.full(n, self.cfg.r_max // 2, dtype=np.int64)

    def _observe(self, ranks: np.ndarray) -> EnvState:
        self._realization = channel.realize(self.channel_params, self.rng)
        self._stats = self.corpus.sample_stats(self.rng)
        return EnvState(
            snr_db=self._realization.snr_db,
            bandwidth_hz=self.channel_params.bandwidth_hz,
            entropy_bits=self._stats.entropy_bits,
            oov_rate=self._stats.oov_rate,
            ranks=RankVector(ranks, self.cfg.r_max, self.cfg.layers),
        )

    def reset(self) -> EnvState:
        self._t = 0
        self._state = self._observe(self._init_ranks())
        return self._state

    @property
    def capacity_bps(self) -> float:
        return self._realization.capacity_bps

    def _task_loss(self, ranks: np.ndarray) -> float:
        if self.oracle is not None:
            return self.oracle.query(ranks, self._stats)
        return surrogate_loss(ranks, self._stats, self.model, self.rng)

    def step(self, action: np.ndarray) -> StepOutcome:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.cfg.n_modules,):
            raise ValueError(f"action must have shape ({self.cfg.n_modules},)")
        if not np.isfinite(action).all():
            raise ValueError("action must be finite")

        # floor + clip decode; the optional min_rank=1 lower bound applies here
        ranks = np.clip(np.floor(action), self.cfg.min_rank, self.cfg.r_max).astype(np.int64)
        projected = False
        if self.cfg.projection == "hard":
            ranks, projected = project_to_budget(
                ranks,
                self._realization.capacity_bps,
                self.cfg.t_max_s,
                self.cfg.hidden_dim,
                self.cfg.bits_per_param,
            )

        task_loss = self._task_loss(ranks)
        eta = channel.comm_cost(
            ranks,
            self._realization.capacity_bps,
            self.cfg.t_max_s,
            self.cfg.hidden_dim,
            self.cfg.bits_per_param,
        )
        reward = -task_loss - self.cfg.cost_lambda * eta

        self._t += 1
        done = self._t >= self.cfg.horizon
        self._state = self._observe(ranks)
        return StepOutcome(
            next_state=self._state,
            reward=reward,
            task_loss=task_loss,
            comm_cost=eta,
            projected=projected,
            done=done,
        )


ORACLE_PROTOCOL = 1


class OracleClient:
    """Adapter to an external fine-tuning-loss oracle subprocess.

    Protocol (one JSON object per line, schema v1):
      request:  {"v": 1, "ranks": [ints], "entropy_bits": f, "oov_rate": f}
      response: {"v": 1, "loss": f}
    """

    def __init__(self, argv: list[str]):
        self.proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def query(self, ranks, stats: ComplexityStats) -> float:
        req = {
            "v": ORACLE_PROTOCOL,
            "ranks": [int(r) for r in np.asarray(ranks)],
            "entropy_bits": float(stats.entropy_bits),
            "oov_rate": float(stats.oov_rate),
        }
        self.proc.stdin.write(json.dumps(req) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError("oracle subprocess closed its output")
        resp = json.loads(line)
        if resp.get("v") != ORACLE_PROTOCOL or "loss" not in resp:
            raise RuntimeError(f"malformed oracle response: {line.strip()!r}")
        return float(resp["loss"])

    def close(self):
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
