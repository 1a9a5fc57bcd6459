"""Training orchestration: coarse policy, refiner, or both.

Modes
  ppo       the Gaussian policy acts alone, its output decoded directly
  ddim      the refiner trains on uniformly drawn conditions, no policy
  ppo_ddim  the policy's action conditions the refiner; the refined sample
            is what the environment deploys

Every episode draws its generators from SeedSequence((seed, domain, index)),
so a resumed run replays the exact stream a straight run would have used.
Evaluation rolls deterministic episodes (policy mean, eta = 0) on separate
generators that never touch the training streams.  metrics.jsonl and
evals.csv contain no wall-clock data and are byte-identical across runs of
the same config and seed; summary.json carries the timing.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rankalloc import autodiff as ad
from rankalloc import diffusion as df
from rankalloc import ppo as ppo_mod
from rankalloc.channel import ChannelParams
from rankalloc.env import EnvConfig, RankAllocationEnv, encode_state

MODES = ("ppo", "ddim", "ppo_ddim")
METRICS_SCHEMA = 1

_TRAIN_DOMAIN = 0
_EVAL_DOMAIN = 1
_INIT_DOMAIN = 2


@dataclass
class TrainerConfig:
    mode: str = "ppo_ddim"
    seed: int = 0
    total_steps: int = 15_000
    hidden: int = 256
    eval_every: int = 100
    eval_episodes: int = 4
    early_stop: bool = True
    patience: int = 5
    reward_target: float | None = None  # None: min(-lambda, -0.5)
    checkpoint_every: int = 0  # episodes; 0 keeps only the final checkpoint
    ppo: ppo_mod.PpoConfig = field(default_factory=ppo_mod.PpoConfig)
    schedule_kind: str = "cosine"
    schedule_steps: int = 1000
    infer_steps: int = 50
    eta: float = 0.0
    guidance: float = 1.5
    prediction: str = "epsilon"
    kappa: float = 0.1
    p_uncond: float = 0.1
    reward_temp: float = 1.0
    lr_ddim: float = 5e-5
    ddim_warmup_steps: int = 2000
    ddim_batches: int = 8
    ddim_batch_size: int = 32
    buffer_capacity: int = 4096
    d_latent: int = 256
    embed_dim: int = 64
    clip_x0: bool = True  # clamp x0 estimates to [-1, r_max + 1] while sampling

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ValueError("eval cadence and episode count must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every cannot be negative")
        if min(self.ddim_batches, self.ddim_batch_size, self.buffer_capacity) < 1:
            raise ValueError("refiner batch settings must be positive")
        if self.lr_ddim <= 0:
            raise ValueError("lr_ddim must be positive")
        if self.ddim_warmup_steps < 0:
            raise ValueError("ddim_warmup_steps cannot be negative")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.schedule_steps < 1:
            raise ValueError("schedule_steps must be positive")
        self.ppo.validate()
        df.SamplerConfig(
            infer_steps=self.infer_steps,
            eta=self.eta,
            guidance=self.guidance,
            prediction=self.prediction,
        ).validate(self.schedule_steps)


class EarlyStopRule:
    """Stop once the eval reward clears `target` and then plateaus.

    A plateau is `patience` consecutive evals without strict improvement
    over the best seen so far.
    """

    def __init__(self, target: float, patience: int):
        self.target = target
        self.patience = patience
        self.best = -np.inf
        self.streak = 0

    def observe(self, value: float) -> bool:
        if value > self.best:
            self.best = value
            self.streak = 0
        else:
            self.streak += 1
        return value > self.target and self.streak >= self.patience


class ReplayBuffer:
    """Ring buffer of (clean ranks, condition, reward) rows."""

    def __init__(self, capacity: int, dim: int):
        self.x0 = np.zeros((capacity, dim))
        self.cond = np.zeros((capacity, dim))
        self.reward = np.zeros(capacity)
        self.capacity = capacity
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, x0_rows, cond_rows, rewards):
        for x0, c, r in zip(x0_rows, cond_rows, rewards):
            i = self._next
            self.x0[i] = x0
            self.cond[i] = c
            self.reward[i] = r
            self._next = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng):
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=n)
        return self.x0[idx], self.cond[idx], self.reward[idx]


class JsonlWriter:
    """One compact, key-sorted JSON object per line."""

    def __init__(self, path, append: bool = False):
        self._fh = open(path, "a" if append else "w")

    def write(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    def close(self):
        self._fh.close()


@dataclass
class TrainResult:
    status: str
    episodes: int
    steps: int
    best_eval_reward: float | None
    final_eval_reward: float | None
    stopped_early: bool
    out_dir: str


def _spawn_rngs(seed: int, domain: int, index: int, n: int):
    ss = np.random.SeedSequence((seed, domain, index))
    return tuple(np.random.default_rng(c) for c in ss.spawn(n))


class Trainer:
    def __init__(self, env_cfg: EnvConfig, channel_params: ChannelParams,
                 cfg: TrainerConfig, out_dir):
        cfg.validate()
        env_cfg.validate()
        channel_params.validate()
        self.env_cfg = env_cfg
        self.channel_params = channel_params
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        self.act_dim = env_cfg.n_modules
        self.obs_dim = 4 + self.act_dim
        self.env = RankAllocationEnv(env_cfg, channel_params, np.random.default_rng(0))
        self.eval_env = RankAllocationEnv(env_cfg, channel_params, np.random.default_rng(0))

        init_rng = _spawn_rngs(cfg.seed, _INIT_DOMAIN, 0, 3)
        self.policy = self.valuenet = self.opt_policy = self.opt_value = None
        if cfg.mode != "ddim":
            self.policy = ppo_mod.GaussianPolicy(
                self.obs_dim, self.act_dim, cfg.hidden, init_rng[0],
                mean_bias=env_cfg.r_max / 2.0,
            )
            self.valuenet = ppo_mod.ValueNet(self.obs_dim, cfg.hidden, init_rng[1])
            self.opt_policy = ad.Adam(list(self.policy.params().values()), lr=cfg.ppo.lr)
            self.opt_value = ad.Adam(list(self.valuenet.params().values()), lr=cfg.ppo.lr)

        self.denoiser = self.opt_ddim = self.schedule = None
        self.buffer = None
        if cfg.mode != "ppo":
            self.schedule = df.build_schedule(cfg.schedule_kind, cfg.schedule_steps)
            self.denoiser = df.Denoiser(
                self.act_dim, init_rng[2], d_latent=cfg.d_latent,
                embed_dim=cfg.embed_dim, input_scale=1.0 / env_cfg.r_max,
            )
            self.opt_ddim = ad.Adam(list(self.denoiser.params().values()), lr=cfg.lr_ddim)
            self.buffer = ReplayBuffer(cfg.buffer_capacity, self.act_dim)

        clip = (-1.0, env_cfg.r_max + 1.0) if cfg.clip_x0 else None
        self._sampler = df.SamplerConfig(
            infer_steps=cfg.infer_steps, eta=cfg.eta, guidance=cfg.guidance,
            prediction=cfg.prediction, clip_x0=clip,
        )
        self._eval_sampler = df.SamplerConfig(
            infer_steps=cfg.infer_steps, eta=0.0, guidance=cfg.guidance,
            prediction=cfg.prediction, clip_x0=clip,
        )

        # counters survive checkpointing
        self.episode = 0
        self.global_step = 0
        self.eval_index = 0
        target = cfg.reward_target
        if target is None:
            target = min(-env_cfg.cost_lambda, -0.5)
        self.stopper = EarlyStopRule(target, cfg.patience)

    # === rollouts ===

    def _act(self, feat, act_rng, ddim_rng, deterministic, sampler):
        """Returns (a_out, log_prob, deployed)."""
        if self.cfg.mode == "ddim":
            a_out = act_rng.uniform(0.0, self.env_cfg.r_max, self.act_dim)
            logp = 0.0
        elif deterministic:
            a_out = self.policy.mean_np(feat[None, :])[0]
            logp = 0.0
        else:
            a_out, logp = self.policy.act(feat[None, :], act_rng)
        if not np.isfinite(a_out).all():
            raise FloatingPointError("non-finite policy action")
        if self.cfg.mode == "ppo":
            return a_out, logp, a_out
        if self.cfg.mode == "ppo_ddim" and self.global_step < self.cfg.ddim_warmup_steps:
            # deploy the coarse action until the refiner has seen enough replay
            return a_out, logp, a_out
        deployed = df.sample(a_out, sampler, self.schedule, self.denoiser, ddim_rng)
        if not np.isfinite(deployed).all():
            raise FloatingPointError("non-finite refined action")
        return a_out, logp, deployed

    def _rollout(self, env, rngs, deterministic, sampler, writer=None, episode=None):
        env_rng, act_rng, ddim_rng = rngs
        env.rng = env_rng
        state = env.reset()
        n = self.env_cfg.horizon
        feats = np.zeros((n, self.obs_dim))
        actions = np.zeros((n, self.act_dim))
        logps = np.zeros(n)
        rewards = np.zeros(n)
        task_losses = np.zeros(n)
        comm_costs = np.zeros(n)
        ranks_rows = np.zeros((n, self.act_dim))
        for t in range(n):
            feat = encode_state(state, self.env_cfg.corpus.vocab_size)
            a_out, logp, deployed = self._act(feat, act_rng, ddim_rng, deterministic, sampler)
            out = env.step(deployed)
            feats[t] = feat
            actions[t] = a_out
            logps[t] = logp
            rewards[t] = out.reward
            task_losses[t] = out.task_loss
            comm_costs[t] = out.comm_cost
            ranks_rows[t] = out.next_state.ranks.ranks
            if writer is not None:
                writer.write(
                    {
                        "type": "step",
                        "episode": episode,
                        "step": self.global_step + t + 1,
                        "t": t,
                        "reward": out.reward,
                        "task_loss": out.task_loss,
                        "comm_cost": out.comm_cost,
                        "projected": out.projected,
                        "snr_db": state.snr_db,
                        "entropy_bits": state.entropy_bits,
                        "oov_rate": state.oov_rate,
                        "ranks": out.next_state.ranks.ranks.tolist(),
                    }
                )
            state = out.next_state
        final_feat = encode_state(state, self.env_cfg.corpus.vocab_size)
        return {
            "feats": feats,
            "actions": actions,
            "logps": logps,
            "rewards": rewards,
            "task_losses": task_losses,
            "comm_costs": comm_costs,
            "ranks": ranks_rows,
            "final_feat": final_feat,
        }

    def _train_episode(self, writer):
        env_rng, act_rng, ddim_rng, update_rng = _spawn_rngs(
            self.cfg.seed, _TRAIN_DOMAIN, self.episode, 4
        )
        roll = self._rollout(
            self.env, (env_rng, act_rng, ddim_rng), deterministic=False,
            sampler=self._sampler, writer=writer, episode=self.episode,
        )
        record = {
            "type": "episode",
            "episode": self.episode,
            "step": self.global_step + self.env_cfg.horizon,
            "mean_reward": float(roll["rewards"].mean()),
            "mean_task_loss": float(roll["task_losses"].mean()),
            "mean_comm_cost": float(roll["comm_costs"].mean()),
        }
        if self.cfg.mode != "ddim":
            values = self.valuenet.value_np(roll["feats"])
            bootstrap = float(self.valuenet.value_np(roll["final_feat"][None, :])[0])
            diag = ppo_mod.update(
                self.policy, self.valuenet, self.opt_policy, self.opt_value,
                roll["feats"], roll["actions"], roll["logps"], roll["rewards"],
                values, bootstrap, self.cfg.ppo, update_rng,
            )
            record["ppo"] = {k: float(v) for k, v in diag.items()}
        if self.cfg.mode != "ppo":
            self.buffer.push(roll["ranks"], roll["actions"], roll["rewards"])
            losses = []
            for _ in range(self.cfg.ddim_batches):
                x0, cond, rew = self.buffer.sample(self.cfg.ddim_batch_size, update_rng)
                loss, _ = df.ddim_loss(
                    x0, cond, rew, self.denoiser, self.schedule,
                    prediction=self.cfg.prediction, kappa=self.cfg.kappa,
                    p_uncond=self.cfg.p_uncond, temp=self.cfg.reward_temp,
                    rng=update_rng,
                )
                if not np.isfinite(loss.data):
                    raise FloatingPointError("non-finite refiner loss")
                ad.backward(loss)
                self.opt_ddim.step()
                losses.append(float(loss.data))
            record["ddim_loss"] = float(np.mean(losses))
        self.global_step += self.env_cfg.horizon
        self.episode += 1
        writer.write(record)

    def evaluate(self) -> dict:
        """Deterministic episodes on the eval streams; does not advance training."""
        rewards, task_losses, comm_costs = [], [], []
        for k in range(self.cfg.eval_episodes):
            rngs = _spawn_rngs(
                self.cfg.seed, _EVAL_DOMAIN, self.eval_index * self.cfg.eval_episodes + k, 3
            )
            roll = self._rollout(
                self.eval_env, rngs, deterministic=True, sampler=self._eval_sampler
            )
            rewards.append(roll["rewards"].mean())
            task_losses.append(roll["task_losses"].mean())
            comm_costs.append(roll["comm_costs"].mean())
        out = {
            "index": self.eval_index,
            "step": self.global_step,
            "mean_reward": float(np.mean(rewards)),
            "mean_task_loss": float(np.mean(task_losses)),
            "mean_comm_cost": float(np.mean(comm_costs)),
        }
        self.eval_index += 1
        return out

    # === persistence ===

    def _checkpoint_arrays(self):
        arrays = {}
        if self.policy is not None:
            for k, v in self.policy.params().items():
                arrays[f"policy/{k}"] = v.data
            for k, v in self.valuenet.params().items():
                arrays[f"value/{k}"] = v.data
            arrays.update(self.opt_policy.state_arrays("opt_policy"))
            arrays.update(self.opt_value.state_arrays("opt_value"))
        if self.denoiser is not None:
            for k, v in self.denoiser.state().items():
                arrays[f"ddim/{k}"] = v
            arrays.update(self.opt_ddim.state_arrays("opt_ddim"))
            # replay contents are training state too; resume must replay the
            # exact minibatches a straight run would draw
            arrays["buffer/x0"] = self.buffer.x0
            arrays["buffer/cond"] = self.buffer.cond
            arrays["buffer/reward"] = self.buffer.reward
        return arrays

    def save_checkpoint(self, path):
        meta = {
            "mode": self.cfg.mode,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "episode": self.episode,
            "global_step": self.global_step,
            "eval_index": self.eval_index,
            "stopper_best": None if np.isneginf(self.stopper.best) else self.stopper.best,
            "stopper_streak": self.stopper.streak,
            "buffer_size": None if self.buffer is None else len(self.buffer),
            "buffer_next": None if self.buffer is None else self.buffer._next,
        }
        ad.save_checkpoint(path, self._checkpoint_arrays(), meta)

    def load_checkpoint(self, path):
        arrays, meta = ad.load_checkpoint(path)
        if meta["mode"] != self.cfg.mode:
            raise ValueError(f"checkpoint mode {meta['mode']!r} != config mode {self.cfg.mode!r}")
        if (meta["obs_dim"], meta["act_dim"]) != (self.obs_dim, self.act_dim):
            raise ValueError("checkpoint dimensions do not match the environment")
        if self.policy is not None:
            for k, v in self.policy.params().items():
                v.data = arrays[f"policy/{k}"].copy()
                v.version += 1
            for k, v in self.valuenet.params().items():
                v.data = arrays[f"value/{k}"].copy()
                v.version += 1
            self.opt_policy.load_state_arrays(arrays, "opt_policy")
            self.opt_value.load_state_arrays(arrays, "opt_value")
        if self.denoiser is not None:
            self.denoiser.load_state({k.split("/", 1)[1]: v for k, v in arrays.items()
                                      if k.startswith("ddim/")})
            self.opt_ddim.load_state_arrays(arrays, "opt_ddim")
            if arrays["buffer/x0"].shape != self.buffer.x0.shape:
                raise ValueError("checkpoint replay buffer does not match the config")
            self.buffer.x0 = arrays["buffer/x0"].copy()
            self.buffer.cond = arrays["buffer/cond"].copy()
            self.buffer.reward = arrays["buffer/reward"].copy()
            self.buffer._size = int(meta["buffer_size"])
            self.buffer._next = int(meta["buffer_next"])
        self.episode = int(meta["episode"])
        self.global_step = int(meta["global_step"])
        self.eval_index = int(meta["eval_index"])
        self.stopper.best = -np.inf if meta["stopper_best"] is None else meta["stopper_best"]
        self.stopper.streak = int(meta["stopper_streak"])
        return meta

    # === main loop ===

    def train(self, resume_from=None) -> TrainResult:
        t0 = time.monotonic()
        resumed = False
        if resume_from is not None:
            self.load_checkpoint(resume_from)
            resumed = True
        writer = JsonlWriter(self.out_dir / "metrics.jsonl", append=resumed)
        csv_path = self.out_dir / "evals.csv"
        csv_fh = open(csv_path, "a" if resumed else "w", newline="")
        csv_writer = csv.writer(csv_fh)
        if not resumed:
            writer.write(
                {
                    "type": "header",
                    "schema": METRICS_SCHEMA,
                    "mode": self.cfg.mode,
                    "seed": self.cfg.seed,
                    "total_steps": self.cfg.total_steps,
                    "horizon": self.env_cfg.horizon,
                    "layers": self.env_cfg.layers,
                    "r_max": self.env_cfg.r_max,
                }
            )
            csv_writer.writerow(
                ["eval_index", "step", "mean_reward", "mean_task_loss", "mean_comm_cost"]
            )

        status = "completed"
        stopped_early = False
        best = None if np.isneginf(self.stopper.best) else float(self.stopper.best)
        final_eval = None
        last_eval_step = self.global_step if resumed else 0

        def run_eval():
            nonlocal best, final_eval
            ev = self.evaluate()
            writer.write({"type": "eval", **ev})
            csv_writer.writerow(
                [ev["index"], ev["step"], repr(ev["mean_reward"]),
                 repr(ev["mean_task_loss"]), repr(ev["mean_comm_cost"])]
            )
            final_eval = ev["mean_reward"]
            if best is None or ev["mean_reward"] > best:
                best = ev["mean_reward"]
            return self.stopper.observe(ev["mean_reward"])

        try:
            while self.global_step < self.cfg.total_steps:
                self._train_episode(writer)
                if self.cfg.checkpoint_every and self.episode % self.cfg.checkpoint_every == 0:
                    self.save_checkpoint(self.out_dir / "checkpoint_latest.npz")
                if self.global_step - last_eval_step >= self.cfg.eval_every:
                    last_eval_step = self.global_step
                    should_stop = run_eval()
                    if self.cfg.early_stop and should_stop:
                        stopped_early = True
                        status = "stopped_early"
                        break
        except FloatingPointError as exc:
            # parameters are still at the last finite update
            self.save_checkpoint(self.out_dir / "checkpoint_abort.npz")
            writer.write({"type": "abort", "step": self.global_step, "error": str(exc)})
            status = "aborted"
        if status != "aborted" and self.global_step != last_eval_step:
            run_eval()
        self.save_checkpoint(self.out_dir / "checkpoint_final.npz")
        writer.close()
        csv_fh.close()

        result = TrainResult(
            status=status,
            episodes=self.episode,
            steps=self.global_step,
            best_eval_reward=best,
            final_eval_reward=final_eval,
            stopped_early=stopped_early,
            out_dir=str(self.out_dir),
        )
        summary = asdict(result)
        summary["wall_clock_s"] = time.monotonic() - t0
        summary["config"] = {
            "trainer": _jsonable(asdict(self.cfg)),
            "env": _jsonable(asdict(self.env_cfg)),
            "channel": _jsonable(asdict(self.channel_params)),
        }
        with open(self.out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
