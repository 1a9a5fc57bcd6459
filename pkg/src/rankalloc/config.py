"""Layered run configuration.

A run is configured by one nested dict with four sections: env, channel,
trainer, ppo.  Defaults come from the dataclasses themselves, a JSON file
merges over them, and dotted --set overrides merge over that.  Unknown keys
fail loudly with their full path; silent typos in sweep scripts are worse
than a crash.

channel.snr_db is the target operating point: with fixed fading the gain is
solved exactly, with Rayleigh fading the scale is solved so the average SNR
matches.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict

from rankalloc.channel import ChannelParams, params_for_snr_db
from rankalloc.corpus import SyntheticCorpusConfig
from rankalloc.env import EnvConfig
from rankalloc.ppo import PpoConfig
from rankalloc.trainer import TrainerConfig


def default_config() -> dict:
    trainer = asdict(TrainerConfig())
    ppo = trainer.pop("ppo")
    channel = asdict(ChannelParams())
    # the gain is derived from snr_db, never set directly
    del channel["fixed_gain"]
    channel = {"snr_db": 5.0, **channel}
    env = asdict(EnvConfig())
    return {"env": env, "channel": channel, "trainer": trainer, "ppo": ppo}


def _merge(base, incoming, path=""):
    for key, value in incoming.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"{here}: expected a section, got {type(value).__name__}")
            _merge(base[key], value, here)
        else:
            base[key] = value


def load_config(path=None, overrides=()) -> dict:
    """defaults <- file <- --set overrides; returns the resolved dict."""
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ValueError(f"{path}: top level must be an object")
        _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    return cfg


def apply_override(cfg: dict, item: str):
    """KEY.PATH=VALUE with the value parsed as JSON, else kept as a string."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not KEY=VALUE")
    dotted, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ValueError(f"unknown config key: {dotted}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ValueError(f"unknown config key: {dotted}")
    if isinstance(node[leaf], dict):
        raise ValueError(f"{dotted} is a section, not a value")
    node[leaf] = value


def build_env_config(cfg: dict) -> EnvConfig:
    section = dict(cfg["env"])
    corpus = SyntheticCorpusConfig(**section.pop("corpus"))
    out = EnvConfig(corpus=corpus, **section)
    out.validate()
    return out


def build_channel_params(cfg: dict) -> ChannelParams:
    section = dict(cfg["channel"])
    snr_db = section.pop("snr_db")
    base = ChannelParams(**section)
    if base.fading == "fixed":
        out = params_for_snr_db(snr_db, base)
    else:
        # E|h|^2 = 2 scale^2; solve for the requested average SNR
        snr = 10.0 ** (snr_db / 10.0)
        out = ChannelParams(
            bandwidth_hz=base.bandwidth_hz,
            power=base.power,
            noise_power=base.noise_power,
            fading="rayleigh",
            rayleigh_scale=math.sqrt(snr * base.noise_power / (2.0 * base.power)),
            expectation_draws=base.expectation_draws,
        )
    out.validate()
    return out


def build_trainer_config(cfg: dict) -> TrainerConfig:
    trainer = dict(cfg["trainer"])
    clip = trainer.get("clip_x0")
    if not isinstance(clip, bool):
        raise ValueError("trainer.clip_x0 must be a boolean")
    out = TrainerConfig(ppo=PpoConfig(**cfg["ppo"]), **trainer)
    out.validate()
    return out


def build_all(cfg: dict):
    return build_env_config(cfg), build_channel_params(cfg), build_trainer_config(cfg)


def write_resolved(cfg: dict, path):
    """Snapshot of the fully merged config, key-sorted for stable diffs."""
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
