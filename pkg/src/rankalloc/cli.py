"""Command line front end.

    rankalloc train          run one training job
    rankalloc evaluate       score a checkpoint on deterministic episodes
    rankalloc sweep          train across one config axis
    rankalloc analyze-corpus complexity statistics for text or synthetic data
    rankalloc rank-report    deployed-rank table for a checkpoint across SNRs
    rankalloc schedule-dump  noise schedule table

Relative --out paths land under $RANKALLOC_OUTPUT_ROOT (default: cwd).
Exit codes: 0 success, 2 bad usage or config, 3 aborted training run.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from rankalloc import config as cfgmod
from rankalloc import diffusion as df
from rankalloc.corpus import SyntheticCorpus, SyntheticCorpusConfig, Vocabulary, stats_for_tokens, tokenize
from rankalloc.trainer import MODES, Trainer

SWEEP_AXES = {
    "snr": ("channel", "snr_db"),
    "lambda": ("env", "cost_lambda"),
    "schedule": ("trainer", "schedule_kind"),
    "prediction": ("trainer", "prediction"),
    "tdiff": ("trainer", "infer_steps"),
    "rmax": ("env", "r_max"),
}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file merged over defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY.PATH=VALUE", help="dotted override, repeatable")
    p.add_argument("--out", help="output directory (relative to RANKALLOC_OUTPUT_ROOT)")
    p.add_argument("--seed", type=int, help="shorthand for trainer.seed")
    p.add_argument("--lambda", dest="cost_lambda", type=float,
                   help="shorthand for env.cost_lambda")


def _resolve_out(arg_out, default_name: str) -> Path:
    root = Path(os.environ.get("RANKALLOC_OUTPUT_ROOT", "."))
    out = Path(arg_out) if arg_out else Path("runs") / default_name
    return out if out.is_absolute() else root / out


def _load_cfg(args) -> dict:
    cfg = cfgmod.load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg["trainer"]["seed"] = args.seed
    if args.cost_lambda is not None:
        cfg["env"]["cost_lambda"] = args.cost_lambda
    if getattr(args, "mode", None):
        cfg["trainer"]["mode"] = args.mode
    return cfg


def _run_training(cfg: dict, out: Path, resume=None):
    env_cfg, chan, tcfg = cfgmod.build_all(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out / "resolved_config.json")
    trainer = Trainer(env_cfg, chan, tcfg, out)
    return trainer.train(resume_from=resume)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out, "train")
    result = _run_training(cfg, out, resume=args.resume)
    print(f"{result.status}: {result.episodes} episodes, {result.steps} steps, "
          f"final eval reward {result.final_eval_reward}, artifacts in {result.out_dir}")
    return 0 if result.status in ("completed", "stopped_early") else 3


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    if args.episodes is not None:
        cfg["trainer"]["eval_episodes"] = args.episodes
    out = _resolve_out(args.out, "evaluate")
    env_cfg, chan, tcfg = cfgmod.build_all(cfg)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(env_cfg, chan, tcfg, out)
    trainer.load_checkpoint(args.checkpoint)
    report = trainer.evaluate()
    report["checkpoint"] = str(args.checkpoint)
    with open(out / "eval_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    section, key = SWEEP_AXES[args.axis]
    values = []
    for raw in args.values.split(","):
        try:
            values.append(json.loads(raw))
        except json.JSONDecodeError:
            values.append(raw)
    out = _resolve_out(args.out, f"sweep_{args.axis}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    worst = 0
    for value in values:
        cfg = _load_cfg(args)
        cfg[section][key] = value
        run_dir = out / f"{args.axis}_{value}"
        try:
            result = _run_training(cfg, run_dir)
            rows.append([args.axis, value, result.status, result.steps,
                         result.best_eval_reward, result.final_eval_reward])
            if result.status == "aborted":
                worst = 3
        except ValueError as exc:
            # a bad axis value should not sink the remaining runs
            rows.append([args.axis, value, f"error: {exc}", 0, None, None])
            worst = 3
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "status", "steps", "best_eval_reward",
                         "final_eval_reward"])
        writer.writerows(rows)
    for row in rows:
        print(",".join(str(c) for c in row))
    return worst


def cmd_analyze_corpus(args) -> int:
    if args.file:
        if not args.vocab:
            print("analyze-corpus: --file requires --vocab", file=sys.stderr)
            return 2
        vocab = Vocabulary.from_file(args.vocab)
        with open(args.file, encoding="utf-8") as fh:
            samples = [toks for toks in (tokenize(line) for line in fh) if toks]
        if not samples:
            print(f"analyze-corpus: {args.file} has no non-empty samples", file=sys.stderr)
            return 2
        stats = [stats_for_tokens(toks, vocab) for toks in samples]
        source = str(args.file)
    else:
        cfg = cfgmod.load_config(args.config, args.overrides)
        corpus = SyntheticCorpus(SyntheticCorpusConfig(**cfg["env"]["corpus"]))
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)
        stats = [corpus.sample_stats(rng) for _ in range(args.samples)]
        source = "synthetic"
    ent = np.array([s.entropy_bits for s in stats])
    oov = np.array([s.oov_rate for s in stats])
    report = {
        "source": source,
        "samples": len(stats),
        "tokens_total": int(sum(s.token_count for s in stats)),
        "entropy_bits": {"mean": ent.mean(), "min": ent.min(), "max": ent.max()},
        "oov_rate": {"mean": oov.mean(), "min": oov.min(), "max": oov.max()},
    }
    if args.out:
        out = _resolve_out(args.out, "analyze")
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "corpus_report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_rank_report(args) -> int:
    snrs = [float(v) for v in args.snr_db.split(",")]
    out = _resolve_out(args.out, "rank_report")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for snr in snrs:
        cfg = _load_cfg(args)
        cfg["channel"]["snr_db"] = snr
        if args.episodes is not None:
            cfg["trainer"]["eval_episodes"] = args.episodes
        env_cfg, chan, tcfg = cfgmod.build_all(cfg)
        trainer = Trainer(env_cfg, chan, tcfg, out)
        trainer.load_checkpoint(args.checkpoint)
        ranks, rewards, costs = [], [], []
        for k in range(tcfg.eval_episodes):
            rngs = tuple(
                np.random.default_rng(c)
                for c in np.random.SeedSequence((tcfg.seed, 1, k)).spawn(3)
            )
            roll = trainer._rollout(trainer.eval_env, rngs, deterministic=True,
                                    sampler=trainer._eval_sampler)
            ranks.append(roll["ranks"])
            rewards.append(roll["rewards"].mean())
            costs.append(roll["comm_costs"].mean())
        per_module = np.concatenate(ranks).reshape(-1, env_cfg.layers, 6).mean(axis=(0, 1))
        rows.append(
            {
                "snr_db": snr,
                "mean_rank": float(np.concatenate(ranks).mean()),
                "per_module": {k: float(v) for k, v in zip(("q", "k", "v", "o", "fc1", "fc2"), per_module)},
                "mean_reward": float(np.mean(rewards)),
                "mean_comm_cost": float(np.mean(costs)),
            }
        )
    with open(out / "rank_report.json", "w") as fh:
        json.dump({"checkpoint": str(args.checkpoint), "rows": rows}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    header = f"{'snr_db':>8} {'mean':>6} " + " ".join(f"{k:>5}" for k in ("q", "k", "v", "o", "fc1", "fc2"))
    print(header)
    for row in rows:
        mods = " ".join(f"{row['per_module'][k]:5.2f}" for k in ("q", "k", "v", "o", "fc1", "fc2"))
        print(f"{row['snr_db']:8.1f} {row['mean_rank']:6.2f} {mods}")
    return 0


def cmd_schedule_dump(args) -> int:
    sch = df.build_schedule(args.kind, args.steps)
    lines = ["tau,beta,alpha,alpha_bar"]
    for i in range(sch.steps):
        lines.append(
            f"{i + 1},{float(sch.betas[i])!r},{float(sch.alphas[i])!r},"
            f"{float(sch.alpha_bars[i])!r}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _resolve_out(args.out, "schedule")
        out.mkdir(parents=True, exist_ok=True)
        (out / "schedule.csv").write_text(text)
        print(f"wrote {out / 'schedule.csv'}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankalloc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, help="shorthand for trainer.mode")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint deterministically")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, help="shorthand for trainer.mode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, help="eval episodes to average")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="train across one config axis")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, help="shorthand for trainer.mode")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("analyze-corpus", help="text complexity statistics")
    _add_common(p)
    p.add_argument("--file", help="line-per-sample text file")
    p.add_argument("--vocab", help="vocabulary file, one token per line")
    p.add_argument("--samples", type=int, default=256, help="synthetic sample count")
    p.set_defaults(fn=cmd_analyze_corpus)

    p = sub.add_parser("rank-report", help="deployed ranks across SNR points")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, help="shorthand for trainer.mode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snr-db", default="-5,0,5,10,15", help="comma-separated SNR points")
    p.add_argument("--episodes", type=int, help="eval episodes per point")
    p.set_defaults(fn=cmd_rank_report)

    p = sub.add_parser("schedule-dump", help="noise schedule table")
    p.add_argument("--kind", default="cosine", choices=df.SCHEDULE_KINDS)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--out", help="directory for schedule.csv; stdout if omitted")
    p.set_defaults(fn=cmd_schedule_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"rankalloc {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
