"""Command-line entry points: train, eval, analyze, export-dot.

Exit codes: 0 success, 1 user error (bad config, bad checkpoint, bad
arguments), 2 internal error. Set MODROUTE_LOG=DEBUG (or INFO/WARNING)
to control log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .analysis import export_dot, sparsity_distribution, usage_table
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .sac import Trainer

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "task-id", "success-rate", "actor-loss",
                   "critic-loss", "alpha", "tau", "w", "mean-effective-modules"]


class UserError(Exception):
    """A problem the user can fix; reported without a traceback."""


# ----------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.npz")
    csv_path = os.path.join(cfg.out_dir, "metrics.csv")

    if args.resume and os.path.exists(ckpt_path):
        trainer, saved_cfg = load_checkpoint(ckpt_path)
        if saved_cfg.compat_hash() != cfg.compat_hash():
            raise UserError(
                f"checkpoint at {ckpt_path} was produced by an incompatible "
                f"config (hash {saved_cfg.compat_hash()[:12]} != "
                f"{cfg.compat_hash()[:12]})"
            )
        log.info("resumed from %s at env step %d", ckpt_path, trainer.env_steps)
        csv_mode = "a" if os.path.exists(csv_path) else "w"
    else:
        trainer = Trainer(cfg.suite(), cfg.policy_config("actor"),
                          cfg.train_settings(), seed=cfg.seed)
        csv_mode = "w"

    cfg.save(os.path.join(cfg.out_dir, "config.yaml"))
    next_ckpt = trainer.env_steps + cfg.checkpoint_interval

    with open(csv_path, csv_mode, newline="") as fh:
        writer = csv.writer(fh)
        if csv_mode == "w":
            writer.writerow(METRICS_COLUMNS)
        fh.flush()

        def on_eval(rows):
            nonlocal next_ckpt
            for r in rows:
                writer.writerow([
                    r["step"], r["task_id"], f"{r['success_rate']:.6g}",
                    f"{r['actor_loss']:.6g}", f"{r['critic_loss']:.6g}",
                    f"{r['alpha']:.6g}", f"{r['tau']:.6g}", f"{r['w']:.6g}",
                    f"{r['mean_effective_modules']:.6g}",
                ])
            fh.flush()
            if rows:
                mean = np.mean([r["success_rate"] for r in rows])
                log.info("step %d: mean success %.3f", rows[0]["step"], mean)
            if trainer.env_steps >= next_ckpt:
                save_checkpoint(ckpt_path, trainer, cfg)
                next_ckpt += cfg.checkpoint_interval

        if cfg.total_env_steps <= 0 or trainer.env_steps >= cfg.total_env_steps:
            save_checkpoint(ckpt_path, trainer, cfg)
            return 0
        trainer.run(cfg.total_env_steps, cfg.eval_interval, cfg.eval_episodes,
                    on_eval=on_eval, stop_at_success=cfg.stop_at_success)

    save_checkpoint(ckpt_path, trainer, cfg)
    print(f"training done at env step {trainer.env_steps}; "
          f"metrics: {csv_path}; checkpoint: {ckpt_path}")
    return 0


# ----------------------------------------------------------------------
# eval / analysis


def _load(ckpt: str) -> tuple[Trainer, RunConfig]:
    if not os.path.exists(ckpt):
        raise UserError(f"checkpoint not found: {ckpt}")
    return load_checkpoint(ckpt)


def cmd_eval(args) -> int:
    trainer, _ = _load(args.ckpt)
    if args.episodes < 0:
        raise UserError("--episodes must be >= 0")
    print("task-id,kind,goal-rule,success-rate")
    if args.episodes == 0:
        return 0
    success, _, _ = trainer.evaluate(args.episodes)
    for i, spec in enumerate(trainer.suite):
        print(f"{i},{spec.kind},{spec.goal_rule},{success[i]:.6g}")
    print(f"mean,,,{success.mean():.6g}")
    return 0


def cmd_analyze(args) -> int:
    trainer, _ = _load(args.ckpt)
    if args.samples <= 0:
        raise UserError("--samples must be > 0")
    if args.what == "usage":
        print("task-id,kind,goal-rule,mean-modules,std-modules,samples")
        for r in usage_table(trainer, args.samples):
            print(f"{r['task_id']},{r['kind']},{r['goal_rule']},"
                  f"{r['mean_modules']:.6g},{r['std_modules']:.6g},{r['samples']}")
    else:
        print("num-sources,percent")
        for r in sparsity_distribution(trainer, args.samples):
            print(f"{r['num_sources']},{r['percent']:.6g}")
    return 0


def cmd_export_dot(args) -> int:
    trainer, _ = _load(args.ckpt)
    try:
        dot = export_dot(trainer, args.task)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    sys.stdout.write(dot)
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modroute",
        description="Dynamic depth routing for multi-task RL: train, "
                    "evaluate, and analyze routed module policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the sample/train loop from a config")
    p.add_argument("--config", required=True, help="YAML run config path")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in the output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="success rates of a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, required=True,
                   help="evaluation episodes per task")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="routing usage / sparsity statistics")
    p.add_argument("what", choices=["usage", "sparsity"])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--samples", type=int, required=True,
                   help="routing samples per task (usage) or total (sparsity)")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("export-dot", help="DOT graph of one task's routing")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", type=int, required=True)
    p.set_defaults(fn=cmd_export_dot)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("MODROUTE_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UserError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        log.exception("internal error")
        print("internal error (set MODROUTE_LOG=DEBUG for details)",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
