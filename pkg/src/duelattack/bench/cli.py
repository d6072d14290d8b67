"""Command-line entry point: ``duelattack <subcommand> [flags]``.

Every subcommand writes its artifacts and a ``manifest.json`` under the
output directory. Exit status is 0 on success, 2 for configuration errors
and 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .. import ppokit
from . import checkpoint as ckpt
from . import pipeline as pl
from .config import ConfigError, RunConfig, config_from_dict, dump_config, load_config

EXIT_CONFIG, EXIT_RUNTIME = 2, 3
SUBCOMMANDS = ("train-victim", "reward-iterate", "train-attacker", "identify-critical", "finetune", "evaluate",
               "perturb-validate", "compare", "plot-data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duelattack", description="Adversarial-policy workbench for duels.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="run seed; overrides the config's seed list with this one seed")
        p.add_argument("--out", help="output directory; overrides output_dir")
        p.add_argument("--deterministic", action="store_true", help="single worker everywhere")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("train-victim", "PPO-train a victim against the configured opponent")
    p.add_argument("--updates", type=int)
    add("reward-iterate", "search reward programs with the configured backend")
    p = add("train-attacker", "train an attacker under the configured reward")
    p.add_argument("--updates", type=int)
    p = add("identify-critical", "train the critical-state mask against a frozen attacker")
    p.add_argument("--attacker", help="attacker checkpoint (default: the scripted opponent)")
    p.add_argument("--updates", type=int)
    p = add("finetune", "fine-tune an attacker with the deviation reward")
    p.add_argument("--attacker", required=True, help="pre-trained attacker checkpoint")
    p.add_argument("--mask", help="mask checkpoint (trained first when omitted)")
    p.add_argument("--updates", type=int)
    p = add("evaluate", "win rate of an attacker against the victim")
    p.add_argument("--attacker", help="attacker checkpoint (default: a freshly initialized attacker)")
    p.add_argument("--victim", help="victim checkpoint (default: from the config)")
    p.add_argument("--episodes", type=int)
    p = add("perturb-validate", "victim failure rates under none/random/critical perturbation")
    p.add_argument("--mask", help="mask checkpoint (trained against the opponent when omitted)")
    p.add_argument("--attacker", help="opponent checkpoint (default: validate.opponent)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--budget", type=int)
    add("compare", "Baseline1 / Baseline2 / AR / ARCS leaderboard over the configured seeds")
    p = add("plot-data", "tidy win-rate curves from a run directory")
    p.add_argument("--run-dir", help="run directory to read (default: --out)")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    return parser


def resolve_config(args) -> tuple[RunConfig, list]:
    inputs = []
    if args.config:
        cfg = load_config(args.config)
        inputs.append(Path(args.config))
    else:
        cfg = config_from_dict({})
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be non-negative")
        cfg.seeds = [args.seed]
    if args.out:
        cfg.output_dir = args.out
    if args.deterministic:
        cfg.training.workers = 1
    for flag in ("episodes", "updates"):
        v = getattr(args, flag, None)
        if v is not None and v < (1 if flag == "episodes" else 0):
            raise ConfigError(f"--{flag}: must be {'positive' if flag == 'episodes' else 'non-negative'}, got {v}")
    if getattr(args, "budget", None) is not None and args.budget < 0:
        raise ConfigError(f"--budget: must be non-negative, got {args.budget}")
    for flag in ("attacker", "mask", "victim"):
        v = getattr(args, flag, None)
        if v is not None:
            if not Path(v).exists():
                raise ConfigError(f"--{flag}: file not found: {v}")
            inputs.append(Path(v))
    return cfg, inputs


def _load_agent(path, cfg):
    ck = ckpt.load(path)
    ckpt.check_env(ck, pl.make_pool(cfg, 1))
    return ckpt.agent_from(ck)


def _load_mask(path, cfg):
    ck = ckpt.load(path)
    ckpt.check_env(ck, pl.make_pool(cfg, 1))
    return ckpt.mask_from(ck)


def _csv(path, columns, rows):
    ppokit.write_csv(path, columns, rows)
    return path


# -- subcommands ------------------------------------------------------------------
# Each returns (extra manifest fields, telemetry entries).


def cmd_train_victim(args, cfg, out, seed):
    agent, tel = pl.train_victim(cfg, seed, args.updates)
    rel = f"telemetry/victim_seed{seed}.csv"
    tel.to_csv(out / rel)
    ckpt.save(out / "victim.ckpt", ckpt.agent_checkpoint(agent, "victim", pl.make_pool(cfg, 1), seed))
    return {"artifacts": ["victim.ckpt", rel]}, [{"arm": "victim", "seed": seed, "path": rel}]


def cmd_reward_iterate(args, cfg, out, seed):
    if cfg.reward.iterate is None:
        raise ConfigError("reward.iterate: required for reward-iterate")
    pl.reward_source(cfg, seed, out, cfg.training.workers)
    return {"artifacts": ["reward.rwd", "iteration/manifest.json", "iteration/candidates.csv"]}, []


def cmd_train_attacker(args, cfg, out, seed):
    source = pl.reward_source(cfg, seed, out, cfg.training.workers)
    attacker, tel = pl.train_attacker(cfg, source, seed, args.updates)
    victim = pl.build_victim(cfg)
    rate = pl.evaluate(cfg, attacker, victim, seed)
    rel = f"telemetry/attacker_seed{seed}.csv"
    tel.to_csv(out / rel)
    meta = {"eval_win_rate": rate, "eval_seed": pl.eval_seed(seed), "eval_episodes": cfg.training.eval_episodes,
            "reward_source": source}
    ckpt.save(out / "attacker.ckpt", ckpt.agent_checkpoint(attacker, "attacker", pl.make_pool(cfg, 1), seed, meta))
    _csv(out / "evaluation.csv", ("seed", "episodes", "win_rate"),
         [{"seed": seed, "episodes": cfg.training.eval_episodes, "win_rate": rate}])
    return {"artifacts": ["attacker.ckpt", rel, "evaluation.csv"], "win_rate": rate}, \
        [{"arm": "attacker", "seed": seed, "path": rel}]


def cmd_identify_critical(args, cfg, out, seed):
    attacker = _load_agent(args.attacker, cfg) if args.attacker else pl.build_opponent(cfg)
    mask, dual, tel = pl.identify_critical(cfg, attacker, seed, updates=args.updates)
    tel.to_csv(out / "telemetry" / f"mask_seed{seed}.csv")
    ckpt.save(out / "mask.ckpt", ckpt.mask_checkpoint(mask, dual, pl.make_pool(cfg, 1), seed))
    return {"artifacts": ["mask.ckpt", f"telemetry/mask_seed{seed}.csv"],
            "dual": {"nu1": dual.nu1, "nu2": dual.nu2}}, []


def cmd_finetune(args, cfg, out, seed):
    ck = ckpt.load(args.attacker)
    ckpt.check_env(ck, pl.make_pool(cfg, 1))
    attacker = ckpt.agent_from(ck)
    source = ck.meta.get("reward_source") or pl.reward_source(cfg, seed, out, cfg.training.workers)
    victim = pl.build_victim(cfg)
    if args.mask:
        mask, dual = _load_mask(args.mask, cfg)
    else:
        mask, dual, mtel = pl.identify_critical(cfg, attacker.copy(), seed, victim=victim)
        mtel.to_csv(out / "telemetry" / f"mask_seed{seed}.csv")
    before = pl.evaluate(cfg, attacker, victim, seed)
    attacker, tel = pl.run_finetune(cfg, attacker, source, mask, dual, seed, victim=victim, updates=args.updates)
    after = pl.evaluate(cfg, attacker, victim, seed)
    tel.to_csv(out / "telemetry" / f"finetune_seed{seed}.csv")
    rel = f"telemetry/finetuned_seed{seed}.csv"
    tel.training.to_csv(out / rel)
    meta = {"eval_win_rate": after, "eval_seed": pl.eval_seed(seed), "eval_episodes": cfg.training.eval_episodes,
            "reward_source": source}
    ckpt.save(out / "attacker_finetuned.ckpt",
              ckpt.agent_checkpoint(attacker, "attacker", pl.make_pool(cfg, 1), seed, meta))
    ckpt.save(out / "mask_final.ckpt", ckpt.mask_checkpoint(tel.mask, tel.dual, pl.make_pool(cfg, 1), seed))
    _csv(out / "evaluation.csv", ("seed", "stage", "episodes", "win_rate"),
         [{"seed": seed, "stage": "pre", "episodes": cfg.training.eval_episodes, "win_rate": before},
          {"seed": seed, "stage": "finetuned", "episodes": cfg.training.eval_episodes, "win_rate": after}])
    return {"artifacts": ["attacker_finetuned.ckpt", "mask_final.ckpt", rel, "evaluation.csv"],
            "win_rate_pre": before, "win_rate_finetuned": after}, [{"arm": "ARCS", "seed": seed, "path": rel}]


def cmd_evaluate(args, cfg, out, seed):
    victim = _load_agent(args.victim, cfg) if args.victim else pl.build_victim(cfg)
    if args.attacker:
        attacker = _load_agent(args.attacker, cfg)
    else:
        attacker = ppokit.make_attacker(pl.make_pool(cfg, 1), cfg.ppo, seed)
    episodes = args.episodes or cfg.training.eval_episodes
    rate = pl.evaluate(cfg, attacker, victim, seed, episodes)
    _csv(out / "evaluation.csv", ("seed", "episodes", "win_rate"),
         [{"seed": seed, "episodes": episodes, "win_rate": rate}])
    (out / "report.json").write_text(json.dumps({"seed": seed, "episodes": episodes, "win_rate": rate},
                                                sort_keys=True, indent=1) + "\n")
    return {"artifacts": ["evaluation.csv", "report.json"], "win_rate": rate}, []


def cmd_perturb_validate(args, cfg, out, seed):
    victim = pl.build_victim(cfg)
    opponent = _load_agent(args.attacker, cfg) if args.attacker else pl.build_opponent(cfg)
    if args.mask:
        mask, _ = _load_mask(args.mask, cfg)
    else:
        mask, dual, mtel = pl.identify_critical(cfg, opponent, seed, victim=victim)
        mtel.to_csv(out / "telemetry" / f"mask_seed{seed}.csv")
        ckpt.save(out / "mask.ckpt", ckpt.mask_checkpoint(mask, dual, pl.make_pool(cfg, 1), seed))
    rep = pl.validate(cfg, mask, seed, args.episodes, args.budget, victim=victim, opponent=opponent)
    row = rep.as_row()
    _csv(out / "validation.csv", tuple(row), [row])
    return {"artifacts": ["validation.csv"], "failure": rep.failure}, []


def cmd_compare(args, cfg, out, seed):
    per_arm = pl.compare(cfg, out, cfg.training.workers)
    print((out / "leaderboard.txt").read_text(), end="")
    return {"artifacts": ["leaderboard.csv", "leaderboard.txt"],
            "results": {a: [[s, v] for s, v in vals] for a, vals in per_arm.items()}}, None


COMMANDS = {
    "train-victim": cmd_train_victim, "reward-iterate": cmd_reward_iterate, "train-attacker": cmd_train_attacker,
    "identify-critical": cmd_identify_critical, "finetune": cmd_finetune, "evaluate": cmd_evaluate,
    "perturb-validate": cmd_perturb_validate, "compare": cmd_compare,
}


def run(args) -> int:
    started = time.time()
    if args.command == "plot-data":
        run_dir = args.run_dir or args.out
        if not run_dir:
            raise ConfigError("plot-data: give --run-dir or --out")
        counts = pl.plot_data(run_dir, figures=args.figures)
        for series, n in counts.items():
            print(f"{series}\t{n}")
        return 0
    cfg, inputs = resolve_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    seed = cfg.seeds[0]
    extra, entries = COMMANDS[args.command](args, cfg, out, seed)
    pl.write_manifest(out, args.command, cfg, seed, inputs, started, extra)
    if entries:
        pl.register_telemetry(out, entries, cfg.ppo.batch_size)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        logging.getLogger("duelattack").debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
