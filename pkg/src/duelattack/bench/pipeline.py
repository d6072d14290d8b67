"""Experiment orchestration shared by the CLI subcommands.

Every stage writes its artifacts under a run directory and registers
telemetry in ``manifest.json`` so that ``plot_data`` can rebuild curves.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import critstate, envkit, finetune, ppokit
from ..critstate import DualState, MaskPolicy
from ..rewardlab import (RemoteConfig, RemoteEvaluator, RemoteGenerator, ScriptedEvaluator,
                         ScriptedGenerator, iterate_rewards, resolve_program)
from ..rewardlab.presets import PRESETS
from . import checkpoint as ckpt
from .config import RunConfig, dump_config, to_plain
from .validate import perturb_validate

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
EVAL_SEED_OFFSET = 1_000_033
LEADERBOARD_COLUMNS = ("arm", "seed", "final_win_rate", "median", "q25", "q75")
CURVE_COLUMNS = ("series", "seed", "x", "y")
CANDIDATE_COLUMNS = ("round", "candidate", "final_win_rate", "auc_win_rate", "selected", "failed")
ARM_PRESETS = {"Baseline1": "baseline1", "Baseline2": "baseline2"}


class PipelineError(RuntimeError):
    pass


# -- building blocks --------------------------------------------------------------


def make_pool(cfg: RunConfig, n: int | None = None) -> envkit.DuelEnv:
    return envkit.make_env(cfg.env.name, n or cfg.ppo.n_envs, **cfg.env.params)


def build_victim(cfg: RunConfig):
    if cfg.victim.kind == "checkpoint":
        ck = ckpt.load(cfg.victim.path)
        ckpt.check_env(ck, make_pool(cfg, 1))
        return ckpt.agent_from(ck)
    if cfg.env.name == "push_duel":
        return envkit.ScriptedPushVictim(**cfg.victim.params)
    if cfg.env.name == "gate_pass":
        return envkit.ScriptedRunner(**cfg.victim.params)
    raise PipelineError(f"no scripted victim for {cfg.env.name!r}; use victim.kind: checkpoint")


def build_opponent(cfg: RunConfig, path: str | None = None):
    """Attacker used for victim training and perturbation validation."""
    spec = path or cfg.validate.opponent
    if spec != "scripted":
        ck = ckpt.load(spec)
        ckpt.check_env(ck, make_pool(cfg, 1))
        return ckpt.agent_from(ck)
    if cfg.env.name == "push_duel":
        return envkit.ScriptedPushAttacker()
    return envkit.ZeroPolicy(make_pool(cfg, 1).spec.attacker_space)


def eval_seed(seed: int) -> int:
    return int(seed) + EVAL_SEED_OFFSET


def evaluate(cfg: RunConfig, attacker, victim, seed: int, episodes: int | None = None) -> float:
    return ppokit.evaluate_win_rate(cfg.env.name, attacker, victim, episodes or cfg.training.eval_episodes,
                                    eval_seed(seed), cfg.env.params)


def _backends(cfg: RunConfig, seed: int):
    it = cfg.reward.iterate
    if it.backend == "remote":
        r = it.remote
        rc = RemoteConfig(r.url, r.model, r.api_key_env, r.timeout, r.retries, r.allow_partial)
        return RemoteGenerator(rc), RemoteEvaluator(rc)
    return ScriptedGenerator(seed), ScriptedEvaluator()


def reward_source(cfg: RunConfig, seed: int, out: Path | None = None, workers: int = 1) -> str:
    """The configured reward as program source; runs the reward iteration when configured."""
    r = cfg.reward
    if r.preset is not None:
        return PRESETS[r.preset]
    if r.source_path is not None:
        return resolve_program(r.source_path).source
    it = r.iterate
    program, ilog = iterate_rewards(cfg.env.name, build_victim(cfg), _backends(cfg, seed), it.n_rounds, it.n_cand,
                                    it.candidate_updates, seed, cfg.ppo, cfg.env.params, it.eval_episodes, workers,
                                    log_dir=(out / "iteration") if out is not None else None)
    if out is not None:
        (out / "reward.rwd").write_text(program.source)
        rows = [{"round": r["round"], "candidate": c["index"], "final_win_rate": c["final_win_rate"],
                 "auc_win_rate": c["auc_win_rate"], "selected": int(c["index"] == r["selected"]),
                 "failed": int(c["error"] is not None)} for r in ilog.rounds for c in r["candidates"]]
        ppokit.write_csv(out / "iteration" / "candidates.csv", CANDIDATE_COLUMNS, rows)
    return program.source


def train_attacker(cfg: RunConfig, source: str, seed: int, updates: int | None = None, victim=None):
    env = make_pool(cfg)
    victim = victim if victim is not None else build_victim(cfg)
    attacker = ppokit.make_attacker(env, cfg.ppo, seed)
    tel = ppokit.train_loop(env, attacker, victim, source, cfg.training.updates if updates is None else updates,
                            cfg.ppo, seed=seed)
    return attacker, tel


def continue_training(cfg: RunConfig, attacker, source: str, seed: int, updates: int, victim):
    env = make_pool(cfg)
    tel = ppokit.train_loop(env, attacker, victim, source, updates, cfg.ppo, seed=_child_seed(seed, 7))
    return attacker, tel


def identify_critical(cfg: RunConfig, attacker, seed: int, victim=None, updates: int | None = None):
    mcfg = cfg.mask_ppo_config
    env = make_pool(cfg, mcfg.n_envs)
    victim = victim if victim is not None else build_victim(cfg)
    return critstate.train_mask(env, victim, attacker, cfg.constraint, DualState(), mcfg,
                                cfg.training.mask_updates if updates is None else updates, seed=_child_seed(seed, 5))


def run_finetune(cfg: RunConfig, attacker, source: str, mask: MaskPolicy, dual: DualState, seed: int, victim=None,
                 updates: int | None = None):
    env = make_pool(cfg)
    victim = victim if victim is not None else build_victim(cfg)
    return finetune.finetune_loop(env, attacker, victim, source, mask, None, None, cfg.finetune,
                                  cfg.training.finetune_updates if updates is None else updates,
                                  seed=_child_seed(seed, 7), config=cfg.ppo, constraint=cfg.constraint, dual=dual,
                                  mask_config=cfg.mask_ppo_config)


def train_victim(cfg: RunConfig, seed: int, updates: int | None = None, opponent=None):
    env = make_pool(cfg)
    opponent = opponent if opponent is not None else build_opponent(cfg)
    agent = ppokit.ActorCritic(env.spec.obs_dim_victim, env.spec.victim_space,
                               np.random.default_rng([int(seed), 2718]), cfg.ppo.hidden, cfg.ppo.log_std_init)
    runner = ppokit.DuelRunner(env, None, opponent, learner="victim", seed=seed)
    tel = ppokit.run_ppo(runner, agent, cfg.training.updates if updates is None else updates, cfg.ppo, seed=seed)
    return agent, tel


def validate(cfg: RunConfig, mask, seed: int, episodes: int | None = None, budget: int | None = None,
             victim=None, opponent=None):
    return perturb_validate(cfg.env.name, victim if victim is not None else build_victim(cfg),
                            opponent if opponent is not None else build_opponent(cfg), mask,
                            cfg.validate.budget if budget is None else budget,
                            cfg.validate.episodes if episodes is None else episodes, seed, cfg.env.params)


def _child_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0] % (2**31))


# -- compare ------------------------------------------------------------------------


@dataclass
class SeedJob:
    cfg: RunConfig
    seed: int
    ar_source: str
    arms: tuple
    out: str


def _offset_rows(rows, offset, prior):
    # continue the update and episode axes of the rows that came before
    episodes = prior[-1]["episodes"] if prior else 0
    return [{**r, "update": r["update"] + offset, "episodes": r["episodes"] + episodes} for r in rows]


def run_seed(job: SeedJob) -> dict:
    """All requested arms for one seed; returns {arm: (final win rate, telemetry rows)}."""
    cfg, seed, out = job.cfg, job.seed, Path(job.out)
    victim = build_victim(cfg)
    results = {}
    for arm, preset in ARM_PRESETS.items():
        if arm in job.arms:
            att, tel = train_attacker(cfg, PRESETS[preset], seed, victim=victim)
            results[arm] = (evaluate(cfg, att, victim, seed), tel.rows)
    if "AR" in job.arms or "ARCS" in job.arms:
        ar, tel = train_attacker(cfg, job.ar_source, seed, victim=victim)
        ar_rows = tel.rows
        ckpt.save(out / "checkpoints" / f"AR_seed{seed}.ckpt", ckpt.agent_checkpoint(ar, "attacker", make_pool(cfg, 1), seed))
        if "ARCS" in job.arms:
            mask, dual, mtel = identify_critical(cfg, ar.copy(), seed, victim=victim)
            mtel.to_csv(out / "telemetry" / f"mask_seed{seed}.csv")
            arcs, ftel = run_finetune(cfg, ar.copy(), job.ar_source, mask, dual, seed, victim=victim)
            ftel.to_csv(out / "telemetry" / f"finetune_seed{seed}.csv")
            results["ARCS"] = (evaluate(cfg, arcs, victim, seed),
                               ar_rows + _offset_rows(ftel.training.rows, cfg.training.updates, ar_rows))
        if "AR" in job.arms:
            rows = ar_rows
            if cfg.compare.matched_budget and cfg.training.finetune_updates:
                ar, ctel = continue_training(cfg, ar, job.ar_source, seed, cfg.training.finetune_updates, victim)
                rows = ar_rows + _offset_rows(ctel.rows, cfg.training.updates, ar_rows)
            results["AR"] = (evaluate(cfg, ar, victim, seed), rows)
    return results


def _quantiles(x):
    a = np.asarray(x, dtype=np.float64)
    return float(np.median(a)), float(np.quantile(a, 0.25)), float(np.quantile(a, 0.75))


def leaderboard_rows(per_arm: dict) -> list[dict]:
    rows = []
    for arm in per_arm:
        vals = per_arm[arm]
        for seed, v in vals:
            rows.append({"arm": arm, "seed": seed, "final_win_rate": v, "median": "", "q25": "", "q75": ""})
        med, q25, q75 = _quantiles([v for _, v in vals])
        rows.append({"arm": arm, "seed": "all", "final_win_rate": "", "median": med, "q25": q25, "q75": q75})
    return rows


def format_table(rows) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    grid = [list(LEADERBOARD_COLUMNS)] + [[cell(r[c]) for c in LEADERBOARD_COLUMNS] for r in rows]
    widths = [max(len(g[i]) for g in grid) for i in range(len(LEADERBOARD_COLUMNS))]
    return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(g, widths))).rstrip()
                     for g in grid) + "\n"


def compare(cfg: RunConfig, out, workers: int = 1) -> dict:
    """Train and evaluate every arm for every seed; writes telemetry, leaderboard CSV and text table.

    The iterated reward is searched once with the first seed and shared by
    all seeds. Returns {arm: [(seed, final win rate), ...]}.
    """
    out = Path(out)
    arms = tuple(a for a in ("Baseline1", "Baseline2", "AR", "ARCS") if a in cfg.compare.arms)
    ar_source = ""
    if "AR" in arms or "ARCS" in arms:
        ar_source = reward_source(cfg, cfg.seeds[0], out, workers)
    jobs = [SeedJob(cfg, s, ar_source, arms, str(out)) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_seed, jobs))
    else:
        results = [run_seed(j) for j in jobs]
    per_arm = {a: [] for a in arms}
    entries = []
    for job, res in zip(jobs, results):
        for arm in arms:
            rate, rows = res[arm]
            per_arm[arm].append((job.seed, rate))
            rel = f"telemetry/{arm}_seed{job.seed}.csv"
            ppokit.write_csv(out / rel, ppokit.TELEMETRY_COLUMNS, rows)
            entries.append({"arm": arm, "seed": job.seed, "path": rel})
    rows = leaderboard_rows(per_arm)
    ppokit.write_csv(out / "leaderboard.csv", LEADERBOARD_COLUMNS, rows)
    (out / "leaderboard.txt").write_text(format_table(rows))
    register_telemetry(out, entries, batch_size=cfg.ppo.batch_size)
    return per_arm


# -- manifests and plot data ------------------------------------------------------------


def file_sha256(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(x) for x in paths):
        h.update(p.encode())
        h.update(b"\0")
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def write_manifest(out, command: str, cfg: RunConfig, seed: int, inputs, started: float, extra=None) -> Path:
    """Merge this command's record into ``out/manifest.json``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / MANIFEST
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update({
        "command": command,
        "config": to_plain(cfg),
        "config_yaml": dump_config(cfg),
        "seed": seed,
        "inputs": sorted(str(p) for p in inputs),
        "input_sha256": file_sha256(inputs) if inputs else hashlib.sha256(dump_config(cfg).encode()).hexdigest(),
        "wall_clock_s": round(time.time() - started, 3),
    })
    data.update(extra or {})
    data.setdefault("telemetry", [])
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")
    return path


def register_telemetry(out, entries, batch_size: int) -> None:
    out = Path(out)
    path = out / MANIFEST
    data = json.loads(path.read_text()) if path.exists() else {}
    known = {(e["arm"], e["seed"]) for e in entries}
    kept = [e for e in data.get("telemetry", []) if (e["arm"], e["seed"]) not in known]
    data["telemetry"] = kept + [{**e, "batch_size": batch_size} for e in entries]
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_data(run_dir, figures: bool = False) -> dict:
    """Tidy win-rate curves (x = environment steps) from a run directory's registered telemetry.

    Writes ``plots/win_rate_curves.csv`` and, with ``figures``, a PNG
    rendering next to it. Returns {series: row count}.
    """
    run_dir = Path(run_dir)
    man = run_dir / MANIFEST
    if not man.exists():
        raise PipelineError(f"missing run manifest: {man}")
    entries = json.loads(man.read_text()).get("telemetry", [])
    if not entries:
        raise PipelineError(f"{man} registers no telemetry")
    rows, counts = [], {}
    for e in entries:
        p = run_dir / e["path"]
        if not p.exists():
            raise PipelineError(f"missing telemetry file: {p}")
        for r in _read_csv(p):
            rows.append({"series": e["arm"], "seed": e["seed"], "x": int(r["update"]) * int(e["batch_size"]),
                         "y": float(r["win_rate"])})
            counts[e["arm"]] = counts.get(e["arm"], 0) + 1
    target = run_dir / "plots" / "win_rate_curves.csv"
    ppokit.write_csv(target, CURVE_COLUMNS, rows)
    if figures:
        render_curves(rows, run_dir / "plots" / "win_rate_curves.png")
    return counts


def render_curves(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for series in dict.fromkeys(r["series"] for r in rows):
        by_x = {}
        for r in rows:
            if r["series"] == series:
                by_x.setdefault(r["x"], []).append(r["y"])
        xs = sorted(by_x)
        ax.plot(xs, [float(np.median(by_x[x])) for x in xs], label=series)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("attacker win rate (median over seeds)")
    ax.set_ylim(-0.02, 1.02)
    if rows:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)

