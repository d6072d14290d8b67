"""Generate, train, evaluate, refine: the reward search loop."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import envkit, ppokit
from .backends import PromptState, evaluate_candidates, generate_candidates
from .dsl import RewardProgram, parse_program
from .presets import PRESETS

log = logging.getLogger(__name__)


def resolve_program(reward) -> RewardProgram:
    """Accept a parsed program, a preset name, a path to a program file, or program source."""
    if isinstance(reward, RewardProgram):
        return reward
    text = str(reward)
    if text in PRESETS:
        return parse_program(PRESETS[text])
    p = Path(text)
    if "\n" not in text and text.endswith((".rwd", ".txt", ".py")) and p.exists():
        return parse_program(p.read_text())
    return parse_program(text)


def auc_win_rate(trajectory) -> float:
    """Trapezoidal area under a win-rate trajectory, with the x range scaled to [0, 1]."""
    y = np.asarray(trajectory, dtype=np.float64)
    if y.size == 0:
        return 0.0
    if y.size == 1:
        return float(y[0])
    return float(np.sum((y[1:] + y[:-1]) / 2.0) / (y.size - 1))


@dataclass
class CandidateReport:
    index: int
    source: str
    win_rates: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    components: list = field(default_factory=list)
    final_win_rate: float = 0.0
    auc_win_rate: float = 0.0
    error: str | None = None

    def details(self) -> list[dict]:
        """Per-window rows merged with component means, the feedback a generator sees."""
        out = []
        for row, comp in zip(self.rows, self.components):
            d = {k: row[k] for k in ("episodes", "mean_len", "mean_total_reward", "mean_ground_reward", "win_rate")}
            d.update({f"c_{k}": v for k, v in comp.items()})
            out.append(d)
        return out

    def to_dict(self) -> dict:
        return {"index": self.index, "source": self.source, "win_rates": self.win_rates, "rows": self.rows,
                "components": self.components, "final_win_rate": self.final_win_rate,
                "auc_win_rate": self.auc_win_rate, "error": self.error}


@dataclass
class CandidateJob:
    index: int
    source: str
    env_name: str
    env_kwargs: dict
    victim: object
    config: ppokit.PPOConfig
    updates: int
    seed: int
    eval_episodes: int


def train_candidate(job: CandidateJob) -> tuple[CandidateReport, ppokit.ActorCritic | None]:
    """Fresh attacker, ``updates`` PPO updates under the candidate reward, then a held-out evaluation."""
    try:
        program = parse_program(job.source)
        env = envkit.make_env(job.env_name, job.config.n_envs, **job.env_kwargs)
        attacker = ppokit.make_attacker(env, job.config, job.seed)
        tel = ppokit.train_loop(env, attacker, job.victim, program, job.updates, job.config, seed=job.seed)
        traj = list(tel.win_rates)
        if job.eval_episodes > 0:
            final = ppokit.evaluate_win_rate(job.env_name, attacker, job.victim, job.eval_episodes,
                                             seed=job.seed + 1_000_003, env_kwargs=job.env_kwargs)
        else:
            pending = tel.pending_win_rate()
            final = traj[-1] if traj else (pending if pending is not None else 0.0)
        return CandidateReport(job.index, job.source, traj, tel.rows, tel.components, float(final),
                               auc_win_rate(traj if traj else [final])), attacker
    except Exception as exc:  # a broken candidate must not sink the round
        log.warning("candidate %d failed: %s", job.index, exc)
        return CandidateReport(job.index, job.source, error=f"{type(exc).__name__}: {exc}"), None


@dataclass
class IterationLog:
    settings: dict
    rounds: list = field(default_factory=list)
    final_source: str | None = None

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for r in self.rounds:
            (d / f"round_{r['round']:02d}.json").write_text(_dumps(r))
        manifest = {
            "settings": self.settings,
            "rounds": [f"round_{r['round']:02d}.json" for r in self.rounds],
            "selected": [r["selected"] for r in self.rounds],
            "final_source": self.final_source,
        }
        (d / "manifest.json").write_text(_dumps(manifest))

    def to_json(self) -> str:
        return _dumps({"settings": self.settings, "rounds": self.rounds, "final_source": self.final_source})


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def iterate_rewards(env_name: str, victim, backends, n_rounds: int = 4, n_cand: int = 4, candidate_updates: int = 50,
                    seed: int = 0, config: ppokit.PPOConfig | None = None, env_kwargs=None, eval_episodes: int = 200,
                    workers: int = 1, log_dir=None, return_attacker: bool = False):
    """Run ``n_rounds`` of candidate generation and selection.

    ``backends`` is a (generator, evaluator) pair. Every candidate in a round
    starts from the same attacker initialization and seed, so reports differ
    only through the reward. Returns the final program and the log (and the
    attacker trained with it when ``return_attacker`` is set).
    """
    if candidate_updates < 1:
        raise ValueError("candidate_updates must be at least 1")
    if n_rounds < 1 or n_cand < 1:
        raise ValueError("n_rounds and n_cand must be at least 1")
    generator, evaluator = backends
    config = config or ppokit.PPOConfig()
    env_kwargs = dict(env_kwargs or {})
    settings = {"env": env_name, "env_kwargs": env_kwargs, "n_rounds": n_rounds, "n_cand": n_cand,
                "candidate_updates": candidate_updates, "seed": seed, "eval_episodes": eval_episodes,
                "ppo": config.to_dict()}
    ilog = IterationLog(settings)
    state = PromptState(env_name, 0, seed)
    best_program, best_attacker = None, None
    for rnd in range(n_rounds):
        state.round = rnd
        programs = generate_candidates(generator, state, n_cand)
        round_seed = int(np.random.SeedSequence([int(seed), rnd]).generate_state(1)[0] % (2**31))
        jobs = [CandidateJob(i, p.source, env_name, env_kwargs, victim, config, candidate_updates, round_seed,
                             eval_episodes) for i, p in enumerate(programs)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(train_candidate, jobs))
        else:
            results = [train_candidate(j) for j in jobs]
        reports = [r for r, _ in results]
        pick = evaluate_candidates(evaluator, reports)
        best = reports[pick]
        log.info("round %d: picked candidate %d (final win rate %.3f)", rnd, pick, best.final_win_rate)
        ilog.rounds.append({"round": rnd, "prompt_state": state.to_dict(), "seed": round_seed,
                            "candidates": [r.to_dict() for r in reports], "selected": pick})
        state = PromptState(env_name, rnd + 1, seed, best.source, best.details(), best.final_win_rate)
        best_program, best_attacker = programs[pick], results[pick][1]
    ilog.final_source = best_program.source
    if log_dir is not None:
        ilog.write(log_dir)
    if return_attacker:
        return best_program, ilog, best_attacker
    return best_program, ilog
