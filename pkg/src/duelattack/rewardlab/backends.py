"""Candidate generation and selection backends.

A backend pair is a generator (proposes reward programs) and an evaluator
(picks the best trained candidate). The scripted pair is deterministic and
runs offline; the remote pair talks to a text-completion endpoint.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .dsl import DslError, RewardProgram, parse_program

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "v1"
GENOME_TAG = "# genome: "


class GenerationError(RuntimeError):
    def __init__(self, message, errors=()):
        super().__init__(message)
        self.errors = list(errors)


@dataclass
class PromptState:
    """What the generator knows when it is asked for a round of candidates."""

    env_name: str
    round: int = 0
    seed: int = 0
    best_source: str | None = None
    best_details: list = field(default_factory=list)
    best_final_win_rate: float | None = None

    def to_dict(self):
        return {"env_name": self.env_name, "round": self.round, "seed": self.seed, "best_source": self.best_source,
                "best_details": self.best_details, "best_final_win_rate": self.best_final_win_rate}


def load_template(kind: str, version: str = TEMPLATE_VERSION) -> str:
    return resources.files(__package__).joinpath("templates", f"{kind}_{version}.txt").read_text()


def render_details(rows: list[dict]) -> str:
    if not rows:
        return "(no training record yet)"
    return "\n".join(json.dumps(r, sort_keys=True) for r in rows)


# -- scripted generator -------------------------------------------------------

# potential terms per environment, written over an observation placeholder {s}
POTENTIAL_TERMS = {
    "push_duel": {
        "approach": "-norm2({s}[4:6] - {s}[0:2])",
        "edge": "-{s}[9]",
        "safety": "{s}[8]",
    },
    "gate_pass": {
        "approach": "-abs({s}[0] - {s}[2])",
        "edge": "-{s}[2]",
        "safety": "clip({s}[0] + 0.5, 0, 1)",
    },
}

# (low, high) of the log-uniform prior for each positive weight
WEIGHT_PRIOR = {
    "dense_scale": (0.5, 8.0),
    "approach": (0.1, 1.0),
    "edge": (0.1, 2.0),
    "safety": (0.05, 1.0),
    "sparse_adv": (0.1, 2.0),
    "sparse_opp": (0.01, 0.5),
    "win_bonus": (1.0, 15.0),
    "loss_penalty": (0.5, 6.0),
    "energy": (1e-4, 1e-2),
    "step": (1e-4, 2e-3),
}


def _round3(x: float) -> float:
    return float(f"{x:.3g}")


def sample_genome(rng: np.random.Generator) -> dict:
    g = {k: _round3(float(np.exp(rng.uniform(np.log(lo), np.log(hi))))) for k, (lo, hi) in WEIGHT_PRIOR.items()}
    g["rate_mix"] = int(rng.random() < 0.5)
    return g


def mutate_genome(genome: dict, rng: np.random.Generator, sigma: float) -> dict:
    g = dict(genome)
    for k, (lo, hi) in WEIGHT_PRIOR.items():
        v = float(g.get(k, np.sqrt(lo * hi))) * float(np.exp(sigma * rng.standard_normal()))
        g[k] = _round3(min(max(v, lo / 4), hi * 4))
    if rng.random() < 0.2:
        g["rate_mix"] = 1 - int(g.get("rate_mix", 0))
    return g


def render_genome(genome: dict, env_name: str) -> str:
    terms = POTENTIAL_TERMS.get(env_name)
    if terms is None:
        raise ValueError(f"scripted generator has no potential terms for {env_name!r}")
    g = genome

    def phi(s):
        return " + ".join(f"{g[k]}*{t.format(s=s)}" for k, t in terms.items())

    lines = [GENOME_TAG + json.dumps(g, sort_keys=True)]
    if g["rate_mix"]:
        lines.append("combat_weight = 0.3 + 0.7*rate")
    else:
        lines.append("combat_weight = 1")
    lines += [
        f"_phi1 = {phi('s1')}",
        f"_phi2 = {phi('s2')}",
        f"dense_reward = {g['dense_scale']}*combat_weight*(0.99*_phi2 - _phi1)",
        f"sparse_reward = {g['sparse_adv']}*reward_adv - {g['sparse_opp']}*reward_opp",
        f"terminal_bonus = {g['win_bonus']}*win - {g['loss_penalty']}*loss",
        f"energy_penalty = -{g['energy']}*sum(a2*a2)",
        f"step_penalty = -{g['step']}",
        "dense_reward + sparse_reward + terminal_bonus + energy_penalty + step_penalty",
    ]
    return "\n".join(lines) + "\n"


def genome_of(source: str) -> dict | None:
    for line in source.splitlines():
        if line.startswith(GENOME_TAG):
            return json.loads(line[len(GENOME_TAG):])
    return None


class ScriptedGenerator:
    """Deterministic stand-in for a language-model generator.

    Round 0 samples genomes from a log-uniform prior. Later rounds keep the
    incumbent as candidate 0 and fill the rest with mutations of it; the
    mutation scale grows when the incumbent's win rate is poor.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def generate(self, state: PromptState, n_cand: int) -> list[RewardProgram]:
        if n_cand < 1:
            raise ValueError("n_cand must be at least 1")
        rng = np.random.default_rng([self.seed, int(state.seed), int(state.round), 9973])
        incumbent = genome_of(state.best_source) if state.best_source else None
        sources: list[str] = []
        if incumbent is not None:
            sources.append(render_genome(incumbent, state.env_name))
        rate = state.best_final_win_rate if state.best_final_win_rate is not None else 0.0
        sigma = 0.8 if rate < 0.2 else 0.4
        attempts = 0
        while len(sources) < n_cand:
            attempts += 1
            if attempts > 1000:
                raise GenerationError("could not produce distinct candidates")
            g = mutate_genome(incumbent, rng, sigma) if incumbent is not None else sample_genome(rng)
            src = render_genome(g, state.env_name)
            if src not in sources:
                sources.append(src)
        return [parse_program(s) for s in sources]


class FixedGenerator:
    """Returns a fixed list of sources per round (the last list repeats)."""

    def __init__(self, rounds: list[list[str]]):
        self.rounds = [list(r) for r in rounds]

    def generate(self, state: PromptState, n_cand: int) -> list[RewardProgram]:
        srcs = self.rounds[min(state.round, len(self.rounds) - 1)]
        if len(srcs) < n_cand:
            raise GenerationError(f"fixed generator has {len(srcs)} programs for round {state.round}, need {n_cand}")
        return [parse_program(s) for s in srcs[:n_cand]]


# -- evaluators ---------------------------------------------------------------


def select_best(reports) -> int:
    """Position of the best report: highest final win rate, then AUC, then lowest candidate index."""
    if not reports:
        raise ValueError("no candidate reports to evaluate")
    keyed = [(-r.final_win_rate, -r.auc_win_rate, r.index, pos) for pos, r in enumerate(reports)]
    return min(keyed)[3]


class ScriptedEvaluator:
    def select(self, reports) -> int:
        return select_best(reports)


def generate_candidates(generator, prompt_state: PromptState, n_cand: int = 4) -> list[RewardProgram]:
    return generator.generate(prompt_state, n_cand)


def evaluate_candidates(evaluator, reports) -> int:
    if not reports:
        raise ValueError("no candidate reports to evaluate")
    return evaluator.select(reports)


# -- remote backend -------------------------------------------------------------


@dataclass
class RemoteConfig:
    url: str
    model: str = "gpt-4o"
    api_key_env: str = "REWARD_API_KEY"
    timeout: float = 60.0
    retries: int = 2
    allow_partial: bool = False
    env_description: str = ""


def post_text(cfg: RemoteConfig, prompt: str, opener=urllib.request.urlopen) -> str:
    """POST ``{"model", "prompt"}`` and return the ``text`` field, retrying on failure."""
    body = json.dumps({"model": cfg.model, "prompt": prompt}).encode()
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(cfg.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    last = None
    for attempt in range(cfg.retries + 1):
        try:
            req = urllib.request.Request(cfg.url, data=body, headers=headers, method="POST")
            with opener(req, timeout=cfg.timeout) as resp:
                return json.loads(resp.read().decode())["text"]
        except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
            last = exc
            log.warning("remote call failed (attempt %d): %s", attempt + 1, exc)
            if attempt < cfg.retries:
                time.sleep(min(2.0**attempt, 10.0))
    raise GenerationError(f"remote endpoint failed after {cfg.retries + 1} attempts: {last}")


_FENCE = re.compile(r"```[a-zA-Z]*\n(.*?)```", re.S)


def extract_program(text: str) -> str:
    m = _FENCE.search(text)
    return (m.group(1) if m else text).strip() + "\n"


def grammar_summary() -> str:
    return ("statements 'name = expr' then one final expression; names starting with '_' are helpers; "
            "operators + - * / ** and comparisons < <= > >= == != (yield 0 or 1); 'a if cond else b'; "
            "functions min, max, abs, tanh, exp, sqrt, clip(x, lo, hi), norm2(v), sum(v); "
            "vectors index as v[i] or slice as v[i:j]")


class RemoteGenerator:
    def __init__(self, cfg: RemoteConfig, opener=urllib.request.urlopen):
        self.cfg, self.opener = cfg, opener

    def prompt(self, state: PromptState, index: int, count: int) -> str:
        base = load_template("base").format(env_name=state.env_name, env_description=self.cfg.env_description,
                                            grammar=grammar_summary())
        gen = load_template("generation").format(code=state.best_source or "(none yet)",
                                                 details=render_details(state.best_details),
                                                 index=index + 1, count=count)
        return base + "\n" + gen

    def generate(self, state: PromptState, n_cand: int) -> list[RewardProgram]:
        programs, errors = [], []
        for i in range(n_cand):
            try:
                text = post_text(self.cfg, self.prompt(state, i, n_cand), self.opener)
                programs.append(parse_program(extract_program(text)))
            except (GenerationError, DslError) as exc:
                errors.append({"candidate": i, "error": str(exc)})
        if len(programs) < n_cand and not self.cfg.allow_partial:
            raise GenerationError(f"only {len(programs)} of {n_cand} candidates were usable", errors)
        if not programs:
            raise GenerationError("no usable candidates", errors)
        return programs


_BEST = re.compile(r"BEST:\s*(\d+)")


class RemoteEvaluator:
    def __init__(self, cfg: RemoteConfig, opener=urllib.request.urlopen):
        self.cfg, self.opener = cfg, opener

    def prompt(self, reports) -> str:
        code = "\n".join(f"[{i}]\n{r.source}" for i, r in enumerate(reports))
        details = "\n".join(f"[{i}] final_win_rate={r.final_win_rate!r} auc={r.auc_win_rate!r}\n"
                            f"{render_details(r.details())}" for i, r in enumerate(reports))
        return load_template("evaluation").format(code=code, details=details)

    def select(self, reports) -> int:
        if not reports:
            raise ValueError("no candidate reports to evaluate")
        try:
            m = _BEST.search(post_text(self.cfg, self.prompt(reports), self.opener))
            if m and int(m.group(1)) < len(reports):
                return int(m.group(1))
        except GenerationError as exc:
            log.warning("remote evaluator unavailable, using the scripted rule: %s", exc)
        return select_best(reports)
