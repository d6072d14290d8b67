"""Victim failure rates with no perturbation, random perturbation and mask-chosen perturbation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import envkit, ppokit

CONDITIONS = ("none", "random", "critical")


@dataclass
class ValidationReport:
    failure: dict
    episodes: int
    budget: int
    mean_perturbed: dict
    half_width: dict
    planned_random: list
    realized: dict
    last_planned_step: list
    lengths: dict

    def as_row(self) -> dict:
        row = {"episodes": self.episodes, "budget": self.budget}
        for c in CONDITIONS:
            row[f"failure_{c}"] = self.failure[c]
            row[f"half_width_{c}"] = self.half_width[c]
            row[f"mean_perturbed_{c}"] = self.mean_perturbed[c]
        return row

    def to_dict(self):
        return asdict(self)


def _half_width(p: float, n: int) -> float:
    return 1.96 * float(np.sqrt(p * (1.0 - p) / n)) if n else 0.0


def perturb_validate(env_name: str, victim, opponent, mask, budget_per_episode: int, episodes: int, seed: int,
                     env_kwargs=None, batch: int = 100) -> ValidationReport:
    """Paired three-condition comparison.

    Every condition replays the same episode seeds. The critical condition
    replaces the victim's action wherever the mask's argmax is 0, earliest
    first, until the budget is spent. The random condition plans the same
    number of replacements, at timesteps drawn uniformly from the critical
    episode's length; a planned step is lost only if the random episode has
    already ended.
    """
    if episodes < 1:
        raise ValueError("episodes must be positive")
    if budget_per_episode < 0:
        raise ValueError("budget must be non-negative")
    env_kwargs = env_kwargs or {}
    probe = envkit.make_env(env_name, 1, **env_kwargs)
    if mask is not None and getattr(mask, "obs_dim", probe.spec.obs_dim_victim) != probe.spec.obs_dim_victim:
        raise ValueError("mask input width does not match the environment's victim observation")
    status = {c: [] for c in CONDITIONS}
    counts = {c: [] for c in CONDITIONS}
    lengths = {c: [] for c in CONDITIONS}
    planned, last_step = [], []
    done = 0
    while done < episodes:
        b = min(batch, episodes - done)
        seeds = [ppokit.episode_seed(seed, 0, done + i) for i in range(b)]

        def run(fn):
            env = envkit.make_env(env_name, b, **env_kwargs)
            return ppokit.run_batch_episodes(env, seeds, opponent, victim, perturb_fn=fn)

        none = run(None)
        used = np.zeros(b, dtype=np.int64)

        def critical(t, ov, alive):
            if mask is None or budget_per_episode == 0:
                return np.zeros(b, dtype=bool)
            fire = (mask.decide(ov, None, deterministic=True) == 0) & alive & (used < budget_per_episode)
            used[:] += fire
            return fire

        crit = run(critical)
        schedule = []
        for i in range(b):
            k, L = int(crit["perturbed"][i]), int(crit["length"][i])
            rng = np.random.default_rng([int(seed), done + i, 17])
            schedule.append(set(rng.choice(L, size=k, replace=False).tolist()) if k else set())
            planned.append(k)
            last_step.append(max(schedule[-1]) if k else -1)

        def random(t, ov, alive):
            return np.array([t in s for s in schedule], dtype=bool)

        rand = run(random)
        for c, out in (("none", none), ("random", rand), ("critical", crit)):
            status[c].extend(out["status"].tolist())
            counts[c].extend(out["perturbed"].tolist())
            lengths[c].extend(out["length"].tolist())
        done += b
    failure = {c: float(np.mean(np.asarray(status[c]) == envkit.WIN)) for c in CONDITIONS}
    return ValidationReport(
        failure=failure,
        episodes=episodes,
        budget=int(budget_per_episode),
        mean_perturbed={c: float(np.mean(counts[c])) for c in CONDITIONS},
        half_width={c: _half_width(failure[c], episodes) for c in CONDITIONS},
        planned_random=planned,
        realized={c: [int(x) for x in counts[c]] for c in CONDITIONS},
        last_planned_step=[int(x) for x in last_step],
        lengths={c: [int(x) for x in lengths[c]] for c in CONDITIONS},
    )
