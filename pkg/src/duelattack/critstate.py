"""Critical-state identification under a perturbation-count budget.

A binary mask policy decides, per victim observation, whether the victim's
action is kept (1) or replaced by a uniform random action (0). Training
minimizes the victim's return while a pair of penalty multipliers keeps the
per-episode replacement count N between ``C2`` and ``C1``.

Also here: an exact check of the trust-region style upper bound on the
victim's return under a mask update, on tabular duels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import envkit, ppokit
from .envkit import EpisodeTrace, TabularDuelMDP
from .ppokit import ActorCritic, EpisodeAccountant, Hook, PPOConfig

MASK_COLUMNS = ("update", "N_bar", "nu1", "nu2", "victim_failure_rate")


@dataclass(frozen=True)
class ConstraintConfig:
    C1: int = 40
    C2: int = 20
    d1: float = 5.0
    d2: float = 5.0
    damping: float = 1.0

    def __post_init__(self):
        if not 0 <= self.C2 <= self.C1:
            raise ValueError(f"need 0 <= C2 <= C1, got C2={self.C2}, C1={self.C1}")
        if self.d1 <= 0 or self.d2 <= 0:
            raise ValueError("penalty coefficients d1, d2 must be positive")
        if self.damping <= 0:
            raise ValueError("damping must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DualState:
    nu1: float = 0.0
    nu2: float = 0.0

    def __post_init__(self):
        if self.nu1 < 0 or self.nu2 < 0:
            raise ValueError("dual variables must be non-negative")


def penalty_g(nu: float, d: float, h: float) -> float:
    """(max(nu + d*h, 0)^2 - nu^2) / (2d)."""
    if d <= 0:
        raise ValueError("d must be positive")
    m = max(nu + d * h, 0.0)
    return (m * m - nu * nu) / (2.0 * d)


def penalties(dual: DualState, n_bar: float, cfg: ConstraintConfig) -> tuple[float, float]:
    """(g1, g2) for the upper and lower count constraints."""
    return penalty_g(dual.nu1, cfg.d1, n_bar - cfg.C1), penalty_g(dual.nu2, cfg.d2, cfg.C2 - n_bar)


def multipliers(dual: DualState, n_bar: float, cfg: ConstraintConfig) -> tuple[float, float]:
    """mu = max(0, nu + d*h): the derivative of each penalty with respect to its constraint slack."""
    return max(0.0, dual.nu1 + cfg.d1 * (n_bar - cfg.C1)), max(0.0, dual.nu2 + cfg.d2 * (cfg.C2 - n_bar))


def dual_update(dual: DualState, n_bar: float, cfg: ConstraintConfig) -> DualState:
    if n_bar < 0:
        raise ValueError("mean count must be non-negative")
    k = cfg.damping
    return DualState(max(0.0, dual.nu1 + k * cfg.d1 * (n_bar - cfg.C1)),
                     max(0.0, dual.nu2 + k * cfg.d2 * (cfg.C2 - n_bar)))


def count_perturbed(trace: EpisodeTrace) -> int:
    if not trace.has_mask:
        raise ValueError("trace carries no mask bits")
    return int(np.sum(trace.mask_bits() == 0))


def mask_shaped_reward(reward_victim, mask_bit, dual: DualState, cfg: ConstraintConfig, batch_n_bar: float):
    """Per-step mask reward: minus the victim reward, plus (-mu1 + mu2) on replaced steps."""
    mu1, mu2 = multipliers(dual, batch_n_bar, cfg)
    rv = np.asarray(reward_victim, dtype=np.float64)
    return -rv + np.where(np.asarray(mask_bit) == 0, mu2 - mu1, 0.0)


# -- mask policy --------------------------------------------------------------

INITIAL_REPLACE_PROB = 0.15


class MaskPolicy:
    """Bernoulli policy over {replace=0, keep=1} with its value net, trained by PPO."""

    def __init__(self, obs_dim: int, seed: int = 0, hidden=(64, 64), agent: ActorCritic | None = None,
                 replace_prob: float = INITIAL_REPLACE_PROB):
        if agent is None:
            agent = ActorCritic(obs_dim, ("discrete", 2), np.random.default_rng([int(seed), 4242]), hidden)
            b = agent.policy.params[f"b{agent.policy.spec.n_layers - 1}"]
            b[...] = [math.log(replace_prob), math.log(1.0 - replace_prob)]
        self.agent = agent

    @property
    def obs_dim(self) -> int:
        return self.agent.in_dim

    def replace_prob(self, obs) -> np.ndarray:
        return self.agent.probs(obs)[:, 0]

    def decide(self, obs, rng, deterministic=False) -> np.ndarray:
        obs = np.atleast_2d(obs)
        if obs.shape[1] != self.obs_dim:
            raise ValueError(f"mask expects {self.obs_dim} inputs, got {obs.shape[1]}")
        return np.asarray(self.agent.act(obs, rng, deterministic=deterministic), dtype=np.int64)

    def copy(self) -> "MaskPolicy":
        return MaskPolicy(self.obs_dim, agent=self.agent.copy())


# -- training ------------------------------------------------------------------


@dataclass
class MaskTelemetry:
    rows: list = field(default_factory=list)

    def to_csv(self, path):
        ppokit.write_csv(path, MASK_COLUMNS, self.rows)


class _BudgetHook(Hook):
    def __init__(self, n_envs, cfg, dual, telemetry, max_steps):
        self.cfg, self.dual, self.tel = cfg, dual, telemetry
        self.acct = EpisodeAccountant(n_envs)
        self.mean_len = float(max_steps)
        self.n_bar = 0.0
        self.fail = 0.0

    def rewards(self, update, rollout, rewards):
        recs = self.acct.account(rollout, rewards)
        if recs:
            self.n_bar = float(np.mean([r.perturbed for r in recs]))
            self.mean_len = float(np.mean([r.length for r in recs]))
            self.fail = float(np.mean([r.status == envkit.WIN for r in recs]))
        else:
            # no episode finished inside this rollout: extrapolate the replacement rate
            self.n_bar = float(np.mean(rollout.mask_bit == 0)) * self.mean_len
        return rewards + mask_shaped_reward(np.zeros_like(rewards), rollout.mask_bit, self.dual, self.cfg, self.n_bar)

    def after_update(self, update, agent, rollout, report):
        self.dual = dual_update(self.dual, self.n_bar, self.cfg)
        self.tel.rows.append({"update": update, "N_bar": self.n_bar, "nu1": self.dual.nu1, "nu2": self.dual.nu2,
                              "victim_failure_rate": self.fail})


def train_mask(env: envkit.DuelEnv, victim, attacker, cfg: ConstraintConfig, dual0: DualState, config: PPOConfig,
               updates: int, seed: int = 0, mask: MaskPolicy | None = None):
    """Jointly train the mask (PPO on the shaped reward) and the duals (after each update).

    The victim and attacker stay fixed. Returns the mask, final duals and
    per-update telemetry.
    """
    mask = mask if mask is not None else MaskPolicy(env.spec.obs_dim_victim, seed, config.hidden)
    tel = MaskTelemetry()
    if updates <= 0:
        return mask, dual0, tel
    hook = _BudgetHook(env.n, cfg, dual0, tel, env.spec.max_steps)
    runner = ppokit.DuelRunner(env, victim, attacker, learner="mask", seed=seed)
    ppokit.run_ppo(runner, mask.agent, updates, config, hooks=(hook,), seed=seed)
    return mask, hook.dual, tel


def evaluate_mask(env_name: str, victim, attacker, mask: MaskPolicy, episodes: int, seed: int, env_kwargs=None,
                  deterministic: bool = False, batch: int = 100):
    """Per-episode replacement counts and the victim failure rate with the mask active."""
    env_kwargs = env_kwargs or {}
    counts, fails = [], []
    done = 0
    while done < episodes:
        b = min(batch, episodes - done)
        env = envkit.make_env(env_name, b, **env_kwargs)
        seeds = [ppokit.episode_seed(seed, 0, done + i) for i in range(b)]
        streams = envkit.RowStreams.from_seeds(seeds, envkit.STREAM_MASK)

        def fire(t, ov, alive):
            return mask.decide(ov, streams, deterministic=deterministic) == 0

        out = ppokit.run_batch_episodes(env, seeds, attacker, victim, perturb_fn=fire)
        counts.extend(out["perturbed"].tolist())
        fails.extend((out["status"] == envkit.WIN).tolist())
        done += b
    return np.asarray(counts), float(np.mean(fails)) if fails else 0.0


# -- exact bound check on tabular duels -----------------------------------------


@dataclass
class BoundReport:
    eta_old: float
    eta_new: float
    L_value: float
    max_kl: float
    C_const: float
    M_value: float
    holds: bool
    infinite_kl: bool = False

    def as_dict(self):
        return asdict(self)


def _mask_table(table, n_states) -> np.ndarray:
    """Normalize to an (S, 2) table of probabilities over (replace, keep)."""
    t = np.asarray(table, dtype=np.float64)
    if t.ndim == 1:
        t = np.stack([1.0 - t, t], axis=1)
    if t.shape != (n_states, 2) or np.any(t < -1e-12) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("mask tables must be per-state Bernoulli distributions")
    return np.clip(t, 0.0, 1.0)


def _kl_rows(p, q):
    """Row-wise KL(p || q); infinite where q = 0 < p."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def verify_theorem1(mdp: TabularDuelMDP, policy_old_table, policy_new_table, victim_table=None,
                    attacker_table=None) -> BoundReport:
    """Exact check that the new mask's victim return stays below L + C * max KL.

    Mask tables are per-state (replace, keep) probabilities, or a vector of
    keep probabilities. Victim and attacker tables default to uniform.
    """
    S = mdp.n_states
    vt = np.full((S, mdp.n_actions_victim), 1.0 / mdp.n_actions_victim) if victim_table is None else victim_table
    at = np.full((S, mdp.n_actions_attacker), 1.0 / mdp.n_actions_attacker) if attacker_table is None else attacker_table
    old, new = _mask_table(policy_old_table, S), _mask_table(policy_new_table, S)
    P, r = envkit.mask_mdp(mdp, vt, at)
    g = mdp.discount

    def induced(pi):
        return np.einsum("sm,mst->st", pi, P), np.einsum("sm,ms->s", pi, r)

    P_old, r_old = induced(old)
    P_new, r_new = induced(new)
    V_old = envkit.solve_values(P_old, r_old, g)
    V_new = envkit.solve_values(P_new, r_new, g)
    s0 = mdp.start_state
    eta_old, eta_new = float(V_old[s0]), float(V_new[s0])
    Q = r.T + g * np.einsum("mst,t->sm", P, V_old)
    A = Q - V_old[:, None]
    e0 = np.zeros(S)
    e0[s0] = 1.0
    rho = np.linalg.solve((np.eye(S) - g * P_old).T, e0)
    L = eta_old + float(rho @ np.sum(new * A, axis=1))
    kl = _kl_rows(old, new)
    max_kl = float(np.max(kl))
    C = 4.0 * g * float(np.max(np.abs(A))) / (1.0 - g) ** 2
    if not np.isfinite(max_kl):
        return BoundReport(eta_old, eta_new, L, math.inf, C, math.inf, True, True)
    M = L + C * max_kl
    return BoundReport(eta_old, eta_new, L, max_kl, C, M, bool(eta_new <= M + 1e-8))
