"""PPO machinery shared by the attacker, the mask learner and victim pretraining.

Rollouts are collected by :class:`DuelRunner`, which steps a vectorized duel
environment with one learning agent and fixed partners. Training rewards can
be rewritten after collection by hooks, which is how the mask penalty and the
fine-tuning deviation reward are injected without touching the PPO core.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import envkit
from .envkit import NONE, WIN, DuelEnv
from .nnkit import (Mlp, MlpSpec, backward, forward, forward_cache, head_backward, head_stats, log_softmax,
                    policy_spec, sample_action)

log = logging.getLogger(__name__)

TELEMETRY_COLUMNS = ("update", "episodes", "mean_len", "mean_total_reward", "mean_ground_reward",
                     "win_rate", "approx_kl", "entropy")
WINDOW_EPISODES = 100


class PPOError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class PPOConfig:
    lr: float = 3e-4
    clip_epsilon: float = 0.2
    rollout_steps: int = 2048
    epochs: int = 4
    minibatch_size: int = 512
    n_envs: int = 8
    gamma: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    hidden: tuple = (64, 64)
    log_std_init: float = -0.5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        for name in ("rollout_steps", "epochs", "minibatch_size", "n_envs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if (self.rollout_steps * self.n_envs) % self.minibatch_size:
            raise ValueError("rollout_steps * n_envs must be divisible by minibatch_size")

    @property
    def batch_size(self) -> int:
        return self.rollout_steps * self.n_envs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# -- core formulas ----------------------------------------------------------


def compute_gae(rewards, values, dones, gamma: float, gae_lambda: float):
    """Generalized advantage estimation.

    ``values`` carries one bootstrap row beyond the last step; ``dones[t]``
    marks that the episode ended at step ``t``. Works on (T,) or (T, n) arrays.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1 or d.shape != r.shape or v.shape[1:] != r.shape[1:]:
        raise ValueError(f"misaligned GAE inputs: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in reversed(range(r.shape[0])):
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * nonterminal - v[t]
        last = delta + gamma * gae_lambda * nonterminal * last
        adv[t] = last
    return adv, adv + v[:-1]


def clipped_objective(logp_new, logp_old, advantage, epsilon: float):
    ratio = np.exp(np.asarray(logp_new, dtype=np.float64) - np.asarray(logp_old, dtype=np.float64))
    a = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * a, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * a)


def clipped_objective_grad(logp_new, logp_old, advantage, epsilon: float):
    """d objective / d logp_new, zero where the clipped branch is the active minimum."""
    ratio = np.exp(logp_new - logp_old)
    clipped = ((advantage >= 0) & (ratio > 1.0 + epsilon)) | ((advantage < 0) & (ratio < 1.0 - epsilon))
    return np.where(clipped, 0.0, ratio * advantage)


# -- agents -----------------------------------------------------------------


class ActorCritic:
    """Separate policy and value MLPs with their own Adam states."""

    def __init__(self, obs_dim: int, action_space, rng: np.random.Generator | None = None, hidden=(64, 64),
                 log_std_init=-0.5, activation="tanh", policy: Mlp | None = None, value: Mlp | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if isinstance(action_space, envkit.ActionSpace):
            action_space = action_space.as_tuple()
        self.action_space = tuple(action_space)
        if policy is None:
            policy = Mlp(policy_spec(obs_dim, self.action_space, hidden, activation, log_std_init), rng=rng, output_gain=0.01)
        if value is None:
            value = Mlp(MlpSpec((obs_dim, *hidden, 1), activation, "linear"), rng=rng, output_gain=1.0)
        self.policy = policy
        self.value = value

    @property
    def in_dim(self) -> int:
        return self.policy.spec.in_dim

    @property
    def discrete(self) -> bool:
        return self.policy.spec.output_head == "categorical"

    def sample(self, obs, rng, deterministic=False):
        return sample_action(self.policy.spec, self.policy.params, np.atleast_2d(obs), rng, deterministic)

    def act(self, obs, rng, deterministic=False):
        if deterministic:
            out = forward(self.policy.spec, self.policy.params, np.atleast_2d(obs))
            return np.argmax(out, axis=1) if self.discrete else out
        return self.sample(obs, rng)[0]

    def values(self, obs) -> np.ndarray:
        return forward(self.value.spec, self.value.params, np.atleast_2d(obs))[:, 0]

    def probs(self, obs) -> np.ndarray:
        return np.exp(log_softmax(forward(self.policy.spec, self.policy.params, np.atleast_2d(obs))))

    def copy(self) -> "ActorCritic":
        return ActorCritic(self.in_dim, self.action_space, policy=self.policy.copy(), value=self.value.copy())


# -- batches and updates -------------------------------------------------------


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    rewards: np.ndarray
    values_old: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return self.obs.shape[0]


@dataclass
class UpdateReport:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    n_samples: int

    def as_dict(self):
        return asdict(self)


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


def ppo_update(agent: ActorCritic, batch: RolloutBatch, config: PPOConfig, rng: np.random.Generator) -> UpdateReport:
    """Clipped-surrogate update over ``epochs`` shuffled minibatch passes.

    Advantages are normalized once per update. A non-finite loss rolls the
    agent back to its pre-update parameters and raises :class:`PPOError`.
    """
    n = len(batch)
    adv_all = normalize(batch.advantages)
    mb = min(config.minibatch_size, n)
    pol, val = agent.policy, agent.value
    snapshot = (pol.copy(), val.copy())
    eps = config.clip_epsilon
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = order[start:start + mb]
            obs, act = batch.obs[idx], batch.actions[idx]
            adv, lp_old = adv_all[idx], batch.logp_old[idx]
            logp, ent, aux = head_stats(pol.spec, pol.params, obs, act)
            surr = clipped_objective(logp, lp_old, adv, eps)
            pol_loss = -surr.mean() - config.entropy_coef * ent.mean()
            dlogp = -clipped_objective_grad(logp, lp_old, adv, eps) / mb
            dent = np.full(mb, -config.entropy_coef / mb)
            g_pol = head_backward(pol.spec, pol.params, aux, dlogp, dent)
            v_pred, vcache = _value_forward(val, batch.obs[idx])
            err = v_pred - batch.returns[idx]
            val_loss = config.value_coef * np.mean(err * err)
            g_val = backward(val.spec, val.params, vcache, (2.0 * config.value_coef / mb) * err[:, None])
            if not (np.isfinite(pol_loss) and np.isfinite(val_loss) and np.all(np.isfinite(g_pol.values))
                    and np.all(np.isfinite(g_val.values))):
                agent.policy, agent.value = snapshot
                raise PPOError("non-finite PPO loss; update aborted",
                               {"epoch": epoch, "policy_loss": float(pol_loss), "value_loss": float(val_loss)})
            pol.step(g_pol, config.lr, config.max_grad_norm)
            val.step(g_val, config.lr, config.max_grad_norm)
    logp, ent, _ = head_stats(pol.spec, pol.params, batch.obs, batch.actions)
    ratio = np.exp(logp - batch.logp_old)
    surr = clipped_objective(logp, batch.logp_old, adv_all, eps)
    v_pred = agent.values(batch.obs)
    return UpdateReport(
        policy_loss=float(-surr.mean()),
        value_loss=float(config.value_coef * np.mean((v_pred - batch.returns) ** 2)),
        entropy=float(ent.mean()),
        approx_kl=float(np.mean(batch.logp_old - logp)),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > eps)),
        n_samples=n,
    )


def _value_forward(val: Mlp, obs):
    out, cache = forward_cache(val.spec, val.params, obs)
    return out[:, 0], cache


# -- rollout collection -------------------------------------------------------


@dataclass
class Rollout:
    """Raw (T, n) arrays from one collection pass."""

    obs_victim: np.ndarray
    act_victim: np.ndarray
    obs_attacker: np.ndarray
    act_attacker: np.ndarray
    next_obs_victim: np.ndarray
    next_obs_attacker: np.ndarray
    reward_victim: np.ndarray
    reward_attacker: np.ndarray
    status: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    mask_bit: np.ndarray | None
    learner_obs: np.ndarray
    learner_act: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    last_values: np.ndarray
    terminal_values: np.ndarray
    program_reward: np.ndarray | None
    components: dict
    ground_reward: np.ndarray
    episode_index: np.ndarray

    @property
    def steps(self) -> int:
        return self.done.shape[0]


def episode_seed(run_seed: int, slot: int, k: int) -> int:
    return int(np.random.SeedSequence([int(run_seed), int(slot), int(k)]).generate_state(1)[0])


class DuelRunner:
    """Steps a vectorized duel with one learning role.

    ``learner`` is ``"attacker"``, ``"victim"`` or ``"mask"``. When a mask is
    active (mask learner, or ``perturb=True`` with a mask policy) victim
    actions are replaced by uniform draws wherever the mask outputs 0.
    """

    def __init__(self, env: DuelEnv, victim, attacker, learner="attacker", seed=0, mask=None,
                 perturb=False, mask_deterministic=False, program=None, ema_alpha=0.1):
        if learner not in ("attacker", "victim", "mask"):
            raise ValueError(f"unknown learner role {learner!r}")
        self.env, self.victim, self.attacker = env, victim, attacker
        self.learner, self.seed, self.mask = learner, int(seed), mask
        self.perturb = perturb or learner == "mask"
        self.mask_deterministic = mask_deterministic
        self.program = program
        self.ema_alpha = ema_alpha
        ss = np.random.SeedSequence([self.seed, 7919])
        self.rng_victim, self.rng_attacker, self.rng_mask, self.rng_replace = (np.random.default_rng(c) for c in ss.spawn(4))
        self.episode_counts = np.zeros(env.n, dtype=np.int64)
        self.games = 0
        self.wins = 0
        self.ema_rate = 0.0
        self.episodes_started = 0
        self._slot_episode = np.zeros(env.n, dtype=np.int64)
        for i in range(env.n):
            self._reset(i)
        self.obs_v, self.obs_a = env.observe()

    def _reset(self, i):
        self.env.reset_slot(i, episode_seed(self.seed, i, self.episode_counts[i]))
        self.episode_counts[i] += 1
        self._slot_episode[i] = self.episodes_started
        self.episodes_started += 1

    @property
    def learner_obs_dim(self) -> int:
        s = self.env.spec
        return s.obs_dim_attacker if self.learner == "attacker" else s.obs_dim_victim

    def collect(self, agent: ActorCritic | None, n_steps: int) -> Rollout:
        env, n = self.env, self.env.n
        vs, as_ = env.spec.victim_space, env.spec.attacker_space
        buf = {k: [] for k in ("ov", "av", "oa", "aa", "nov", "noa", "rv", "ra", "st", "done", "trunc", "bit",
                               "lo", "la", "logp", "val", "tval", "prog", "ground", "epi")}
        comps: dict[str, list] = {}
        for _ in range(n_steps):
            ov, oa = self.obs_v, self.obs_a
            logp = np.zeros(n)
            if self.learner == "victim":
                av, logp = agent.sample(ov, self.rng_victim)
            else:
                av = self.victim.act(ov, self.rng_victim)
            if self.learner == "attacker" and agent is not None:
                aa, logp = agent.sample(oa, self.rng_attacker)
            else:
                aa = self.attacker.act(oa, self.rng_attacker)
            bits = None
            if self.learner == "mask":
                bits, logp = agent.sample(ov, self.rng_mask)
                bits = bits.astype(np.int64)
            elif self.mask is not None:
                bits = self.mask.decide(ov, self.rng_mask, deterministic=self.mask_deterministic)
            av_exec = av
            if self.perturb and bits is not None and np.any(bits == 0):
                repl = vs.sample_uniform(self.rng_replace, n)
                av_exec = np.where((bits == 0)[:, None] if not vs.is_discrete else bits == 0, repl, av)
            av_exec = vs.clip(av_exec)
            aa_exec = as_.clip(aa)
            nov, noa, rv, ra, st, done = env.step_batch(av_exec, aa_exec)
            trunc = env.truncated(st, done)
            if self.learner == "attacker":
                lo, la, nlo, ground = oa, aa, noa, ra
            elif self.learner == "victim":
                lo, la, nlo, ground = ov, av, nov, rv
            else:
                lo, la, nlo, ground = ov, bits, nov, -rv
            val = agent.values(lo) if agent is not None else np.zeros(n)
            tval = np.zeros(n)
            if agent is not None and trunc.any():
                tval[trunc] = agent.values(nlo[trunc])
            prog = None
            if self.program is not None:
                prog, c = self.program.evaluate_batch(
                    s1=oa, s2=noa, a2=aa_exec, status=st, s_o=nov, reward_adv=ra, reward_opp=rv,
                    rate=np.full(n, self.ema_rate))
                for k, v in c.items():
                    comps.setdefault(k, []).append(v)
            for k, v in (("ov", ov), ("av", av_exec), ("oa", oa), ("aa", aa_exec), ("nov", nov), ("noa", noa),
                         ("rv", rv), ("ra", ra), ("st", st), ("done", done), ("trunc", trunc), ("lo", lo), ("la", la),
                         ("logp", logp), ("val", val), ("tval", tval), ("ground", ground),
                         ("epi", self._slot_episode.copy())):
                buf[k].append(np.array(v, copy=True))
            buf["bit"].append(bits if bits is not None else np.ones(n, dtype=np.int64))
            buf["prog"].append(prog if prog is not None else np.zeros(n))
            self.obs_v, self.obs_a = nov, noa
            for i in np.flatnonzero(done):
                if st[i] != NONE:
                    self.games += 1
                    self.wins += int(st[i] == WIN)
                    self.ema_rate = self.ema_alpha * (self.wins / self.games) + (1.0 - self.ema_alpha) * self.ema_rate
                self._reset(i)
            if done.any():
                self.obs_v, self.obs_a = env.observe()
        last_lo = self.obs_a if self.learner == "attacker" else self.obs_v
        last_values = agent.values(last_lo) if agent is not None else np.zeros(n)
        arr = {k: np.stack(v) for k, v in buf.items()}
        has_bits = self.learner == "mask" or self.mask is not None
        return Rollout(
            obs_victim=arr["ov"], act_victim=arr["av"], obs_attacker=arr["oa"], act_attacker=arr["aa"],
            next_obs_victim=arr["nov"], next_obs_attacker=arr["noa"], reward_victim=arr["rv"],
            reward_attacker=arr["ra"], status=arr["st"], done=arr["done"], truncated=arr["trunc"],
            mask_bit=arr["bit"] if has_bits else None, learner_obs=arr["lo"], learner_act=arr["la"],
            logp=arr["logp"], values=arr["val"], last_values=last_values, terminal_values=arr["tval"],
            program_reward=arr["prog"] if self.program is not None else None,
            components={k: np.stack(v) for k, v in comps.items()}, ground_reward=arr["ground"],
            episode_index=arr["epi"],
        )


def build_batch(rollout: Rollout, rewards: np.ndarray, gamma: float, gae_lambda: float) -> RolloutBatch:
    """GAE over a rollout; truncated steps bootstrap from the value of their final observation."""
    r = rewards + gamma * rollout.terminal_values * rollout.truncated
    values = np.vstack([rollout.values, rollout.last_values[None]])
    adv, ret = compute_gae(r, values, rollout.done, gamma, gae_lambda)
    T, n = rewards.shape
    act = rollout.learner_act
    act = act.reshape(T * n, -1) if act.ndim == 3 else act.reshape(T * n)
    return RolloutBatch(
        obs=rollout.learner_obs.reshape(T * n, -1), actions=act, logp_old=rollout.logp.reshape(-1),
        rewards=r.reshape(-1), values_old=rollout.values.reshape(-1), dones=rollout.done.reshape(-1),
        advantages=adv.reshape(-1), returns=ret.reshape(-1),
    )


# -- telemetry ------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    length: int
    total_reward: float
    ground_reward: float
    status: int
    perturbed: int
    components: dict


class EpisodeAccountant:
    """Turns per-step arrays into finished-episode records, across rollout boundaries."""

    def __init__(self, n: int):
        self.n = n
        self._len = np.zeros(n, dtype=np.int64)
        self._tot = np.zeros(n)
        self._gnd = np.zeros(n)
        self._pert = np.zeros(n, dtype=np.int64)
        self._comp: dict[str, np.ndarray] = {}

    def account(self, rollout: Rollout, rewards: np.ndarray) -> list[EpisodeRecord]:
        out = []
        bits = rollout.mask_bit
        for t in range(rollout.steps):
            self._len += 1
            self._tot += rewards[t]
            self._gnd += rollout.ground_reward[t]
            if bits is not None:
                self._pert += bits[t] == 0
            for k, v in rollout.components.items():
                self._comp.setdefault(k, np.zeros(self.n))
                self._comp[k] += v[t]
            for i in np.flatnonzero(rollout.done[t]):
                out.append(EpisodeRecord(int(self._len[i]), float(self._tot[i]), float(self._gnd[i]),
                                         int(rollout.status[t, i]), int(self._pert[i]),
                                         {k: float(v[i]) for k, v in self._comp.items()}))
                self._len[i] = 0
                self._tot[i] = self._gnd[i] = 0.0
                self._pert[i] = 0
                for v in self._comp.values():
                    v[i] = 0.0
        return out


@dataclass
class TrainingTelemetry:
    rows: list = field(default_factory=list)
    components: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    episodes: int = 0
    _pending: list = field(default_factory=list, repr=False)

    @property
    def win_rates(self) -> list[float]:
        return [r["win_rate"] for r in self.rows]

    def add(self, update: int, records: list[EpisodeRecord], report: UpdateReport | None):
        if report is not None:
            self.reports.append(report.as_dict())
        for rec in records:
            self._pending.append(rec)
            self.episodes += 1
            if len(self._pending) == WINDOW_EPISODES:
                self._emit(update, report)

    def _emit(self, update, report):
        w = self._pending
        self.rows.append({
            "update": update,
            "episodes": self.episodes,
            "mean_len": float(np.mean([r.length for r in w])),
            "mean_total_reward": float(np.mean([r.total_reward for r in w])),
            "mean_ground_reward": float(np.mean([r.ground_reward for r in w])),
            "win_rate": float(np.mean([r.status == WIN for r in w])),
            "approx_kl": report.approx_kl if report else 0.0,
            "entropy": report.entropy if report else 0.0,
        })
        keys = sorted({k for r in w for k in r.components})
        self.components.append({k: float(np.mean([r.components.get(k, 0.0) for r in w])) for k in keys})
        self._pending = []

    def pending_win_rate(self) -> float | None:
        if not self._pending:
            return None
        return float(np.mean([r.status == WIN for r in self._pending]))

    def to_csv(self, path) -> None:
        write_csv(path, TELEMETRY_COLUMNS, self.rows)


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# -- loops --------------------------------------------------------------------


class Hook:
    """No-op base; subclasses override what they need."""

    def before_update(self, update: int, agent: ActorCritic) -> None:
        pass

    def rewards(self, update: int, rollout: Rollout, rewards: np.ndarray) -> np.ndarray:
        return rewards

    def after_update(self, update: int, agent: ActorCritic, rollout: Rollout, report: UpdateReport) -> None:
        pass


def base_rewards(runner: DuelRunner, rollout: Rollout) -> np.ndarray:
    if rollout.program_reward is not None:
        return rollout.program_reward.copy()
    return rollout.ground_reward.copy()


def run_ppo(runner: DuelRunner, agent: ActorCritic, updates: int, config: PPOConfig, hooks=(), seed=0,
            telemetry: TrainingTelemetry | None = None) -> TrainingTelemetry:
    telemetry = telemetry if telemetry is not None else TrainingTelemetry()
    accountant = EpisodeAccountant(runner.env.n)
    shuffle_rng = np.random.default_rng([int(seed), 104729])
    for u in range(1, updates + 1):
        for h in hooks:
            h.before_update(u, agent)
        rollout = runner.collect(agent, config.rollout_steps)
        rewards = base_rewards(runner, rollout)
        for h in hooks:
            rewards = h.rewards(u, rollout, rewards)
        batch = build_batch(rollout, rewards, config.gamma, config.gae_lambda)
        report = ppo_update(agent, batch, config, shuffle_rng)
        telemetry.add(u, accountant.account(rollout, rewards), report)
        for h in hooks:
            h.after_update(u, agent, rollout, report)
    return telemetry


def train_loop(env_pool: DuelEnv, attacker: ActorCritic, victim, reward_fn, total_updates: int, config: PPOConfig,
               hooks=(), seed: int = 0) -> TrainingTelemetry:
    """Train ``attacker`` in place against a fixed victim under ``reward_fn``.

    ``reward_fn`` is a reward program or a preset name; ``None`` trains on the
    environment's own attacker reward.
    """
    from .rewardlab import resolve_program

    program = resolve_program(reward_fn) if reward_fn is not None else None
    runner = DuelRunner(env_pool, victim, None, learner="attacker", seed=seed, program=program)
    return run_ppo(runner, attacker, total_updates, config, hooks, seed)


def make_attacker(env: DuelEnv, config: PPOConfig, seed: int) -> ActorCritic:
    return ActorCritic(env.spec.obs_dim_attacker, env.spec.attacker_space, np.random.default_rng([int(seed), 31337]),
                       config.hidden, config.log_std_init)


def evaluate_win_rate(env_name: str, attacker, victim, episodes: int, seed: int, env_kwargs=None, batch: int = 100,
                      deterministic: bool = False) -> float:
    """Fraction of ``episodes`` the attacker wins; episodes are seeded individually."""
    env_kwargs = env_kwargs or {}
    wins = 0
    done_eps = 0
    while done_eps < episodes:
        b = min(batch, episodes - done_eps)
        env = envkit.make_env(env_name, b, **env_kwargs)
        seeds = [episode_seed(seed, 0, done_eps + i) for i in range(b)]
        status = run_batch_episodes(env, seeds, attacker, victim, deterministic=deterministic)["status"]
        wins += int(np.sum(status == WIN))
        done_eps += b
    return wins / episodes if episodes else 0.0


def run_batch_episodes(env: DuelEnv, seeds, attacker, victim, perturb_fn=None, deterministic=False):
    """Run one episode per slot to completion with per-slot random streams.

    ``perturb_fn(t, obs_victim, alive) -> bool array`` marks slots whose victim
    action is replaced by a uniform draw at step ``t``.
    """
    n = env.n
    for i, s in enumerate(seeds):
        env.reset_slot(i, s)
    rv_s = envkit.RowStreams.from_seeds(seeds, envkit.STREAM_VICTIM)
    ra_s = envkit.RowStreams.from_seeds(seeds, envkit.STREAM_ATTACKER)
    rr_s = envkit.RowStreams.from_seeds(seeds, envkit.STREAM_REPLACE)
    vs = env.spec.victim_space
    alive = np.ones(n, dtype=bool)
    status = np.zeros(n, dtype=np.int64)
    length = np.zeros(n, dtype=np.int64)
    perturbed = np.zeros(n, dtype=np.int64)
    ov, oa = env.observe()
    t = 0
    while alive.any():
        av = victim.act(ov, rv_s)
        aa = attacker.act(oa, ra_s, deterministic=deterministic)
        if perturb_fn is not None:
            flag = perturb_fn(t, ov, alive) & alive
            repl = vs.sample_uniform(rr_s, n)
            if flag.any():
                av = np.where(flag[:, None] if not vs.is_discrete else flag, repl, av)
            perturbed += flag
        env.done[:] = False
        ov2, oa2, _, _, st, done = env.step_batch(vs.clip(av), env.spec.attacker_space.clip(aa))
        newly = alive & done
        status[newly] = st[newly]
        length[newly] = t + 1
        alive &= ~done
        # finished slots keep stepping with frozen bookkeeping; their state is never read again
        ov, oa = ov2, oa2
        t += 1
    return {"status": status, "length": length, "perturbed": perturbed}
