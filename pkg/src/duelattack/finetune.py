"""Deviation-reward fine-tuning of a pre-trained attacker.

Two supervised models are fitted online from the attacker's own rollouts: a
transition model predicting the victim's next observation from (victim
observation, victim action, attacker action) and a victim estimator predicting
the victim's action from its observation. The attacker earns an extra reward
at mask-flagged states when its behaviour moves the victim's predicted action
a lot while moving the victim's predicted observation little.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import critstate, envkit, ppokit
from .critstate import ConstraintConfig, DualState, MaskPolicy
from .nnkit import Mlp, MlpSpec, backward, forward_cache, log_softmax
from .ppokit import ActorCritic, EpisodeAccountant, Hook, PPOConfig

FINETUNE_COLUMNS = ("update", "win_rate", "mean_R_ft", "l_P", "l_pi", "mask_reopt_flag")
NORM_EPS = 1e-12


@dataclass
class FinetuneConfig:
    lam: float = 0.3
    K: int | None = 10
    model_lr: float = 1e-3
    replay_capacity: int = 100_000
    model_batch: int = 256
    model_steps: int = 32
    model_hidden: tuple = (128, 128)
    warmup_rollouts: int = 1
    warmup_steps: int = 500
    mask_updates: int = 20

    def __post_init__(self):
        self.model_hidden = tuple(int(h) for h in self.model_hidden)
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be at least 1 (or None for never)")
        for name in ("replay_capacity", "model_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("model_steps", "warmup_rollouts", "warmup_steps", "mask_updates"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["model_hidden"] = list(self.model_hidden)
        return d


# -- supervised models -----------------------------------------------------------


def _l2_rows(e):
    return np.sqrt(np.sum(e * e, axis=1))


class TransitionModel:
    """Predicts the victim's next observation; the network outputs the change from the current one."""

    def __init__(self, obs_dim: int, act_dim_victim: int, act_dim_attacker: int, seed: int = 0, hidden=(128, 128),
                 victim_space: envkit.ActionSpace | None = None, attacker_space: envkit.ActionSpace | None = None):
        self.obs_dim = obs_dim
        self.victim_space, self.attacker_space = victim_space, attacker_space
        in_dim = obs_dim + act_dim_victim + act_dim_attacker
        self.net = Mlp(MlpSpec((in_dim, *hidden, obs_dim), "relu", "linear"), rng=np.random.default_rng([seed, 71]))

    @classmethod
    def for_env(cls, spec: envkit.EnvSpec, seed: int = 0, hidden=(128, 128)):
        vs, as_ = spec.victim_space, spec.attacker_space
        return cls(spec.obs_dim_victim, vs.width, as_.width, seed, hidden, vs, as_)

    def _inputs(self, obs, act_v, act_a):
        av = self.victim_space.encode(act_v) if self.victim_space is not None else np.atleast_2d(act_v)
        aa = self.attacker_space.encode(act_a) if self.attacker_space is not None else np.atleast_2d(act_a)
        return np.hstack([np.atleast_2d(obs), np.asarray(av, float).reshape(len(av), -1),
                          np.asarray(aa, float).reshape(len(aa), -1)])

    def predict(self, obs, act_v, act_a) -> np.ndarray:
        x = self._inputs(obs, act_v, act_a)
        out, _ = forward_cache(self.net.spec, self.net.params, x)
        return np.atleast_2d(obs) + out

    def loss_and_grad(self, obs, act_v, act_a, target):
        x = self._inputs(obs, act_v, act_a)
        out, cache = forward_cache(self.net.spec, self.net.params, x)
        err = np.atleast_2d(obs) + out - target
        norm = _l2_rows(err)
        up = err / np.maximum(norm, NORM_EPS)[:, None] / err.shape[0]
        return float(norm.mean()), backward(self.net.spec, self.net.params, cache, up)


class VictimEstimator:
    """Predicts the victim's action: the action itself (continuous) or class probabilities (discrete)."""

    def __init__(self, obs_dim: int, space: envkit.ActionSpace, seed: int = 0, hidden=(128, 128)):
        self.space = space
        self.net = Mlp(MlpSpec((obs_dim, *hidden, space.width), "relu", "linear"), rng=np.random.default_rng([seed, 72]))

    @classmethod
    def for_env(cls, spec: envkit.EnvSpec, seed: int = 0, hidden=(128, 128)):
        return cls(spec.obs_dim_victim, spec.victim_space, seed, hidden)

    def _out(self, obs):
        out, cache = forward_cache(self.net.spec, self.net.params, np.atleast_2d(obs))
        if self.space.is_discrete:
            return np.exp(log_softmax(out)), cache
        return out, cache

    def predict(self, obs) -> np.ndarray:
        """Continuous: predicted action. Discrete: one-hot of the most likely action."""
        y, _ = self._out(obs)
        if self.space.is_discrete:
            return np.eye(self.space.width)[np.argmax(y, axis=1)]
        return y

    def loss_and_grad(self, obs, act):
        y, cache = self._out(obs)
        target = self.space.encode(act) if self.space.is_discrete else np.asarray(act, float).reshape(y.shape)
        err = y - target
        norm = _l2_rows(err)
        up = err / np.maximum(norm, NORM_EPS)[:, None] / err.shape[0]
        if self.space.is_discrete:
            # chain through the softmax Jacobian diag(p) - p p^T
            up = y * (up - np.sum(up * y, axis=1, keepdims=True))
        return float(norm.mean()), backward(self.net.spec, self.net.params, cache, up)


# -- replay ------------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring buffer of victim transitions, sampled uniformly."""

    FIELDS = ("obs", "act_v", "act_a", "next_obs")

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.data: dict[str, np.ndarray] = {}
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def add(self, obs, act_v, act_a, next_obs) -> None:
        batch = {"obs": obs, "act_v": act_v, "act_a": act_a, "next_obs": next_obs}
        n = len(obs)
        if not self.data:
            self.data = {k: np.zeros((self.capacity, *np.asarray(v).shape[1:]), dtype=np.asarray(v).dtype)
                         for k, v in batch.items()}
        idx = (self.pos + np.arange(n)) % self.capacity
        for k, v in batch.items():
            self.data[k][idx] = v
        self.pos = int((self.pos + n) % self.capacity)
        self.size = int(min(self.size + n, self.capacity))

    def add_rollout(self, rollout: ppokit.Rollout) -> None:
        T, n = rollout.done.shape
        flat = lambda a: a.reshape(T * n, *a.shape[2:])  # noqa: E731
        self.add(flat(rollout.obs_victim), flat(rollout.act_victim), flat(rollout.act_attacker),
                 flat(rollout.next_obs_victim))

    def sample(self, rng: np.random.Generator, n: int) -> dict:
        if self.size == 0:
            raise ValueError("replay buffer is empty")
        idx = rng.integers(0, self.size, size=n)
        return {k: v[idx] for k, v in self.data.items()}


def train_models(replay: ReplayBuffer, tm: TransitionModel, ve: VictimEstimator, steps: int, lr: float,
                 batch: int = 256, rng: np.random.Generator | None = None):
    """Minibatch descent on both L2 losses; returns the per-step loss curves."""
    if len(replay) == 0:
        raise ValueError("replay buffer is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    l_p, l_pi = [], []
    for _ in range(steps):
        b = replay.sample(rng, batch)
        lp, gp = tm.loss_and_grad(b["obs"], b["act_v"], b["act_a"], b["next_obs"])
        lv, gv = ve.loss_and_grad(b["obs"], b["act_v"])
        tm.net.step(gp, lr)
        ve.net.step(gv, lr)
        l_p.append(lp)
        l_pi.append(lv)
    return tm, ve, l_p, l_pi


# -- reward ------------------------------------------------------------------------


def deviations(tm: TransitionModel, ve: VictimEstimator, obs_v, act_v, obs_a, next_obs_v, next_act_v, attacker):
    """Observation and action deviations, batched over rows.

    The attacker acts with its mean action; the transition model's
    prediction is compared with the observed next observation, and the victim
    estimator's reading of that prediction with the victim's next action.
    """
    obs_v = np.atleast_2d(obs_v)
    a_mean = attacker.act(np.atleast_2d(obs_a), None, deterministic=True)
    pred = tm.predict(obs_v, act_v, a_mean)
    d_obs = _l2_rows(pred - np.atleast_2d(next_obs_v))
    target = ve.space.encode(next_act_v) if ve.space.is_discrete else np.asarray(next_act_v, float).reshape(len(pred), -1)
    d_act = _l2_rows(ve.predict(pred) - target)
    return d_obs, d_act


def finetune_reward(d_obs, d_act, mask_bit_next):
    return (-np.asarray(d_obs, dtype=np.float64) + np.asarray(d_act, dtype=np.float64)) * (1 - np.asarray(mask_bit_next))


def total_reward(r_base, r_ft, lam: float):
    return np.asarray(r_base, dtype=np.float64) + lam * np.asarray(r_ft, dtype=np.float64)


def rollout_finetune_reward(rollout: ppokit.Rollout, tm, ve, mask: MaskPolicy, attacker) -> np.ndarray:
    """R_ft for every (t, slot) of a rollout; zero on each episode's last step and the rollout's last row."""
    T, n = rollout.done.shape
    r = np.zeros((T, n))
    if T < 2:
        return r
    flat = lambda a: a[:-1].reshape((T - 1) * n, *a.shape[2:])  # noqa: E731
    d_obs, d_act = deviations(tm, ve, flat(rollout.obs_victim), flat(rollout.act_victim), flat(rollout.obs_attacker),
                              flat(rollout.next_obs_victim), rollout.act_victim[1:].reshape((T - 1) * n, *rollout.act_victim.shape[2:]),
                              attacker)
    bits = mask.decide(flat(rollout.next_obs_victim), None, deterministic=True)
    valid = ~rollout.done[:-1].reshape(-1)
    r[:-1] = np.where(valid, finetune_reward(d_obs, d_act, bits), 0.0).reshape(T - 1, n)
    return r


# -- loop ------------------------------------------------------------------------------


@dataclass
class FinetuneTelemetry:
    rows: list = field(default_factory=list)
    training: ppokit.TrainingTelemetry | None = None
    model_losses: dict = field(default_factory=lambda: {"l_P": [], "l_pi": []})
    reward_stream: list = field(default_factory=list)
    keep_rewards: bool = False

    @property
    def reoptimizations(self) -> int:
        return int(sum(r["mask_reopt_flag"] for r in self.rows))

    def to_csv(self, path):
        ppokit.write_csv(path, FINETUNE_COLUMNS, self.rows)


class FinetuneHook(Hook):
    def __init__(self, env, victim, mask, dual, tm, ve, cfg: FinetuneConfig, constraint, mask_config, seed, telemetry,
                 attacker_ref):
        self.env, self.victim, self.mask, self.dual = env, victim, mask, dual
        self.tm, self.ve, self.cfg, self.constraint, self.mask_config = tm, ve, cfg, constraint, mask_config
        self.seed, self.tel = seed, telemetry
        self.attacker = attacker_ref
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.model_rng = np.random.default_rng([int(seed), 6007])
        self.acct = EpisodeAccountant(env.n)
        self._rft = None
        self._win = 0.0

    def rewards(self, update, rollout, rewards):
        rft = rollout_finetune_reward(rollout, self.tm, self.ve, self.mask, self.attacker)
        self._rft = rft
        out = total_reward(rewards, rft, self.cfg.lam)
        if self.tel.keep_rewards:
            self.tel.reward_stream.append(out.copy())
        recs = self.acct.account(rollout, out)
        if recs:
            self._win = float(np.mean([r.status == envkit.WIN for r in recs]))
        return out

    def after_update(self, update, agent, rollout, report):
        self.replay.add_rollout(rollout)
        lp = lv = 0.0
        if self.cfg.model_steps:
            _, _, cp, cv = train_models(self.replay, self.tm, self.ve, self.cfg.model_steps, self.cfg.model_lr,
                                        self.cfg.model_batch, self.model_rng)
            self.tel.model_losses["l_P"].extend(cp)
            self.tel.model_losses["l_pi"].extend(cv)
            lp, lv = float(np.mean(cp)), float(np.mean(cv))
        reopt = self.cfg.K is not None and update % self.cfg.K == 0
        if reopt:
            frozen = agent.copy()
            mask_env = envkit.clone_env(self.env, self.mask_config.n_envs)
            self.mask, self.dual, _ = critstate.train_mask(
                mask_env, self.victim, frozen, self.constraint, self.dual, self.mask_config, self.cfg.mask_updates,
                seed=int(np.random.SeedSequence([self.seed, update]).generate_state(1)[0] % (2**31)), mask=self.mask)
        self.tel.rows.append({"update": update, "win_rate": self._win, "mean_R_ft": float(self._rft.mean()),
                              "l_P": lp, "l_pi": lv, "mask_reopt_flag": int(reopt)})


def warm_up_models(env, victim, attacker, tm, ve, cfg: FinetuneConfig, config: PPOConfig, seed: int, replay):
    """Fit the models on a few rollouts collected before fine-tuning starts."""
    if cfg.warmup_rollouts == 0:
        return
    runner = ppokit.DuelRunner(envkit.clone_env(env), victim, attacker, learner="attacker", seed=seed + 500_009)
    for _ in range(cfg.warmup_rollouts):
        replay.add_rollout(runner.collect(None, config.rollout_steps))
    if cfg.warmup_steps:
        train_models(replay, tm, ve, cfg.warmup_steps, cfg.model_lr, cfg.model_batch,
                     np.random.default_rng([int(seed), 6011]))


def finetune_loop(env: envkit.DuelEnv, attacker: ActorCritic, victim, reward_program, mask: MaskPolicy,
                  tm: TransitionModel | None, ve: VictimEstimator | None, cfg: FinetuneConfig, updates: int,
                  seed: int = 0, config: PPOConfig | None = None, constraint: ConstraintConfig | None = None,
                  dual: DualState | None = None, mask_config: PPOConfig | None = None, keep_rewards: bool = False):
    """PPO on R + lam * R_ft, refitting the models every update and the mask every K updates.

    Trains ``attacker`` in place and returns it with the telemetry. The PPO
    stream (runner seeds, shuffle order) matches :func:`ppokit.train_loop`
    with the same seed, so ``lam = 0`` and ``K = None`` reproduce plain
    training exactly.
    """
    from .rewardlab import resolve_program

    config = config or PPOConfig()
    constraint = constraint or ConstraintConfig()
    mask_config = mask_config or config
    tm = tm or TransitionModel.for_env(env.spec, seed, cfg.model_hidden)
    ve = ve or VictimEstimator.for_env(env.spec, seed, cfg.model_hidden)
    tel = FinetuneTelemetry(keep_rewards=keep_rewards)
    hook = FinetuneHook(env, victim, mask, dual or DualState(), tm, ve, cfg, constraint, mask_config, seed, tel,
                        attacker)
    warm_up_models(env, victim, attacker, tm, ve, cfg, config, seed, hook.replay)
    program = resolve_program(reward_program) if reward_program is not None else None
    runner = ppokit.DuelRunner(env, victim, None, learner="attacker", seed=seed, program=program)
    tel.training = ppokit.run_ppo(runner, attacker, updates, config, hooks=(hook,), seed=seed)
    tel.mask, tel.dual, tel.tm, tel.ve = hook.mask, hook.dual, tm, ve
    return attacker, tel
