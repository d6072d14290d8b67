"""Two-agent simultaneous-move duel environments.

All continuous environments are vectorized: one instance holds ``n`` slots
and steps them together with elementwise numpy math only, so a slot's
trajectory never depends on how many other slots share the instance.

Outcome codes are from the attacker's point of view: ``WIN`` means the
victim lost.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace
from typing import Protocol

import numpy as np

WIN, NONE, LOSS = 1, 0, -1
STATUS_NAMES = {WIN: "win", NONE: "none", LOSS: "loss"}
STATUS_CODES = {v: k for k, v in STATUS_NAMES.items()}


class HarnessError(RuntimeError):
    """Raised when the caller drives an environment incorrectly."""


@dataclass(frozen=True)
class ActionSpace:
    kind: str
    dim: int
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise ValueError(f"unknown action space kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("action space dimension must be positive")
        if self.kind == "continuous" and not self.low < self.high:
            raise ValueError("continuous bounds need low < high")

    @classmethod
    def continuous(cls, dim, low=-1.0, high=1.0):
        return cls("continuous", int(dim), float(low), float(high))

    @classmethod
    def discrete(cls, n):
        return cls("discrete", int(n))

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    def as_tuple(self):
        return ("discrete", self.dim) if self.is_discrete else ("continuous", self.dim, self.low, self.high)

    def sample_uniform(self, rng, n: int) -> np.ndarray:
        if self.is_discrete:
            return np.minimum((rng.random(n) * self.dim).astype(np.int64), self.dim - 1)
        return self.low + (self.high - self.low) * rng.random((n, self.dim))

    def clip(self, a) -> np.ndarray:
        if self.is_discrete:
            a = np.asarray(a).astype(np.int64).reshape(-1)
            if a.size and (a.min() < 0 or a.max() >= self.dim):
                raise ValueError(f"discrete action outside [0, {self.dim})")
            return a
        return np.clip(np.asarray(a, dtype=np.float64), self.low, self.high)

    def encode(self, a) -> np.ndarray:
        """Vector form of a batch of actions (one-hot for discrete spaces)."""
        if self.is_discrete:
            a = np.asarray(a).astype(np.int64).reshape(-1)
            out = np.zeros((a.size, self.dim))
            out[np.arange(a.size), a] = 1.0
            return out
        return np.asarray(a, dtype=np.float64).reshape(-1, self.dim)

    @property
    def width(self) -> int:
        return self.dim


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim_victim: int
    obs_dim_attacker: int
    action_space: ActionSpace
    max_steps: int
    discount: float = 0.99
    dt: float | None = None
    victim_action_space: ActionSpace | None = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.obs_dim_victim < 1 or self.obs_dim_attacker < 1:
            raise ValueError("observation dims must be positive")

    @property
    def victim_space(self) -> ActionSpace:
        return self.victim_action_space or self.action_space

    @property
    def attacker_space(self) -> ActionSpace:
        return self.action_space


@dataclass
class StepOutcome:
    obs_victim: np.ndarray
    obs_attacker: np.ndarray
    reward_victim: float
    reward_attacker: float
    victory_status: str
    done: bool


@dataclass
class TraceStep:
    obs_victim: np.ndarray
    act_victim: np.ndarray
    obs_attacker: np.ndarray
    act_attacker: np.ndarray
    reward_victim: float
    reward_attacker: float
    mask_bit: int | None = None
    next_obs_victim: np.ndarray | None = None


@dataclass
class EpisodeTrace:
    steps: list[TraceStep]
    outcome: str
    seed: int

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def has_mask(self) -> bool:
        return bool(self.steps) and self.steps[0].mask_bit is not None

    def mask_bits(self) -> np.ndarray:
        return np.array([s.mask_bit for s in self.steps])


# -- vectorized environments ------------------------------------------------


class DuelEnv:
    """Base class; subclasses fill ``_reset_slot`` and ``_step_batch``."""

    spec: EnvSpec

    def __init__(self, n: int = 1):
        self.n = int(n)
        self.t = np.zeros(self.n, dtype=np.int64)
        self.done = np.ones(self.n, dtype=bool)

    # single-slot convenience API
    def reset(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        if self.n != 1:
            raise HarnessError("reset(seed) is the single-slot API; use reset_slot")
        self.reset_slot(0, seed)
        ov, oa = self.observe()
        return ov[0], oa[0]

    def step(self, act_victim, act_attacker) -> StepOutcome:
        if self.n != 1:
            raise HarnessError("step() is the single-slot API; use step_batch")
        av = np.asarray(act_victim)[None] if self.spec.victim_space.is_discrete else np.asarray(act_victim, float)[None]
        aa = np.asarray(act_attacker)[None] if self.spec.attacker_space.is_discrete else np.asarray(act_attacker, float)[None]
        ov, oa, rv, ra, status, done = self.step_batch(av, aa)
        return StepOutcome(ov[0], oa[0], float(rv[0]), float(ra[0]), STATUS_NAMES[int(status[0])], bool(done[0]))

    def reset_slot(self, i: int, seed: int) -> None:
        self.t[i] = 0
        self.done[i] = False
        self._reset_slot(i, int(seed))

    def step_batch(self, act_victim, act_attacker):
        if self.done.any():
            raise HarnessError("stepping a finished environment slot; reset it first")
        av = self.spec.victim_space.clip(act_victim)
        aa = self.spec.attacker_space.clip(act_attacker)
        rv, ra, status = self._step_batch(av, aa)
        self.t += 1
        timeout = (self.t >= self.spec.max_steps) & (status == NONE)
        status = np.where(timeout, self._timeout_status(), status)
        rv, ra = self._terminal_rewards(rv, ra, status)
        done = (status != NONE) | (self.t >= self.spec.max_steps)
        self.done = done.copy()
        ov, oa = self.observe()
        return ov, oa, rv, ra, status.astype(np.int64), done

    def truncated(self, status, done):
        """Slots that ended at the step limit without an outcome."""
        return done & (status == NONE)

    def _timeout_status(self) -> int:
        return NONE

    def _terminal_rewards(self, rv, ra, status):
        return rv, ra

    def observe(self):  # pragma: no cover - abstract
        raise NotImplementedError

    def _reset_slot(self, i, seed):  # pragma: no cover - abstract
        raise NotImplementedError

    def _step_batch(self, av, aa):  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class PushDuelParams:
    arena_radius: float = 1.0
    body_radius: float = 0.1
    dt: float = 0.05
    drag: float = 0.1
    contact_stiffness: float = 60.0
    victim_accel: float = 1.0
    attacker_accel: float = 1.0
    max_steps: int = 200
    victim_start_radius: float = 0.25
    attacker_start_distance: float = 0.6
    terminal_reward: float = 1.0
    centrality_reward: float = 0.01


class PushDuel(DuelEnv):
    """Point-mass sumo on a disc.

    The attacker wins when the victim leaves the disc, loses when it leaves the
    disc itself or when ``max_steps`` runs out. Observations (11 values, same
    layout for both sides, self first)::

        0:2 own position   2:4 own velocity   4:6 opponent position
        6:8 opponent velocity   8 own edge distance   9 opponent edge distance
        10 fraction of time remaining
    """

    OBS_DIM = 11

    def __init__(self, n: int = 1, params: PushDuelParams | None = None, **overrides):
        super().__init__(n)
        p = params or PushDuelParams()
        if overrides:
            p = replace(p, **overrides)
        self.params = p
        self.spec = EnvSpec("push_duel", self.OBS_DIM, self.OBS_DIM, ActionSpace.continuous(2), p.max_steps, 0.99, p.dt)
        self.pv = np.zeros((n, 2))
        self.vv = np.zeros((n, 2))
        self.pa = np.zeros((n, 2))
        self.va = np.zeros((n, 2))

    def _reset_slot(self, i, seed):
        rng = np.random.default_rng(seed)
        p = self.params
        r = p.victim_start_radius * np.sqrt(rng.random())
        th = 2.0 * np.pi * rng.random()
        self.pv[i] = r * np.array([np.cos(th), np.sin(th)])
        phi = 2.0 * np.pi * rng.random()
        self.pa[i] = p.attacker_start_distance * np.array([np.cos(phi), np.sin(phi)])
        self.vv[i] = 0.0
        self.va[i] = 0.0

    def observe(self):
        R = self.params.arena_radius
        rem = (1.0 - self.t / self.spec.max_steps)[:, None]
        dv = (R - np.sqrt(np.sum(self.pv**2, axis=1)))[:, None]
        da = (R - np.sqrt(np.sum(self.pa**2, axis=1)))[:, None]
        ov = np.hstack([self.pv, self.vv, self.pa, self.va, dv, da, rem])
        oa = np.hstack([self.pa, self.va, self.pv, self.vv, da, dv, rem])
        return ov, oa

    def _step_batch(self, av, aa):
        p = self.params
        d = self.pa - self.pv
        dist = np.sqrt(np.sum(d * d, axis=1))
        safe = np.where(dist > 1e-12, dist, 1.0)
        normal = np.where((dist > 1e-12)[:, None], d / safe[:, None], np.array([1.0, 0.0]))
        overlap = np.maximum(2.0 * p.body_radius - dist, 0.0)
        f = (p.contact_stiffness * overlap)[:, None] * normal
        self.vv = self.vv + p.dt * (p.victim_accel * av - f - p.drag * self.vv)
        self.va = self.va + p.dt * (p.attacker_accel * aa + f - p.drag * self.va)
        self.pv = self.pv + p.dt * self.vv
        self.pa = self.pa + p.dt * self.va
        rv_norm = np.sqrt(np.sum(self.pv**2, axis=1))
        ra_norm = np.sqrt(np.sum(self.pa**2, axis=1))
        victim_out = rv_norm > p.arena_radius
        attacker_out = ra_norm > p.arena_radius
        status = np.where(attacker_out, LOSS, np.where(victim_out, WIN, NONE))
        rv = p.centrality_reward * (1.0 - np.minimum(rv_norm, p.arena_radius))
        ra = p.centrality_reward * (1.0 - np.minimum(ra_norm, p.arena_radius))
        return rv, ra, status

    def _timeout_status(self):
        return LOSS

    def _terminal_rewards(self, rv, ra, status):
        tr = self.params.terminal_reward
        return rv - tr * status, ra + tr * status


@dataclass(frozen=True)
class GatePassParams:
    goal: float = 1.0
    body_radius: float = 0.05
    dt: float = 0.05
    drag: float = 0.1
    contact_stiffness: float = 60.0
    runner_accel: float = 1.0
    blocker_accel: float = 0.8
    max_steps: int = 120
    blocker_start: float = 0.5
    corridor_min: float = -0.5
    terminal_reward: float = 1.0
    progress_reward: float = 0.01


class GatePass(DuelEnv):
    """1-D corridor: the runner (victim) must reach ``goal`` from 0.

    The blocker (attacker) wins on timeout and loses if it is shoved out of
    the back of the corridor. Observations: own x, own v, opponent x,
    opponent v, fraction of time remaining.
    """

    OBS_DIM = 5

    def __init__(self, n: int = 1, params: GatePassParams | None = None, **overrides):
        super().__init__(n)
        p = params or GatePassParams()
        if overrides:
            p = replace(p, **overrides)
        self.params = p
        self.spec = EnvSpec("gate_pass", self.OBS_DIM, self.OBS_DIM, ActionSpace.continuous(1), p.max_steps, 0.99, p.dt)
        self.xr = np.zeros(n)
        self.vr = np.zeros(n)
        self.xb = np.zeros(n)
        self.vb = np.zeros(n)

    def _reset_slot(self, i, seed):
        rng = np.random.default_rng(seed)
        self.xr[i] = 0.05 * rng.random()
        self.xb[i] = self.params.blocker_start + 0.1 * (rng.random() - 0.5)
        self.vr[i] = 0.0
        self.vb[i] = 0.0

    def observe(self):
        rem = 1.0 - self.t / self.spec.max_steps
        ov = np.stack([self.xr, self.vr, self.xb, self.vb, rem], axis=1)
        oa = np.stack([self.xb, self.vb, self.xr, self.vr, rem], axis=1)
        return ov, oa

    def _step_batch(self, av, aa):
        p = self.params
        gap = self.xb - self.xr
        overlap = np.maximum(2.0 * p.body_radius - np.abs(gap), 0.0)
        f = p.contact_stiffness * overlap * np.where(gap >= 0.0, 1.0, -1.0)
        x_before = self.xr.copy()
        self.vr = self.vr + p.dt * (p.runner_accel * av[:, 0] - f - p.drag * self.vr)
        self.vb = self.vb + p.dt * (p.blocker_accel * aa[:, 0] + f - p.drag * self.vb)
        self.xr = self.xr + p.dt * self.vr
        self.xb = self.xb + p.dt * self.vb
        status = np.where(self.xr >= p.goal, LOSS, np.where(self.xb < p.corridor_min, LOSS, NONE))
        progress = p.progress_reward * (self.xr - x_before) / p.dt
        return progress, -progress, status

    def _timeout_status(self):
        return WIN

    def _terminal_rewards(self, rv, ra, status):
        tr = self.params.terminal_reward
        return rv - tr * status, ra + tr * status


# -- tabular duel -----------------------------------------------------------


@dataclass
class TabularDuelMDP:
    transition: np.ndarray  # (S, Av, Aa, S)
    reward: np.ndarray  # (S, Av, Aa), victim reward
    discount: float
    start_state: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        S, Av, Aa, S2 = self.transition.shape
        if S != S2 or self.reward.shape != (S, Av, Aa):
            raise ValueError("transition/reward shapes disagree")
        if S > 64 or Av > 4 or Aa > 4:
            raise ValueError("tabular duels are limited to 64 states and 4 actions per side")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("tabular discount must lie in (0, 1)")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(axis=-1) - 1.0)) > 1e-9:
            raise ValueError("each transition row must be a probability distribution")

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions_victim(self):
        return self.transition.shape[1]

    @property
    def n_actions_attacker(self):
        return self.transition.shape[2]


def chain_duel_mdp(n_states: int = 5, discount: float = 0.95, slip: float = 0.1) -> TabularDuelMDP:
    """Victim walks right along a chain toward a rewarding end state; the attacker can shove it back."""
    S = n_states
    T = np.zeros((S, 2, 2, S))
    R = np.zeros((S, 2, 2))
    for s in range(S):
        left, right = max(s - 1, 0), min(s + 1, S - 1)
        for av in range(2):
            for aa in range(2):
                p_right = (1.0 - slip) if av == 1 else slip
                if aa == 1:
                    p_right *= 0.5
                T[s, av, aa, right] += p_right
                T[s, av, aa, left] += 1.0 - p_right
                R[s, av, aa] = 1.0 if s == S - 1 else 0.0
    return TabularDuelMDP(T, R, discount)


def random_tabular_mdp(rng: np.random.Generator, n_states=None, n_av=None, n_aa=None, discount=None) -> TabularDuelMDP:
    S = n_states or int(rng.integers(2, 9))
    Av = n_av or int(rng.integers(2, 5))
    Aa = n_aa or int(rng.integers(1, 4))
    T = rng.dirichlet(np.full(S, 0.5), size=(S, Av, Aa))
    R = rng.uniform(-1.0, 1.0, size=(S, Av, Aa))
    g = discount if discount is not None else float(rng.uniform(0.5, 0.95))
    return TabularDuelMDP(T, R, g, 0)


class ChainDuel(DuelEnv):
    """Sampling front-end for a :class:`TabularDuelMDP`; observations are one-hot states."""

    def __init__(self, n: int = 1, mdp: TabularDuelMDP | None = None, max_steps: int = 50):
        super().__init__(n)
        self.mdp = mdp or chain_duel_mdp()
        S = self.mdp.n_states
        self.spec = EnvSpec(
            "chain_duel", S, S, ActionSpace.discrete(self.mdp.n_actions_attacker), max_steps, self.mdp.discount,
            victim_action_space=ActionSpace.discrete(self.mdp.n_actions_victim),
        )
        self.state = np.zeros(n, dtype=np.int64)
        self._rngs = [np.random.default_rng(0) for _ in range(n)]
        self._cum = np.cumsum(self.mdp.transition, axis=-1)

    def _reset_slot(self, i, seed):
        self._rngs[i] = np.random.default_rng(seed)
        self.state[i] = self.mdp.start_state

    def observe(self):
        eye = np.eye(self.mdp.n_states)[self.state]
        return eye.copy(), eye.copy()

    def sample_next(self, i: int, s: int, av: int, aa: int) -> int:
        u = self._rngs[i].random()
        return int(min(np.searchsorted(self._cum[s, av, aa], u, side="right"), self.mdp.n_states - 1))

    def _step_batch(self, av, aa):
        rv = self.mdp.reward[self.state, av, aa]
        nxt = np.array([self.sample_next(i, self.state[i], av[i], aa[i]) for i in range(self.n)])
        self.state = nxt
        return rv.copy(), -rv, np.zeros(self.n, dtype=np.int64)


ENV_REGISTRY = {"push_duel": PushDuel, "gate_pass": GatePass, "chain_duel": ChainDuel}


def make_env(name: str, n: int = 1, **overrides) -> DuelEnv:
    try:
        cls = ENV_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_REGISTRY)}") from None
    return cls(n, **overrides)


def clone_env(env: DuelEnv, n: int | None = None) -> DuelEnv:
    """Fresh instance with the same dynamics and ``n`` slots (default: same count)."""
    n = env.n if n is None else n
    if isinstance(env, ChainDuel):
        return ChainDuel(n, mdp=env.mdp, max_steps=env.spec.max_steps)
    return type(env)(n, params=env.params)


# -- policies ---------------------------------------------------------------


class Policy(Protocol):
    def act(self, obs: np.ndarray, rng, deterministic: bool = False) -> np.ndarray: ...


class RowStreams:
    """Per-row random streams exposing the Generator methods policies use.

    Draws for row ``i`` come only from ``gens[i]``, so a slot's randomness is
    independent of batch composition.
    """

    def __init__(self, gens):
        self.gens = list(gens)

    @classmethod
    def from_seeds(cls, seeds, stream: int):
        return cls(np.random.default_rng([int(s), stream]) for s in seeds)

    def _rows(self, fn, shape):
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        if shape[0] != len(self.gens):
            raise ValueError("row stream count does not match batch size")
        return np.stack([fn(g, shape[1:]) for g in self.gens])

    def random(self, shape):
        return self._rows(lambda g, s: g.random(s), shape)

    def standard_normal(self, shape):
        return self._rows(lambda g, s: g.standard_normal(s), shape)

    def uniform(self, low, high, shape):
        return self._rows(lambda g, s: g.uniform(low, high, s), shape)


class ScriptedPushVictim:
    """Proportional-derivative controller toward the arena centre with bounded noise."""

    def __init__(self, kp: float = 0.7, kd: float = 0.6, noise: float = 0.3, brace: float = 0.0):
        self.kp, self.kd, self.noise, self.brace = kp, kd, noise, brace

    def act(self, obs, rng, deterministic=False):
        obs = np.atleast_2d(obs)
        a = -self.kp * obs[:, 0:2] - self.kd * obs[:, 2:4]
        if self.brace:
            rel = obs[:, 4:6] - obs[:, 0:2]
            d = np.sqrt(np.sum(rel**2, axis=1, keepdims=True))
            a = a + self.brace * np.where(d < 0.3, rel / np.maximum(d, 1e-9), 0.0)
        if not deterministic and self.noise:
            a = a + self.noise * (2.0 * rng.random(a.shape) - 1.0)
        return np.clip(a, -1.0, 1.0)


class ScriptedPushAttacker:
    """Reference PushDuel attacker: get behind the victim (seen from the centre) and drive outward."""

    def __init__(self, gain: float = 1.0, standoff: float = 0.15, contact: float = 0.25):
        self.gain, self.standoff, self.contact = gain, standoff, contact

    def act(self, obs, rng=None, deterministic=False):
        obs = np.atleast_2d(obs)
        pa, va, pv = obs[:, 0:2], obs[:, 2:4], obs[:, 4:6]
        out = pv / np.maximum(np.sqrt(np.sum(pv**2, axis=1, keepdims=True)), 1e-9)
        a = 3.0 * (pv - self.standoff * out - pa) - va
        close = np.sqrt(np.sum((pv - pa) ** 2, axis=1, keepdims=True)) < self.contact
        return np.clip(self.gain * np.where(close, out, a), -1.0, 1.0)


class ScriptedRunner:
    """GatePass runner: drive toward the goal with damping and bounded noise."""

    def __init__(self, goal: float = 1.0, kp: float = 2.0, kd: float = 0.5, noise: float = 0.3):
        self.goal, self.kp, self.kd, self.noise = goal, kp, kd, noise

    def act(self, obs, rng, deterministic=False):
        obs = np.atleast_2d(obs)
        a = self.kp * (self.goal + 0.2 - obs[:, 0:1]) - self.kd * obs[:, 1:2]
        if not deterministic and self.noise:
            a = a + self.noise * (2.0 * rng.random(a.shape) - 1.0)
        return np.clip(a, -1.0, 1.0)


class UniformPolicy:
    def __init__(self, space: ActionSpace):
        self.space = space

    def act(self, obs, rng, deterministic=False):
        n = np.atleast_2d(obs).shape[0]
        if deterministic:
            return np.zeros(n, dtype=np.int64) if self.space.is_discrete else np.zeros((n, self.space.dim))
        return self.space.sample_uniform(rng, n)


class ZeroPolicy:
    def __init__(self, space: ActionSpace):
        self.space = space

    def act(self, obs, rng, deterministic=False):
        n = np.atleast_2d(obs).shape[0]
        return np.zeros(n, dtype=np.int64) if self.space.is_discrete else np.zeros((n, self.space.dim))


class TablePolicy:
    """Stochastic per-state policy over one-hot observations."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)
        if np.any(self.table < 0) or np.max(np.abs(self.table.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("policy table rows must be probability distributions")
        self._cum = np.cumsum(self.table, axis=1)

    def act(self, obs, rng, deterministic=False):
        s = np.argmax(np.atleast_2d(obs), axis=1)
        if deterministic:
            return np.argmax(self.table[s], axis=1)
        u = rng.random(s.size)
        return np.minimum((u[:, None] >= self._cum[s]).sum(axis=1), self.table.shape[1] - 1)


class ConstantMask:
    def __init__(self, bit: int):
        self.bit = int(bit)

    def decide(self, obs, rng, deterministic=False):
        return np.full(np.atleast_2d(obs).shape[0], self.bit, dtype=np.int64)


class TableMask:
    """Keep the victim's action with probability ``keep[s]``."""

    def __init__(self, keep):
        self.keep = np.asarray(keep, dtype=np.float64)

    def decide(self, obs, rng, deterministic=False):
        s = np.argmax(np.atleast_2d(obs), axis=1)
        if deterministic:
            return (self.keep[s] >= 0.5).astype(np.int64)
        return (rng.random(s.size) < self.keep[s]).astype(np.int64)


def default_victim(env_name: str):
    if env_name == "push_duel":
        return ScriptedPushVictim()
    if env_name == "gate_pass":
        return ScriptedRunner()
    raise ValueError(f"no scripted victim for {env_name!r}")


# -- rollouts -----------------------------------------------------------------

STREAM_VICTIM, STREAM_ATTACKER, STREAM_MASK, STREAM_REPLACE = 1, 2, 3, 4


def episode_streams(seed: int):
    """Independent generators for victim, attacker, mask and replacement draws."""
    return {k: np.random.default_rng([int(seed), k]) for k in (STREAM_VICTIM, STREAM_ATTACKER, STREAM_MASK, STREAM_REPLACE)}


def _check_width(obs, policy_dim, who):
    if policy_dim is not None and obs.shape[-1] != policy_dim:
        raise ValueError(f"{who} policy expects {policy_dim} inputs, env provides {obs.shape[-1]}")


def rollout_episode(env: DuelEnv, attacker_policy, victim_policy, mask=None, rng_seed: int = 0,
                    deterministic_mask: bool = False) -> EpisodeTrace:
    """Play one episode; where ``mask`` says 0 the victim's action is replaced by a uniform draw."""
    if env.n != 1:
        raise HarnessError("rollout_episode drives a single-slot environment")
    for pol, dim, who in ((attacker_policy, env.spec.obs_dim_attacker, "attacker"),
                          (victim_policy, env.spec.obs_dim_victim, "victim")):
        _check_width(np.zeros((1, dim)), getattr(pol, "in_dim", None), who)
    streams = episode_streams(rng_seed)
    ov, oa = env.reset(rng_seed)
    ov, oa = ov[None], oa[None]
    steps = []
    status = NONE
    while True:
        av = victim_policy.act(ov, streams[STREAM_VICTIM])
        aa = attacker_policy.act(oa, streams[STREAM_ATTACKER])
        bit = None
        if mask is not None:
            bit = int(mask.decide(ov, streams[STREAM_MASK], deterministic=deterministic_mask)[0])
            if bit == 0:
                av = env.spec.victim_space.sample_uniform(streams[STREAM_REPLACE], 1)
        av = env.spec.victim_space.clip(av)
        aa = env.spec.attacker_space.clip(aa)
        nov, noa, rv, ra, st, done = env.step_batch(av, aa)
        steps.append(TraceStep(ov[0].copy(), np.array(av[0]), oa[0].copy(), np.array(aa[0]), float(rv[0]), float(ra[0]),
                               bit, nov[0].copy()))
        ov, oa = nov, noa
        status = int(st[0])
        if done[0]:
            break
    return EpisodeTrace(steps, STATUS_NAMES[status], int(rng_seed))


# -- exact dynamic programming on tabular duels ---------------------------------


def _check_rows(table, name):
    t = np.asarray(table, dtype=np.float64)
    if np.any(t < -1e-12) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError(f"{name} rows must be probability distributions")
    return t


def mask_mdp(mdp: TabularDuelMDP, victim_table, attacker_table):
    """Induced MDP whose actions are mask bits (0 = replace, 1 = keep).

    Returns ``P[m, s, s']`` and ``r[m, s]``.
    """
    pv = _check_rows(victim_table, "victim policy")
    pa = _check_rows(attacker_table, "attacker policy")
    uniform = np.full_like(pv, 1.0 / mdp.n_actions_victim)
    P, r = [], []
    for q in (uniform, pv):
        w = q[:, :, None] * pa[:, None, :]
        P.append(np.einsum("sva,svat->st", w, mdp.transition))
        r.append(np.einsum("sva,sva->s", w, mdp.reward))
    return np.stack(P), np.stack(r)


def solve_values(P: np.ndarray, r: np.ndarray, gamma: float, tol: float = 1e-10) -> np.ndarray:
    """Solve V = r + gamma P V; refine until the fixed-point residual is below ``tol``."""
    n = r.size
    A = np.eye(n) - gamma * P
    V = np.linalg.solve(A, r)
    for _ in range(10):
        res = r + gamma * P @ V - V
        if np.max(np.abs(res)) < tol:
            return V
        V = V + np.linalg.solve(A, res)
    res = np.max(np.abs(r + gamma * P @ V - V))
    if res >= tol:
        raise ArithmeticError(f"value solve did not reach residual {tol} (got {res})")
    return V


def policy_values(mdp: TabularDuelMDP, victim_table, attacker_table, mask_keep) -> np.ndarray:
    P, r = mask_mdp(mdp, victim_table, attacker_table)
    k = np.asarray(mask_keep, dtype=np.float64)
    if k.shape != (mdp.n_states,) or np.any(k < 0) or np.any(k > 1):
        raise ValueError("mask table must hold one keep-probability per state")
    Pm = (1.0 - k)[:, None] * P[0] + k[:, None] * P[1]
    rm = (1.0 - k) * r[0] + k * r[1]
    return solve_values(Pm, rm, mdp.discount)


def exact_return(mdp: TabularDuelMDP, victim_policy_table, attacker_policy_table, mask_table) -> float:
    """Exact discounted victim return of the mask-perturbed victim from the start state."""
    return float(policy_values(mdp, victim_policy_table, attacker_policy_table, mask_table)[mdp.start_state])


def monte_carlo_return(mdp: TabularDuelMDP, victim_table, attacker_table, mask_keep, episodes: int, seed: int = 0):
    """Unbiased return estimate: stop with probability 1-gamma each step and sum raw rewards."""
    rng = np.random.default_rng(seed)
    pv, pa = np.asarray(victim_table), np.asarray(attacker_table)
    k = np.asarray(mask_keep)
    S, Av, Aa = mdp.reward.shape
    cum_t = np.cumsum(mdp.transition, axis=-1)
    s = np.full(episodes, mdp.start_state)
    alive = np.ones(episodes, dtype=bool)
    total = np.zeros(episodes)
    while alive.any():
        idx = np.flatnonzero(alive)
        ss = s[idx]
        keep = rng.random(idx.size) < k[ss]
        cv = np.cumsum(pv[ss], axis=1)
        av_pol = np.minimum((rng.random(idx.size)[:, None] >= cv).sum(axis=1), Av - 1)
        av_rand = np.minimum((rng.random(idx.size) * Av).astype(int), Av - 1)
        av = np.where(keep, av_pol, av_rand)
        ca = np.cumsum(pa[ss], axis=1)
        aa = np.minimum((rng.random(idx.size)[:, None] >= ca).sum(axis=1), Aa - 1)
        total[idx] += mdp.reward[ss, av, aa]
        nxt = np.minimum((rng.random(idx.size)[:, None] >= cum_t[ss, av, aa]).sum(axis=1), S - 1)
        s[idx] = nxt
        alive[idx] = rng.random(idx.size) < mdp.discount
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(episodes))


def env_config_dict(env: DuelEnv) -> dict:
    if hasattr(env, "params"):
        return {"name": env.spec.name, **asdict(env.params)}
    return {"name": env.spec.name, "max_steps": env.spec.max_steps}
