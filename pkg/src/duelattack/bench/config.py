"""Run configuration: YAML in, validated dataclasses out.

Every section maps onto a dataclass; unknown keys are errors that name the
offending key path. ``dump_config(load_config(text))`` is a fixed point.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .. import envkit
from ..critstate import ConstraintConfig
from ..finetune import FinetuneConfig
from ..ppokit import PPOConfig
from ..rewardlab.presets import PRESETS

ARMS = ("Baseline1", "Baseline2", "AR", "ARCS")


class ConfigError(ValueError):
    """A configuration problem; the message names the offending key."""


@dataclass
class EnvConfig:
    name: str = "push_duel"
    params: dict = field(default_factory=dict)


@dataclass
class VictimConfig:
    kind: str = "scripted"
    params: dict = field(default_factory=dict)
    path: str | None = None


@dataclass
class RemoteBackendConfig:
    url: str = ""
    model: str = "gpt-4o"
    api_key_env: str = "REWARD_API_KEY"
    timeout: float = 60.0
    retries: int = 2
    allow_partial: bool = False


@dataclass
class IterateConfig:
    n_rounds: int = 4
    n_cand: int = 4
    candidate_updates: int = 50
    eval_episodes: int = 200
    backend: str = "scripted"
    remote: RemoteBackendConfig = field(default_factory=RemoteBackendConfig)


@dataclass
class RewardConfig:
    preset: str | None = None
    source_path: str | None = None
    iterate: IterateConfig | None = None


@dataclass
class TrainingConfig:
    updates: int = 150
    mask_updates: int = 600
    finetune_updates: int = 50
    eval_episodes: int = 500
    workers: int = 1


@dataclass
class ValidateConfig:
    episodes: int = 1000
    budget: int = 40
    opponent: str = "scripted"


@dataclass
class CompareConfig:
    arms: list = field(default_factory=lambda: list(ARMS))
    matched_budget: bool = False


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    mask_ppo: PPOConfig | None = None
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    reward: RewardConfig = field(default_factory=lambda: RewardConfig(preset="baseline1"))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"

    @property
    def mask_ppo_config(self) -> PPOConfig:
        return self.mask_ppo if self.mask_ppo is not None else self.ppo


# -- generic dataclass <-> dict ----------------------------------------------------


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"unknown key '{_join(path, key)}'")
    kwargs = {}
    for name, value in data.items():
        sub = _dataclass_of(fields[name].type)
        if sub is not None and value is not None:
            kwargs[name] = _build(sub, value, _join(path, name))
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


_DATACLASSES = {c.__name__: c for c in (EnvConfig, VictimConfig, RemoteBackendConfig, IterateConfig, RewardConfig,
                                         TrainingConfig, ValidateConfig, CompareConfig, PPOConfig, ConstraintConfig,
                                         FinetuneConfig)}


def _dataclass_of(annotation):
    name = str(annotation).split("|")[0].strip()
    return _DATACLASSES.get(name)


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    return obj


# -- validation ------------------------------------------------------------------------


def _validate(cfg: RunConfig, base: Path) -> None:
    if cfg.env.name not in envkit.ENV_REGISTRY:
        raise ConfigError(f"env.name: unknown environment {cfg.env.name!r}")
    try:
        envkit.make_env(cfg.env.name, 1, **cfg.env.params)
    except TypeError as exc:
        raise ConfigError(f"env.params: {exc}") from None
    if cfg.victim.kind not in ("scripted", "checkpoint"):
        raise ConfigError("victim.kind: must be 'scripted' or 'checkpoint'")
    if cfg.victim.kind == "checkpoint":
        if not cfg.victim.path or not (base / cfg.victim.path).exists():
            raise ConfigError(f"victim.path: file not found: {cfg.victim.path!r}")
    r = cfg.reward
    chosen = [k for k in ("preset", "source_path", "iterate") if getattr(r, k) is not None]
    if len(chosen) != 1:
        raise ConfigError("reward: set exactly one of preset, source_path, iterate")
    if r.preset is not None and r.preset not in PRESETS:
        raise ConfigError(f"reward.preset: unknown preset {r.preset!r}; choose from {sorted(PRESETS)}")
    if r.source_path is not None and not (base / r.source_path).exists():
        raise ConfigError(f"reward.source_path: file not found: {r.source_path!r}")
    if r.iterate is not None:
        it = r.iterate
        for k in ("n_rounds", "n_cand", "candidate_updates"):
            if getattr(it, k) < 1:
                raise ConfigError(f"reward.iterate.{k}: must be at least 1")
        if it.backend not in ("scripted", "remote"):
            raise ConfigError("reward.iterate.backend: must be 'scripted' or 'remote'")
        if it.backend == "remote" and not it.remote.url:
            raise ConfigError("reward.iterate.remote.url: required for the remote backend")
    t = cfg.training
    for k in ("updates", "mask_updates", "finetune_updates"):
        if getattr(t, k) < 0:
            raise ConfigError(f"training.{k}: must be non-negative")
    if t.eval_episodes < 1:
        raise ConfigError("training.eval_episodes: must be positive")
    if t.workers < 1:
        raise ConfigError("training.workers: must be positive")
    if cfg.validate.episodes < 1:
        raise ConfigError("validate.episodes: must be positive")
    if cfg.validate.budget < 0:
        raise ConfigError("validate.budget: must be non-negative")
    opp = cfg.validate.opponent
    if opp != "scripted" and not (base / opp).exists():
        raise ConfigError(f"validate.opponent: expected 'scripted' or an existing checkpoint path, got {opp!r}")
    bad = [a for a in cfg.compare.arms if a not in ARMS]
    if bad or not cfg.compare.arms:
        raise ConfigError(f"compare.arms: unknown arms {bad}; choose from {list(ARMS)}")
    if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds: need a non-empty list of non-negative integers")


def _absolutize(cfg: RunConfig, base: Path) -> None:
    """Rewrite input paths relative to the config file as absolute paths."""
    def fix(p):
        return str((base / p).resolve())
    if cfg.victim.path:
        cfg.victim.path = fix(cfg.victim.path)
    if cfg.reward.source_path:
        cfg.reward.source_path = fix(cfg.reward.source_path)
    if cfg.validate.opponent != "scripted":
        cfg.validate.opponent = fix(cfg.validate.opponent)


def config_from_dict(data: dict, base_dir=".") -> RunConfig:
    """Build and validate a config; input paths resolve against ``base_dir``."""
    cfg = _build(RunConfig, data or {}, "")
    base = Path(base_dir)
    _validate(cfg, base)
    _absolutize(cfg, base)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return config_from_dict(data or {}, p.parent)


def parse_config_text(text: str, base_dir=".") -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return config_from_dict(data or {}, base_dir)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_plain(cfg), sort_keys=True, default_flow_style=False)
