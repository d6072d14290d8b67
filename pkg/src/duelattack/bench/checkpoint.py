"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"DUELCKPT"
    4 bytes   uint32 container version (1)
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header, keys sorted, no whitespace
    ...       data blocks, each a C-order little-endian float64 array

The header holds ``format_version``, ``module``, ``env_spec_hash``, ``seed``,
``meta`` and ``blocks``: a list of ``{name, shape, offset, length}`` with
``offset`` counted in bytes from the start of the data section. Saving what
was loaded reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import envkit
from ..critstate import DualState, MaskPolicy
from ..nnkit import AdamState, Mlp, MlpSpec, ParamVector
from ..ppokit import ActorCritic

MAGIC = b"DUELCKPT"
CONTAINER_VERSION = 1
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    module: str
    env_spec_hash: str
    seed: int
    blocks: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def env_spec_hash(env_or_dict) -> str:
    d = env_or_dict if isinstance(env_or_dict, dict) else envkit.env_config_dict(env_or_dict)
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def to_bytes(ck: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ck.blocks):
        arr = np.ascontiguousarray(ck.blocks[name], dtype="<f8")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "module": ck.module, "env_spec_hash": ck.env_spec_hash,
              "seed": int(ck.seed), "meta": ck.meta, "blocks": entries}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(hb)) + hb + b"".join(chunks)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    body = data[20 + hlen:]
    blocks = {}
    for e in header["blocks"]:
        raw = body[e["offset"]:e["offset"] + e["length"]]
        if len(raw) != e["length"]:
            raise CheckpointError(f"block {e['name']!r} is truncated")
        blocks[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return Checkpoint(header["module"], header["env_spec_hash"], header["seed"], blocks, header["meta"])


def save(path, ck: Checkpoint) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(to_bytes(ck))
    return p


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())


# -- object adapters ----------------------------------------------------------------


def _mlp_blocks(prefix: str, m: Mlp, blocks: dict, meta: dict):
    blocks[f"{prefix}.params"] = m.params.values
    blocks[f"{prefix}.adam_m"] = m.opt.m
    blocks[f"{prefix}.adam_v"] = m.opt.v
    meta[prefix] = {"spec": m.spec.to_dict(), "adam_t": int(m.opt.t),
                    "manifest": [[n, list(d)] for n, d in m.params.manifest]}


def _mlp_from(prefix: str, ck: Checkpoint) -> Mlp:
    info = ck.meta[prefix]
    spec = MlpSpec.from_dict(info["spec"])
    params = ParamVector(ck.blocks[f"{prefix}.params"].copy(), [(n, tuple(d)) for n, d in info["manifest"]])
    m = Mlp(spec, params)
    m.opt = AdamState(ck.blocks[f"{prefix}.adam_m"].copy(), ck.blocks[f"{prefix}.adam_v"].copy(), info["adam_t"])
    return m


def agent_checkpoint(agent: ActorCritic, module: str, env, seed: int, extra_meta=None) -> Checkpoint:
    blocks, meta = {}, {"action_space": list(agent.action_space)}
    _mlp_blocks("policy", agent.policy, blocks, meta)
    _mlp_blocks("value", agent.value, blocks, meta)
    meta.update(extra_meta or {})
    return Checkpoint(module, env_spec_hash(env), int(seed), blocks, meta)


def agent_from(ck: Checkpoint) -> ActorCritic:
    policy, value = _mlp_from("policy", ck), _mlp_from("value", ck)
    return ActorCritic(policy.spec.in_dim, tuple(ck.meta["action_space"]), policy=policy, value=value)


def mask_checkpoint(mask: MaskPolicy, dual: DualState, env, seed: int, extra_meta=None) -> Checkpoint:
    meta = {"dual": {"nu1": dual.nu1, "nu2": dual.nu2}, **(extra_meta or {})}
    return agent_checkpoint(mask.agent, "mask", env, seed, meta)


def mask_from(ck: Checkpoint) -> tuple[MaskPolicy, DualState]:
    agent = agent_from(ck)
    d = ck.meta.get("dual", {})
    return MaskPolicy(agent.in_dim, agent=agent), DualState(d.get("nu1", 0.0), d.get("nu2", 0.0))


def trace_checkpoint(trace: envkit.EpisodeTrace, env, extra_meta=None) -> Checkpoint:
    """Serialize an episode trace; each per-step field becomes a (length, ...) block."""
    blocks = {}
    if trace.steps:
        for name in ("obs_victim", "act_victim", "obs_attacker", "act_attacker"):
            blocks[name] = np.stack([np.atleast_1d(np.asarray(getattr(s, name), dtype=np.float64)) for s in trace.steps])
        blocks["reward_victim"] = np.array([s.reward_victim for s in trace.steps], dtype=np.float64)
        blocks["reward_attacker"] = np.array([s.reward_attacker for s in trace.steps], dtype=np.float64)
        if trace.has_mask:
            blocks["mask_bit"] = trace.mask_bits().astype(np.float64)
    meta = {"outcome": trace.outcome, "length": trace.length, **(extra_meta or {})}
    return Checkpoint("trace", env_spec_hash(env), int(trace.seed), blocks, meta)


def trace_from(ck: Checkpoint) -> envkit.EpisodeTrace:
    n = ck.meta["length"]
    b = ck.blocks
    steps = []
    for t in range(n):
        steps.append(envkit.TraceStep(b["obs_victim"][t], b["act_victim"][t], b["obs_attacker"][t], b["act_attacker"][t],
                                      float(b["reward_victim"][t]), float(b["reward_attacker"][t]),
                                      int(b["mask_bit"][t]) if "mask_bit" in b else None))
    return envkit.EpisodeTrace(steps, ck.meta["outcome"], ck.seed)


def check_env(ck: Checkpoint, env) -> None:
    want = env_spec_hash(env)
    if ck.env_spec_hash != want:
        raise CheckpointError(f"checkpoint was saved for env hash {ck.env_spec_hash}, current env is {want}")
