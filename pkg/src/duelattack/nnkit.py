"""Fixed-topology MLPs with hand-written reverse-mode gradients.

Everything here is float64 numpy. Parameters live in one flat array
(:class:`ParamVector`) and gradients come back in the same layout, which keeps
the optimizer and the checkpoint format trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    output_head: str = "linear"
    log_std_init: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in ("linear", "gaussian", "categorical"):
            raise ValueError(f"unknown output head {self.output_head!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def manifest(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        items = []
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            items.append((f"W{i}", (n_out, n_in)))
            items.append((f"b{i}", (n_out,)))
        if self.output_head == "gaussian":
            items.append(("log_std", (self.out_dim,)))
        return tuple(items)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_head": self.output_head,
            "log_std_init": self.log_std_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d["activation"], d["output_head"], d.get("log_std_init", 0.0))


@dataclass
class ParamVector:
    """Flat float64 storage plus the (name, dims) manifest that slices it."""

    values: np.ndarray
    manifest: tuple[tuple[str, tuple[int, ...]], ...]
    _offsets: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.manifest = tuple((str(n), tuple(int(d) for d in dims)) for n, dims in self.manifest)
        offsets, pos = {}, 0
        for name, dims in self.manifest:
            size = int(np.prod(dims)) if dims else 1
            offsets[name] = (pos, pos + size, dims)
            pos += size
        if pos != self.values.size or self.values.ndim != 1:
            raise ValueError(f"manifest describes {pos} values but array has shape {self.values.shape}")
        self._offsets = offsets

    @classmethod
    def zeros(cls, manifest) -> "ParamVector":
        total = sum(int(np.prod(d)) if d else 1 for _, d in manifest)
        return cls(np.zeros(total), manifest)

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi, dims = self._offsets[name]
        return self.values[lo:hi].reshape(dims)

    def names(self) -> list[str]:
        return [n for n, _ in self.manifest]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.manifest)

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.manifest)

    def __len__(self) -> int:
        return self.values.size


def init_params(spec: MlpSpec, rng: np.random.Generator, output_gain: float = 1.0) -> ParamVector:
    """Orthogonal weights (gain sqrt 2 on hidden layers), zero biases."""
    params = ParamVector.zeros(spec.manifest())
    for i in range(spec.n_layers):
        w = params[f"W{i}"]
        gain = output_gain if i == spec.n_layers - 1 else math.sqrt(2.0)
        a = rng.standard_normal((max(w.shape), min(w.shape)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        w[...] = gain * (q if w.shape[0] >= w.shape[1] else q.T)[: w.shape[0], : w.shape[1]]
    if spec.output_head == "gaussian":
        params["log_std"][...] = spec.log_std_init
    return params


def _act(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)


def _act_grad(spec: MlpSpec, h: np.ndarray, z: np.ndarray) -> np.ndarray:
    if spec.activation == "tanh":
        return 1.0 - h * h
    return (z > 0.0).astype(np.float64)


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"expected input of width {spec.in_dim}, got shape {np.shape(x)}")
    return x, single


def forward_cache(spec: MlpSpec, params: ParamVector, x: np.ndarray):
    """Batched forward pass returning the raw output and the activations cache."""
    hs, zs = [x], []
    h = x
    for i in range(spec.n_layers):
        z = h @ params[f"W{i}"].T + params[f"b{i}"]
        zs.append(z)
        h = z if i == spec.n_layers - 1 else _act(spec, z)
        hs.append(h)
    return h, (hs, zs)


def forward(spec: MlpSpec, params: ParamVector, x) -> np.ndarray:
    """Network output (mean for gaussian heads, logits for categorical)."""
    xb, single = _as_batch(spec, x)
    out, _ = forward_cache(spec, params, xb)
    return out[0] if single else out


def backward(spec: MlpSpec, params: ParamVector, cache, upstream: np.ndarray) -> ParamVector:
    """Gradient of sum(upstream * output) given a cache from :func:`forward_cache`."""
    hs, zs = cache
    g = ParamVector.zeros(params.manifest)
    delta = upstream
    for i in reversed(range(spec.n_layers)):
        g[f"W{i}"][...] = delta.T @ hs[i]
        g[f"b{i}"][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params[f"W{i}"]) * _act_grad(spec, hs[i], zs[i - 1])
    return g


def grad(spec: MlpSpec, params: ParamVector, x, upstream) -> ParamVector:
    xb, single = _as_batch(spec, x)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None, :]
    if up.shape != (xb.shape[0], spec.out_dim):
        raise ValueError(f"upstream shape {np.shape(upstream)} does not match output dim {spec.out_dim}")
    _, cache = forward_cache(spec, params, xb)
    return backward(spec, params, cache, up)


# -- policy heads ---------------------------------------------------------


def clamped_log_std(params: ParamVector) -> np.ndarray:
    return np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def head_stats(spec: MlpSpec, params: ParamVector, x: np.ndarray, actions: np.ndarray):
    """Batched log-probabilities and entropies, plus what :func:`head_backward` needs."""
    out, cache = forward_cache(spec, params, x)
    if spec.output_head == "gaussian":
        log_std = clamped_log_std(params)
        std = np.exp(log_std)
        a = np.asarray(actions, dtype=np.float64).reshape(out.shape)
        u = (a - out) / std
        logp = np.sum(-0.5 * u * u - log_std - _HALF_LOG_2PI, axis=1)
        ent = np.full(out.shape[0], np.sum(log_std + 0.5 + _HALF_LOG_2PI))
        return logp, ent, (cache, out, u, std)
    if spec.output_head == "categorical":
        a = np.asarray(actions).astype(np.int64).reshape(-1)
        if a.size and (a.min() < 0 or a.max() >= spec.out_dim):
            raise ValueError(f"categorical action outside [0, {spec.out_dim})")
        logq = log_softmax(out)
        p = np.exp(logq)
        logp = logq[np.arange(a.size), a]
        ent = -np.sum(p * logq, axis=1)
        return logp, ent, (cache, p, logq, a, ent)
    raise ValueError("log-probabilities need a gaussian or categorical head")


def head_backward(spec: MlpSpec, params: ParamVector, aux, dlogp: np.ndarray, dent=None) -> ParamVector:
    """Gradient of sum(dlogp * logp + dent * entropy) w.r.t. every parameter."""
    dlogp = np.asarray(dlogp, dtype=np.float64)
    if spec.output_head == "gaussian":
        cache, _, u, std = aux
        g = backward(spec, params, cache, dlogp[:, None] * u / std)
        raw = params["log_std"]
        inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        d_ls = (dlogp[:, None] * (u * u - 1.0)).sum(axis=0)
        if dent is not None:
            d_ls = d_ls + np.sum(dent)
        g["log_std"][...] = np.where(inside, d_ls, 0.0)
        return g
    cache, p, logq, a, ent = aux
    onehot = np.zeros_like(p)
    onehot[np.arange(a.size), a] = 1.0
    up = dlogp[:, None] * (onehot - p)
    if dent is not None:
        up = up - np.asarray(dent, dtype=np.float64)[:, None] * p * (logq + ent[:, None])
    return backward(spec, params, cache, up)


def logprob_and_grad(spec: MlpSpec, params: ParamVector, x, action):
    """log pi(action | x) and its gradient, for a single input or a batch (gradient of the sum)."""
    xb, single = _as_batch(spec, x)
    if spec.output_head == "gaussian":
        action = np.asarray(action, dtype=np.float64).reshape(xb.shape[0], spec.out_dim)
    logp, _, aux = head_stats(spec, params, xb, action)
    g = head_backward(spec, params, aux, np.ones_like(logp))
    return (float(logp[0]) if single else logp), g


def sample_action(spec: MlpSpec, params: ParamVector, x: np.ndarray, rng: np.random.Generator, deterministic=False):
    out, _ = forward_cache(spec, params, x)
    if spec.output_head == "gaussian":
        if deterministic:
            a = out
        else:
            a = out + np.exp(clamped_log_std(params)) * rng.standard_normal(out.shape)
    elif spec.output_head == "categorical":
        if deterministic:
            a = np.argmax(out, axis=1)
        else:
            p = np.exp(log_softmax(out))
            c = np.cumsum(p, axis=1)
            a = np.minimum((rng.random((out.shape[0], 1)) > c).sum(axis=1), spec.out_dim - 1)
    else:
        raise ValueError("sampling needs a gaussian or categorical head")
    logp, _, _ = head_stats(spec, params, x, a)
    return a, logp


# -- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values))

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(params: ParamVector, gradient: ParamVector, state: AdamState, lr: float = 3e-4):
    """One bias-corrected Adam descent step; returns new params and new state."""
    g = gradient.values
    if g.shape != params.values.shape:
        raise ValueError("gradient and parameter shapes differ")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.like(new), AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def clip_grad_norm(gradient: ParamVector, max_norm: float | None) -> ParamVector:
    if not max_norm:
        return gradient
    norm = float(np.sqrt(np.dot(gradient.values, gradient.values)))
    if norm > max_norm:
        return gradient.like(gradient.values * (max_norm / (norm + 1e-12)))
    return gradient


# -- convenience wrappers -------------------------------------------------


class Mlp:
    """A spec, its parameters and an Adam state, trained by minimizing a loss."""

    def __init__(self, spec: MlpSpec, params: ParamVector | None = None, rng=None, output_gain=1.0):
        self.spec = spec
        if params is None:
            params = init_params(spec, rng if rng is not None else np.random.default_rng(0), output_gain)
        self.params = params
        self.opt = AdamState.like(params)

    def __call__(self, x):
        return forward(self.spec, self.params, x)

    def step(self, gradient: ParamVector, lr: float, max_grad_norm=None):
        gradient = clip_grad_norm(gradient, max_grad_norm)
        self.params, self.opt = adam_step(self.params, gradient, self.opt, lr)

    def copy(self) -> "Mlp":
        m = Mlp(self.spec, self.params.copy())
        m.opt = self.opt.copy()
        return m


def policy_spec(obs_dim: int, action_space, hidden=(64, 64), activation="tanh", log_std_init=0.0) -> MlpSpec:
    """Policy net for a continuous ``("continuous", dim, lo, hi)`` or ``("discrete", n)`` space."""
    if action_space[0] == "discrete":
        return MlpSpec((obs_dim, *hidden, action_space[1]), activation, "categorical")
    return MlpSpec((obs_dim, *hidden, action_space[1]), activation, "gaussian", log_std_init)
