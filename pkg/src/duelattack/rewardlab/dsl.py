"""A small, total expression language for reward programs.

Programs are Python-flavoured source, parsed with :mod:`ast` and then checked
against a whitelist, so nothing in a program is ever executed by Python.
A program is zero or more assignments followed by one reward expression::

    # comments are allowed
    sparse = 0.5*reward_adv - 0.1*reward_opp
    _gap = norm2(s2[4:6] - s2[0:2])       # leading underscore: helper, not reported
    bonus = 8*win - 4*loss
    sparse + bonus - 0.1*_gap

Public assignments become named reward components. Evaluation is vectorized
over a batch of contexts and always finite: division by |x| < 1e-9 yields 0,
``exp`` clamps its argument to [-30, 30] and the final reward is clamped to
``[-clip_limit, clip_limit]``.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np

DIV_GUARD = 1e-9
EXP_CLAMP = 30.0
DEFAULT_CLIP_LIMIT = 115.0
MAX_DEPTH = 64

VECTOR_FIELDS = ("s1", "s2", "a2", "s_o")
SCALAR_FIELDS = ("reward_adv", "reward_opp", "rate", "win", "loss")
SCALAR, VECTOR = "scalar", "vector"

_FUNCS = {
    # name: (min args, max args)
    "min": (2, 8), "max": (2, 8), "abs": (1, 1), "tanh": (1, 1), "exp": (1, 1),
    "clip": (3, 3), "norm2": (1, 1), "sum": (1, 1), "sqrt": (1, 1),
}


class DslError(ValueError):
    """Parse-time error carrying a 1-based line and column."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"line {line}, column {col}: {message}")
        self.message, self.line, self.col = message, line, col


def _loc(node):
    return getattr(node, "lineno", 0), getattr(node, "col_offset", -1) + 1


def _finite(x):
    return np.nan_to_num(x, nan=0.0, posinf=1e300, neginf=-1e300)


class _Compiler:
    def __init__(self):
        self.env: dict[str, str] = {}

    def err(self, node, msg):
        raise DslError(msg, *_loc(node))

    def compile(self, node, depth=0):
        if depth > MAX_DEPTH:
            self.err(node, "expression nested too deeply")
        d = depth + 1
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                self.err(node, f"only numeric literals are allowed, got {node.value!r}")
            c = float(node.value)
            return SCALAR, lambda ctx, env: np.full(ctx["n"], c)
        if isinstance(node, ast.Name):
            name = node.id
            if name in VECTOR_FIELDS:
                return VECTOR, lambda ctx, env: ctx[name]
            if name in SCALAR_FIELDS:
                return SCALAR, lambda ctx, env: ctx[name]
            if name in self.env:
                return self.env[name], lambda ctx, env: env[name]
            self.err(node, f"unknown name {name!r}")
        if isinstance(node, ast.UnaryOp):
            kind, f = self.compile(node.operand, d)
            if isinstance(node.op, ast.USub):
                return kind, lambda ctx, env: -f(ctx, env)
            if isinstance(node.op, ast.UAdd):
                return kind, f
            self.err(node, "unsupported unary operator")
        if isinstance(node, ast.BinOp):
            return self._binop(node, d)
        if isinstance(node, ast.Compare):
            return self._compare(node, d)
        if isinstance(node, ast.IfExp):
            kc, c = self.compile(node.test, d)
            ka, a = self.compile(node.body, d)
            kb, b = self.compile(node.orelse, d)
            if kc != SCALAR:
                self.err(node.test, "condition must be a scalar")
            kind = VECTOR if VECTOR in (ka, kb) else SCALAR
            if kind == VECTOR:
                return VECTOR, lambda ctx, env: np.where(c(ctx, env)[:, None] != 0, _bcast(a(ctx, env)), _bcast(b(ctx, env)))
            return SCALAR, lambda ctx, env: np.where(c(ctx, env) != 0, a(ctx, env), b(ctx, env))
        if isinstance(node, ast.Subscript):
            return self._subscript(node, d)
        if isinstance(node, ast.Call):
            return self._call(node, d)
        self.err(node, f"unsupported syntax {type(node).__name__}")

    def _binop(self, node, d):
        ka, a = self.compile(node.left, d)
        kb, b = self.compile(node.right, d)
        kind = VECTOR if VECTOR in (ka, kb) else SCALAR
        if kind == VECTOR:
            a0, b0 = a, b
            a = (lambda ctx, env: a0(ctx, env)[:, None]) if ka == SCALAR else a0
            b = (lambda ctx, env: b0(ctx, env)[:, None]) if kb == SCALAR else b0
        op = node.op
        if isinstance(op, ast.Add):
            return kind, lambda ctx, env: a(ctx, env) + b(ctx, env)
        if isinstance(op, ast.Sub):
            return kind, lambda ctx, env: a(ctx, env) - b(ctx, env)
        if isinstance(op, ast.Mult):
            return kind, lambda ctx, env: _finite(a(ctx, env) * b(ctx, env))
        if isinstance(op, ast.Div):
            def div(ctx, env):
                num, den = a(ctx, env), b(ctx, env)
                num, den = np.broadcast_arrays(num, den)
                ok = np.abs(den) >= DIV_GUARD
                return _finite(np.where(ok, num / np.where(ok, den, 1.0), 0.0))
            return kind, div
        if isinstance(op, ast.Pow):
            return kind, lambda ctx, env: _finite(np.power(np.abs(a(ctx, env)), b(ctx, env)) * _sign_pow(a(ctx, env), b(ctx, env)))
        self.err(node, "unsupported binary operator (use + - * / **)")

    def _compare(self, node, d):
        if len(node.ops) != 1:
            self.err(node, "chained comparisons are not supported")
        ka, a = self.compile(node.left, d)
        kb, b = self.compile(node.comparators[0], d)
        if ka != SCALAR or kb != SCALAR:
            self.err(node, "comparisons take scalar operands")
        ops = {ast.Lt: np.less, ast.LtE: np.less_equal, ast.Gt: np.greater, ast.GtE: np.greater_equal,
               ast.Eq: np.equal, ast.NotEq: np.not_equal}
        fn = ops.get(type(node.ops[0]))
        if fn is None:
            self.err(node, "unsupported comparison")
        return SCALAR, lambda ctx, env: fn(a(ctx, env), b(ctx, env)).astype(np.float64)

    def _subscript(self, node, d):
        kv, v = self.compile(node.value, d)
        if kv != VECTOR:
            self.err(node, "only vectors can be indexed")
        sl = node.slice
        if isinstance(sl, ast.Slice):
            if sl.step is not None:
                self.err(node, "slice steps are not supported")
            lo = self._int(sl.lower, 0) if sl.lower is not None else None
            hi = self._int(sl.upper, 0) if sl.upper is not None else None
            return VECTOR, lambda ctx, env: _slice(v(ctx, env), lo, hi, node)
        i = self._int(sl, None)
        return SCALAR, lambda ctx, env: _index(v(ctx, env), i, node)

    def _int(self, node, default):
        neg = False
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            neg, node = True, node.operand
        if not isinstance(node, ast.Constant) or isinstance(node.value, bool) or not isinstance(node.value, int):
            self.err(node, "indices must be integer literals")
        return -node.value if neg else node.value

    def _call(self, node, d):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            name = getattr(node.func, "id", "?")
            self.err(node, f"unknown function {name!r}")
        if node.keywords:
            self.err(node, "keyword arguments are not supported")
        name = node.func.id
        lo, hi = _FUNCS[name]
        if not lo <= len(node.args) <= hi:
            want = str(lo) if lo == hi else f"{lo}..{hi}"
            self.err(node, f"{name}() takes {want} arguments, got {len(node.args)}")
        args = [self.compile(a, d) for a in node.args]
        kinds = [k for k, _ in args]
        fs = [f for _, f in args]
        if name in ("norm2", "sum"):
            if kinds[0] != VECTOR:
                self.err(node, f"{name}() takes a vector")
            f = fs[0]
            if name == "norm2":
                return SCALAR, lambda ctx, env: _finite(np.sqrt(np.sum(f(ctx, env) ** 2, axis=1)))
            return SCALAR, lambda ctx, env: _finite(np.sum(f(ctx, env), axis=1))
        kind = VECTOR if VECTOR in kinds else SCALAR
        if kind == VECTOR:
            fs = [(lambda ctx, env, g=g: g(ctx, env)[:, None]) if k == SCALAR else g for k, g in zip(kinds, fs)]
        if name == "abs":
            return kind, lambda ctx, env: np.abs(fs[0](ctx, env))
        if name == "tanh":
            return kind, lambda ctx, env: np.tanh(fs[0](ctx, env))
        if name == "exp":
            return kind, lambda ctx, env: np.exp(np.clip(fs[0](ctx, env), -EXP_CLAMP, EXP_CLAMP))
        if name == "sqrt":
            return kind, lambda ctx, env: np.sqrt(np.abs(fs[0](ctx, env)))
        if name == "clip":
            return kind, lambda ctx, env: _clip(fs[0](ctx, env), fs[1](ctx, env), fs[2](ctx, env))
        red = np.minimum if name == "min" else np.maximum

        def minmax(ctx, env):
            out = fs[0](ctx, env)
            for g in fs[1:]:
                out = red(out, g(ctx, env))
            return out

        return kind, minmax


def _sign_pow(base, expo):
    # odd integer powers keep the sign of the base; everything else uses |base|
    odd = (np.mod(expo, 2.0) == 1.0)
    return np.where(odd & (base < 0), -1.0, 1.0)


def _bcast(x):
    return x[:, None] if x.ndim == 1 else x


def _clip(x, lo, hi):
    return np.minimum(np.maximum(x, lo), np.maximum(lo, hi))


def _slice(v, lo, hi, node):
    out = v[:, lo:hi]
    if out.shape[1] == 0:
        raise DslError(f"slice [{lo}:{hi}] is empty for a vector of length {v.shape[1]}", *_loc(node))
    return out


def _index(v, i, node):
    if not -v.shape[1] <= i < v.shape[1]:
        raise DslError(f"index {i} out of range for a vector of length {v.shape[1]}", *_loc(node))
    return v[:, i]


@dataclass
class RewardProgram:
    source: str
    tree: ast.Module
    components: tuple[str, ...]
    clip_limit: float = DEFAULT_CLIP_LIMIT
    _steps: list = field(default_factory=list, repr=False)
    _final: object = field(default=None, repr=False)

    @property
    def canonical(self) -> str:
        """Whitespace- and comment-free rendering; equal for sources that differ only in layout."""
        return ast.unparse(self.tree)

    def evaluate_batch(self, s1, s2, a2, status, s_o, reward_adv, reward_opp, rate):
        """Vectorized evaluation; ``status`` holds outcome codes (1 win, -1 loss, 0 none)."""
        st = np.asarray(status)
        n = st.shape[0]
        ctx = {
            "n": n,
            "s1": np.asarray(s1, dtype=np.float64).reshape(n, -1),
            "s2": np.asarray(s2, dtype=np.float64).reshape(n, -1),
            "a2": np.asarray(a2, dtype=np.float64).reshape(n, -1),
            "s_o": np.asarray(s_o, dtype=np.float64).reshape(n, -1),
            "reward_adv": np.broadcast_to(np.asarray(reward_adv, dtype=np.float64), (n,)),
            "reward_opp": np.broadcast_to(np.asarray(reward_opp, dtype=np.float64), (n,)),
            "rate": np.broadcast_to(np.asarray(rate, dtype=np.float64), (n,)),
            "win": (st == 1).astype(np.float64),
            "loss": (st == -1).astype(np.float64),
        }
        env: dict[str, np.ndarray] = {}
        comps = {}
        with np.errstate(all="ignore"):
            for name, fn in self._steps:
                env[name] = fn(ctx, env)
                if not name.startswith("_"):
                    comps[name] = _clamp(env[name], self.clip_limit)
            total = _clamp(self._final(ctx, env), self.clip_limit)
        return total, comps


def _clamp(x, limit):
    return np.clip(np.nan_to_num(np.asarray(x, dtype=np.float64), nan=0.0, posinf=limit, neginf=-limit), -limit, limit)


def parse_program(source: str, clip_limit: float = DEFAULT_CLIP_LIMIT) -> RewardProgram:
    """Parse and validate a reward program; raises :class:`DslError` with a location."""
    try:
        tree = ast.parse(source, mode="exec")
    except SyntaxError as exc:
        raise DslError(exc.msg or "invalid syntax", exc.lineno or 0, exc.offset or 0) from None
    if not tree.body:
        raise DslError("empty program: expected a reward expression", 1, 1)
    comp = _Compiler()
    steps, names = [], []
    for stmt in tree.body[:-1]:
        if not isinstance(stmt, ast.Assign) or len(stmt.targets) != 1 or not isinstance(stmt.targets[0], ast.Name):
            raise DslError("only 'name = expression' statements may precede the reward expression", *_loc(stmt))
        name = stmt.targets[0].id
        if name in VECTOR_FIELDS or name in SCALAR_FIELDS or name in _FUNCS:
            raise DslError(f"cannot assign to reserved name {name!r}", *_loc(stmt))
        if name in comp.env:
            raise DslError(f"{name!r} is assigned twice", *_loc(stmt))
        kind, fn = comp.compile(stmt.value)
        if kind == VECTOR and not name.startswith("_"):
            raise DslError(f"component {name!r} must be a scalar (prefix vector helpers with '_')", *_loc(stmt))
        comp.env[name] = kind
        steps.append((name, fn))
        if not name.startswith("_"):
            names.append(name)
    last = tree.body[-1]
    if not isinstance(last, ast.Expr):
        raise DslError("program must end with a reward expression", *_loc(last))
    kind, final = comp.compile(last.value)
    if kind != SCALAR:
        raise DslError("the reward expression must be a scalar", *_loc(last))
    prog = RewardProgram(source, tree, tuple(names), float(clip_limit))
    prog._steps, prog._final = steps, final
    return prog


@dataclass
class RewardContext:
    s1: np.ndarray
    s2: np.ndarray
    a2: np.ndarray
    victory_status: str | None
    s_o: np.ndarray
    reward_adv: float
    reward_opp: float
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must lie in [0, 1]")
        if self.victory_status not in ("win", "loss", "none", None):
            raise ValueError(f"victory_status must be win, loss or none, got {self.victory_status!r}")


def eval_program(program: RewardProgram, ctx: RewardContext):
    """Reward and component map for a single context."""
    code = {"win": 1, "loss": -1}.get(ctx.victory_status or "none", 0)
    total, comps = program.evaluate_batch(
        s1=np.atleast_2d(ctx.s1), s2=np.atleast_2d(ctx.s2), a2=np.atleast_2d(ctx.a2), status=np.array([code]),
        s_o=np.atleast_2d(ctx.s_o), reward_adv=ctx.reward_adv, reward_opp=ctx.reward_opp, rate=ctx.rate)
    return float(total[0]), {k: float(v[0]) for k, v in comps.items()}
