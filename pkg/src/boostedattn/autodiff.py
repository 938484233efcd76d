"""Dense float64 tensors with a reverse-mode gradient tape.

A :class:`Tape` records every primitive applied to tensors it watches. One
call to :meth:`Tape.backward` replays the record in reverse and returns exact
gradients for the watched leaves. Tapes are single use: build a new one for
every training step.

Values that are not on a tape behave as constants, so the same model code
runs with plain numpy arrays (inference, finite differences) or with watched
tensors (training).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e30


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "tape", "tape_id", "name")
    __array_ufunc__ = None

    def __init__(self, data, tape: "Tape | None" = None, tape_id: int | None = None,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.tape_id = tape_id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        taped = "" if self.tape is None else f", tape_id={self.tape_id}"
        return f"Tensor(shape={self.shape}{taped})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __pow__ = lambda a, p: power(a, p)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


ArrayLike = "Tensor | np.ndarray | float"


@dataclass
class _Node:
    out_id: int
    parent_ids: tuple
    vjp: Callable


class Tape:
    """Ordered record of primitive operations; backward runs once.

    >>> tape = Tape()
    >>> x = tape.watch(np.array([1.0, 2.0]))
    >>> grads = tape.backward(0.5 * (x * x).sum())
    >>> grads[x]
    array([1., 2.])
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._shapes: list[tuple] = []
        self._leaves: list[Tensor] = []
        self._done = False

    def __len__(self) -> int:
        return len(self._nodes)

    def _new_id(self, shape) -> int:
        self._shapes.append(shape)
        return len(self._shapes) - 1

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` as a differentiable leaf."""
        if self._done:
            raise TapeError("tape already consumed by backward(); create a new tape")
        data = value.data if isinstance(value, Tensor) else value
        data = np.array(data, dtype=DTYPE)
        leaf = Tensor(data, self, self._new_id(data.shape), name)
        self._leaves.append(leaf)
        return leaf

    def watch_all(self, values: dict) -> dict:
        return {k: self.watch(v, name=k) for k, v in values.items()}

    def record(self, out_data: np.ndarray, parents: Sequence, vjp: Callable) -> Tensor:
        if self._done:
            raise TapeError("tape already consumed by backward(); create a new tape")
        out = Tensor(out_data, self, self._new_id(out_data.shape))
        pids = tuple(p.tape_id if isinstance(p, Tensor) and p.tape is self else None
                     for p in parents)
        self._nodes.append(_Node(out.tape_id, pids, vjp))
        return out

    def backward(self, root: Tensor) -> "Gradients":
        """Exact reverse-mode gradients of scalar ``root`` for all leaves."""
        if self._done:
            raise TapeError("backward() already called on this tape")
        if not isinstance(root, Tensor) or root.tape is not self:
            raise TapeError("root was not produced under this tape")
        if root.data.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
        self._done = True
        buf: dict[int, np.ndarray] = {root.tape_id: np.ones(root.shape, dtype=DTYPE)}
        # nodes are dropped as they are consumed so their closures free memory early
        while self._nodes:
            node = self._nodes.pop()
            g = buf.pop(node.out_id, None)
            if g is None:
                continue
            for pid, pg in zip(node.parent_ids, node.vjp(g)):
                if pid is None or pg is None:
                    continue
                if pid in buf:
                    buf[pid] = buf[pid] + pg
                else:
                    buf[pid] = pg
        grads = Gradients()
        for leaf in self._leaves:
            g = buf.get(leaf.tape_id)
            grads._by_id[leaf.tape_id] = (np.zeros(leaf.shape, dtype=DTYPE) if g is None
                                          else np.asarray(g, dtype=DTYPE).reshape(leaf.shape))
            if leaf.name is not None:
                grads._by_name[leaf.name] = grads._by_id[leaf.tape_id]
        self._leaves = []
        return grads


class Gradients:
    """Gradient buffers keyed by leaf tensor (or by leaf name)."""

    def __init__(self):
        self._by_id: dict[int, np.ndarray] = {}
        self._by_name: dict[str, np.ndarray] = {}

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, Tensor):
            return self._by_id[key.tape_id]
        return self._by_name[key]

    def __contains__(self, key) -> bool:
        if isinstance(key, Tensor):
            return key.tape_id in self._by_id
        return key in self._by_name

    def named(self) -> dict[str, np.ndarray]:
        return dict(self._by_name)


# ---------------------------------------------------------------------------
# plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x) -> np.ndarray:
    """Underlying float64 array of a tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _make(out_data, parents, vjp) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(out_data)
    return tape.record(out_data, parents, vjp)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    av, bv = value(a), value(b)
    return _make(av + bv, (a, b),
                 lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = value(a), value(b)
    return _make(av - bv, (a, b),
                 lambda g: (unbroadcast(g, av.shape), unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = value(a), value(b)
    return _make(av * bv, (a, b),
                 lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    av, bv = value(a), value(b)
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / bv, av.shape),
                            unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    return _make(-value(a), (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    av = value(a)
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a) -> Tensor:
    out = np.exp(value(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    av = value(a)
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    out = np.sqrt(value(a))
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    out = np.tanh(value(a))
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    out = _sigmoid(value(a))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    av = value(a)
    return _make(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    x = value(a)
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape


def reshape(a, shape) -> Tensor:
    av = value(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None) -> Tensor:
    av = value(a)
    if axes is None:
        axes = tuple(reversed(range(av.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(av.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    av = value(a)
    return _make(np.swapaxes(av, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx) -> Tensor:
    av = value(a)

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _make(av[idx], (a,), vjp)


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    tv = value(table)
    ids = np.asarray(ids)

    def vjp(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (full,)

    return _make(tv[ids], (table,), vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a, shape) -> Tensor:
    av = value(a)
    return _make(np.broadcast_to(av, shape).copy(), (a,),
                 lambda g: (unbroadcast(g, av.shape),))


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False) -> Tensor:
    av = value(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _make(np.asarray(av.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    av = value(a)
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and normalizations


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules."""
    av, bv = value(a), value(b)
    if av.ndim < 1 or bv.ndim < 1 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    if av.ndim < 2 or bv.ndim < 2:
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        out = matmul(reshape(a, a2.shape), reshape(b, b2.shape))
        shape = out.shape
        if av.ndim == 1:
            shape = shape[:-2] + shape[-1:]
        if bv.ndim == 1:
            shape = shape[:-1]
        return reshape(out, shape)

    if bv.ndim == 2 and av.ndim > 2:
        # stacked rows times one matrix: a single GEMM over the flattened rows
        k = av.shape[-1]

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g @ bv.T, av.reshape(-1, k).T @ g2)

        return _make((av.reshape(-1, k) @ bv).reshape(av.shape[:-1] + bv.shape[-1:]), (a, b), vjp)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), vjp)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    out = _softmax(value(a), axis)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    av = value(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


LN_EPS = 1e-5


def layer_norm(u, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """gamma * (u - mean) / sqrt(var + eps) + beta over the last axis.

    Variance is the biased one (divide by d).
    """
    uv = value(u)
    d = uv.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs d >= 2, got d={d}")
    gv, bv = value(gamma), value(beta)
    mu = uv.mean(axis=-1, keepdims=True)
    xc = uv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv

    def vjp(g):
        gx = g * gv
        du = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return du, unbroadcast(g * xhat, gv.shape), unbroadcast(g, bv.shape)

    return _make(out, (u, gamma, beta), vjp)


def masked_fill(a, allowed: np.ndarray, fill: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``allowed`` is False by ``fill`` (no gradient there)."""
    av = value(a)
    allowed = np.broadcast_to(allowed, av.shape)
    out = np.where(allowed, av, fill)
    return _make(out, (a,), lambda g: (np.where(allowed, g, 0.0),))


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return as_tensor(a) if not isinstance(a, Tensor) else a
    keep = (rng.random(value(a).shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# losses


def mse(pred, target) -> Tensor:
    """Mean over rows of the squared Euclidean error ``||pred - target||^2``."""
    diff = sub(pred, target)
    sq = sum_(mul(diff, diff), axis=-1)
    return mean(sq)


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` (nats)."""
    lv = value(logits)
    v = lv.shape[-1]
    flat = lv.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = t.size
    loss = -logp[np.arange(n), t].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return ((g / n) * p).reshape(lv.shape),

    return _make(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: dict[str, np.ndarray],
              step: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients of ``fn(**tensors)`` against central differences.

    Returns the relative error per input name.
    """
    tape = Tape()
    watched = tape.watch_all(inputs)
    grads = tape.backward(fn(**watched))
    errors = {}
    for name, x in inputs.items():
        def f(v, name=name):
            args = {k: (v if k == name else val) for k, val in inputs.items()}
            return float(value(fn(**args)))
        errors[name] = relative_error(grads[name], numerical_grad(f, x, step))
    return errors


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              clip: float | None = None, lr: float | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step (decoupled weight decay when set).

    ``lr`` overrides ``state.lr`` for this step (learning-rate schedules).
    """
    for k, p in params.items():
        if k not in grads:
            raise KeyError(f"no gradient for parameter {k!r}")
        if grads[k].shape != p.shape:
            raise DimensionError(f"gradient shape {grads[k].shape} != parameter shape {p.shape} for {k!r}")
    if clip is not None:
        grads = clip_by_global_norm(grads, clip)
    state.step += 1
    t = state.step
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        new = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            new = new - lr * state.weight_decay * p
        out[k] = new
    return out


def watch_params(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return tape.watch_all(params)


def stack_values(xs: Iterable) -> np.ndarray:
    return np.stack([value(x) for x in xs])
