"""Dense tensors with a reverse-mode gradient tape, backed by numpy.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what inference
uses. ``no_grad()`` suspends recording inside an active tape.
"""
from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "EmptyTargetWarning",
    "Tensor",
    "Tape",
    "no_grad",
    "shadow_mode",
    "get_dtype",
    "backward",
    "matmul",
    "concat",
    "embedding",
    "gather_last",
    "log_softmax",
    "softmax",
    "layer_norm",
    "kl_divergence",
    "token_nll",
    "nll_loss",
    "AdamState",
    "adam_step",
    "Adam",
    "gradcheck",
]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class EmptyTargetWarning(UserWarning):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def get_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def shadow_mode(dtype=np.float64):
    """Create new tensors in 64-bit precision (used by gradient checks)."""
    prev = get_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def no_grad():
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tape:
    """Ordered record of differentiable operations for one step.

    ``backward`` walks the records once in reverse; a second call raises until
    ``reset`` is called.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        self.records = []
        self._consumed = False

    def record(self, out: "Tensor", inputs: tuple, fn: Callable):
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        out.requires_grad = True
        out._tape = self
        self.records.append((out, inputs, fn))

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss is detached: it was not produced on this tape")
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; call reset() first")
        self._consumed = True

        produced = {id(rec[0]) for rec in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            in_grads = fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: "Tensor"):
    """Backpropagate from a scalar loss through the tape that produced it."""
    if loss._tape is None:
        raise RuntimeError("loss is detached: no tape recorded it")
    loss._tape.backward(loss)


def _as_tensor(x, dtype=None) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, inputs: tuple, fn: Callable) -> "Tensor":
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out.name = None
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, fn)
    return out


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._tape = None
        out.name = None
        return out

    def zero_grad(self):
        self.grad = None

    # arithmetic

    def __add__(self, other):
        other = _as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.shape, other.shape
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.shape, other.shape
        return _make(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)))

    def __rsub__(self, other):
        return _as_tensor(other, self.data.dtype) - self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = _as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        return _make(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        return _make(a / b, (self, other),
                     lambda g: (_unbroadcast(g / b, a.shape),
                                _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _as_tensor(other, self.data.dtype) / self

    def __pow__(self, power: float):
        a = self.data
        return _make(a ** power, (self,), lambda g: (g * power * a ** (power - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a_shape, dtype = self.shape, self.data.dtype

        def fn(g):
            full = np.zeros(a_shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return _make(self.data[idx], (self,), fn)

    # shape

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return _make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # elementwise

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return _make(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,))

    def relu(self) -> "Tensor":
        x = self.data
        return _make(np.maximum(x, 0), (self,), lambda g: (g * (x > 0),))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return _make(y, (self,), lambda g: (g * (1 - y * y),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    if y.ndim == 2:
        # activations @ weight: fold the leading axes into one GEMM
        k = x.shape[-1]

        def fn2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ y.T).reshape(x.shape) if a.requires_grad else None
            gb = x.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(x @ y, (a, b), fn2)

    def fn(g):
        ga = g @ np.swapaxes(y, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(x, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, x.shape),
                None if gb is None else _unbroadcast(gb, y.shape))

    return _make(x @ y, (a, b), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    w_shape, dtype = weight.shape, weight.data.dtype

    def fn(g):
        full = np.zeros(w_shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, w_shape[-1]))
        return (full,)

    return _make(weight.data[ids], (weight,), fn)


def gather_last(x: Tensor, ids) -> Tensor:
    """Pick ``x[..., ids[...]]`` along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise IndexError(f"index out of range for axis of size {x.shape[-1]}")
    idx = ids[..., None]
    shape, dtype = x.shape, x.data.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    if not np.isfinite(d).all():
        raise NumericError("log_softmax received NaN or Inf input")
    shifted = d - d.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gw = gain.data

    def fn(g):
        gx = g * gw
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gw + bias.data, (x, gain, bias), fn)


def kl_divergence(log_p, log_q: Tensor) -> Tensor:
    """Row-wise KL(p || q) over the last axis.

    ``log_p`` is the teacher side and is always treated as a constant; rows
    may contain ``-inf`` where p is zero. Only ``log_q`` receives gradient.
    """
    lp = log_p.data if isinstance(log_p, Tensor) else np.asarray(log_p)
    lq = log_q.data
    if lp.shape != lq.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {lp.shape} vs {lq.shape}")
    p = np.exp(lp).astype(lq.dtype)
    support = p > 0
    with np.errstate(invalid="ignore"):
        terms = np.where(support, p * (np.where(support, lp, 0) - lq), 0.0)
    out = terms.sum(axis=-1).astype(lq.dtype)
    return _make(out, (log_q,), lambda g: (-p * g[..., None],))


def token_nll(log_p: Tensor, targets) -> Tensor:
    """Per-position negative log-likelihood ``-log_p[..., targets]``."""
    return -gather_last(log_p, targets)


def nll_loss(log_p: Tensor, targets, pad_id: int) -> Tensor:
    """Mean NLL over the non-pad positions of ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != log_p.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match log_p {log_p.shape}")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        warnings.warn("nll_loss: every target position is padding; loss defined as 0",
                      EmptyTargetWarning, stacklevel=2)
        return Tensor(0.0, dtype=log_p.data.dtype)
    safe = np.where(keep, targets, 0)
    if safe.max() >= log_p.shape[-1] or safe.min() < 0:
        raise IndexError(f"target id out of vocabulary of size {log_p.shape[-1]}")
    per_pos = token_nll(log_p, safe)
    return (per_pos * keep.astype(log_p.data.dtype)).sum() * (1.0 / count)


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 4e-4, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """One Adam update, applied in place to ``params``; moments live in ``state``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"param {i} shape {p.shape} != grad shape {g.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 4e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  lr=self.lr, betas=self.betas, eps=self.eps)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
              floor: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call. Inputs
    should be 64-bit (see ``shadow_mode``). Relative error is measured per
    input as ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` in L2
    norm; the floor keeps gradients that are exactly zero (e.g. attention key
    biases, which softmax ignores) from turning difference noise into error.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
