"""Dense float64 tensors with a reverse-mode tape.

Operations compute eagerly with numpy. When a :class:`Tape` is active on the
current thread and at least one operand requires a gradient, the operation is
appended to the tape together with a closure that maps the output gradient to
the operand gradients. ``backward`` then walks the tape in reverse creation
order. Outside a tape nothing is recorded, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class ConfigError(ValueError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; the tape is active only on the entering thread.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward
    tape.nodes.append(out)
    return out


def backward(tape: Tape, root: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every leaf's ``.grad``.

    Returns the gradients of named leaves (parameters) keyed by name.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[int, Tensor] = {}
    if root._backward is None:
        # Root is itself a leaf.
        if root.requires_grad:
            root.grad = np.ones_like(root.value) if root.grad is None else root.grad + 1.0
            leaves[id(root)] = root
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                leaves[id(parent)] = parent
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    return {t.name: t.grad for t in leaves.values() if t.name is not None}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of (m, k) and (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    out = Tensor(av @ bv)

    def bw(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _record(out, (a, b), bw)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum; every index of an operand must appear in the other or the output."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    try:
        value = np.einsum(subscripts, a.value, b.value)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts}: shapes {a.shape}, {b.shape}: {exc}") from None
    av, bv = a.value, b.value
    out = Tensor(value)

    def bw(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, bv) if a.requires_grad else None
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, av) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    out = Tensor(a.value + b.value)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    out = Tensor(a.value - b.value)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    out = Tensor(av * bv)

    def bw(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return _record(out, (a, b), bw)


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _record(Tensor(a.value * k), (a,), lambda g: (g * k,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record(Tensor(av * av), (a,), lambda g: (2.0 * av * g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record(Tensor(y), (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _record(Tensor(y), (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return _record(Tensor(np.where(pos, a.value, 0.0)), (a,), lambda g: (g * pos,))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: sigmoid, tanh, relu, mul, add, concat."""
    unary = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    if op in unary:
        return unary[op](*args)
    if op == "mul":
        return mul(*args)
    if op == "add":
        return add(*args)
    if op == "concat":
        return concat(list(args), axis=-1)
    raise ValueError(f"unknown elementwise op {op!r}")


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-rate) at train time only."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# --- reductions and reshaping ----------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(Tensor(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = Tensor(a.value.sum(axis=axis))
    return _record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no operands")
    nd = ts[0].value.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.value.ndim != nd or any(
                t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    out = Tensor(np.concatenate([t.value for t in ts], axis=ax))
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _record(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = Tensor(np.stack([t.value for t in ts], axis=axis))
    n = len(ts)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(out, ts, bw)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(Tensor(a.value.reshape(shape)), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    """Basic slicing (no fancy indexing); gradient scatters back into zeros."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record(Tensor(a.value[index]), (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    tv = table.value
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {tv.shape[0]})")

    def bw(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (full,)

    return _record(Tensor(tv[ids]), (table,), bw)


def take_along(a, idx: np.ndarray) -> Tensor:
    """For ``a`` of shape (B, K, ...) pick ``a[b, idx[b]]`` -> (B, ...)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _record(Tensor(a.value[rows, idx]), (a,), bw)


# --- normalizers ------------------------------------------------------------

def softmax(z, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (bool, True=keep) adds -1e30 to dropped entries."""
    z = as_tensor(z)
    if z.value.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax: empty input")
    zv = z.value if mask is None else z.value + np.where(mask, 0.0, -1e30)
    e = np.exp(zv - zv.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(Tensor(y), (z,), bw)


def log_softmax(z, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    z = as_tensor(z)
    if z.value.size == 0 or z.shape[axis] == 0:
        raise DimensionError("log_softmax: empty input")
    zv = z.value if mask is None else z.value + np.where(mask, 0.0, -1e30)
    shifted = zv - zv.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(Tensor(y), (z,), bw)


class BatchNormState:
    """Running statistics for one normalization site."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.mean), self.momentum, self.eps)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm(x, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool, valid: np.ndarray | None = None) -> Tensor:
    """Normalize rows of ``x`` (N, d).

    In training mode statistics come from the rows flagged ``valid`` and the
    running estimates in ``state`` are updated; otherwise the running
    estimates are used as constants.
    """
    x = as_tensor(x)
    xv = x.value
    n_rows = xv.shape[0]
    if valid is None:
        valid = np.ones(n_rows, dtype=bool)
    n = int(valid.sum())
    if training and n > 1:
        w = valid / n
        mu = w @ xv
        xc = xv - mu
        var = w @ (xc * xc)
        state.mean = (1 - state.momentum) * state.mean + state.momentum * mu
        state.var = (1 - state.momentum) * state.var + state.momentum * var * n / (n - 1)
        batch_stats = True
    else:
        mu, var = state.mean, state.var
        xc = xv - mu
        w = None
        batch_stats = False
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    gv = gamma.value
    out = Tensor(xhat * gv + beta.value)

    def bw(g):
        gg = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gb = g.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gy = g * gv
            gx = gy * inv
            if batch_stats:
                d_mu = -(gy.sum(axis=0)) * inv
                d_var = -0.5 * (gy * xc).sum(axis=0) * inv ** 3
                gx = gx + w[:, None] * d_mu + 2.0 * w[:, None] * xc * d_var
        return gx, gg, gb

    return _record(out, (x, gamma, beta), bw)


# --- recurrent cell ---------------------------------------------------------

def lstm_cell(x, h_prev, c_prev, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """Four-gate LSTM with gates ordered (input, forget, cell, output).

    ``weight`` has shape (d_in + d_h, 4 d_h) and acts on ``[x, h_prev]``.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    d_h = h_prev.shape[-1]
    d_in = x.shape[-1]
    if weight.shape != (d_in + d_h, 4 * d_h) or bias.shape != (4 * d_h,):
        raise DimensionError(
            f"lstm_cell: weight {weight.shape}/bias {bias.shape} do not fit "
            f"input {d_in} and hidden {d_h}")
    if c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm_cell: h {h_prev.shape} vs c {c_prev.shape}")
    gates = linear(concat([x, h_prev], axis=-1), weight, bias)
    i = sigmoid(getitem(gates, (..., slice(0, d_h))))
    f = sigmoid(getitem(gates, (..., slice(d_h, 2 * d_h))))
    g = tanh(getitem(gates, (..., slice(2 * d_h, 3 * d_h))))
    o = sigmoid(getitem(gates, (..., slice(3 * d_h, 4 * d_h))))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# --- parameters and optimizer -----------------------------------------------

class Parameter(Tensor):
    __slots__ = ("trainable",)

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable, name=name)
        self.trainable = trainable


class ParameterSet(dict):
    """Name -> Parameter mapping that refuses duplicate names."""

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable)
        self[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for k, p in self.items() if p.trainable}

    def n_values(self) -> int:
        return sum(p.value.size for p in self.values())


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place, in sorted-name order."""
    if not lr > 0 or not np.isfinite(lr):
        raise ConfigError(f"learning rate must be positive and finite, got {lr}")
    state.t += 1
    t = state.t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    # Sorted so the sum does not depend on dict insertion order (resumed runs reload sorted).
    total = float(np.sqrt(sum(float((grads[k] * grads[k]).sum()) for k in sorted(grads))))
    if total > max_norm > 0:
        k = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * k
    return total


def iter_leaves(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]
