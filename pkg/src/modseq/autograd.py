"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op returns a new :class:`Tensor` holding a closure that
maps the output gradient to its parents' gradients.  :func:`backward` builds
the tape (a topological ordering of the graph reachable from the loss) and
walks it in reverse, visiting each node once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for decoding."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), backward)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), backward)


def take(x: Tensor, index) -> Tensor:
    """Select rows along axis 0; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    unique = len(np.unique(index)) == len(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if unique:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # activations @ weight: fold leading axes into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],)), (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- nn primitives


def _softmax(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z) | (z == -np.inf)):
        raise FloatingPointError("softmax received non-finite input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (entries of -inf act as masked)."""
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale-only RMS normalisation over the last axis: gain * x / rms(x)."""
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"rms_norm gain length {gain.shape[-1]} != feature size {x.shape[-1]}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * gain.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _make(out, (x, gain), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean token negative log-likelihood over non-ignored positions.

    ``logits`` has shape [..., V] and ``targets`` the matching leading shape.
    """
    targets = np.asarray(targets, dtype=np.intp)
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.ravel()
    if z.shape[0] != t.shape[0]:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} disagree")
    keep = np.ones_like(t, dtype=bool) if ignore_id is None else t != ignore_id
    if not keep.any():
        raise ValueError("empty loss: every target position is ignored")
    kept = t[keep]
    if kept.min() < 0 or kept.max() >= V:
        raise IndexError(f"target id out of range [0, {V})")
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    rows = np.nonzero(keep)[0]
    n = len(rows)
    loss = np.sum(lse[rows] - z[rows, kept]) / n

    def backward(g):
        p = _softmax(z[rows])
        p[np.arange(n), kept] -= 1.0
        gz = np.zeros_like(z)
        gz[rows] = p * (g / n)
        return (gz.reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- backprop


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``root`` (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable tensor reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any trainable tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    tape = build_tape(loss)
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    # release the graph so the next forward pass starts from a fresh tape
    for node in tape:
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- optimiser


class OptimState:
    """Adam moments for a fixed ordered list of parameters.

    Parameter storage is re-homed into one flat buffer so that a step is a
    handful of vectorised operations; each ``Tensor.data`` becomes a view.
    """

    def __init__(self, params: Iterable[Tensor]):
        self.params = list(params)
        sizes = [p.data.size for p in self.params]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
        self.flat = np.concatenate([p.data.ravel() for p in self.params]) if self.params else np.zeros(0)
        for p, lo, hi in zip(self.params, self.offsets[:-1], self.offsets[1:]):
            p.data = self.flat[lo:hi].reshape(p.data.shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self.step = 0
        self._mask_cache: tuple[frozenset, np.ndarray] | None = None

    def mask_for(self, trainable: set[int], has_grad: list[bool]) -> np.ndarray:
        key = frozenset(trainable)
        if self._mask_cache is None or self._mask_cache[0] != key:
            sel = np.array([id(p) in trainable for p in self.params], dtype=bool)
            self._mask_cache = (key, sel)
        sel = self._mask_cache[1] & np.array(has_grad, dtype=bool)
        return np.repeat(sel, np.diff(self.offsets))


def adam_step(
    state: OptimState,
    trainable: set[int],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of the parameters whose ``id`` is in ``trainable``.

    Parameters outside the mask are never written; their moments stay put.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    has_grad = [p.grad is not None for p in state.params]
    mask = state.mask_for(trainable, has_grad)
    if not mask.any():
        return
    g = np.concatenate([
        p.grad.ravel() if p.grad is not None else np.zeros(p.data.size) for p in state.params
    ])
    if mask.all():
        m, v = state.m, state.v
    else:
        m, v = state.m.copy(), state.v.copy()
    m *= beta1
    m += (1.0 - beta1) * g
    g *= g
    g *= 1.0 - beta2
    v *= beta2
    v += g
    update = np.sqrt(v)
    update *= 1.0 / np.sqrt(c2)
    update += eps
    np.divide(m, update, out=update)
    update *= lr / c1
    if mask.all():
        state.flat -= update
    else:
        np.copyto(state.m, m, where=mask)
        np.copyto(state.v, v, where=mask)
        np.subtract(state.flat, update, out=state.flat, where=mask)
