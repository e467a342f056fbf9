"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation records a node carrying a monotonically
increasing sequence number.  ``backward`` collects the nodes reachable from
the loss, orders them by that number (the recording order) and replays them
in exact reverse, so gradient accumulation is deterministic.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeError

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, parameter updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward", "seq", "out_id")

    def __init__(self, op: str, parents: tuple, backward: Callable, out_id: int):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)
        self.out_id = out_id


class Tensor:
    """A float64 array that may participate in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op}: non-finite values in output")


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(op, out)
    result = Tensor(out)
    if grad_enabled() and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result.node = Node(op, tuple(parents), backward_fn, id(result))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Tape:
    """Recorded operations reachable from one output, in recording order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or id(n) in seen:
                continue
            seen.add(id(n))
            nodes.append(n)
            stack.extend(n.parents)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` below ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ShapeError("loss is not on the tape (no input requires grad)")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.node is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = grads[key]
        _check_finite("backward", g)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record("mean", np.array(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty list")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shape mismatch {shape} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _record("stack", out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Slice ``x`` at ``index`` along ``axis`` (dropping the axis)."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record("take", np.ascontiguousarray(np.take(x.data, index, axis=axis)), (x,), bw)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def max_over(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; ties go to the lowest index, which gets the whole gradient."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record("max_over", out, (x,), bw)


def branch_max(branches: Sequence[Tensor]) -> Tensor:
    """Per-element maximum over same-shape branches (lowest index wins ties)."""
    if len(branches) == 0:
        raise ShapeError("branch_max needs at least one branch")
    return max_over(stack(branches, axis=0), axis=0)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct cross-correlation (no kernel flip) with zero padding.

    ``x`` is [N, C, H, W], ``kernel`` is [O, C, k, k] with odd ``k``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / pad={pad}")
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{w}")
    _check_finite("conv2d input", x.data)
    _check_finite("conv2d kernel", kernel.data)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wm = kernel.data.reshape(o, c * k * k)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dk = (gm.T @ cols).reshape(o, c, k, k) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros(xp.shape)
            he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + he:stride, j:j + we:stride] += dcols[..., i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return dx, dk

    return _record("conv2d", np.ascontiguousarray(out), (x, kernel), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x [N, D], weight [D, M], bias [M]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"linear: bad ranks {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} @ {weight.shape} + {bias.shape}")
    xd, wd = x.data, weight.data
    return _record("linear", xd @ wd + bias.data, (x, weight, bias),
                   lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    return _record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _record("softmax_cross_entropy", np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class SGD:
    """SGD with heavy-ball momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise NumericalError(f"parameter {p.name or i} has no gradient")
        for i, p in enumerate(self.params):
            self.velocity[i] = self.momentum * self.velocity[i] + p.grad
            p.data = p.data - lr * self.velocity[i]
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """One functional momentum-SGD update; returns the (new) velocity buffers."""
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    opt = SGD(params, lr, momentum)
    opt.velocity = velocity
    opt.step()
    return opt.velocity


def cyclic_lr(step: int, base_lr: float, max_lr: float, half_cycle: int) -> float:
    """Triangular cyclic learning rate."""
    cycle_pos = step % (2 * half_cycle)
    frac = cycle_pos / half_cycle if cycle_pos < half_cycle else 2 - cycle_pos / half_cycle
    return base_lr + (max_lr - base_lr) * frac
