"""Dense tensors with reverse-mode differentiation, plus AdamW.

Everything here is a thin layer over numpy arrays. Each op records its
parents and a closure that maps the output gradient to parent gradients;
``backward`` walks the graph in reverse topological order.

Broadcasting is deliberately narrow: besides exact shape matches, only a
trailing-dimension vector (norm weight, bias) is accepted as the second
operand of ``add``/``mul``. Anything else has to go through ``expand``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array that can take part in an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(arr, dtype=dtype)
        self.data = arr if arr.ndim == 0 or arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_trailing(a, b, opname):
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to_trailing(g, n):
    return g.reshape(-1, n).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    trailing = _check_trailing(a, b, "add")

    def bw(g):
        return g, (_reduce_to_trailing(g, b.shape[0]) if trailing else g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    trailing = _check_trailing(a, b, "sub")

    def bw(g):
        gb = _reduce_to_trailing(g, b.shape[0]) if trailing else g
        return g, -gb

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    trailing = _check_trailing(a, b, "mul")

    def bw(g):
        ga = g * b.data
        gb = g * a.data
        if trailing:
            gb = _reduce_to_trailing(gb, b.shape[0])
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c):
    """Multiply by a Python constant."""
    a = _as_tensor(a)
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def silu(x):
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bw(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _make(out, (x,), bw, "silu")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x, shape):
    """Explicit broadcast of ``x`` to ``shape`` (numpy rules)."""
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    keep = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if keep:
            g = g.sum(axis=tuple(k - lead for k in keep), keepdims=True)
        return (g,)

    return _make(np.ascontiguousarray(out), (x,), bw, "expand")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# reductions


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def mean(x):
    x = _as_tensor(x)
    n = x.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product.

    ``a`` may carry leading batch dimensions. ``b`` is either a plain
    ``k x n`` matrix shared across the batch, or has exactly the same
    leading dimensions as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    elif a.shape[:-2] == b.shape[:-2]:

        def bw(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    else:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``.

    ``mask`` is a boolean array broadcastable to ``x``; True entries get
    probability exactly 0.
    """
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {x.shape}")
    z = x.data if mask is None else np.where(mask, -np.inf, x.data)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax: empty axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def rmsnorm(x, weight, eps=1e-5):
    """``x / sqrt(mean(x**2) + eps) * weight`` over the last axis."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if eps <= 0:
        raise UsageError("rmsnorm: eps must be positive")
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm: incompatible shapes {x.shape} and {weight.shape}")
    c = x.shape[-1]
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = x.data * r

    def bw(g):
        gw = g * weight.data
        gx = r * gw - xhat * (r * (gw * xhat).sum(axis=-1, keepdims=True) / c)
        return gx, _reduce_to_trailing(g * xhat, c)

    return _make(xhat * weight.data, (x, weight), bw, "rmsnorm")


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; ``ids`` is an integer array."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise UsageError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {weight.shape[0]} rows")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def rope(x, cos, sin):
    """Rotary position encoding on the last axis (half-split pairing).

    ``cos``/``sin`` have shape ``(M, d/2)`` and broadcast over leading axes
    of ``x`` whose last two dims are ``(M, d)``.
    """
    x = _as_tensor(x)
    d = x.shape[-1]
    if d % 2 or cos.shape != (x.shape[-2], d // 2):
        raise ShapeError(f"rope: incompatible shapes {x.shape} and {cos.shape}")
    h = d // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bw(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _make(out.astype(x.dtype, copy=False), (x,), bw, "rope")


def cross_entropy(logits, targets, ignore_index=-100, reduction="mean"):
    """Token-level negative log-likelihood.

    ``logits`` is ``(N, V)`` and ``targets`` ``(N,)``. Positions whose
    target equals ``ignore_index`` contribute exactly zero loss and zero
    gradient. With ``reduction="mean"`` the average runs over the kept
    positions; if none are kept the loss is exactly 0.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: incompatible shapes {logits.shape} and {targets.shape}")
    if reduction not in ("mean", "sum", "none"):
        raise UsageError(f"cross_entropy: unknown reduction {reduction!r}")
    keep = targets != ignore_index
    safe = np.where(keep, targets, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(logits.shape[0])
    nll = np.where(keep, lse - z[rows, safe], 0.0).astype(logits.dtype)
    n_keep = int(keep.sum())
    if reduction == "none":
        out = nll
    elif reduction == "sum":
        out = np.asarray(nll.sum(), dtype=logits.dtype)
    else:
        out = np.asarray(nll.sum() / n_keep if n_keep else 0.0, dtype=logits.dtype)

    def bw(g):
        if reduction == "none":
            w = g
        elif reduction == "sum":
            w = np.full(nll.shape, g, dtype=logits.dtype)
        else:
            w = np.full(nll.shape, g / n_keep if n_keep else 0.0, dtype=logits.dtype)
        w = np.where(keep, w, 0.0).astype(logits.dtype)
        p = np.exp(z - lse[:, None])
        p[rows, safe] -= 1.0
        return (p * w[:, None],)

    return _make(out, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf.

    Returns a dict mapping each leaf tensor to the gradient contributed by
    this call. Accumulation is additive across calls; zero grads yourself.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise UsageError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    contributed = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            contributed[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return contributed


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamWState:
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adamw_step(params, state):
    """One AdamW update in place, using ``p.grad`` of each trainable tensor.

    Weight decay is decoupled: parameters shrink by ``lr * wd * p`` before
    the Adam step. Tensors without ``requires_grad`` are skipped.
    """
    trainable = [p for p in params if p.requires_grad]
    for p in trainable:
        if p.grad is None:
            raise UsageError(f"adamw_step: missing gradient for trainable tensor {p.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in trainable:
        key = id(p)
        m = state.first_moment.get(key)
        if m is None:
            m = state.first_moment[key] = np.zeros_like(p.data)
            state.second_moment[key] = np.zeros_like(p.data)
        v = state.second_moment[key]
        g = p.grad
        dt = p.dtype.type
        if state.weight_decay:
            p.data *= dt(1.0 - state.learning_rate * state.weight_decay)
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * g * g
        p.data -= dt(state.learning_rate) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.epsilon))
    return params, state


class AdamW:
    """Stateful wrapper over ``adamw_step`` for a fixed parameter list."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamWState(lr, weight_decay, betas[0], betas[1], eps)

    def step(self):
        adamw_step(self.params, self.state)

    def zero_grad(self):
        zero_grad(self.params)
