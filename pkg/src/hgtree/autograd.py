"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each differentiable op returns a :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients.  ``backward``
walks the recorded graph once in reverse topological order and then frees it,
so every training step records a fresh tape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import GradientError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    # ---- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = b
        return _make(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    inner = x2 * 0.044715
    inner += 1.0
    inner *= xd
    inner *= _GELU_C
    th = np.tanh(inner, out=inner)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) C (1 + 3 * 0.044715 x^2)
        dinner = x2 * (3 * 0.044715)
        dinner += 1.0
        dinner *= _GELU_C
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        dinner *= sech2
        dinner *= xd
        dinner += th
        dinner += 1.0
        dinner *= 0.5
        dinner *= g
        return (dinner,)

    return _make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: shapes {x.shape} and {mask.shape} do not broadcast") from None
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)

    def bw(g):
        return (_unbroadcast(np.where(mask, 0.0, g), x.shape).astype(g.dtype, copy=False),)

    return _make(out, (x,), bw)


# ---- reductions and shape ops --------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def slice_(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {tuple(ref)} and {tuple(other)} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def mean_pool(x: Tensor, k: int, axis: int = -2) -> Tensor:
    """Mean over consecutive, non-overlapping groups of ``k`` along ``axis``."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if n % k:
        raise ShapeError(f"mean_pool: length {n} not divisible by {k} (shape {x.shape})")
    shape = x.shape[:ax] + (n // k, k) + x.shape[ax + 1:]
    out = x.data.reshape(shape).mean(axis=ax + 1)

    def bw(g):
        return (np.repeat(g, k, axis=ax) / k,)

    return _make(out, (x,), bw)


def repeat_expand(x: Tensor, k: int, axis: int = -2) -> Tensor:
    """Duplicate every element ``k`` times along ``axis``: [a, b] -> [a, a, b, b]."""
    ax = axis % x.ndim
    out = np.repeat(x.data, k, axis=ax)

    def bw(g):
        n = x.shape[ax]
        shape = g.shape[:ax] + (n, k) + g.shape[ax + 1:]
        return (g.reshape(shape).sum(axis=ax + 1),)

    return _make(out, (x,), bw)


def shift(x: Tensor, n: int, fill: Tensor | None = None, axis: int = -2) -> Tensor:
    """Shift along ``axis`` by ``n`` (positive = towards later positions).

    Vacated slots take ``fill`` (broadcast to one slot) or zeros."""
    if n == 0:
        return x
    ax = axis % x.ndim
    length = x.shape[ax]
    m = min(abs(n), length)
    pad_shape = x.shape[:ax] + (m,) + x.shape[ax + 1:]
    if fill is None:
        pad = Tensor(np.zeros(pad_shape, dtype=x.dtype))
    else:
        pad = add(Tensor(np.zeros(pad_shape, dtype=x.dtype)), fill)
    idx = [slice(None)] * x.ndim
    if n > 0:
        idx[ax] = slice(0, length - m)
        return concat([pad, slice_(x, tuple(idx))], axis=ax)
    idx[ax] = slice(m, length)
    return concat([slice_(x, tuple(idx)), pad], axis=ax)


# ---- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operand (shapes {a.shape} and {b.shape})")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ad, bd = a.data, b.data
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold batch dims into one matmul
            a2 = ad.reshape(-1, ad.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            return g @ bd.T, a2.T @ g2
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if bd.ndim >= 2 else np.multiply.outer(g, bd)
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if ad.ndim >= 2 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---- normalization / probabilities --------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def bw(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside table of {table.shape[0]} rows")
    out = table.data[ids]

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), bw)


def causal_mask(n_q: int, n_k: int, q_offset: int | None = None) -> np.ndarray:
    """True where attention is forbidden.  Query i sits at key position q_offset + i."""
    if q_offset is None:
        q_offset = n_k - n_q
    qi = np.arange(n_q)[:, None] + q_offset
    kj = np.arange(n_k)[None, :]
    return kj > qi


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax attention ``softmax(q k^T / sqrt(d) + mask) v`` with a materialized
    probability matrix; ``mask`` is True where a query may not look.

    Shapes: q ``(..., Tq, d)``, k/v ``(..., Tk, d)``.  Leading dims are processed
    one slice at a time to keep each score matrix cache-sized."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2])
    Tq, Tk, d = q.shape[-2], k.shape[-2], q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    qd = np.broadcast_to(q.data, lead + (Tq, d)).reshape(-1, Tq, d)
    kd = np.broadcast_to(k.data, lead + (Tk, d)).reshape(-1, Tk, d)
    vd = np.broadcast_to(v.data, lead + (Tk, v.shape[-1])).reshape(-1, Tk, v.shape[-1])
    dtype = np.result_type(qd, kd, vd)
    bias = None
    if mask is not None:
        bias = np.where(mask, -np.inf, 0.0).astype(dtype)
    N = qd.shape[0]
    p = np.empty((N, Tq, Tk), dtype=dtype)
    out = np.empty((N, Tq, vd.shape[-1]), dtype=dtype)
    for n in range(N):
        s = p[n]
        np.matmul(qd[n] * scale, kd[n].T, out=s)
        if bias is not None:
            s += bias
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        np.matmul(s, vd[n], out=out[n])

    def bw(g):
        g = np.broadcast_to(g, lead + (Tq, vd.shape[-1])).reshape(N, Tq, -1)
        gq = np.empty_like(qd, dtype=dtype)
        gk = np.empty((N, Tk, d), dtype=dtype)
        gv = np.empty((N, Tk, vd.shape[-1]), dtype=dtype)
        for n in range(N):
            pn = p[n]
            np.matmul(pn.T, g[n], out=gv[n])
            gp = g[n] @ vd[n].T
            rowdot = np.einsum("ij,ij->i", gp, pn)
            gp -= rowdot[:, None]
            gp *= pn
            gp *= scale
            np.matmul(gp, kd[n], out=gq[n])
            np.matmul(gp.T, qd[n], out=gk[n])
        shape_out = lead
        gq = _unbroadcast(gq.reshape(shape_out + (Tq, d)), q.shape)
        gk = _unbroadcast(gk.reshape(shape_out + (Tk, d)), k.shape)
        gv = _unbroadcast(gv.reshape(shape_out + (Tk, vd.shape[-1])), v.shape)
        return gq, gk, gv

    return _make(out.reshape(lead + (Tq, vd.shape[-1])), (q, k, v), bw)


def attention_reference(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Same as :func:`attention`, composed from primitive ops (used as an oracle)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = mul(matmul(q, swapaxes(k, -1, -2)), scale)
    if mask is not None:
        s = masked_fill(s, mask, -1e30 if s.dtype == np.float64 else -1e9)
    return matmul(softmax(s, -1), v)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is True."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    weight = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    count = weight.sum()
    if count <= 0:
        from .errors import EmptyLossError

        raise EmptyLossError("every position is masked")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * weight).sum() / count

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (weight / count * g)[..., None],)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---- backward ------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order, visited, on_stack = [], set(), set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            on_stack.discard(id(node))
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        on_stack.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) in on_stack:
                raise GradientError("cycle in recorded graph")
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root._consumed:
        raise GradientError("backward already ran on this graph; record a new forward pass")
    if grad is None:
        if root.data.size != 1:
            raise GradientError(f"backward needs a scalar, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        root._consumed = True
        return
    grads = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    root._consumed = True
