"""A small define-by-run reverse-mode differentiation engine over NumPy arrays.

Every operation evaluates eagerly.  When at least one operand requires a
gradient, the result records its parents together with a closure that maps
the output gradient to one gradient per parent.  ``Tensor.backward`` walks
the recorded graph in reverse topological order and accumulates into the
``grad`` of every leaf that requires it.

Custom operators elsewhere in the package are built with :func:`make_node`.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import _kernels

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph edges (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, value, requires_grad=False, name=None, dtype=None):
        if isinstance(value, Tensor):
            value = value.value
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.value

    def item(self):
        return self.value.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.value)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every requiring leaf's ``grad``.

        Only scalars may be differentiated without an explicit seed.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.value)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{node.op}: gradient shape {pg.shape} != operand shape {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root):
    order, seen = [], set()
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def make_node(value, parents, backward_fn, op="custom"):
    """Wrap ``value`` as the output of an operator.

    ``backward_fn(grad_out)`` must return one array (or None) per parent.
    """
    out = Tensor(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    else:
        out.op = op
    return out


def _operands(a, b):
    """Promote python scalars to 0-d arrays of the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = _operands(a, b)
    _check_broadcast("add", a, b)
    return make_node(
        a.value + b.value, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add",
    )


def sub(a, b):
    a, b = _operands(a, b)
    _check_broadcast("sub", a, b)
    return make_node(
        a.value - b.value, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b):
    a, b = _operands(a, b)
    _check_broadcast("mul", a, b)
    return make_node(
        a.value * b.value, (a, b),
        lambda g: (unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)), "mul",
    )


def div(a, b):
    a, b = _operands(a, b)
    _check_broadcast("div", a, b)
    out = a.value / b.value
    return make_node(
        out, (a, b),
        lambda g: (unbroadcast(g / b.value, a.shape), unbroadcast(-g * out / b.value, b.shape)),
        "div",
    )


def neg(a):
    return make_node(-a.value, (a,), lambda g: (-g,), "neg")


def square(a):
    return make_node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def abs_(a):
    return make_node(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def exp(a):
    out = np.exp(a.value)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return make_node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a):
    out = np.sqrt(a.value)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a):
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    e = np.exp(a.value[~pos])
    out[~pos] = e / (1.0 + e)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = _operands(a, b)
    _check_broadcast("minimum", a, b)
    take_a = a.value <= b.value
    return make_node(
        np.where(take_a, a.value, b.value), (a, b),
        lambda g: (unbroadcast(np.where(take_a, g, 0), a.shape),
                   unbroadcast(np.where(take_a, 0, g), b.shape)),
        "minimum",
    )


# -- activations ----------------------------------------------------------

def relu(a):
    mask = a.value > 0
    return make_node(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope=0.01):
    mask = a.value > 0
    scale = np.where(mask, 1.0, slope).astype(a.dtype)
    return make_node(a.value * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def prelu(a, slope):
    """max(0, x) + slope * min(0, x) with a learnable slope tensor (broadcast)."""
    mask = a.value > 0
    neg_part = np.where(mask, 0, a.value)
    out = np.where(mask, a.value, slope.value * a.value)
    return make_node(
        out, (a, slope),
        lambda g: (np.where(mask, g, g * slope.value), unbroadcast(g * neg_part, slope.shape)),
        "prelu",
    )


def maxout(x, pieces):
    """Max over consecutive groups of ``pieces`` along the last axis.

    Ties go to the lowest index within the group, so exactly one piece
    receives the gradient.
    """
    width = x.shape[-1]
    if pieces < 1 or width % pieces:
        raise ValueError(f"maxout: last dimension {width} is not divisible by pieces={pieces}")
    grouped = x.value.reshape(*x.shape[:-1], width // pieces, pieces)
    # reductions over a short trailing axis are slow in NumPy; fold the
    # pieces pairwise instead
    out = grouped[..., 0].copy()
    for i in range(1, pieces):
        np.maximum(out, grouped[..., i], out=out)

    def backward(g):
        gx = np.zeros_like(grouped)
        # strict comparison against the running max lets the lowest index
        # win ties
        best = grouped[..., 0]
        idx = np.zeros(best.shape, dtype=np.intp)
        for i in range(1, pieces):
            better = grouped[..., i] > best
            best = np.where(better, grouped[..., i], best)
            idx[better] = i
        for i in range(pieces):
            gx[..., i] = np.where(idx == i, g, 0)
        return (gx.reshape(x.shape),)

    return make_node(out, (x,), backward, "maxout")


def softmax(x, axis=-1):
    x = as_tensor(x)
    if axis in (-1, x.ndim - 1):
        out = _kernels.softmax_last(x.value)
    else:
        out = x.value - x.value.max(axis=axis, keepdims=True)
        np.exp(out, out=out)
        out *= 1.0 / out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return make_node(out, (x,), backward, "softmax")


def attention_weights(q, k):
    """softmax(q @ k^T) over the last axis for [..., T, d] queries and keys.

    Fusing the product with the softmax lets the logits buffer be
    normalized in place instead of being kept alive by the graph.
    """
    q, k = as_tensor(q), as_tensor(k)
    if q.ndim < 2 or k.ndim < 2 or q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention_weights: incompatible shapes {q.shape} and {k.shape}")
    w = np.matmul(q.value, np.swapaxes(k.value, -1, -2))
    w = _kernels.softmax_last(w, out=w)

    def backward(g):
        dl = g * w
        dl -= w * dl.sum(axis=-1, keepdims=True)
        gq = gk = None
        if q.requires_grad:
            gq = unbroadcast(np.matmul(dl, k.value), q.shape)
        if k.requires_grad:
            gk = unbroadcast(np.matmul(np.swapaxes(dl, -1, -2), q.value), k.shape)
        return gq, gk

    return make_node(w, (q, k), backward, "attention_weights")


# -- reductions -----------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    return make_node(
        np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,),
        lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),), "sum",
    )


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return make_node(
        np.asarray(x.value.mean(axis=axis, keepdims=keepdims)), (x,),
        lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / count,), "mean",
    )


# -- shape manipulation ---------------------------------------------------

def reshape(x, shape):
    return make_node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(
        np.ascontiguousarray(x.value.transpose(axes)), (x,),
        lambda g: (g.transpose(inv),), "transpose",
    )


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice)) for i in items)


def getitem(x, idx):
    basic = _is_basic(idx)

    def backward(g):
        gx = np.zeros_like(x.value)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_node(np.array(x.value[idx]), (x,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        same = [n for i, n in enumerate(t.shape) if i != ax]
        ref = [n for i, n in enumerate(tensors[0].shape) if i != ax]
        if same != ref:
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_node(
        np.concatenate([t.value for t in tensors], axis=ax), tensors,
        lambda g: tuple(np.split(g, sizes, axis=ax)), "concat",
    )


def pad_edge(x, before, after, axis=0):
    """Pad by repeating the first/last slice along ``axis``."""
    ax = axis % x.ndim
    width = [(0, 0)] * x.ndim
    width[ax] = (before, after)
    n = x.shape[ax]

    def backward(g):
        core = np.take(g, np.arange(before, before + n), axis=ax).copy()
        head = np.take(g, np.arange(0, before), axis=ax).sum(axis=ax)
        tail = np.take(g, np.arange(before + n, before + n + after), axis=ax).sum(axis=ax)
        sl_first = [slice(None)] * x.ndim
        sl_first[ax] = 0
        sl_last = [slice(None)] * x.ndim
        sl_last[ax] = n - 1
        core[tuple(sl_first)] += head
        core[tuple(sl_last)] += tail
        return (core,)

    return make_node(np.pad(x.value, width, mode="edge"), (x,), backward, "pad_edge")


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """Matrix product with NumPy batching rules (both operands >= 2-d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.value, b.value)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """x @ weight + bias with weight stored as [in, out]."""
    if bias is None:
        return matmul(x, weight)
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    y = matmul(x, weight)
    if bias.dtype != y.dtype or bias.ndim > 1:
        return add(y, bias)
    # the product is a fresh array, so the bias goes in without a copy
    out = y.value
    out += bias.value

    def backward(g):
        ga = gb = gc = None
        if x.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(weight.value, -1, -2)), x.shape)
        if weight.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(x.value, -1, -2), g), weight.shape)
        if bias.requires_grad:
            gc = unbroadcast(g, bias.shape)
        return ga, gb, gc

    return make_node(out, (x, weight, bias), backward, "linear")


def _tap_rows(xp, k, t_out, stride):
    # rows k, k + stride, ... feeding tap k of every output frame
    rows = xp[k:k + (t_out - 1) * stride + 1:stride]
    return rows if stride == 1 else np.ascontiguousarray(rows)


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Temporal convolution (cross-correlation) of ``x`` [T, C_in] with
    ``weight`` [C_out, C_in, K]; zero padding on both ends.  Returns
    [T_out, C_out] with T_out = (T + 2*padding - K) // stride + 1.

    Computed as one matrix product per tap on shifted row slices, which
    avoids materializing the [T_out, C_in*K] window matrix.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv1d: incompatible shapes {x.shape} and {weight.shape}")
    T, cin = x.shape
    cout, _, K = weight.shape
    if T + 2 * padding < K:
        raise ValueError(f"conv1d: input length {T} (padding {padding}) shorter than kernel {K}")
    xp = np.pad(x.value, ((padding, padding), (0, 0))) if padding else x.value
    t_out = (xp.shape[0] - K) // stride + 1
    # [K, C_in, C_out], contiguous so every product goes through BLAS
    taps = np.ascontiguousarray(weight.value.transpose(2, 1, 0))
    out = _tap_rows(xp, 0, t_out, stride) @ taps[0]
    for k in range(1, K):
        out += _tap_rows(xp, k, t_out, stride) @ taps[k]
    if bias is not None:
        out += bias.value

    def backward(g):
        gx = gw = gb = None
        g = np.ascontiguousarray(g)
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=g.dtype)
            for k in range(K):
                gw[:, :, k] = g.T @ _tap_rows(xp, k, t_out, stride)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=0)
        if x.requires_grad:
            # full correlation of the stride-dilated output gradient with the
            # flipped, channel-swapped kernel, accumulated one tap at a time
            gxp = np.zeros_like(xp)
            span = (t_out - 1) * stride + 1
            for k in range(K):
                gxp[k:k + span:stride] += g @ taps[k].T
            gx = gxp[padding:padding + T] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv1d")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    mu = x.value.sum(axis=-1, keepdims=True)
    mu /= d
    xhat = x.value - mu
    var = np.square(xhat).sum(axis=-1, keepdims=True)
    var /= d
    var += eps
    inv = np.sqrt(var, out=var)
    np.divide(1.0, inv, out=inv)
    xhat *= inv
    out = xhat * gamma.value
    out += beta.value

    def backward(g):
        gg = unbroadcast(g * xhat, gamma.shape)
        gb = unbroadcast(g, beta.shape)
        gh = g * gamma.value
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), backward, "layer_norm")
