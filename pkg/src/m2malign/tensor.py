"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array in the package is a `Tensor`: a C-contiguous float64 ndarray of
rank 0..5 (rank 0 holds scalars such as losses).  Operations build a
define-by-run graph whenever an input requires gradients; `GradientTape`
collects adjoints for watched parameters by walking that graph backwards.

There is no global state: graphs hang off the output tensors themselves and
a tape only bookkeeps which leaf tensors the caller cares about.  Tensors
are value-semantic (mutate `.data` only between training steps).
"""

import numpy as np
from scipy.special import erf

from .errors import ContractError, MissingAdjointError, ShapeError

MAX_RANK = 5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array plus optional autodiff bookkeeping.

    Leaf tensors created with ``requires_grad=True`` are trainable
    parameters; tensors produced by operations carry references to their
    parents and a backward closure.
    """

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum {MAX_RANK}")
        # np.ascontiguousarray implies ndmin=1 and would silently promote
        # scalars to rank 1, so rank 0 is handled on its own.
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self):
        """A defensive copy of the underlying array."""
        return self.data.copy()

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar -------------------------------------------------

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

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _scalar_error(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(value):
    """Wrap plain arrays/scalars as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _from_op(a.data / b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


# -- matmul and shape manipulation ---------------------------------------


def matmul(a, b):
    """Matrix product with broadcast batch axes; both operands need rank >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _from_op(a.data @ b.data, (a, b), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    perm = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(perm)

    def backward(g):
        return (g.transpose(inv),)

    return _from_op(a.data.transpose(perm), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _from_op(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0):
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat of an empty sequence")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _from_op(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def stack(tensors, axis=0):
    parts = [as_tensor(t) for t in tensors]
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


def gather_rows(a, indices):
    """Select rows along axis 0; the backward pass scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index vector")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _from_op(a.data[idx], (a,), backward)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return (out,)

    return _from_op(a.data[sl], (a,), backward)


# -- reductions -----------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# -- nonlinearities --------------------------------------------------------


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _from_op(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = as_tensor(a)
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _from_op(out_data, (a,), lambda g: (g / (2.0 * out_data),))


def gelu(a):
    """Gaussian-CDF gated activation, 0.5*x*(1+erf(x/sqrt(2))), exact erf form."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _from_op(a.data * cdf, (a,), backward)


def softmax_last(a):
    """Softmax over the last axis, stabilised by max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return ((g - inner) * out_data,)

    return _from_op(out_data, (a,), backward)


def softmax_rows(m):
    """Row-wise softmax of a rank-2 tensor; each output row sums to one."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 tensor, got shape {m.shape}")
    return softmax_last(m)


# -- backward machinery ----------------------------------------------------


def _topo_order(root):
    """Parents-before-children ordering via iterative postorder DFS."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


class GradientTape:
    """Tracks which leaf tensors gradients should be reported for.

    The computation graph itself lives on the tensors; the tape records the
    watched parameter set, walks the graph from a scalar loss, and returns
    one adjoint per watched parameter (zeros when the loss does not depend
    on it).  Confine a tape to a single thread.
    """

    def __init__(self):
        self._watched = {}

    def watch(self, *tensors):
        for t in tensors:
            if isinstance(t, Tensor):
                self._watched[id(t)] = t
            else:
                for u in t:
                    self.watch(u)
        return self

    def gradients(self, loss, params=None):
        """Adjoints of `loss` (a scalar tensor) per watched parameter.

        Returns a dict keyed by the parameter tensors themselves.  With
        `params` given, exactly those tensors are reported and any tensor
        that is neither watched nor part of the loss graph raises
        MissingAdjointError.
        """
        if not isinstance(loss, Tensor):
            raise ContractError("loss must be a Tensor")
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")

        adjoints = {id(loss): np.ones_like(loss.data)}
        nodes = {id(loss): loss}
        for node in reversed(_topo_order(loss)):
            g = adjoints.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                nodes[pid] = parent
                if pid in adjoints:
                    adjoints[pid] = adjoints[pid] + pg
                else:
                    adjoints[pid] = pg

        targets = self._watched if params is None else {id(p): p for p in params}
        out = {}
        for pid, p in targets.items():
            if pid in adjoints:
                out[p] = np.asarray(adjoints[pid])
            elif pid in self._watched:
                out[p] = np.zeros_like(p.data)
            else:
                raise MissingAdjointError(
                    f"parameter {p.name or '<unnamed>'} is not on the tape"
                )
        return out


def backward(loss, tape, params=None):
    """Adjoints of a scalar `loss` for every parameter watched by `tape`."""
    return tape.gradients(loss, params)
