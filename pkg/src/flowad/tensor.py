"""Dense tensors with reverse-mode automatic differentiation.

Storage is float64 numpy. The engine is deliberately small: elementwise
ops, 2-D matmul, reductions, and a handful of structural ops (reshape,
transpose, concat, narrow) plus two explicit row/column helpers
(`add_bias`, `scale_rows`) instead of general broadcasting. Binary ops
accept tensors of identical shape, a python scalar, or a size-1 tensor;
anything else is a ShapeError. Callers reshape explicitly.

Gradients accumulate on leaves: calling backward() twice without
zero_grad() doubles leaf gradients. Intermediate gradients live in a
per-call buffer, so repeated backward passes stay correct.
"""

from __future__ import annotations

import contextlib

import numpy as np


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class DomainError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_op", "_backward_calls")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._backward_calls = 0
        _check_finite(self.data, "leaf")

    # -- introspection -----------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={'set' if self.grad is not None else 'none'})"

    def zero_grad(self):
        self.grad = None

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar output.

        Each graph node is processed exactly once (topological order);
        leaf gradients accumulate across calls until zero_grad().
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            node._backward_calls += 1
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, grads)
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar ------------------------------------------------------

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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def max(self, axes=None):
        return reduce_max(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    out._parents = tuple(parents) if rg else ()
    out._backward = backward if rg else None
    out._op = op
    out._backward_calls = 0
    _check_finite(data, op)
    return out


def _acc(grads, parent, g):
    if not parent.requires_grad:
        return
    pid = id(parent)
    if pid in grads:
        grads[pid] = grads[pid] + g
    else:
        grads[pid] = g


def _reduce_to(g, shape):
    # collapse a full-shape gradient back onto a size-1 operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _binary_operands(a, b, op):
    """Normalize operands: equal shapes or one side scalar (python number
    or size-1 tensor). Returns (a_t, b_t, a_data, b_data) with tensors
    possibly None for constant sides."""
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    if a_t is None and b_t is None:
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    a_d = a_t.data if a_t is not None else np.asarray(a, dtype=np.float64)
    b_d = b_t.data if b_t is not None else np.asarray(b, dtype=np.float64)
    if a_d.shape != b_d.shape and a_d.size != 1 and b_d.size != 1:
        raise ShapeError(f"{op}: shapes {a_d.shape} and {b_d.shape} do not match "
                         "(only scalar-vs-tensor broadcasting is supported)")
    return a_t, b_t, a_d, b_d


# -- elementwise binary ops --------------------------------------------------

def add(a, b):
    a_t, b_t, a_d, b_d = _binary_operands(a, b, "add")
    out_d = a_d + b_d

    def bw(g, grads):
        if a_t is not None:
            _acc(grads, a_t, _reduce_to(g, a_d.shape))
        if b_t is not None:
            _acc(grads, b_t, _reduce_to(g, b_d.shape))

    return _result(out_d, [t for t in (a_t, b_t) if t is not None], bw, "add")


def sub(a, b):
    a_t, b_t, a_d, b_d = _binary_operands(a, b, "sub")
    out_d = a_d - b_d

    def bw(g, grads):
        if a_t is not None:
            _acc(grads, a_t, _reduce_to(g, a_d.shape))
        if b_t is not None:
            _acc(grads, b_t, _reduce_to(-g, b_d.shape))

    return _result(out_d, [t for t in (a_t, b_t) if t is not None], bw, "sub")


def mul(a, b):
    a_t, b_t, a_d, b_d = _binary_operands(a, b, "mul")
    out_d = a_d * b_d

    def bw(g, grads):
        if a_t is not None:
            _acc(grads, a_t, _reduce_to(g * b_d, a_d.shape))
        if b_t is not None:
            _acc(grads, b_t, _reduce_to(g * a_d, b_d.shape))

    return _result(out_d, [t for t in (a_t, b_t) if t is not None], bw, "mul")


def div(a, b):
    a_t, b_t, a_d, b_d = _binary_operands(a, b, "div")
    if np.any(b_d == 0.0):
        raise DomainError("div: zero denominator")
    out_d = a_d / b_d

    def bw(g, grads):
        if a_t is not None:
            _acc(grads, a_t, _reduce_to(g / b_d, a_d.shape))
        if b_t is not None:
            _acc(grads, b_t, _reduce_to(-g * a_d / (b_d * b_d), b_d.shape))

    return _result(out_d, [t for t in (a_t, b_t) if t is not None], bw, "div")


# -- elementwise unary ops ----------------------------------------------------

def negate(a):
    def bw(g, grads):
        _acc(grads, a, -g)

    return _result(-a.data, [a], bw, "negate")


def exp(a):
    with np.errstate(over="ignore"):
        out_d = np.exp(a.data)

    def bw(g, grads):
        _acc(grads, a, g * out_d)

    return _result(out_d, [a], bw, "exp")


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    out_d = np.log(a.data)

    def bw(g, grads):
        _acc(grads, a, g / a.data)

    return _result(out_d, [a], bw, "log")


def sqrt(a):
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    out_d = np.sqrt(a.data)

    def bw(g, grads):
        _acc(grads, a, g / (2.0 * out_d))

    return _result(out_d, [a], bw, "sqrt")


def tanh(a):
    out_d = np.tanh(a.data)

    def bw(g, grads):
        _acc(grads, a, g * (1.0 - out_d * out_d))

    return _result(out_d, [a], bw, "tanh")


def relu(a):
    out_d = np.maximum(a.data, 0.0)

    def bw(g, grads):
        _acc(grads, a, g * (a.data > 0.0))

    return _result(out_d, [a], bw, "relu")


def affine(a, scale, shift):
    """scale * a + shift with python-number coefficients."""
    scale = float(scale)
    shift = float(shift)
    out_d = scale * a.data + shift

    def bw(g, grads):
        _acc(grads, a, g * scale)

    return _result(out_d, [a], bw, "affine")


# -- matmul and row/column helpers --------------------------------------------

def matmul(a, b):
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise TypeError("matmul: both operands must be Tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul: 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    out_d = a.data @ b.data

    def bw(g, grads):
        _acc(grads, a, g @ b.data.T)
        _acc(grads, b, a.data.T @ g)

    return _result(out_d, [a, b], bw, "matmul")


def add_bias(x, b):
    """Add a length-N bias row to every row of an (M, N) matrix."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    out_d = x.data + b.data[None, :]

    def bw(g, grads):
        _acc(grads, x, g)
        _acc(grads, b, g.sum(axis=0))

    return _result(out_d, [x, b], bw, "add_bias")


def scale_rows(x, s):
    """Multiply row i of an (M, N) matrix by s[i]."""
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: {x.shape} * {s.shape}")
    out_d = x.data * s.data[:, None]

    def bw(g, grads):
        _acc(grads, x, g * s.data[:, None])
        _acc(grads, s, (g * x.data).sum(axis=1))

    return _result(out_d, [x, s], bw, "scale_rows")


# -- reductions ----------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError("reduce: repeated axis")
    return axes


def reduce_sum(a, axes=None):
    if a.size == 0:
        raise ShapeError("reduce: empty tensor")
    axes = _norm_axes(axes, a.ndim)
    out_d = a.data.sum(axis=axes)
    kd_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g, grads):
        _acc(grads, a, np.broadcast_to(g.reshape(kd_shape), a.shape))

    return _result(np.asarray(out_d), [a], bw, "sum")


def reduce_mean(a, axes=None):
    if a.size == 0:
        raise ShapeError("reduce: empty tensor")
    axes = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_d = a.data.mean(axis=axes)
    kd_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g, grads):
        _acc(grads, a, np.broadcast_to(g.reshape(kd_shape) / count, a.shape))

    return _result(np.asarray(out_d), [a], bw, "mean")


def reduce_max(a, axes=None):
    """Max over axes. Backward routes the gradient to the first (C-order)
    maximal element of each reduced slice."""
    if a.size == 0:
        raise ShapeError("reduce: empty tensor")
    axes = _norm_axes(axes, a.ndim)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    moved = np.moveaxis(a.data, axes, range(len(kept), a.ndim))
    kept_shape = moved.shape[:len(kept)]
    flat = moved.reshape(int(np.prod(kept_shape)) if kept_shape else 1, -1)
    arg = flat.argmax(axis=1)
    out_d = flat[np.arange(flat.shape[0]), arg].reshape(kept_shape)

    def bw(g, grads):
        gf = np.zeros_like(flat)
        gf[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        gm = gf.reshape(moved.shape)
        _acc(grads, a, np.moveaxis(gm, range(len(kept), a.ndim), axes))

    return _result(np.asarray(out_d), [a], bw, "max")


# -- structural ops -------------------------------------------------------------

def reshape(a, shape):
    out_d = a.data.reshape(shape)

    def bw(g, grads):
        _acc(grads, a, g.reshape(a.shape))

    return _result(out_d, [a], bw, "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out_d = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g, grads):
        _acc(grads, a, np.transpose(g, inv))

    return _result(out_d, [a], bw, "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty list")
    out_d = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g, grads):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(grads, t, g[tuple(idx)])

    return _result(out_d, tensors, bw, "concat")


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of axis size {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_d = np.ascontiguousarray(a.data[idx])

    def bw(g, grads):
        full = np.zeros_like(a.data)
        full[idx] = g
        _acc(grads, a, full)

    return _result(out_d, [a], bw, "narrow")
