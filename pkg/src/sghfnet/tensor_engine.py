"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its inputs and a backward closure on the output tensor.
``Tensor.backward`` walks the reachable graph in reverse creation order, which
is a valid reverse topological order because an op's output is always created
after its inputs.

Shapes must match exactly for elementwise ops, with one exception: the second
operand may omit leading axes (bias-add over batch axes).  Python scalars are
accepted anywhere a constant operand makes sense.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._id = next(_ids)
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_ids)
        live = tuple(p for p in parents if p.requires_grad)
        if _grad_enabled and live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)
        upstream = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = upstream.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                prev = upstream.get(parent._id)
                upstream[parent._id] = pg if prev is None else prev + pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# -- elementwise --------------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if b.ndim == 0 or a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    if g.shape != shape:  # scalar operand
        g = g.sum().reshape(shape)
    return g


def _binary_operands(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim >= b.ndim:
        _check_broadcast(a.data, b.data, op)
    else:
        _check_broadcast(b.data, a.data, op)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _select(backward, a, b))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _select(backward, a, b))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), _select(backward, a, b))


def _select(backward, *inputs):
    """Adapt a backward over all inputs to the subset that requires grad."""
    mask = [t.requires_grad for t in inputs]
    if all(mask):
        return backward

    def narrowed(g):
        grads = backward(g)
        return tuple(gr for gr, m in zip(grads, mask) if m)

    return narrowed


def _unary(x: Tensor, out: np.ndarray, dfn) -> Tensor:
    def backward(g):
        return (dfn(g),)

    return Tensor._from_op(out, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / x.data
    return _unary(x, out, lambda g: -g * out * out)


def relu(x) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0), lambda g: g * mask)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda g: g * inside)


# -- reductions and shape ops ---------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[index], dtype=np.float64), (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Join along ``axis``; every other dimension must match exactly."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=ax), ts, _select(backward, *ts))


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), _select(backward, a, b))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def _triple(v, rank, name):
    if isinstance(v, int):
        return (v,) * rank
    v = tuple(int(i) for i in v)
    if len(v) != rank:
        raise ShapeError(f"{name} must have {rank} entries, got {v}")
    return v


def conv(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Strided, zero-padded cross-correlation over 2 or 3 spatial dims.

    ``x`` is ``(B, C_in, *spatial)`` and ``kernel`` is ``(C_out, C_in, *k)``.
    Output spatial size is ``(D + 2p - K) // s + 1`` per axis.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    rank = kernel.ndim - 2
    if rank not in (2, 3):
        raise ShapeError(f"conv supports 2-D and 3-D kernels, got kernel shape {kernel.shape}")
    if x.ndim != rank + 2:
        raise ShapeError(f"conv: input rank {x.ndim} does not match {rank}-D kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    stride = _triple(stride, rank, "stride")
    padding = _triple(padding, rank, "padding")
    ksz = kernel.shape[2:]
    spatial = x.shape[2:]
    outsz = []
    for d, k, s, p in zip(spatial, ksz, stride, padding):
        if k > d + 2 * p:
            raise ShapeError(f"conv: kernel {ksz} larger than padded input {spatial} (padding {padding})")
        outsz.append((d + 2 * p - k) // s + 1)
    if rank == 2:
        stride, padding, ksz, outsz = (1,) + stride, (0,) + padding, (1,) + ksz, [1] + outsz
    nb, cin = x.shape[:2]
    cout = kernel.shape[0]
    x5 = x.data.reshape(nb, cin, -1, *x.shape[-2:]) if rank == 3 else x.data[:, :, None]
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x5, pads) if any(padding) else x5
    cols = kernels.im2col3d(xp, *ksz, *stride, *outsz)
    ck = cin * int(np.prod(ksz))
    npos = int(np.prod(outsz))
    cols2 = cols.reshape(nb, ck, npos)
    w2 = kernel.data.reshape(cout, ck)
    out = w2 @ cols2
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv bias must have shape ({cout},), got {bias.shape}")
        out = out + bias.data[:, None]
    out_shape = (nb, cout) + tuple(outsz[1:] if rank == 2 else outsz)
    xshape = x.shape
    padded = xp.shape

    def backward(g):
        g2 = g.reshape(nb, cout, npos)
        gx = gk = gbias = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cols.shape)
            gxp = kernels.col2im3d(gcols, *padded[2:], *stride)
            d0, h0, w0 = padding
            gxp = gxp[:, :, d0:padded[2] - d0, h0:padded[3] - h0, w0:padded[4] - w0]
            gx = gxp.reshape(xshape)
        if kernel.requires_grad:
            gk = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gbias = g2.sum(axis=(0, 2))
        return gx, gk, gbias

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out.reshape(out_shape), parents, _select(backward, *parents))


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5,
               update_stats: bool = True) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode batch statistics are used and, unless ``update_stats`` is
    off, the running buffers are updated in place (unbiased variance, as most
    frameworks do).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ShapeError(f"batch_norm needs (B, C, ...) input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine params must be ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    n = x.size // c
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    if training and update_stats:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    if not training:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), _select(backward, x, gamma, beta))
