"""Minimal dense-tensor engine with reverse-mode gradients.

Just enough autodiff for a small convnet and the two classification
heads: every operation is a numpy forward plus a closure that maps the
output gradient back onto the inputs.  Tensors default to float32;
float64 inputs stay float64 so numerical checks can run the same graph
at higher precision.
"""

from __future__ import annotations

import builtins
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "ComputeGraph",
    "ShapeError",
    "as_tensor",
    "backward",
    "primitive_forward",
    "PRIMITIVES",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "power",
    "log",
    "exp",
    "reshape",
    "mean",
    "sum",
    "clip",
    "l2_normalize",
    "batchnorm",
    "max_pool",
    "conv2d",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class _OpNode:
    """Backward record: operation kind, inputs, and the gradient closure.

    ``grad_fn(out_grad)`` returns one gradient array per input (or None
    for inputs that do not need one).
    """

    __slots__ = ("kind", "inputs", "grad_fn")

    def __init__(self, kind: str, inputs: tuple, grad_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """Dense N-dimensional float array with optional gradient tracking.

    ``data`` is a contiguous numpy array (float32 by default), ``grad``
    is lazily allocated with the same shape during backward.  Tensors
    produced by primitives carry an op record linking them into the
    compute graph; leaves have ``op is None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[_OpNode] = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values, cut loose from the graph."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(ComputeGraph.trace(self), self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ComputeGraph:
    """Topologically ordered record of the ops reachable from an output.

    Built by depth-first traversal of op records, so every node's inputs
    appear before the node itself.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "ComputeGraph":
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.op is not None:
                for inp in t.op.inputs:
                    if id(inp) not in seen:
                        stack.append((inp, False))
        return cls(nodes)

    def backward(self, loss: Tensor):
        backward(self, loss)


def backward(graph: ComputeGraph, loss: Tensor):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    Gradients accumulate additively, so a tensor used on several paths
    receives the sum of its path gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for t in reversed(graph.nodes):
        if t.op is None or t.grad is None:
            continue
        grads = t.op.grad_fn(t.grad)
        for inp, g in builtins.zip(t.op.inputs, grads):
            if g is None:
                continue
            if not (inp.requires_grad or inp.op is not None):
                continue
            if g.shape != inp.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match tensor {inp.data.shape}"
                )
            if inp.grad is None:
                # Safe to alias: grads are only ever read or replaced by a
                # freshly allocated sum, never mutated in place.
                inp.grad = np.asarray(g, dtype=inp.data.dtype)
            else:
                inp.grad = inp.grad + g


def _make(data: np.ndarray, kind: str, inputs: tuple, grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(i.requires_grad for i in inputs)
    out.grad = None
    out.op = _OpNode(kind, inputs, grad_fn) if _any_tracked(inputs) else None
    return out


def _any_tracked(inputs: tuple) -> bool:
    return any(i.requires_grad or i.op is not None for i in inputs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), grad_fn)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(data, "mul", (a, b), grad_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return add(a, mul(b, -1.0))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, "matmul", (a, b), grad_fn)


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def grad_fn(g):
        return (g * (a.data > 0),)

    return _make(data, "relu", (a,), grad_fn)


def power(base: TensorLike, exponent: TensorLike) -> Tensor:
    """``base ** exponent`` with gradients for both operands.

    The exponent gradient needs ``log(base)``, so a tracked exponent
    requires strictly positive base values.
    """
    a, b = as_tensor(base), as_tensor(exponent)
    exp_tracked = b.requires_grad or b.op is not None
    if exp_tracked and np.any(a.data <= 0):
        raise ValueError("power: tracked exponent requires base > 0")
    try:
        data = a.data ** b.data
    except ValueError as e:
        raise ShapeError(f"power: cannot broadcast {a.shape} with {b.shape}") from e

    def grad_fn(g):
        ga = _unbroadcast(g * b.data * a.data ** (b.data - 1), a.shape)
        gb = None
        if exp_tracked:
            gb = _unbroadcast(g * data * np.log(a.data), b.shape)
        return ga, gb

    return _make(data, "power", (a, b), grad_fn)


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    data = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make(data, "log", (a,), grad_fn)


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def grad_fn(g):
        return (g * data,)

    return _make(data, "exp", (a,), grad_fn)


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(data, "reshape", (a,), grad_fn)


def _reduce(a: Tensor, axis, keepdims, kind):
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if kind == "mean":
        data = a.data.mean(axis=axes, keepdims=keepdims)
    else:
        data = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        g = np.broadcast_to(g, a.shape)
        if kind == "mean":
            g = g / count
        return (np.ascontiguousarray(g),)

    return _make(data, kind, (a,), grad_fn)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(as_tensor(a), axis, keepdims, "mean")


def sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _reduce(as_tensor(a), axis, keepdims, "sum")


def clip(a: TensorLike, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only inside the range."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def grad_fn(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _make(data, "clip", (a,), grad_fn)


def l2_normalize(a: TensorLike, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    A zero-norm slice has no defined direction and is rejected.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise ValueError("l2_normalize: zero-norm slice")
    data = a.data / norm

    def grad_fn(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - data * dot) / norm,)

    return _make(data, "l2_normalize", (a,), grad_fn)


def batchnorm(
    x: TensorLike,
    gamma: TensorLike,
    beta: TensorLike,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over the leading (batch) axis of a 2-D input.

    Train mode normalizes with batch statistics and folds them into the
    running estimates in place (unbiased variance, momentum weighting);
    eval mode uses the running estimates unchanged.  A train-mode batch
    of one sample has no variance estimate and is rejected.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm expects (N, D) input, got {x.shape}")
    n, d = x.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("batchnorm: gamma/beta must have shape (D,)")
    if training:
        if n < 2:
            raise ValueError("batchnorm: train mode needs batch size >= 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)

        def grad_fn(g):
            dxhat = g * gamma.data
            dx = (
                dxhat
                - dxhat.mean(axis=0)
                - xhat * (dxhat * xhat).mean(axis=0)
            ) * inv_std
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv_std

        def grad_fn(g):
            return g * gamma.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    data = xhat * gamma.data + beta.data
    return _make(data, "batchnorm", (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW layout)


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Unfold a padded NHWC input into (N*oh*ow, kh*kw*C) patch rows.

    Channels-last keeps the innermost copy axis contiguous, which is what
    makes the unfold (and the fold below) run at memory bandwidth.
    """
    n, _, _, c = xh.shape
    windows = np.lib.stride_tricks.sliding_window_view(xh, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)


def _col2im(cols: np.ndarray, xh_shape, kh, kw, stride, oh, ow) -> np.ndarray:
    """Fold (N*oh*ow, kh*kw*C) patch-row gradients back onto the padded
    NHWC input, summing overlaps.

    For stride > 1 the destination rows/cols split into ``stride`` phases
    that never interleave, so each phase is accumulated densely and then
    written through one strided assignment instead of kh*kw strided adds.
    """
    n, hp, wp, c = xh_shape
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    if stride > 1 and stride <= kh and stride <= kw:
        # every phase below gets assigned, so skip the zero fill
        xg = np.empty(xh_shape, dtype=cols.dtype)
    else:
        xg = np.zeros(xh_shape, dtype=cols.dtype)
    if stride == 1:
        for ki in range(kh):
            for kj in range(kw):
                xg[:, ki : ki + oh, kj : kj + ow, :] += cols[:, :, :, ki, kj, :]
        return xg
    for pi in range(stride):
        kis = [ki for ki in range(kh) if ki % stride == pi]
        if not kis:
            continue
        ph = (hp - pi + stride - 1) // stride
        for pj in range(stride):
            kjs = [kj for kj in range(kw) if kj % stride == pj]
            if not kjs:
                continue
            pw = (wp - pj + stride - 1) // stride
            phase = np.zeros((n, ph, pw, c), dtype=cols.dtype)
            for ki in kis:
                oi = ki // stride
                for kj in kjs:
                    oj = kj // stride
                    phase[:, oi : oi + oh, oj : oj + ow, :] += cols[:, :, :, ki, kj, :]
            xg[:, pi::stride, pj::stride, :] = phase
    return xg


def conv2d(
    x: TensorLike,
    kernel: TensorLike,
    bias: Optional[TensorLike] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-D cross-correlation of an (N,C,H,W) batch with (K,C,kh,kw) filters."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}"
        )
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * pad}x{w + 2 * pad}"
        )
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        xh = np.empty((n, h + 2 * pad, w + 2 * pad, c), dtype=x.data.dtype)
        xh[:, :pad] = 0
        xh[:, pad + h :] = 0
        xh[:, pad : pad + h, :pad] = 0
        xh[:, pad : pad + h, pad + w :] = 0
        xh[:, pad : pad + h, pad : pad + w, :] = x.data.transpose(0, 2, 3, 1)
    else:
        xh = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    cols = _im2col(xh, kh, kw, stride, oh, ow)
    w_mat = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(
        kh * kw * c, k
    )
    out_mat = cols @ w_mat
    b = as_tensor(bias) if bias is not None else None
    if b is not None:
        if b.shape != (k,):
            raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({k},)")
        out_mat += b.data
    out = np.ascontiguousarray(out_mat.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))
    inputs = (x, kernel) if b is None else (x, kernel, b)
    x_tracked = x.requires_grad or x.op is not None

    def grad_fn(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, k)
        gw = np.ascontiguousarray(
            (cols.T @ g_mat).reshape(kh, kw, c, k).transpose(3, 2, 0, 1)
        )
        if x_tracked:
            gxh = _col2im(g_mat @ w_mat.T, xh.shape, kh, kw, stride, oh, ow)
            if pad:
                gxh = gxh[:, pad : pad + h, pad : pad + w, :]
            gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        else:
            gx = None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, "conv2d", inputs, grad_fn)


def max_pool(x: TensorLike, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling over non-overlapping or strided square windows (NCHW)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool expects 4-D input, got {x.shape}")
    stride = stride or kernel
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"max_pool: kernel {kernel} larger than input {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    patches = np.empty((kernel * kernel, n, c, oh, ow), dtype=x.data.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            patches[ki * kernel + kj] = x.data[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ]
    argmax = patches.argmax(axis=0)
    data = patches.max(axis=0)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        for p in range(kernel * kernel):
            mask = argmax == p
            if not mask.any():
                continue
            ki, kj = divmod(p, kernel)
            gx[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ] += g * mask
        return (gx,)

    return _make(data, "max_pool", (x,), grad_fn)


# registry for dispatch-style access and for iterating in checks
PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "power": power,
    "log": log,
    "exp": exp,
    "reshape": reshape,
    "mean": mean,
    "sum": sum,
    "clip": clip,
    "l2_normalize": l2_normalize,
    "batchnorm": batchnorm,
    "max_pool": max_pool,
    "conv2d": conv2d,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; tracked inputs are recorded in the graph."""
    if op_kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive {op_kind!r}")
    return PRIMITIVES[op_kind](*inputs, **kwargs)
