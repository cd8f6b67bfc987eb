"""Dense float64 tensors with a small reverse-mode autodiff engine.

Only the operations needed by the regularizer, the reference models and the
benchmark are provided.  Every op returns a new ``Tensor``; inputs are never
mutated.  Gradients are collected by replaying a :class:`Tape` in reverse
topological order and accumulated into ``.grad`` of leaf tensors.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "MacCounter",
    "count_macs",
    "backward",
    "matmul",
    "gram",
    "transpose",
    "reshape",
    "permute",
    "add",
    "sub",
    "scalar_mul",
    "relu",
    "sub_identity",
    "frobenius_sq",
    "batch_frobenius_sq",
    "tensor_sum",
    "gather_columns",
    "im2col",
    "conv2d",
    "global_avg_pool",
    "group_norm",
    "softmax_cross_entropy",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense n-d float64 array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("elementwise tensor product is not supported; use scalar_mul")
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Operations reachable from an output, ordered inputs-before-outputs."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        adjoints: dict[int, np.ndarray] = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adjoints[key] = adjoints[key] + pg if key in adjoints else pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.  Accumulates."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape(loss).replay(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# MAC instrumentation


class MacCounter:
    """Counts schoolbook multiply-accumulates issued by forward matmuls."""

    def __init__(self) -> None:
        self.macs = 0
        self.calls = 0


_local = threading.local()


def _active_counters() -> list[MacCounter]:
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    return stack


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Record forward matmul MACs issued by the current thread."""
    counter = MacCounter()
    stack = _active_counters()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


# ---------------------------------------------------------------------------
# linear algebra


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, optionally over matching leading batch dimensions."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    counters = _active_counters()
    if counters:
        batch = int(np.prod(a.shape[:-2], dtype=np.int64))
        macs = batch * a.shape[-2] * a.shape[-1] * b.shape[-1]
        for c in counters:
            c.macs += macs
            c.calls += 1
    A, B = a.data, b.data

    def _bw(g):
        return (g @ _swap(B) if a.requires_grad else None,
                _swap(A) @ g if b.requires_grad else None)

    return Tensor._result(A @ B, (a, b), _bw, "matmul")


def gram(a: Tensor) -> Tensor:
    """``a^T a`` over the last two axes (batched).  Counts the same MACs as the matmul."""
    if a.ndim < 2:
        raise ShapeError(f"gram needs a matrix, got shape {a.shape}")
    counters = _active_counters()
    if counters:
        batch = int(np.prod(a.shape[:-2], dtype=np.int64))
        macs = batch * a.shape[-1] * a.shape[-2] * a.shape[-1]
        for c in counters:
            c.macs += macs
            c.calls += 1
    A = a.data
    return Tensor._result(_swap(A) @ A, (a,), lambda g: (A @ (g + _swap(g)),), "gram")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return Tensor._result(_swap(a.data), (a,), lambda g: (_swap(g),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    # only the right operand may broadcast (bias-style)
    if out != a.shape:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    bshape = b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, bshape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    bshape = b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, bshape)), "sub")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sub_identity(a: Tensor) -> Tensor:
    """``a - I`` over the last two (square) axes."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"sub_identity needs square matrices, got shape {a.shape}")
    out = a.data.copy()
    idx = np.arange(a.shape[-1])
    out[..., idx, idx] -= 1.0
    return Tensor._result(out, (a,), lambda g: (g,), "sub_identity")


def frobenius_sq(a: Tensor) -> Tensor:
    """Sum of squared entries, as a scalar tensor."""
    if a.size == 0:
        raise ShapeError("frobenius_sq of an empty tensor")
    A = a.data
    return Tensor._result(np.sum(A * A), (a,), lambda g: (2.0 * g * A,), "frobenius_sq")


def batch_frobenius_sq(a: Tensor) -> Tensor:
    """Per-matrix sum of squares over the last two axes."""
    if a.ndim < 2 or a.size == 0:
        raise ShapeError(f"batch_frobenius_sq needs non-empty matrices, got shape {a.shape}")
    A = a.data
    return Tensor._result(np.sum(A * A, axis=(-2, -1)), (a,),
                          lambda g: (2.0 * g[..., None, None] * A,), "batch_frobenius_sq")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def gather_columns(a: Tensor, indices) -> Tensor:
    """Select columns of a matrix.

    A 1-d index list gives a ``C_in x g`` matrix; a 2-d ``k x g`` index array
    gives a stack of ``k`` such matrices.  The gradient is scattered back to the
    selected columns only.
    """
    if a.ndim != 2:
        raise ShapeError(f"gather_columns needs a matrix, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("gather_columns: empty index list")
    ncols = a.shape[1]
    if idx.min() < 0 or idx.max() >= ncols:
        raise IndexError(f"gather_columns: index out of range for {ncols} columns")
    src = a.shape
    if idx.ndim == 2 and idx.size == ncols:
        # block and strided partitions of all columns are reshape views
        k, g = idx.shape
        cols = np.arange(ncols)
        if np.array_equal(idx, cols.reshape(k, g)):
            out = a.data.reshape(src[0], k, g).transpose(1, 0, 2)
            return Tensor._result(out, (a,), lambda gr: (gr.transpose(1, 0, 2).reshape(src),), "gather_columns")
        if np.array_equal(idx, cols.reshape(g, k).T):
            out = a.data.reshape(src[0], g, k).transpose(2, 0, 1)
            return Tensor._result(out, (a,), lambda gr: (gr.transpose(1, 2, 0).reshape(src),), "gather_columns")
    unique = np.unique(idx).size == idx.size
    if idx.ndim == 1:
        out = a.data[:, idx]
    elif idx.ndim == 2:
        out = np.ascontiguousarray(np.transpose(a.data[:, idx], (1, 0, 2)))
    else:
        raise ShapeError("gather_columns: indices must be 1-d or 2-d")

    def _bw(g):
        ga = np.zeros(src)
        gg = g if idx.ndim == 1 else np.transpose(g, (1, 0, 2))
        if unique:
            ga[:, idx] = gg
        else:
            np.add.at(ga, (slice(None), idx), gg)
        return (ga,)

    return Tensor._result(out, (a,), _bw, "gather_columns")


# ---------------------------------------------------------------------------
# convolution


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold ``B x c x H x W`` patches into rows of ``c*kh*kw`` values.

    Row order is (batch, out_y, out_x); column order is (channel, ky, kx), the
    same order as a ``C_out x c x kh x kw`` kernel reshaped to ``C_out x -1``.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col needs a 4-d input, got shape {x.shape}")
    B, C, H, W = x.shape
    if H + 2 * padding < kh or W + 2 * padding < kw or stride < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {x.shape} with padding {padding}")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    img = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = np.empty((B, C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = img[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    out = col.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, C * kh * kw)

    def _bw(g):
        gcol = g.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gimg = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gimg[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcol[:, :, i, j]
        return (gimg[:, :, padding:padding + H, padding:padding + W],)

    return Tensor._result(out, (x,), _bw, "im2col")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``B x c x H x W`` input with a ``C_out x c x h x w`` kernel."""
    if kernel.ndim != 4 or x.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    c_out, _, kh, kw = kernel.shape
    B, _, H, W = x.shape
    cols = im2col(x, kh, kw, stride, padding)
    wmat = transpose(reshape(kernel, (c_out, -1)))
    out = matmul(cols, wmat)
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    return permute(reshape(out, (B, Ho, Wo, c_out)), (0, 3, 1, 2))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool needs a 4-d input, got shape {x.shape}")
    shape = x.shape
    n = shape[2] * shape[3]
    return Tensor._result(x.data.mean(axis=(2, 3)), (x,),
                          lambda g: (np.broadcast_to(g[:, :, None, None] / n, shape).copy(),), "global_avg_pool")


# ---------------------------------------------------------------------------
# normalization and loss


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample's channel groups to zero mean, unit variance, then scale/shift."""
    if x.ndim < 2:
        raise ShapeError(f"group_norm needs at least B x C input, got {x.shape}")
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {C} channels")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: affine parameters must have shape ({C},)")
    shape = x.shape
    xg = x.data.reshape(B, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gam = gamma.data.reshape(bshape)
    out = xhat * gam + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def _bw(g):
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = (g * gam).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(shape), dgamma, dbeta

    return Tensor._result(out, (x, gamma, beta), _bw, "group_norm")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``B x K`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = logits.shape[0]
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def _bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / B,)

    return Tensor._result(loss, (logits,), _bw, "softmax_cross_entropy")
