"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the primitives a LocalViT forward pass needs are provided. Each op
computes its output eagerly and attaches a closure that maps the output
adjoint to input adjoints; :func:`backward` replays those closures in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy import special

ArrayLike = Union[np.ndarray, float, int, Sequence]

DTYPE = np.float64

# Per-context hooks (contextvars keep them thread-local).
_mac_counter: contextvars.ContextVar[Optional["MacCounter"]] = contextvars.ContextVar(
    "mac_counter", default=None
)
_corrupted_ops: contextvars.ContextVar[frozenset] = contextvars.ContextVar(
    "corrupted_ops", default=frozenset()
)


class ShapeError(ValueError):
    pass


class Tensor:
    """n-dimensional float64 array that records how it was produced."""

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        _op: str = "",
    ):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basic properties ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    # -- operator sugar -----------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires,
        _parents=parents if requires else (),
        _backward=backward_fn if requires else None,
        _op=op,
    )


def _maybe_corrupt(op: str, g: np.ndarray) -> np.ndarray:
    # Negative-control hook for the gradient checker.
    if op in _corrupted_ops.get():
        return g * 1.5
    return g


def _record_macs(op: str, n: int) -> None:
    counter = _mac_counter.get()
    if counter is not None:
        counter.add(op, n)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        a._accumulate(full)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), backward, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    _record_macs("matmul", int(np.prod(out.shape)) * a.shape[-1])

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_maybe_corrupt("matmul", _unbroadcast(ga, a.shape)))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_maybe_corrupt("matmul", _unbroadcast(gb, b.shape)))

    return _make(out, (a, b), backward, "matmul")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        a._accumulate(_maybe_corrupt("softmax", s * (g - dot)))

    return _make(s, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv2d_pointwise(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: x (b, c_in, h, w), w (c_out, c_in, 1, 1)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (1, 1) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_pointwise shape mismatch: x{x.shape} w{w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d_pointwise bias shape {bias.shape} != ({w.shape[0]},)")
    b, c_in, h, wd = x.shape
    w2 = w.data[:, :, 0, 0]
    out = np.einsum("oc,bchw->bohw", w2, x.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _record_macs("conv2d_pointwise", b * h * wd * c_in * w.shape[0])

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.einsum("oc,bohw->bchw", w2, g, optimize=True))
        if w.requires_grad:
            gw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True)
            w._accumulate(_maybe_corrupt("conv2d_pointwise", gw[:, :, None, None]))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward, "conv2d_pointwise")


def conv2d_depthwise(
    x: Tensor, w: Tensor, bias: Optional[Tensor] = None, padding: Optional[int] = None
) -> Tensor:
    """Per-channel k x k correlation with zero padding (k-1)/2."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != 1 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"conv2d_depthwise shape mismatch: x{x.shape} w{w.shape}")
    k = w.shape[2]
    if w.shape[3] != k:
        raise ShapeError(f"depthwise kernel must be square, got {w.shape[2:]}")
    if k % 2 == 0:
        raise ValueError(f"depthwise kernel size must be odd, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ValueError(f"padding must be (k-1)/2 = {(k - 1) // 2} to preserve h x w, got {padding}")
    b, c, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kern = w.data[:, 0]
    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += kern[None, :, i, j, None, None] * xp[:, :, i : i + h, j : j + wd]
    if bias is not None:
        out += bias.data[None, :, None, None]
    _record_macs("conv2d_depthwise", b * h * wd * c * k * k)

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + h, j : j + wd] += kern[None, :, i, j, None, None] * g
            x._accumulate(gxp[:, :, padding : padding + h, padding : padding + wd])
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i : i + h, j : j + wd])
            w._accumulate(_maybe_corrupt("conv2d_depthwise", gw))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward, "conv2d_depthwise")


def conv1d_channels(s: Tensor, w: Tensor) -> Tensor:
    """Zero-padded 1-D correlation along the channel axis of s (b, c)."""
    if w.ndim != 1:
        raise ShapeError(f"conv1d_channels kernel must be 1-D, got {w.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ValueError(f"conv1d_channels kernel size must be odd, got {k}")
    pad = (k - 1) // 2
    b, c = s.shape
    sp = np.pad(s.data, ((0, 0), (pad, pad)))
    out = np.zeros_like(s.data)
    for j in range(k):
        out += w.data[j] * sp[:, j : j + c]
    _record_macs("conv1d_channels", b * c * k)

    def backward(g):
        if s.requires_grad:
            gsp = np.zeros_like(sp)
            for j in range(k):
                gsp[:, j : j + c] += w.data[j] * g
            s._accumulate(gsp[:, pad : pad + c])
        if w.requires_grad:
            gw = np.array([np.sum(g * sp[:, j : j + c]) for j in range(k)])
            w._accumulate(_maybe_corrupt("conv1d_channels", gw))

    return _make(out, (s, w), backward, "conv1d_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """(b, c, h, w) -> (b, c) spatial mean."""
    b, c, h, w = x.shape

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(_maybe_corrupt("layer_norm", gx))
        lead = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=lead))

    return _make(out, (x, gamma, beta), backward, "layer_norm")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    Before any train-mode update the state is mean 0 / var 1, so eval mode
    on a fresh layer is the identity up to the affine transform.
    """

    num_channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_channels, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(self.num_channels, dtype=DTYPE)


def batch_norm2d(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Per-channel normalisation over (b, h, w).

    Train mode uses batch statistics (biased variance) and updates the running
    estimates with the unbiased variance; eval mode uses the running estimates.
    """
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    g4 = gamma.data[None, :, None, None]
    if training:
        m = b * h * w
        if m < 2:
            raise ValueError("batch_norm2d in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var * m / (m - 1)
    else:
        mu, var = state.running_mean, state.running_var
        xc = x.data - mu[None, :, None, None]
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]

    def backward(gr):
        if x.requires_grad:
            gh = gr * g4
            if training:
                gx = inv[None, :, None, None] * (
                    gh
                    - gh.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gh * inv[None, :, None, None]
            x._accumulate(_maybe_corrupt("batch_norm2d", gx))
        if gamma.requires_grad:
            gamma._accumulate((gr * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(gr.sum(axis=(0, 2, 3)))

    return _make(out, (x, gamma, beta), backward, "batch_norm2d")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------
# Kinks use the left-continuous subgradient: the derivative at a breakpoint
# is the limit from the left.


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(np.maximum(x.data, 0.0), (x,), backward, "relu")


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data <= 6)

    def backward(g):
        x._accumulate(_maybe_corrupt("relu6", g * mask))

    return _make(np.clip(x.data, 0.0, 6.0), (x,), backward, "relu6")


def hswish(x: Tensor) -> Tensor:
    """x * relu6(x + 3) / 6."""
    v = x.data
    out = v * np.clip(v + 3.0, 0.0, 6.0) / 6.0
    deriv = np.where(v <= -3.0, 0.0, np.where(v <= 3.0, (2.0 * v + 3.0) / 6.0, 1.0))

    def backward(g):
        x._accumulate(_maybe_corrupt("hswish", g * deriv))

    return _make(out, (x,), backward, "hswish")


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        x._accumulate(_maybe_corrupt("sigmoid", g * s * (1.0 - s)))

    return _make(s, (x,), backward, "sigmoid")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU, the nonlinearity of the plain DeiT feed-forward."""
    v = x.data
    cdf = 0.5 * (1.0 + special.erf(v * _INV_SQRT2))
    deriv = cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)

    def backward(g):
        x._accumulate(_maybe_corrupt("gelu", g * deriv))

    return _make(v * cdf, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy_smoothed(logits: Tensor, labels: ArrayLike, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against one-hot targets smoothed as (1-s)*onehot + s/n."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    b, n = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got {labels.shape[0]}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    q = np.full((b, n), smoothing / n)
    q[np.arange(b), labels] += 1.0 - smoothing
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -(q * logp).sum() / b

    def backward(g):
        logits._accumulate(_maybe_corrupt("cross_entropy", g * (np.exp(logp) - q) / b))

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# tape replay and oracles
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list:
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate buffers are freed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    leaves = {id(t) for t in order if t._backward is None}
    for t in order:
        if id(t) not in leaves:
            t.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None


def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` w.r.t. every element of ``x``.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(x))
        flat[i] = orig - h
        fm = _scalar(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        if v.size != 1:
            raise ShapeError(f"finite_diff_grad needs a scalar function, got shape {v.shape}")
        return float(v.data.reshape(-1)[0])
    return float(v)


class MacCounter:
    """Accumulates multiply-accumulate counts of ops executed while active."""

    def __init__(self):
        self.by_op: dict = {}

    def add(self, op: str, n: int) -> None:
        self.by_op[op] = self.by_op.get(op, 0) + n

    @property
    def total(self) -> int:
        return sum(self.by_op.values())


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _mac_counter.set(counter)
    try:
        yield counter
    finally:
        _mac_counter.reset(token)


@contextlib.contextmanager
def corrupt_adjoint(*ops: str) -> Iterator[None]:
    """Scale the adjoint of the named ops by 1.5 (negative control for grad checks)."""
    token = _corrupted_ops.set(_corrupted_ops.get() | frozenset(ops))
    try:
        yield
    finally:
        _corrupted_ops.reset(token)
