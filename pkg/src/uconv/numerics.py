"""Dense tensors on top of numpy with tape-based reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers its
parents and a closure pushing the output gradient back to them.  Each node gets
a monotonically increasing sequence number at creation, so sorting the reachable
nodes by that number in descending order replays the tape in strict reverse
execution order.

Inside :func:`no_grad` no graph is recorded, which is what inference and the
benchmarks use.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading

import numpy as np

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()
_debug = {"check_finite": False}


class StateError(RuntimeError):
    """Raised when the tape is used in an invalid order (e.g. double backward)."""


class ShapeError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def set_check_finite(flag: bool) -> None:
    """Assert finiteness of every forward result (slow; meant for tests)."""
    _debug["check_finite"] = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward",
                 "_seq", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._released = False

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def backward(self, trace=None):
        backward(self, trace)


class Parameter(Tensor):
    """Trainable leaf tensor with a zero-initialised gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    # constants adopt the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if _debug["check_finite"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor, trace=None) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss``.

    ``loss`` must hold a single element.  Parameter gradients accumulate across
    calls (gradient accumulation); the graph below ``loss`` is released
    afterwards and a second call on it raises :class:`StateError`.
    If ``trace`` is a list, visited op names are appended in visit order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise StateError("backward already ran on this tape; rebuild the forward pass")
    if not loss.requires_grad:
        loss._released = True
        return

    nodes, seen, stack = [], set(), [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward is None:
            continue
        if trace is not None:
            trace.append((node._seq, node.op))
        if node.grad is not None:
            node._backward(node.grad)
    for node in nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True
            node.grad = None
    loss._released = True


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bw(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _make(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: _accum(a, g * s * (1.0 - s)), "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: _accum(a, g * pos), "relu")


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out = a.data * s

    def bw(g):
        _accum(a, g * (s + out * (1.0 - s)))

    return _make(out, (a,), bw, "swish")


def glu(a: Tensor) -> Tensor:
    """First half of the last axis gated by the sigmoid of the second half."""
    n = a.shape[-1]
    if n % 2:
        raise ShapeError(f"glu needs an even last extent, got {a.shape}")
    h = n // 2
    x1, x2 = a.data[..., :h], a.data[..., h:]
    s = _sigmoid(x2)

    def bw(g):
        _accum(a, np.concatenate([g * s, g * x1 * s * (1.0 - s)], axis=-1))

    return _make(x1 * s, (a,), bw, "glu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw, "log_softmax")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true (broadcast against ``a``) by ``value``."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def bw(g):
        _accum(a, _unbroadcast(np.where(mask, 0.0, g), a.shape))

    t = Tensor(out)
    t.op = "masked_fill"
    if grad_enabled() and a.requires_grad:
        t.requires_grad = True
        t._parents = (a,)
        t._backward = bw
    return t


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


# -- reductions and shape ops ----------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_basic(idx):
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def repeat_frames(a: Tensor, factor: int, axis: int = -2) -> Tensor:
    """Nearest-neighbour repetition along ``axis``: frame i -> frames factor*i .. factor*i+factor-1."""
    axis = axis % a.ndim
    out = np.repeat(a.data, factor, axis=axis)

    def bw(g):
        shape = a.shape[:axis] + (a.shape[axis], factor) + a.shape[axis + 1:]
        _accum(a, g.reshape(shape).sum(axis=axis + 1))

    return _make(out, (a,), bw, "repeat")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy broadcasting of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; ``weight`` is ``[d_in, d_out]``."""
    if bias is None:
        return matmul(x, weight)
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    out = x.data @ weight.data
    out += bias.data

    def bw(g):
        g2 = g.reshape(-1, d_out)
        if weight.requires_grad:
            _accum(weight, x.data.reshape(-1, d_in).T @ g2)
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            _accum(x, g @ weight.data.T)

    return _make(out, (x, weight, bias), bw, "linear")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), bw, "layer_norm")


# -- convolutions (cross-correlation, no kernel flip) --------------------------

def conv_out_len(n: int, k: int, stride: int, padding: int) -> int:
    if n + 2 * padding < k:
        raise ShapeError(f"empty convolution output: length {n}, padding {padding}, kernel {k}")
    return (n + 2 * padding - k) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """1-D convolution over axis -2 of ``x[..., T, Cin]`` with ``kernel[k, Cin, Cout]``."""
    k, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    T = x.shape[-2]
    t_out = conv_out_len(T, k, stride, padding)
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (0, 0)]
    xp = np.pad(x.data, pad) if padding else x.data
    span = stride * (t_out - 1) + 1
    out = np.zeros(x.shape[:-2] + (t_out, cout), dtype=x.dtype)
    for j in range(k):
        out += xp[..., j:j + span:stride, :] @ kernel.data[j]
    if bias is not None:
        out += bias.data

    def bw(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            g2 = g.reshape(-1, cout)
            for j in range(k):
                gk[j] = xp[..., j:j + span:stride, :].reshape(-1, cin).T @ g2
            _accum(kernel, gk)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, cout).sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + span:stride, :] += g @ kernel.data[j].T
            _accum(x, gxp[..., padding:padding + T, :])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv1d")


def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 1-D convolution with same-length padding; ``kernel[k, C]``, k odd."""
    k, c = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"depthwise kernel must be odd, got {k}")
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape}, kernel {kernel.shape}")
    T, p = x.shape[-2], k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + T, :] * kernel.data[j]
    if bias is not None:
        out += bias.data

    def bw(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = (xp[..., j:j + T, :] * g).reshape(-1, c).sum(axis=0)
            _accum(kernel, gk)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + T, :] += g * kernel.data[j]
            _accum(x, gxp[..., p:p + T, :])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "depthwise_conv1d")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution over axes (-3, -2) of ``x[..., T, F, Cin]``; ``kernel[k, k, Cin, Cout]``."""
    kt, kf, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    T, F = x.shape[-3], x.shape[-2]
    t_out = conv_out_len(T, kt, stride, padding)
    f_out = conv_out_len(F, kf, stride, padding)
    pad = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
    xp = np.pad(x.data, pad) if padding else x.data
    st, sf = stride * (t_out - 1) + 1, stride * (f_out - 1) + 1
    out = np.zeros(x.shape[:-3] + (t_out, f_out, cout), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            out += xp[..., i:i + st:stride, j:j + sf:stride, :] @ kernel.data[i, j]
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i in range(kt):
                for j in range(kf):
                    patch = xp[..., i:i + st:stride, j:j + sf:stride, :]
                    gk[i, j] = patch.reshape(-1, cin).T @ g2
            _accum(kernel, gk)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    gxp[..., i:i + st:stride, j:j + sf:stride, :] += g @ kernel.data[i, j].T
            _accum(x, gxp[..., padding:padding + T, padding:padding + F, :])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


# -- attention helpers ----------------------------------------------------------

def rel_shift(scores: Tensor) -> Tensor:
    """Map position scores ``[..., T, 2T-1]`` to ``[..., T, T]``.

    Column ``c`` of the input holds relative distance ``T-1-c``; output entry
    (i, j) picks distance ``i - j``, i.e. column ``T-1-i+j``.
    """
    T, width = scores.shape[-2], scores.shape[-1]
    if width != 2 * T - 1:
        raise ShapeError(f"rel_shift expects last extent 2T-1={2 * T - 1}, got {width}")

    def view(arr):
        # element (i, j) sits at flat offset T-1 + i*(2T-2) + j within each [T, 2T-1] slab
        arr = np.ascontiguousarray(arr)
        s = arr.strides
        return np.lib.stride_tricks.as_strided(
            arr[..., 0, T - 1:], shape=arr.shape[:-2] + (T, T),
            strides=s[:-2] + (s[-2] - s[-1], s[-1]), writeable=True)

    out = view(scores.data).copy()

    def bw(g):
        full = np.zeros(scores.shape, dtype=scores.dtype)
        view(full)[...] = g  # the (row, col) pairs are distinct
        _accum(scores, full)

    return _make(out, (scores,), bw, "rel_shift")


def sinusoid_table(positions: np.ndarray, dim: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    div_term = np.exp(np.arange(0, dim, 2, dtype=np.float64) * -(math.log(10000.0) / dim))
    table = np.zeros((len(pos), dim))
    table[:, 0::2] = np.sin(pos * div_term)
    table[:, 1::2] = np.cos(pos * div_term[: dim // 2])
    return table.astype(dtype)
