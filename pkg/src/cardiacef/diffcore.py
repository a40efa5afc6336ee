"""Small reverse-mode autodiff layer on top of numpy.

Every op takes and returns :class:`Tensor`. Shapes are explicit: the only
broadcasting allowed is between a tensor and a Python scalar (or a 0-d
tensor). Ops that need a per-channel or per-column vector, such as bias
addition, have dedicated functions.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ContractError, NumericalError, ShapeError

__all__ = [
    "Tensor", "GradCheckReport", "no_grad", "precision", "get_default_dtype",
    "matmul", "conv2d", "tanh", "sigmoid", "softmax", "avg_pool2d",
    "global_avg_pool", "add", "sub", "mul", "div", "scale", "sum", "mean",
    "reshape", "transpose", "concat", "add_bias", "l2_normalize",
    "upsample2x", "cross_entropy_from_logits", "regression_loss", "gradcheck",
    "REGRESSION_LOSSES",
]

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported precision {dtype!r}")
    prev = get_default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, index):
        return _getitem(self, index)

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _make(data, parents, backward, op):
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _binary_shapes(a, b, op):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    ref = a if isinstance(a, Tensor) else b
    a, b = _as_tensor(a, ref), _as_tensor(b, ref)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    ref = a if isinstance(a, Tensor) else b
    a, b = _as_tensor(a, ref), _as_tensor(b, ref)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    ref = a if isinstance(a, Tensor) else b
    a, b = _as_tensor(a, ref), _as_tensor(b, ref)
    _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    ref = a if isinstance(a, Tensor) else b
    a, b = _as_tensor(a, ref), _as_tensor(b, ref)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def scale(x, c):
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def tanh(x):
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x):
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# ------------------------------------------------------------------ reductions

def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / n)


# --------------------------------------------------------------- restructuring

def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _getitem(x, index):
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=x.dtype), (x,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def add_bias(x, b, axis=-1):
    """Add a 1-D ``b`` along ``axis`` of ``x`` (per-channel or per-column bias)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias of shape {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _make(x.data + b.data.reshape(view), (x, b),
                 lambda g: (g, g.sum(axis=others)), "add_bias")


# ---------------------------------------------------------------- linear maps

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _conv_out(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernels, stride=1, padding=0, pad_mode="zeros"):
    """Cross-correlation of ``x`` (Cin,H,W or N,Cin,H,W) with ``kernels`` (Cout,Cin,kh,kw).

    ``pad_mode="edge"`` replicates border pixels instead of padding with
    zeros, so a constant input gives a constant output.
    """
    if stride not in (1, 2) or padding not in (0, 1):
        raise ShapeError(f"unsupported stride/padding {stride}/{padding}")
    if pad_mode not in ("zeros", "edge"):
        raise ConfigError(f"unknown pad_mode {pad_mode!r}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d shapes {x.shape}, {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernels {kcin}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} < 1")
    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    if padding:
        xp = np.pad(xd, pads, mode="edge" if pad_mode == "edge" else "constant")
    else:
        xp = xd
    cols = np.empty((n, ho, wo, cin, kh, kw), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(0, 2, 3, 1)
    cols = cols.reshape(n * ho * wo, cin * kh * kw)
    kmat = kernels.data.reshape(cout, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def backward(g):
        gm = (g if batched else g[None]).transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gm.T @ cols).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[..., i, j].transpose(0, 3, 1, 2)
            if padding:
                if pad_mode == "edge":
                    # replicated border pixels pass their gradient back to the edge they copy
                    gxp[:, :, 1, :] += gxp[:, :, 0, :]
                    gxp[:, :, -2, :] += gxp[:, :, -1, :]
                    gxp[:, :, :, 1] += gxp[:, :, :, 0]
                    gxp[:, :, :, -2] += gxp[:, :, :, -1]
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            gx = gxp if batched else gxp[0]
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernels), backward, "conv2d")


def avg_pool2d(x, window=2):
    """Non-overlapping average pooling over the last two axes."""
    h, w = x.shape[-2:]
    if h % window or w % window:
        raise ShapeError(f"avg_pool2d: extents {h}x{w} not divisible by window {window}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // window, window, w // window, window)
    out = blocks.mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, window, axis=-2), window, axis=-1)
        return (g / (window * window),)

    return _make(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x):
    """(..., C, h, w) -> (..., C)."""
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return _make(out, (x,), backward, "global_avg_pool")


def _upsample_matrix(n, mode, dtype):
    u = np.zeros((2 * n, n), dtype=dtype)
    if mode == "nearest":
        u[np.arange(2 * n), np.arange(2 * n) // 2] = 1.0
    elif mode == "bilinear":
        # align_corners=False at an exact 2x factor: weights 0.75/0.25, edges clamped
        for i in range(n):
            u[2 * i, i] += 0.75
            u[2 * i, max(i - 1, 0)] += 0.25
            u[2 * i + 1, i] += 0.75
            u[2 * i + 1, min(i + 1, n - 1)] += 0.25
    else:
        raise ConfigError(f"unknown upsample mode {mode!r}")
    return u


def upsample2x(x, mode="bilinear"):
    """Double the last two extents with nearest or bilinear interpolation."""
    h, w = x.shape[-2:]
    uh = _upsample_matrix(h, mode, x.dtype)
    uw = uh if w == h else _upsample_matrix(w, mode, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),), "upsample2x")


# ------------------------------------------------------------ normalizations

def softmax(x, axis=-1):
    if x.data.size == 0 or x.ndim == 0:
        raise ShapeError("softmax of an empty vector")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def l2_normalize(x, axis=-1, tiny=1e-12):
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= tiny):
        raise NumericalError("l2_normalize: zero-norm vector")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


# --------------------------------------------------------------------- losses

def cross_entropy_from_logits(logits, label):
    """Mean of ``-log softmax(logits)[label]`` over rows; a 1-D input is one row."""
    single = logits.ndim == 1
    if logits.ndim not in (1, 2) or logits.shape[-1] == 0:
        raise ShapeError(f"cross_entropy_from_logits: bad logits shape {logits.shape}")
    z = logits.data[None] if single else logits.data
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"label out of range [0, {k})")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.asarray((lse - zs[rows, labels]).mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(zs - lse[:, None])
        p[rows, labels] -= 1.0
        p *= g / z.shape[0]
        return (p[0] if single else p,)

    return _make(loss, (logits,), backward, "cross_entropy")


REGRESSION_LOSSES = ("mae", "mse", "smooth_l1", "huber")


def regression_loss(pred, target, kind="mae", delta=1.0):
    """Mean regression loss between same-shape ``pred`` and ``target``.

    ``smooth_l1`` divides the quadratic zone by ``delta`` (beta); ``huber``
    scales it by ``delta``; they coincide at ``delta == 1``.
    """
    if kind not in REGRESSION_LOSSES:
        raise ConfigError(f"unknown regression loss {kind!r}; expected one of {REGRESSION_LOSSES}")
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    _binary_shapes(pred, target, "regression_loss")
    e = pred.data - target.data
    a = np.abs(e)
    if kind == "mae":
        val, d = a, np.sign(e)  # sign(0) == 0: zero subgradient at the kink
    elif kind == "mse":
        val, d = e * e, 2.0 * e
    elif kind == "huber":
        quad = a <= delta
        val = np.where(quad, 0.5 * e * e, delta * (a - 0.5 * delta))
        d = np.where(quad, e, delta * np.sign(e))
    else:
        quad = a < delta
        val = np.where(quad, 0.5 * e * e / delta, a - 0.5 * delta)
        d = np.where(quad, e / delta, np.sign(e))
    n = max(e.size, 1)
    loss = np.asarray(val.mean(), dtype=pred.dtype)

    def backward(g):
        gd = d * (g / n)
        return (_unbroadcast(gd, pred.shape), _unbroadcast(-gd, target.shape))

    return _make(loss, (pred, target), backward, "regression_loss")


# ----------------------------------------------------------------- gradcheck

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    worst_coordinate: tuple

    @property
    def passed(self):
        return self.max_rel_error <= 1e-4


def gradcheck(f, inputs, op_name="f", eps=1e-8):
    """Compare backward() against central differences for every input coordinate.

    ``f(*inputs)`` must return a scalar tensor. All inputs must be float64;
    step size is ``1e-5 * max(1, |x|)`` per coordinate.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("gradcheck requires float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"gradcheck: {op_name} returned shape {out.shape}, expected a scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst, worst_at = 0.0, ()
    with no_grad():
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            ana = analytic[k].reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                h = 1e-5 * max(1.0, abs(orig))
                flat[idx] = orig + h
                fp = float(f(*inputs).data)
                flat[idx] = orig - h
                fm = float(f(*inputs).data)
                flat[idx] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(ana[idx] - num) / max(abs(ana[idx]), abs(num), eps)
                if not worst_at or err > worst:
                    worst = err
                    worst_at = (k,) + tuple(int(i) for i in np.unravel_index(idx, t.shape))
    for t in inputs:
        t.grad = None
    return GradCheckReport(op_name, float(worst), worst_at)
