"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(data, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basics -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
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
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
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

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

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

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, True, tuple(parents), backward, op)


# -- elementwise ----------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data ** exponent, (a,), backward, "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a):  # noqa: A001
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a):
    """tanh approximation."""
    a = as_tensor(a)
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)

    return _make(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)

    return _make(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def clamp_min(a, low):
    return maximum(a, Tensor(np.full(1, float(low))))


# -- reductions and shape -------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# -- linear algebra -------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- normalisation --------------------------------------------------------
def softmax(x, axis=-1):
    return masked_softmax(x, None, axis)


def masked_softmax(x, mask, axis=-1):
    """Softmax where entries with ``mask == False`` get exactly zero weight.

    A ``None`` mask means every entry participates. The arithmetic is shared
    with the masked path, so an all-true mask reproduces it bit for bit.
    """
    x = as_tensor(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("masked_softmax: a slice has no unmasked entry")
        top = np.where(mask, x.data, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x.data - top, 0.0)), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x, weight, bias, eps=1e-5):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        gxhat = g * weight.data
        n = x.shape[-1]
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, weight.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, weight, bias), backward, "layer_norm")


def l2_normalize(x, axis=-1):
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise ValueError("cannot normalise a zero-norm vector")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), backward, "l2_normalize")


def cosine(a, b):
    """Cosine similarity of two vectors (or row-wise for matching shapes)."""
    return (l2_normalize(a) * l2_normalize(b)).sum(axis=-1)


def cosine_matrix(a, b):
    """Pairwise cosine similarity between rows of ``a`` [m,d] and ``b`` [n,d]."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# -- losses ---------------------------------------------------------------
def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on logits: -t log p - (1-t) log(1-p)."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    p = _sigmoid(x)
    return _make(out, (logits,), lambda g: (g * (p - t),), "bce_with_logits")


# -- spatial kernels ------------------------------------------------------
def im2col3x3(x):
    """Zero-padded 3x3 neighbourhoods: [h,w,c] -> [h*w, 9*c]."""
    x = as_tensor(x)
    h, w, c = x.shape
    padded = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    cols = np.concatenate(
        [padded[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)], axis=-1
    )

    def backward(g):
        g = g.reshape(h, w, 9, c)
        gp = np.zeros((h + 2, w + 2, c))
        k = 0
        for dy in range(3):
            for dx in range(3):
                gp[dy:dy + h, dx:dx + w] += g[:, :, k]
                k += 1
        return (gp[1:-1, 1:-1],)

    return _make(cols.reshape(h * w, 9 * c), (x,), backward, "im2col3x3")


def bilinear_sample(value, coords):
    """Sample ``value`` [h,w,c] at continuous pixel ``coords`` [..., 2] given as (x, y).

    Pixel centres sit at integer coordinates. Samples outside the grid are
    clamped to the border.
    """
    value, coords = as_tensor(value), as_tensor(coords)
    h, w, c = value.shape
    lead = coords.shape[:-1]
    xy = coords.data.reshape(-1, 2)
    x = np.clip(xy[:, 0], 0.0, w - 1.0)
    y = np.clip(xy[:, 1], 0.0, h - 1.0)
    inside_x = (xy[:, 0] > 0.0) & (xy[:, 0] < w - 1.0)
    inside_y = (xy[:, 1] > 0.0) & (xy[:, 1] < h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v = value.data
    v00, v01, v10, v11 = v[y0, x0], v[y0, x1], v[y1, x0], v[y1, x1]
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)

    def backward(g):
        g = g.reshape(-1, c)
        gv = np.zeros_like(v)
        np.add.at(gv, (y0, x0), g * (1 - fx) * (1 - fy))
        np.add.at(gv, (y0, x1), g * fx * (1 - fy))
        np.add.at(gv, (y1, x0), g * (1 - fx) * fy)
        np.add.at(gv, (y1, x1), g * fx * fy)
        dx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * g
        dy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * g
        gc = np.stack([dx.sum(-1) * inside_x, dy.sum(-1) * inside_y], axis=-1)
        return gv, gc.reshape(coords.shape)

    return _make(out.reshape(*lead, c), (value, coords), backward, "bilinear_sample")
