"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure computing vector-Jacobian products.  :func:`backward` walks the graph
in reverse topological order exactly once per node.

Arrays may carry leading batch axes; "rows" always means the last axis.
Training runs in float32; :func:`precision` switches newly created tensors to
float64 for gradient checks.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .exceptions import NonScalarLoss, ShapeMismatch

ABS_SMOOTH_DELTA = 1e-12

_dtype = np.float32


def default_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used by :func:`tensor` and :func:`parameter`."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, name=None, parents=(), vjp=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

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


def tensor(value, dtype=None):
    """Wrap ``value`` as a constant tensor (no gradient)."""
    return Tensor(np.asarray(value, dtype=dtype or _dtype))


def parameter(value, name=None, dtype=None):
    return Tensor(np.array(value, dtype=dtype or _dtype), requires_grad=True, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _dtype
    return Tensor(np.asarray(x, dtype=dtype))


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


def _node(value, parents, vjp):
    return Tensor(value, parents=parents, vjp=vjp)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), vjp)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), vjp)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), vjp)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("div", a, b)
    out = a.value / b.value

    def vjp(g):
        gb = -g * out / b.value
        return _unbroadcast(g / b.value, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), vjp)


def scale(a, c):
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _node(a.value * a.dtype.type(c), (a,), vjp)


def relu(a):
    out = np.maximum(a.value, 0)

    def vjp(g):
        return (g * (out > 0),)

    return _node(out, (a,), vjp)


def square(a):
    def vjp(g):
        return (2 * g * a.value,)

    return _node(a.value * a.value, (a,), vjp)


def abs_smooth(a, delta=ABS_SMOOTH_DELTA):
    """``sqrt(x**2 + delta**2)``: differentiable everywhere, within ``delta`` of ``|x|``."""
    d2 = a.dtype.type(delta * delta)
    out = np.sqrt(a.value * a.value + d2)

    def vjp(g):
        return (g * a.value / out,)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def matmul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if b.ndim == 2 and a.ndim > 2:
        # fold batch axes into rows: one GEMM, and the weight gradient needs no reduction
        a2 = a.value.reshape(-1, a.shape[-1])
        out = (a2 @ b.value).reshape(a.shape[:-1] + (b.shape[-1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.value.T).reshape(a.shape), a2.T @ g2

        return _node(out, (a, b), vjp)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), vjp)


def concat_cols(*tensors):
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeMismatch("concat_cols", *(t.shape for t in tensors))
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def vjp(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _node(np.concatenate([t.value for t in tensors], axis=-1), tuple(tensors), vjp)


def cols(a, start, stop):
    """Slice columns ``start:stop`` of the last axis."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeMismatch("cols", a.shape, (start, stop))

    def vjp(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    return _node(a.value[..., start:stop], (a,), vjp)


def reshape(a, shape):
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", a.shape, tuple(shape)) from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), vjp)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.value, axes), (a,), vjp)


def softmax_rows(a, bias=None):
    """Softmax over the last axis.  ``bias`` is a constant added to the logits (masking)."""
    z = a.value if bias is None else a.value + bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (a,), vjp)


def sum(a):  # noqa: A001 - mirrors the primitive's name
    def vjp(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _node(np.asarray(a.value.sum(), dtype=a.dtype), (a,), vjp)


def mean(a):
    n = a.value.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _node(np.asarray(a.value.mean(), dtype=a.dtype), (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root):
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable parameter."""
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise NonScalarLoss(f"loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# optimizer and verification
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; state is kept per parameter name."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.dtype)


def gradient_check(f, params, eps=1e-6, n_samples=50, rng=None):
    """Max relative error between analytic gradients and central differences.

    ``f`` is a zero-argument callable returning a scalar tensor computed from
    ``params`` (a sequence of tensors).  Up to ``n_samples`` coordinates are
    sampled across all parameters.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    backward(f())
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if len(coords) > n_samples:
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in picks]

    worst = 0.0
    for i, j in coords:
        p = params[i]
        flat = p.value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = f().item()
        flat[j] = orig - eps
        down = f().item()
        flat[j] = orig
        numeric = (up - down) / (2 * eps)
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[j])
        err = abs(analytic - numeric) / max(1.0, abs(analytic))
        if not math.isfinite(err):
            return math.inf
        worst = max(worst, err)
    return worst
