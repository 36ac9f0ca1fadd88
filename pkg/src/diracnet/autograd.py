"""Define-by-run reverse-mode automatic differentiation.

Every operation on :class:`Variable` objects records a node carrying a
monotonically increasing sequence number.  The sequence order is the tape:
:func:`backward` walks the nodes reachable from the loss in reverse
recording order, which is always a valid reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

_sequence = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Variable:
    """A tensor value plus the bookkeeping needed for backpropagation."""

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = T.as_tensor(value)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Variable, ...] = ()
        self._backward = None
        self._seq = next(_sequence)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}, dtype={self.dtype}{tag})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Variable":
        return Variable(self.value)

    def backward(self):
        backward(self)

    # arithmetic sugar
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, dtype=None) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(T.as_tensor(x, dtype))


def _record(value, parents, backward_fn) -> Variable:
    out = Variable(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(v) into ``v.grad`` for every reachable ``v``."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any variable that requires grad")

    nodes = {}
    stack = [loss]
    while stack:
        v = stack.pop()
        if id(v) in nodes:
            continue
        nodes[id(v)] = v
        stack.extend(p for p in v._parents if p.requires_grad)

    grads = {id(loss): np.ones_like(loss.value)}
    for v in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        v.grad = g.copy() if v.grad is None else v.grad + g
        if v._backward is None:
            continue
        for parent, pg in zip(v._parents, v._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(params) -> None:
    for p in params:
        if p.grad is not None:
            p.grad = np.zeros_like(p.value)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Variable:
    a, b = _lift(a), _lift(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.value + b.value, (a, b), bw)


def sub(a, b) -> Variable:
    a, b = _lift(a), _lift(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.value - b.value, (a, b), bw)


def mul(a, b) -> Variable:
    a = _lift(a)
    b = _lift(b, a.dtype)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _record(a.value * b.value, (a, b), bw)


def div(a, b) -> Variable:
    a = _lift(a)
    b = _lift(b, a.dtype)

    def bw(g):
        ga = g / b.value
        gb = -g * a.value / (b.value * b.value)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.value / b.value, (a, b), bw)


def sqrt(a) -> Variable:
    a = _lift(a)
    out = np.sqrt(a.value)

    def bw(g):
        return (g / (2 * out),)

    return _record(out, (a,), bw)


def sum_(a, axis=None, keepdims=False) -> Variable:
    a = _lift(a)
    out = np.asarray(a.value.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Variable:
    a = _lift(a)
    n = a.value.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Variable:
    a = _lift(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return _record(a.value.reshape(shape), (a,), bw)


# ---------------------------------------------------------------------------
# network kernels
# ---------------------------------------------------------------------------

def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Variable:
    x, w = _lift(x), _lift(w)
    parents = (x, w) if bias is None else (x, w, _lift(bias))
    out = T.conv2d(x.value, w.value, None if bias is None else parents[2].value,
                   stride, padding)

    def bw(g):
        dx, dw, db = T.conv2d_backward(g, x.value, w.value, stride, padding,
                                       need_dx=x.requires_grad, need_dw=w.requires_grad)
        return (dx, dw) if bias is None else (dx, dw, db)

    return _record(out, parents, bw)


def relu(x) -> Variable:
    x = _lift(x)
    mask = x.value > 0

    def bw(g):
        return (g * mask,)

    return _record(T.relu(x.value), (x,), bw)


def max_pool2(x) -> Variable:
    x = _lift(x)
    out, idx = T.max_pool2(x.value, return_indices=True)

    def bw(g):
        return (T.max_pool2_backward(g, idx, x.shape),)

    return _record(out, (x,), bw)


def avg_pool_global(x) -> Variable:
    x = _lift(x)

    def bw(g):
        return (T.avg_pool_global_backward(g, x.shape),)

    return _record(T.avg_pool_global(x.value), (x,), bw)


def linear(x, w, bias=None) -> Variable:
    x, w = _lift(x), _lift(w)
    parents = (x, w) if bias is None else (x, w, _lift(bias))
    out = T.linear(x.value, w.value, None if bias is None else parents[2].value)

    def bw(g):
        grads = (g @ w.value, g.T @ x.value)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _record(out, parents, bw)


def batch_norm(x, gamma, beta, mean_, var, eps: float) -> Variable:
    """Per-channel affine normalization with fixed statistics.

    ``mean_`` and ``var`` are arrays (or Variables) of shape ``[C]``.  When
    they are Variables derived from ``x`` (batch statistics), pass them via
    :func:`batch_norm_train` instead so the gradient includes their
    dependence on ``x``.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    shape = (1, -1, 1, 1)
    inv_std = (1.0 / np.sqrt(np.asarray(var) + eps)).astype(x.dtype)
    x_hat = (x.value - np.asarray(mean_, dtype=x.dtype).reshape(shape)) * inv_std.reshape(shape)
    out = x_hat * gamma.value.reshape(shape) + beta.value.reshape(shape)

    def bw(g):
        dx = g * (gamma.value * inv_std).reshape(shape)
        return dx, (g * x_hat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _record(T.check_finite(out, "batch_norm"), (x, gamma, beta), bw)


def batch_norm_train(x, gamma, beta, eps: float):
    """Normalize with batch statistics.

    Returns ``(output, batch_mean, batch_var)`` where the variance is the
    biased estimate used for normalization.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    m = x.value.shape[0] * x.value.shape[2] * x.value.shape[3]
    mu = x.value.mean(axis=axes)
    centered = x.value - mu.reshape(shape)
    var = (centered * centered).mean(axis=axes)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = centered * inv_std.reshape(shape)
    out = x_hat * gamma.value.reshape(shape) + beta.value.reshape(shape)

    def bw(g):
        dgamma = (g * x_hat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        # Closed-form gradient through the batch mean and variance.
        dx = (gamma.value * inv_std).reshape(shape) / m * (
            m * g - dbeta.reshape(shape) - x_hat * dgamma.reshape(shape))
        return dx, dgamma, dbeta

    return _record(T.check_finite(out, "batch_norm"), (x, gamma, beta), bw), mu, var


def softmax_cross_entropy(logits, labels) -> Variable:
    logits = _lift(logits)
    labels = np.asarray(labels)
    loss = T.softmax_cross_entropy(logits.value, labels)

    def bw(g):
        return (g * T.softmax_cross_entropy_grad(logits.value, labels).astype(logits.dtype),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckEntry:
    name: str
    shape: tuple
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self):
        lines = [f"{'parameter':40s} {'max rel err':>12s}"]
        for e in self.entries:
            flag = "ok" if e.passed else "FAIL"
            lines.append(f"{e.name:40s} {e.max_rel_error:12.3e} {flag}")
        return "\n".join(lines)


def _scalar(v) -> float:
    return float(np.asarray(v.value if isinstance(v, Variable) else v).reshape(()))


def finite_diff_check(f, params, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` takes no arguments and must read the current values of ``params``
    (a list of Variables, or of ``(name, Variable)`` pairs).  Values are
    perturbed in place and restored afterwards.
    """
    named = [p if isinstance(p, tuple) else (p.name or f"param{i}", p)
             for i, p in enumerate(params)]
    first, second = _scalar(f()), _scalar(f())
    if first != second:
        raise NonDeterministicError(f"f() returned {first!r} then {second!r}")

    for _, p in named:
        p.grad = None
    loss = f()
    backward(loss)

    report = GradCheckReport(tolerance=tolerance)
    for name, p in named:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _scalar(f())
            flat[i] = orig - step
            down = _scalar(f())
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = float((diff / scale).max()) if diff.size else 0.0
        report.entries.append(GradCheckEntry(name, p.shape, rel, float(diff.max(initial=0.0)),
                                             rel <= tolerance))
    return report
