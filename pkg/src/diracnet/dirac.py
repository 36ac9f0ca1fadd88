"""Dirac weight parameterization and inference-time folding.

A Dirac-parameterized convolution uses the weight

    W_hat = diag(a) @ I + diag(b) @ W_norm

where ``I`` is the convolutional identity (Dirac delta), ``W_norm`` is the
raw weight with each output filter scaled to unit Euclidean norm, and
``a``/``b`` are per-output-channel scales.  Because ``I`` is the identity
under stride-1 same-padded convolution, the layer starts out close to an
identity map and learns a residual on top of it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Variable

NORM_FLOOR = 1e-12


class DegenerateFilterError(ValueError):
    def __init__(self, index: int, norm: float):
        super().__init__(f"filter {index} has norm {norm:.3e} <= {NORM_FLOOR:g}")
        self.index = index
        self.norm = norm


class UnsupportedLayerError(TypeError):
    pass


class AlreadyFoldedError(ValueError):
    pass


@dataclass
class DiracConvParams:
    """Trainable state of one Dirac layer: raw weight ``W`` and scales ``a``, ``b``."""

    W: Variable
    a: Variable
    b: Variable

    def __post_init__(self):
        m_out, m_in = self.W.shape[:2]
        if m_out != m_in:
            raise ValueError(f"Dirac weight must be square in channels, got {m_out}x{m_in}")
        for name in ("a", "b"):
            if getattr(self, name).shape != (m_out,):
                raise ValueError(f"{name} must have shape ({m_out},)")

    @classmethod
    def init(cls, channels: int, kernel: int = 3, rng=None, mode: str = "normal",
             dtype=np.float32) -> "DiracConvParams":
        """``a`` = 1, ``b`` = 0.1 and ``W`` ~ N(0, 1) (or random orthogonal rows)."""
        rng = np.random.default_rng() if rng is None else rng
        shape = (channels, channels, kernel, kernel)
        if mode == "normal":
            w = rng.standard_normal(shape)
        elif mode == "orthogonal":
            w = orthogonal(shape, rng)
        else:
            raise ValueError(f"unknown init mode {mode!r}")
        return cls(
            W=Variable(w.astype(dtype), requires_grad=True),
            a=Variable(np.ones(channels, dtype), requires_grad=True),
            b=Variable(np.full(channels, 0.1, dtype), requires_grad=True),
        )


@dataclass
class BatchNormStats:
    gamma: Variable
    beta: Variable
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def init(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormStats":
        return cls(
            gamma=Variable(np.ones(channels, dtype), requires_grad=True),
            beta=Variable(np.zeros(channels, dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    @property
    def scale(self) -> np.ndarray:
        """gamma / sqrt(running_var + eps), the per-channel fold factor."""
        if (self.running_var < 0).any():
            raise ValueError("running_var has negative entries")
        return self.gamma.value / np.sqrt(self.running_var + self.eps)


def orthogonal(shape, rng) -> np.ndarray:
    rows, cols = shape[0], int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].reshape(shape)


def build_dirac_delta(channels: int, kernel=(3, 3), out_channels: int | None = None,
                      dtype=np.float32) -> np.ndarray:
    """Identity kernel for stride-1 same-padded convolution.

    Written literally, the textbook definition puts a one at every spatial
    position of the diagonal filters, which is a box filter rather than an
    identity for kernels larger than 1x1.  The only placement that makes
    ``conv2d(x, delta) == x`` hold is a single one at the spatial centre,
    which is what is built here.

    ``out_channels`` may differ from ``channels`` to get the truncated delta
    used for initializing non-square convolutions; ones are placed for
    ``i < min(out, in)``.
    """
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    k1, k2 = kernel
    if k1 % 2 == 0 or k2 % 2 == 0:
        raise ValueError(f"Dirac delta needs odd kernel sizes, got {k1}x{k2}")
    m_out = channels if out_channels is None else out_channels
    delta = np.zeros((m_out, channels, k1, k2), dtype=dtype)
    idx = np.arange(min(m_out, channels))
    delta[idx, idx, (k1 + 1) // 2 - 1, (k2 + 1) // 2 - 1] = 1
    return delta


def weight_norm(W) -> Variable:
    """Scale each output filter ``W[i]`` to unit Euclidean norm."""
    W = ag._lift(W)
    axes = tuple(range(1, W.ndim))
    norms = ag.sqrt(ag.sum_(W * W, axis=axes, keepdims=True))
    flat = norms.value.reshape(-1)
    bad = np.flatnonzero(~(flat > NORM_FLOOR))
    if bad.size:
        raise DegenerateFilterError(int(bad[0]), float(flat[bad[0]]))
    return W / norms


def effective_weight(p: DiracConvParams, delta: np.ndarray | None = None) -> Variable:
    """``diag(a) I + diag(b) W_norm`` as a differentiable Variable."""
    m, _, k1, k2 = p.W.shape
    if delta is None:
        delta = build_dirac_delta(m, (k1, k2), dtype=p.W.dtype)
    col = (m, 1, 1, 1)
    return p.a.reshape(col) * delta + p.b.reshape(col) * weight_norm(p.W)


def fold_dirac(p: DiracConvParams, delta: np.ndarray | None = None) -> np.ndarray:
    """Concrete numeric ``W_hat`` with no graph attached."""
    with ag.no_grad():
        return effective_weight(p, delta).value.copy()


def fold_batchnorm(w: np.ndarray, bias: np.ndarray | None, bn: BatchNormStats):
    """Absorb an eval-mode batch norm that follows a convolution.

    Returns ``(w', bias')`` such that ``conv(x, w', bias')`` equals
    ``bn(conv(x, w, bias))`` with running statistics.
    """
    scale = bn.scale
    if bias is None:
        bias = np.zeros(w.shape[0], dtype=w.dtype)
    w_f = w * scale.reshape(-1, 1, 1, 1)
    b_f = bn.beta.value + (bias - bn.running_mean) * scale
    return w_f.astype(w.dtype), b_f.astype(w.dtype)


def fold_network(net):
    """Rewrite ``net`` as a chain of plain conv(+bias)-ReLU, pooling and linear layers.

    Works on a deep copy; ``net`` itself is left untouched.
    """
    from . import nn

    if net.mode != "eval":
        raise ValueError("fold_network needs a network in eval mode")
    src = copy.deepcopy(net.layers)
    folded = []
    i = 0
    while i < len(src):
        layer = src[i]
        if isinstance(layer, (nn.Conv2d, nn.DiracConv2d)):
            if isinstance(layer, nn.DiracConv2d):
                w = fold_dirac(layer.params, layer.delta)
            else:
                w = layer.weight.value.copy()
            bias = None if layer.bias is None else layer.bias.value.copy()
            if i + 1 < len(src) and isinstance(src[i + 1], nn.BatchNorm2d):
                w, bias = fold_batchnorm(w, bias, src[i + 1].stats)
                i += 1
            folded.append(nn.Conv2d.from_arrays(w, bias, padding=layer.padding))
        elif isinstance(layer, (nn.ReLU, nn.MaxPool2, nn.GlobalAvgPool, nn.Linear)):
            folded.append(layer)
        elif isinstance(layer, nn.BatchNorm2d):
            raise UnsupportedLayerError("BatchNorm2d not preceded by a convolution has no fold rule")
        else:
            raise UnsupportedLayerError(f"no fold rule for layer kind {type(layer).__name__!r}")
        i += 1
    out = nn.Network(folded, copy.deepcopy(net.spec), variant="folded")
    out.eval()
    return out
