"""Dense array kernels used by every other part of the framework.

A ``Tensor`` here is a plain row-major :class:`numpy.ndarray` laid out as
``[B, C, H, W]`` for images.  The functions in this module are pure: they
never modify their inputs and always return freshly allocated arrays.
Every kernel checks that its output is finite and raises
:class:`NumericError` otherwise.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


class NumericError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


def as_tensor(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return np.asarray(arr, dtype=dtype, order="C")


def check_finite(arr: Tensor, where: str) -> Tensor:
    if not np.isfinite(arr).all():
        raise NumericError(f"{where}: non-finite values in output of shape {arr.shape}")
    return arr


def _require_rank(x: Tensor, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_args(x, w, bias, stride, padding):
    _require_rank(x, 4, "conv2d input")
    _require_rank(w, 4, "conv2d weight")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: weight expects {w.shape[1]} input channels, input has {x.shape[1]}"
        )
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({w.shape[0]},)")
    ho = conv_output_size(x.shape[2], w.shape[2], stride, padding)
    wo = conv_output_size(x.shape[3], w.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {w.shape[2:]} does not fit input {x.shape[2:]} with padding {padding}"
        )
    return ho, wo


def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold ``x`` into patch columns of shape ``[B, C*kh*kw, Ho*Wo]``.

    Rows are ordered (channel, kernel row, kernel col) to match
    ``w.reshape(Cout, -1)``.
    """
    xp = _pad(x, padding)
    b, c = x.shape[:2]
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                  j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def col2im(cols: Tensor, x_shape, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patch columns back to an image."""
    b, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    if padding:
        return np.ascontiguousarray(xp[:, :, padding:padding + h, padding:padding + w])
    return xp


def _conv2d_im2col(x, w, stride, padding, ho, wo):
    cout = w.shape[0]
    cols = im2col(x, w.shape[2], w.shape[3], stride, padding)
    y = np.matmul(w.reshape(cout, -1), cols)
    return y.reshape(x.shape[0], cout, ho, wo)


def _flat_padded(x: Tensor, padding: int, tail: int):
    """Zero-padded ``x`` as a ``[C, B*Hp*Wp + tail]`` buffer, channel-major."""
    b, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    buf = np.zeros((c, b * hp * wp + tail), dtype=x.dtype)
    grid = buf[:, :b * hp * wp].reshape(c, b, hp, wp)
    grid[:, :, padding:padding + h, padding:padding + w] = x.transpose(1, 0, 2, 3)
    return buf


def _tap_offsets(kh, kw, wp):
    return [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]


# The direct path anchors every output at the top-left corner of its window
# on the padded grid.  In the flattened [C, B*Hp*Wp] layout, the input seen
# by kernel tap (i, j) is then the buffer shifted by i*Wp + j, so each tap is
# one contiguous matmul; anchors that fall outside the valid output range are
# computed and discarded.

def _conv2d_direct(x, w, stride, padding, ho, wo):
    b = x.shape[0]
    cout, _, kh, kw = w.shape
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    n = b * hp * wp
    buf = _flat_padded(x, padding, (kh - 1) * wp + kw - 1)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    acc = np.zeros((cout, n), dtype=np.result_type(x, w))
    for i, j, off in _tap_offsets(kh, kw, wp):
        acc += taps[i, j] @ buf[:, off:off + n]
    grid = acc.reshape(cout, b, hp, wp)
    y = grid[:, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def _conv2d_direct_backward(dy, x, w, stride, padding, need_dx, need_dw):
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    hp, wp = h + 2 * padding, wd + 2 * padding
    n = b * hp * wp
    tail = (kh - 1) * wp + kw - 1
    dgrid = np.zeros((cout, b, hp, wp), dtype=dy.dtype)
    dgrid[:, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride] = \
        dy.transpose(1, 0, 2, 3)
    dflat = dgrid.reshape(cout, n)
    dw = dx = None
    if need_dw:
        buf = _flat_padded(x, padding, tail)
        dw = np.empty((kh, kw, cout, cin), dtype=w.dtype)
        for i, j, off in _tap_offsets(kh, kw, wp):
            dw[i, j] = dflat @ buf[:, off:off + n].T
        dw = np.ascontiguousarray(dw.transpose(2, 3, 0, 1))
    if need_dx:
        taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
        dbuf = np.zeros((cin, n + tail), dtype=dy.dtype)
        for i, j, off in _tap_offsets(kh, kw, wp):
            dbuf[:, off:off + n] += taps_t[i, j] @ dflat
        grid = dbuf[:, :n].reshape(cin, b, hp, wp)[:, :, padding:padding + h, padding:padding + wd]
        dx = np.ascontiguousarray(grid.transpose(1, 0, 2, 3))
    return dx, dw


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, method: str = "direct") -> Tensor:
    """2-D cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin,K1,K2]``.

    ``method`` selects the direct shift-and-accumulate path (default) or
    the im2col+matmul path; both compute the same function.
    """
    ho, wo = _check_conv_args(x, w, bias, stride, padding)
    if method == "direct":
        y = _conv2d_direct(x, w, stride, padding, ho, wo)
    elif method == "im2col":
        y = _conv2d_im2col(x, w, stride, padding, ho, wo)
    else:
        raise ValueError(f"unknown conv2d method {method!r}")
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1)
    return check_finite(y, "conv2d")


def conv2d_backward(dy: Tensor, x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                    need_dx: bool = True, need_dw: bool = True, method: str = "direct"):
    """Gradients of :func:`conv2d` with respect to input, weight and bias."""
    db = dy.sum(axis=(0, 2, 3))
    if method == "direct":
        dx, dw = _conv2d_direct_backward(dy, x, w, stride, padding, need_dx, need_dw)
        return dx, dw, db
    if method != "im2col":
        raise ValueError(f"unknown conv2d method {method!r}")
    b, cout, ho, wo = dy.shape
    kh, kw = w.shape[2], w.shape[3]
    dy_r = dy.reshape(b, cout, ho * wo)
    dw = dx = None
    if need_dw:
        cols = im2col(x, kh, kw, stride, padding)
        dw = np.matmul(dy_r, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if need_dx:
        dcols = np.matmul(w.reshape(cout, -1).T, dy_r)
        dx = col2im(dcols, x.shape, kh, kw, stride, padding)
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def max_pool2(x: Tensor, return_indices: bool = False):
    """Non-overlapping 2x2 max pooling.

    With ``return_indices`` the position (0..3, row-major inside the window)
    of each maximum is returned as well, for use by :func:`max_pool2_backward`.
    """
    _require_rank(x, 4, "max_pool2 input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    check_finite(y, "max_pool2")
    if return_indices:
        return y, idx
    return y


def max_pool2_backward(dy: Tensor, idx: Tensor, x_shape) -> Tensor:
    b, c, h, w = x_shape
    dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    dwin = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(b, c, h, w)


def avg_pool_global(x: Tensor) -> Tensor:
    _require_rank(x, 4, "avg_pool_global input")
    return check_finite(x.mean(axis=(2, 3)), "avg_pool_global")


def avg_pool_global_backward(dy: Tensor, x_shape) -> Tensor:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to((dy / (h * w))[:, :, None, None], x_shape).copy()


# ---------------------------------------------------------------------------
# dense ops, activations, loss
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[B,D] @ w[C,D].T + bias[C]``."""
    _require_rank(x, 2, "linear input")
    _require_rank(w, 2, "linear weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: weight expects {w.shape[1]} features, input has {x.shape[1]}")
    y = x @ w.T
    if bias is not None:
        y = y + bias
    return check_finite(y, "linear")


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, n, c):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels) -> float:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    _require_rank(logits, 2, "logits")
    labels = _check_labels(labels, *logits.shape)
    logp = log_softmax(logits)
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(check_finite(np.asarray(loss), "softmax_cross_entropy"))


def softmax_cross_entropy_grad(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(labels, *logits.shape)
    p = np.exp(log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1
    return p / len(labels)
