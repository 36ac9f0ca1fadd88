"""Brute-force reference implementations, kept independent of the package."""

import math

import numpy as np


def conv2d_loops(x, w, bias=None, stride=1, padding=0):
    """Nested-loop cross-correlation in float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    B, C, H, W = x.shape
    O, _, K1, K2 = w.shape
    Ho = (H + 2 * padding - K1) // stride + 1
    Wo = (W + 2 * padding - K2) // stride + 1
    y = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0 if bias is None else float(bias[o])
                    for c in range(C):
                        for di in range(K1):
                            for dj in range(K2):
                                r = i * stride + di - padding
                                q = j * stride + dj - padding
                                if 0 <= r < H and 0 <= q < W:
                                    s += x[b, c, r, q] * w[o, c, di, dj]
                    y[b, o, i, j] = s
    return y


def max_pool2_scan(x):
    B, C, H, W = x.shape
    y = np.empty((B, C, H // 2, W // 2), dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(H // 2):
                for j in range(W // 2):
                    y[b, c, i, j] = max(x[b, c, 2 * i, 2 * j], x[b, c, 2 * i, 2 * j + 1],
                                        x[b, c, 2 * i + 1, 2 * j], x[b, c, 2 * i + 1, 2 * j + 1])
    return y


def softmax_xent_naive(logits, labels):
    total = 0.0
    for row, lab in zip(np.asarray(logits, np.float64), labels):
        z = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[lab]) / z)
    return total / len(labels)


def central_diff(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (float64)."""
    x = np.array(x, np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g
