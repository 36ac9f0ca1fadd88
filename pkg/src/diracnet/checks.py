"""Self-contained property checks behind ``diracnet check``.

Each check returns ``(passed, detail)``.  They are small enough to run in a
few seconds and double as building blocks for the test-suite.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import nn
from .dirac import build_dirac_delta, fold_network, weight_norm
from .tensor import conv2d


def naive_conv2d(x, w, bias=None, stride=1, padding=0):
    """Quadruple-loop reference convolution in float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((b, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((b, cout, ho, wo))
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    y[n, o, i, j] = (patch * w[o]).sum()
            if bias is not None:
                y[n, o] += bias[o]
    return y


def dirac_fragment(channels=3, layers=3, num_classes=4, seed=0, dtype=np.float64):
    """A short Dirac conv stack with frozen, randomized batch norm.

    Frozen BN makes the forward pass a deterministic function of the
    parameters, which finite differencing requires.
    """
    rng = np.random.default_rng(seed)
    spec = nn.NetworkSpec(1, 1, num_classes, channels, "dirac")
    stack = []
    for _ in range(layers):
        conv = nn.DiracConv2d(channels, 3, rng=rng, dtype=dtype)
        conv.params.a.value = rng.uniform(0.5, 1.5, channels).astype(dtype)
        conv.params.b.value = rng.uniform(0.1, 1.0, channels).astype(dtype)
        conv.bias.value = rng.normal(0, 0.1, channels).astype(dtype)
        bn = nn.BatchNorm2d(channels, dtype, frozen=True)
        randomize_bn(bn, rng)
        stack += [conv, bn, nn.ReLU()]
    stack += [nn.GlobalAvgPool(), nn.Linear(channels, num_classes, rng=rng, dtype=dtype)]
    return nn.Network(stack, spec)


def randomize_bn(bn, rng):
    c = bn.in_channels
    dt = bn.stats.gamma.dtype
    bn.stats.gamma.value = rng.uniform(0.5, 1.5, c).astype(dt)
    bn.stats.beta.value = rng.normal(0, 0.2, c).astype(dt)
    bn.stats.running_mean = rng.normal(0, 0.2, c).astype(dt)
    bn.stats.running_var = rng.uniform(0.5, 2.0, c).astype(dt)


def randomize_network(net, rng, scale_ab=True):
    """Perturb BN statistics and Dirac scales so folding is non-trivial."""
    for layer in net.layers:
        if isinstance(layer, nn.BatchNorm2d):
            randomize_bn(layer, rng)
        if scale_ab and isinstance(layer, nn.DiracConv2d):
            m = layer.in_channels
            dt = layer.params.a.dtype
            layer.params.a.value = rng.uniform(0.5, 1.5, m).astype(dt)
            layer.params.b.value = rng.uniform(0.05, 0.5, m).astype(dt)


# ---------------------------------------------------------------------------

def check_identity(rng, cases=20):
    worst = 0.0
    for _ in range(cases):
        m = int(rng.choice([1, 2, 4, 8]))
        k = int(rng.choice([1, 3, 5]))
        s = int(rng.integers(4, 17))
        x = rng.standard_normal((2, m, s, s)).astype(np.float32)
        y = conv2d(x, build_dirac_delta(m, k), padding=k // 2)
        worst = max(worst, float(np.abs(y - x).max()))
    return worst <= 1e-6, f"max |conv(x, I) - x| = {worst:.2e}"


def check_implicit_skip(rng, cases=20):
    worst = 0.0
    for _ in range(cases):
        m = int(rng.choice([1, 2, 4, 8]))
        s = int(rng.integers(4, 17))
        x = rng.standard_normal((2, m, s, s))
        w = rng.standard_normal((m, m, 3, 3)) * 0.1
        lhs = conv2d(x, build_dirac_delta(m, 3, dtype=np.float64) + w, padding=1)
        rhs = x + conv2d(x, w, padding=1)
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst <= 1e-6, f"max |conv(x, I+W) - (x + conv(x, W))| = {worst:.2e}"


def check_weight_norm(rng, cases=20):
    worst = 0.0
    for _ in range(cases):
        m = int(rng.integers(1, 9))
        k = int(rng.choice([1, 3, 5]))
        w = rng.standard_normal((m, m, k, k)).astype(np.float32)
        with ag.no_grad():
            out = weight_norm(w).value
        norms = np.sqrt((out.astype(np.float64) ** 2).reshape(m, -1).sum(axis=1))
        worst = max(worst, float(np.abs(norms - 1).max()))
    return worst <= 1e-6, f"max |filter norm - 1| = {worst:.2e}"


def check_conv_oracle(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    bias = rng.standard_normal(4)
    ref = naive_conv2d(x, w, bias, 1, 1)
    worst = max(float(np.abs(conv2d(x, w, bias, 1, 1, method=m) - ref).max())
                for m in ("direct", "im2col"))
    return worst <= 1e-9, f"max deviation from naive oracle = {worst:.2e}"


def check_gradients(rng):
    net = dirac_fragment(seed=int(rng.integers(1 << 30)))
    x = rng.standard_normal((2, 3, 4, 4))
    y = rng.integers(0, 4, 2)
    report = ag.finite_diff_check(lambda: ag.softmax_cross_entropy(net(x), y),
                                  [(n, v) for n, v, _ in net.named_parameters()])
    return report.passed, f"worst relative gradient error = {report.worst:.2e}"


def check_fold(rng):
    net = nn.build_diracnet(nn.NetworkSpec(1, 1), seed=int(rng.integers(1 << 30)))
    randomize_network(net, rng)
    net.eval()
    folded = fold_network(net)
    x = rng.standard_normal((16, 3, 32, 32)).astype(np.float32)
    with ag.no_grad():
        a, b = net(x).value, folded(x).value
    diff = float(np.abs(a - b).max())
    agree = bool((a.argmax(1) == b.argmax(1)).all())
    leftover = [l.kind for l in folded.layers if l.kind in ("batchnorm2d", "dirac_conv2d")]
    ok = diff <= 1e-4 and agree and not leftover
    return ok, f"max logit diff = {diff:.2e}, argmax agree = {agree}, leftover = {leftover}"


def check_sigma_sweep(rng):
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    y = np.arange(4) % 10
    for sigma in (0.0, 1e-8, 1e-4, 0.1, 1.0):
        spec = nn.NetworkSpec(1, 1, variant="resnet_dirac_init", init_sigma=sigma)
        net = nn.build_resnet_dirac_init(spec, seed=int(rng.integers(1 << 30)))
        loss = ag.softmax_cross_entropy(net(x), y)
        ag.backward(loss)
        if not all(np.isfinite(p.grad).all() for p in net.parameters() if p.grad is not None):
            return False, f"non-finite gradient at sigma={sigma:g}"
    return True, "forward/backward finite for sigma in {0, 1e-8, 1e-4, 0.1, 1}"


CHECKS = [
    ("dirac-identity", check_identity),
    ("implicit-skip", check_implicit_skip),
    ("weight-norm", check_weight_norm),
    ("conv-oracle", check_conv_oracle),
    ("gradients", check_gradients),
    ("fold-equivalence", check_fold),
    ("sigma-sweep", check_sigma_sweep),
]


def run_checks(seed: int = 0, out=print) -> int:
    """Run all checks; stop at the first failure. Returns a process exit code."""
    rng = np.random.default_rng(seed)
    for name, fn in CHECKS:
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # diagnosis includes the failing check's name
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            return 1
    return 0
