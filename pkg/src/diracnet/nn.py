"""Layers and model builders.

Three model families share one topology (a 3x3 stem, three groups of
``2N`` convolutions at widths 16k/32k/64k separated by 2x2 max-pooling,
global average pooling and a linear classifier):

* ``dirac``: the first conv of every group changes width and is a plain
  conv; the remaining ``2N - 1`` convs of the group are Dirac-parameterized.
* ``plain``: the same stack with ordinary MSRA-initialized convs.
* ``resnet_dirac_init``: ``N`` basic residual blocks per group whose conv
  weights are initialized as ``I + W`` with ``W ~ N(0, sigma^2)``.

Every conv is followed by batch norm and ReLU (conv -> BN -> ReLU).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Variable
from .dirac import BatchNormStats, DiracConvParams, build_dirac_delta, effective_weight

VARIANTS = ("dirac", "plain", "resnet_dirac_init")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    blocks_per_group: int = 1
    width_factor: int = 1
    num_classes: int = 10
    input_channels: int = 3
    variant: str = "dirac"
    init_sigma: float = 0.0
    # resnet_dirac_init only: False drops the identity term, leaving W alone.
    identity_init: bool = True
    # dirac only: "normal" or "orthogonal" init of the raw weights.
    weight_init: str = "normal"

    def validate(self) -> "NetworkSpec":
        problems = []
        for name in ("blocks_per_group", "width_factor", "num_classes", "input_channels"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                problems.append(f"{name}={v!r} (must be a positive int)")
        if self.variant not in VARIANTS:
            problems.append(f"variant={self.variant!r} (must be one of {', '.join(VARIANTS)})")
        if not self.init_sigma >= 0:
            problems.append(f"init_sigma={self.init_sigma!r} (must be >= 0)")
        if self.weight_init not in ("normal", "orthogonal"):
            problems.append(f"weight_init={self.weight_init!r}")
        if problems:
            raise SpecError("invalid network spec: " + "; ".join(problems))
        return self

    @property
    def depth(self) -> int:
        """Depth label 6N + 4 (naming only)."""
        return 6 * self.blocks_per_group + 4

    @property
    def widths(self) -> tuple[int, int, int]:
        k = self.width_factor
        return 16 * k, 32 * k, 64 * k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    kind = "layer"
    in_channels: int | None = None
    out_channels: int | None = None

    def forward(self, x: Variable, training: bool) -> Variable:
        raise NotImplementedError

    def __call__(self, x, training=False):
        return self.forward(x, training)

    def named_parameters(self):
        """Yield ``(name, variable, decayed)`` triples."""
        return iter(())

    def named_buffers(self):
        return iter(())

    def config(self) -> dict:
        return {"kind": self.kind}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, bias=True, rng=None,
                 init="msra", sigma=0.0, identity=True, dtype=np.float32):
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.padding = kernel // 2
        shape = (out_channels, in_channels, kernel, kernel)
        rng = np.random.default_rng() if rng is None else rng
        if init == "msra":
            w = rng.standard_normal(shape) * np.sqrt(2.0 / (in_channels * kernel * kernel))
        elif init == "dirac":
            w = rng.standard_normal(shape) * sigma if sigma > 0 else np.zeros(shape)
            if identity:
                w = w + build_dirac_delta(in_channels, kernel, out_channels, dtype=np.float64)
        elif init == "zeros":
            w = np.zeros(shape)
        else:
            raise ValueError(f"unknown conv init {init!r}")
        self.weight = Variable(w.astype(dtype), requires_grad=True)
        self.bias = Variable(np.zeros(out_channels, dtype), requires_grad=True) if bias else None

    @classmethod
    def from_arrays(cls, w, bias=None, padding=None):
        layer = cls(w.shape[1], w.shape[0], w.shape[2], bias=bias is not None, init="zeros",
                    dtype=w.dtype)
        layer.weight.value = np.array(w)
        if bias is not None:
            layer.bias.value = np.array(bias, dtype=w.dtype)
        if padding is not None:
            layer.padding = padding
        return layer

    def forward(self, x, training=False):
        return ag.conv2d(x, self.weight, self.bias, 1, self.padding)

    def named_parameters(self):
        yield "weight", self.weight, True
        if self.bias is not None:
            yield "bias", self.bias, False

    def config(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel, "bias": self.bias is not None}


class DiracConv2d(Layer):
    kind = "dirac_conv2d"

    def __init__(self, channels, kernel=3, bias=True, rng=None, weight_init="normal",
                 group=0, dtype=np.float32):
        self.in_channels = self.out_channels = channels
        self.kernel = kernel
        self.padding = kernel // 2
        self.group = group
        self.params = DiracConvParams.init(channels, kernel, rng, weight_init, dtype)
        self.delta = build_dirac_delta(channels, kernel, dtype=dtype)
        self.bias = Variable(np.zeros(channels, dtype), requires_grad=True) if bias else None

    def weight(self) -> Variable:
        return effective_weight(self.params, self.delta)

    def forward(self, x, training=False):
        return ag.conv2d(x, self.weight(), self.bias, 1, self.padding)

    def named_parameters(self):
        yield "W", self.params.W, True
        yield "a", self.params.a, False
        yield "b", self.params.b, False
        if self.bias is not None:
            yield "bias", self.bias, False

    def config(self):
        return {"kind": self.kind, "channels": self.in_channels, "kernel": self.kernel,
                "bias": self.bias is not None, "group": self.group}


def batchnorm_forward(x, bn: BatchNormStats, mode: str) -> Variable:
    """Batch norm in ``"train"`` (batch statistics) or ``"eval"`` (running statistics) mode."""
    x = ag._lift(x)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        out, mu, var = ag.batch_norm_train(x, bn.gamma, bn.beta, bn.eps)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        m = bn.momentum
        unbiased = var * (n / max(n - 1, 1))
        bn.running_mean = ((1 - m) * bn.running_mean + m * mu).astype(bn.running_mean.dtype)
        bn.running_var = ((1 - m) * bn.running_var + m * unbiased).astype(bn.running_var.dtype)
        return out
    if mode == "eval":
        return ag.batch_norm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps)
    raise ValueError(f"unknown batch norm mode {mode!r}")


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, dtype=np.float32, frozen=False):
        self.in_channels = self.out_channels = channels
        self.stats = BatchNormStats.init(channels, dtype)
        # Frozen BN uses running statistics even in train mode (for gradient checks).
        self.frozen = frozen

    def forward(self, x, training=False):
        return batchnorm_forward(x, self.stats, "train" if training and not self.frozen else "eval")

    def named_parameters(self):
        yield "gamma", self.stats.gamma, False
        yield "beta", self.stats.beta, False

    def named_buffers(self):
        yield "running_mean", self.stats.running_mean
        yield "running_var", self.stats.running_var

    def set_buffer(self, name, value):
        setattr(self.stats, name, value)

    def config(self):
        return {"kind": self.kind, "channels": self.in_channels}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        return ag.relu(x)


class MaxPool2(Layer):
    kind = "max_pool2"

    def forward(self, x, training=False):
        return ag.max_pool2(x)


class GlobalAvgPool(Layer):
    kind = "avg_pool_global"

    def forward(self, x, training=False):
        return ag.avg_pool_global(x)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, sigma=None, dtype=np.float32):
        self.in_channels, self.out_channels = in_features, out_features
        rng = np.random.default_rng() if rng is None else rng
        std = 1.0 / np.sqrt(in_features) if sigma is None else sigma
        w = rng.standard_normal((out_features, in_features)) * std
        self.weight = Variable(w.astype(dtype), requires_grad=True)
        self.bias = Variable(np.zeros(out_features, dtype), requires_grad=True)

    def forward(self, x, training=False):
        return ag.linear(x, self.weight, self.bias)

    def named_parameters(self):
        yield "weight", self.weight, True
        yield "bias", self.bias, False

    def config(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels}


class ResidualBlock(Layer):
    """Basic block: relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x)).

    The shortcut is the identity when widths match and a 1x1 conv + BN
    projection otherwise.
    """

    kind = "residual_block"

    def __init__(self, in_channels, out_channels, rng=None, sigma=0.0, identity=True,
                 dtype=np.float32):
        self.in_channels, self.out_channels = in_channels, out_channels
        conv = dict(rng=rng, init="dirac", sigma=sigma, identity=identity, dtype=dtype)
        self.conv1 = Conv2d(in_channels, out_channels, 3, **conv)
        self.bn1 = BatchNorm2d(out_channels, dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, **conv)
        self.bn2 = BatchNorm2d(out_channels, dtype)
        if in_channels != out_channels:
            self.proj = Conv2d(in_channels, out_channels, 1, **conv)
            self.proj_bn = BatchNorm2d(out_channels, dtype)
        else:
            self.proj = self.proj_bn = None

    def sublayers(self):
        names = ["conv1", "bn1", "conv2", "bn2"]
        if self.proj is not None:
            names += ["proj", "proj_bn"]
        return [(n, getattr(self, n)) for n in names]

    def forward(self, x, training=False):
        h = ag.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return ag.relu(h + shortcut)

    def named_parameters(self):
        for prefix, layer in self.sublayers():
            for name, v, decayed in layer.named_parameters():
                yield f"{prefix}.{name}", v, decayed

    def named_buffers(self):
        for prefix, layer in self.sublayers():
            for name, v in layer.named_buffers():
                yield f"{prefix}.{name}", v

    def set_buffer(self, name, value):
        prefix, rest = name.split(".", 1)
        getattr(self, prefix).set_buffer(rest, value)

    def config(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels}


def layer_from_config(cfg: dict, dtype=np.float32) -> Layer:
    """Build an uninitialized layer from its :meth:`Layer.config` dict."""
    kind = cfg["kind"]
    if kind == "conv2d":
        return Conv2d(cfg["in"], cfg["out"], cfg["kernel"], bias=cfg["bias"], init="zeros",
                      dtype=dtype)
    if kind == "dirac_conv2d":
        layer = DiracConv2d(cfg["channels"], cfg["kernel"], bias=cfg["bias"], group=cfg["group"],
                            rng=np.random.default_rng(0), dtype=dtype)
        return layer
    if kind == "batchnorm2d":
        return BatchNorm2d(cfg["channels"], dtype)
    if kind == "linear":
        return Linear(cfg["in"], cfg["out"], rng=np.random.default_rng(0), dtype=dtype)
    if kind == "residual_block":
        return ResidualBlock(cfg["in"], cfg["out"], identity=False, dtype=dtype)
    simple = {"relu": ReLU, "max_pool2": MaxPool2, "avg_pool_global": GlobalAvgPool}
    if kind in simple:
        return simple[kind]()
    raise ValueError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """An ordered stack of layers with a train/eval mode flag."""

    def __init__(self, layers, spec: NetworkSpec, variant: str | None = None):
        self.layers = list(layers)
        self.spec = spec
        self.variant = variant or spec.variant
        self.mode = "train"
        self._check_chaining()

    def _check_chaining(self):
        channels = self.spec.input_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels is None:
                continue
            if layer.in_channels != channels:
                raise SpecError(f"layer {i} ({layer.kind}) expects {layer.in_channels} channels, "
                                f"previous layer produces {channels}")
            channels = layer.out_channels

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def forward(self, x) -> Variable:
        x = ag._lift(x)
        if x.ndim != 4:
            raise ValueError(f"network input must be [B,C,H,W], got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial dims must be divisible by 4, got {x.shape[2]}x{x.shape[3]}")
        training = self.mode == "train"
        for layer in self.layers:
            x = layer(x, training)
        return x

    __call__ = forward

    def named_parameters(self):
        """``(name, variable, group)`` with group ``"decayed"`` or ``"undecayed"``."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, v, decayed in layer.named_parameters():
                out.append((f"layers.{i}.{name}", v, "decayed" if decayed else "undecayed"))
        return out

    def parameters(self):
        return [v for _, v, _ in self.named_parameters()]

    def named_buffers(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, v in layer.named_buffers():
                out.append((f"layers.{i}.{name}", v))
        return out

    def set_buffer(self, name: str, value: np.ndarray):
        _, i, rest = name.split(".", 2)
        self.layers[int(i)].set_buffer(rest, value)

    def state(self) -> dict[str, np.ndarray]:
        """All parameter and buffer arrays by name, in canonical order."""
        d = {name: v.value for name, v, _ in self.named_parameters()}
        d.update(self.named_buffers())
        return d

    def parameter_count(self) -> int:
        return int(sum(v.value.size for v in self.parameters()))

    def dirac_layers(self) -> list[tuple[int, DiracConv2d]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, DiracConv2d)]

    def conv_count(self) -> int:
        return sum(isinstance(l, (Conv2d, DiracConv2d)) for l in self.layers)

    def manifest(self) -> list[dict]:
        return [layer.config() for layer in self.layers]


def forward(net: Network, x) -> Variable:
    return net.forward(x)


def _conv_bn_relu(conv, dtype):
    return [conv, BatchNorm2d(conv.out_channels, dtype), ReLU()]


def _build_stack(spec: NetworkSpec, rng, dirac: bool, dtype) -> list[Layer]:
    layers = _conv_bn_relu(Conv2d(spec.input_channels, 16, 3, rng=rng, dtype=dtype), dtype)
    channels = 16
    for g, width in enumerate(spec.widths):
        if g:
            layers.append(MaxPool2())
        layers += _conv_bn_relu(Conv2d(channels, width, 3, rng=rng, dtype=dtype), dtype)
        for _ in range(2 * spec.blocks_per_group - 1):
            if dirac:
                conv = DiracConv2d(width, 3, rng=rng, weight_init=spec.weight_init, group=g,
                                   dtype=dtype)
            else:
                conv = Conv2d(width, width, 3, rng=rng, dtype=dtype)
            layers += _conv_bn_relu(conv, dtype)
        channels = width
    layers += [GlobalAvgPool(), Linear(channels, spec.num_classes, rng=rng, dtype=dtype)]
    return layers


def build_diracnet(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    spec.validate()
    if spec.variant != "dirac":
        raise SpecError(f"build_diracnet needs variant 'dirac', got {spec.variant!r}")
    return Network(_build_stack(spec, np.random.default_rng(seed), True, dtype), spec)


def build_plainnet(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    spec.validate()
    if spec.variant != "plain":
        raise SpecError(f"build_plainnet needs variant 'plain', got {spec.variant!r}")
    return Network(_build_stack(spec, np.random.default_rng(seed), False, dtype), spec)


def build_resnet_dirac_init(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Residual network whose conv and classifier weights are ``I + N(0, sigma^2)``.

    With ``spec.identity_init`` false the identity term is dropped, so
    ``sigma = 0`` gives an all-zero network.
    """
    spec.validate()
    if spec.variant != "resnet_dirac_init":
        raise SpecError(f"build_resnet_dirac_init needs variant 'resnet_dirac_init', "
                        f"got {spec.variant!r}")
    rng = np.random.default_rng(seed)
    sigma, ident = spec.init_sigma, spec.identity_init
    layers = _conv_bn_relu(Conv2d(spec.input_channels, 16, 3, rng=rng, init="dirac",
                                  sigma=sigma, identity=ident, dtype=dtype), dtype)
    channels = 16
    for g, width in enumerate(spec.widths):
        if g:
            layers.append(MaxPool2())
        for _ in range(spec.blocks_per_group):
            layers.append(ResidualBlock(channels, width, rng=rng, sigma=sigma, identity=ident,
                                        dtype=dtype))
            channels = width
    layers += [GlobalAvgPool(), Linear(channels, spec.num_classes, rng=rng, sigma=sigma,
                                       dtype=dtype)]
    return Network(layers, spec)


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    builders = {"dirac": build_diracnet, "plain": build_plainnet,
                "resnet_dirac_init": build_resnet_dirac_init}
    spec.validate()
    return builders[spec.variant](spec, seed, dtype)


def network_from_manifest(manifest: list[dict], spec: NetworkSpec, variant: str,
                          dtype=np.float32) -> Network:
    return Network([layer_from_config(c, dtype) for c in manifest], spec, variant)
