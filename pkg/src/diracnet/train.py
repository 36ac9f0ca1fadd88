"""SGD training loop, evaluation, and scaling-coefficient telemetry."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .tensor import NumericError

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    """Optimizer and loop settings.

    The defaults are the usual wide-residual-network CIFAR recipe (imported
    convention, not tuned here).  Desk-scale runs override ``epochs``.
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: tuple = ((60, 0.2), (120, 0.2), (160, 0.2))
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    nesterov: bool = False
    augment: bool = True

    def __post_init__(self):
        self.schedule = tuple(tuple(s) for s in self.schedule)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"schedule epochs must be strictly increasing, got {epochs}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for boundary, mult in self.schedule:
            if epoch >= boundary:
                lr *= mult
        return lr

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = [list(s) for s in self.schedule]
        return d


@dataclass
class SGD:
    """Momentum SGD with weight decay on the ``decayed`` parameter group only.

    ``v <- momentum * v + grad + wd * param``; ``param <- param - lr * v``.
    """

    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = False
    velocity: dict = field(default_factory=dict)

    def step(self, named_params, lr: float) -> None:
        for name, p, group in named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")
            if group == "decayed" and self.weight_decay:
                g = g + self.weight_decay * p.value
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            update = g + self.momentum * v if self.nesterov else v
            p.value = (p.value - lr * update).astype(p.value.dtype)


def sgd_step(named_params, optimizer: SGD, lr: float) -> None:
    optimizer.step(named_params, lr)


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        # Train-mode batch norm cannot normalize a single sample.
        if len(idx) < 2:
            continue
        yield idx


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    """Independent generator per (seed, epoch, stream)."""
    return np.random.default_rng([seed, epoch, stream])


def train_epoch(net, data, cfg: OptimConfig, optimizer: SGD, epoch: int):
    """One pass over ``data`` in train mode; returns ``(mean loss, accuracy)``."""
    from .data import augment

    if len(data) == 0:
        raise ValueError("empty training set")
    net.train()
    params = net.named_parameters()
    lr = cfg.lr_at(epoch)
    order = epoch_rng(cfg.seed, epoch, 0).permutation(len(data))
    aug_rng = epoch_rng(cfg.seed, epoch, 1)
    total_loss, correct, seen = 0.0, 0, 0
    for idx in _batches(len(data), cfg.batch_size, order):
        x = data.images[idx]
        if cfg.augment:
            x = augment(x, aug_rng)
        x = data.normalize(x)
        y = data.labels[idx]
        ag.zero_grads(v for _, v, _ in params)
        logits = net(x)
        loss = ag.softmax_cross_entropy(logits, y)
        ag.backward(loss)
        optimizer.step(params, lr)
        total_loss += float(loss.value) * len(idx)
        correct += int((logits.value.argmax(axis=1) == y).sum())
        seen += len(idx)
    return total_loss / seen, correct / seen


def evaluate(net, data, batch_size: int = 256):
    """Loss and accuracy in eval mode; the network is left unchanged."""
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    prev = net.mode
    net.eval()
    total_loss, correct = 0.0, 0
    try:
        with ag.no_grad():
            for start in range(0, len(data), batch_size):
                x = data.normalize(data.images[start:start + batch_size])
                y = data.labels[start:start + batch_size]
                logits = net(x).value
                total_loss += float(ag.softmax_cross_entropy(logits, y).value) * len(y)
                correct += int((logits.argmax(axis=1) == y).sum())
    finally:
        net.mode = prev
    return total_loss / len(data), correct / len(data)


# ---------------------------------------------------------------------------
# telemetry
# ---------------------------------------------------------------------------

@dataclass
class ScalingRow:
    epoch: int
    group: int
    layer: int
    a_mean: float
    b_mean: float
    min_abs_ratio: float


SCALING_FIELDS = ["epoch", "group", "layer", "a_mean", "b_mean", "min_abs_ratio"]
METRIC_FIELDS = ["epoch", "split", "loss", "accuracy"]


def _f32(x: float) -> np.float32:
    return np.float32(x)


def record_scaling(net, epoch: int) -> list[ScalingRow]:
    """Layer-level mean of ``a`` and ``b`` plus the smallest ``|a_i| / |b_i|``."""
    rows = []
    for idx, layer in net.dirac_layers():
        a = layer.params.a.value.astype(np.float64)
        b = layer.params.b.value.astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(a) / np.abs(b)
        rows.append(ScalingRow(epoch, layer.group + 1, idx, float(_f32(a.mean())),
                               float(_f32(b.mean())), float(ratio.min())))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return np.format_float_positional(np.float32(v), unique=True, trim="-")
    return str(v)


class CsvLog:
    """Append-only CSV writer with a fixed header."""

    def __init__(self, path, fields):
        self.path, self.fields = path, fields
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(fields)

    def write(self, rows):
        with open(self.path, "a", newline="") as f:
            w = csv.writer(f)
            for r in rows:
                d = r if isinstance(r, dict) else asdict(r)
                w.writerow([_fmt(d[k]) for k in self.fields])


def fit(net, train_data, val_data, cfg: OptimConfig, run_dir=None, on_epoch=None,
        optimizer: SGD | None = None, start_epoch: int = 0):
    """Train for ``cfg.epochs`` epochs; returns a list of per-epoch metric dicts.

    With ``run_dir`` set, ``metrics.csv`` and (for networks with Dirac
    layers) ``scaling_trace.csv`` are written there.  Scaling coefficients
    are recorded at the start of each epoch, so epoch 0 holds the initial
    values.
    """
    from pathlib import Path

    optimizer = optimizer or SGD(cfg.momentum, cfg.weight_decay, cfg.nesterov)
    metrics_log = trace_log = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        metrics_log = CsvLog(run_dir / "metrics.csv", METRIC_FIELDS)
        if net.dirac_layers():
            trace_log = CsvLog(run_dir / "scaling_trace.csv", SCALING_FIELDS)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        if trace_log is not None:
            trace_log.write(record_scaling(net, epoch))
        tr_loss, tr_acc = train_epoch(net, train_data, cfg, optimizer, epoch)
        row = {"epoch": epoch, "train_loss": tr_loss, "train_acc": tr_acc}
        if val_data is not None:
            row["val_loss"], row["val_acc"] = evaluate(net, val_data)
        history.append(row)
        if metrics_log is not None:
            metrics_log.write([{"epoch": epoch, "split": "train", "loss": tr_loss,
                                "accuracy": tr_acc}])
            if val_data is not None:
                metrics_log.write([{"epoch": epoch, "split": "val", "loss": row["val_loss"],
                                    "accuracy": row["val_acc"]}])
        log.info("epoch %d lr %.4g train loss %.4f acc %.4f%s", epoch, cfg.lr_at(epoch),
                 tr_loss, tr_acc,
                 f" val loss {row['val_loss']:.4f} acc {row['val_acc']:.4f}" if val_data else "")
        if on_epoch is not None:
            on_epoch(epoch, row, optimizer)
    net.train()
    return history
