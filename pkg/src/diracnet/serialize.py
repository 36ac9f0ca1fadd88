"""Single-file checkpoint format.

Layout (all integers little-endian)::

    b"DRCN"                      magic
    u32   version
    u32   metadata length L
    L     UTF-8 JSON metadata (sorted keys, compact separators)
    then, per tensor, in canonical order:
    u32   name length, name bytes (UTF-8)
    u32   rank, rank x u64 dims
    f32   values, row-major

The metadata holds the network spec, the variant tag, the layer manifest,
training extras (epoch, seed, normalization stats) and the tensor count.
Network tensors are named ``layers.<i>.<param>``; optimizer momentum
buffers are stored as ``optim.velocity.<param name>``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .nn import Network, NetworkSpec, network_from_manifest
from .train import SGD

MAGIC = b"DRCN"
VERSION = 1
VELOCITY_PREFIX = "optim.velocity."


class CheckpointError(ValueError):
    pass


def _dump_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def _write_tensor(f, name: str, arr: np.ndarray):
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"unexpected end of file while reading {what}")
    return b


def _read_tensor(f):
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise CheckpointError("unexpected end of file while reading tensor name length")
    (nlen,) = struct.unpack("<I", head)
    name = _read_exact(f, nlen, "tensor name").decode()
    (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"dims of {name}"))
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(f, 4 * count, f"values of {name}"), dtype="<f4")
    return name, data.astype(np.float32).reshape(dims)


def save(net: Network, path, extras: dict | None = None) -> None:
    """Write ``net`` (and optional extras) to ``path``.

    Recognized extras: ``optimizer`` (an :class:`SGD` whose velocity buffers
    are stored), ``epoch``, ``seed``, ``norm_mean``, ``norm_std``; any other
    JSON-serializable entries go into the metadata under ``extras``.
    """
    extras = dict(extras or {})
    optimizer = extras.pop("optimizer", None)
    tensors = list(net.state().items())
    if optimizer is not None:
        tensors += [(VELOCITY_PREFIX + k, v) for k, v in sorted(optimizer.velocity.items())]
        extras["optimizer"] = {"momentum": optimizer.momentum,
                               "weight_decay": optimizer.weight_decay,
                               "nesterov": optimizer.nesterov}
    for key in ("norm_mean", "norm_std"):
        if key in extras and extras[key] is not None:
            extras[key] = [float(v) for v in np.asarray(extras[key], np.float32)]
    meta = {
        "spec": net.spec.to_dict(),
        "variant": net.variant,
        "layers": net.manifest(),
        "extras": extras,
        "tensor_names": [name for name, _ in tensors],
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = _dump_meta(meta)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


def read_raw(path):
    """Return ``(metadata, {name: array})`` without building a network."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version, mlen = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                                  f"(expected {VERSION})")
        meta = json.loads(_read_exact(f, mlen, "metadata").decode())
        tensors = {}
        while (item := _read_tensor(f)) is not None:
            name, arr = item
            if name in tensors:
                raise CheckpointError(f"duplicate tensor {name}")
            tensors[name] = arr
    return meta, tensors


def load(path):
    """Rebuild the network and extras from a checkpoint written by :func:`save`."""
    meta, tensors = read_raw(path)
    spec = NetworkSpec.from_dict(meta["spec"])
    net = network_from_manifest(meta["layers"], spec, meta["variant"])
    params = {name: v for name, v, _ in net.named_parameters()}
    buffers = dict(net.named_buffers())
    for name in list(params) + list(buffers):
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        expected = (params[name].value if name in params else buffers[name]).shape
        if tensors[name].shape != expected:
            raise CheckpointError(f"tensor {name} has shape {tensors[name].shape}, "
                                  f"network expects {expected}")
        if name in params:
            params[name].value = tensors[name].copy()
        else:
            net.set_buffer(name, tensors[name].copy())
    known = set(params) | set(buffers)
    extras = dict(meta.get("extras", {}))
    opt_cfg = extras.pop("optimizer", None)
    velocity = {k[len(VELOCITY_PREFIX):]: v.copy() for k, v in tensors.items()
                if k.startswith(VELOCITY_PREFIX)}
    stray = [k for k in tensors if k not in known and not k.startswith(VELOCITY_PREFIX)]
    if stray:
        raise CheckpointError(f"unexpected tensors in checkpoint: {stray[:5]}")
    if opt_cfg is not None:
        extras["optimizer"] = SGD(opt_cfg["momentum"], opt_cfg["weight_decay"],
                                  opt_cfg["nesterov"], velocity)
    for key in ("norm_mean", "norm_std"):
        if extras.get(key) is not None:
            extras[key] = np.asarray(extras[key], np.float32)
    net.eval()
    return net, extras
