"""Command-line entry point: ``diracnet {train,eval,fold,check}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import serialize
from .checks import run_checks
from .data import load_cifar10, make_synthetic_split
from .dirac import AlreadyFoldedError, fold_network
from .nn import NetworkSpec, SpecError, build_network
from .train import OptimConfig, SGD, evaluate, fit

log = logging.getLogger("diracnet")

VARIANT_FLAGS = {"dirac": "dirac", "plain": "plain", "resnet-dirac": "resnet_dirac_init"}


class UsageError(ValueError):
    pass


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def _default_threads():
    env = os.environ.get("DIRACNET_THREADS")
    return int(env) if env else None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diracnet", description=__doc__,
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--threads", type=_positive_int, default=_default_threads(),
                   help="BLAS threads (env DIRACNET_THREADS; default: library default)")
    p.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def data_args(sp):
        sp.add_argument("--dataset", choices=["synthetic", "cifar10"], default=None,
                        help="dataset (train default: synthetic; eval default: as trained)")
        sp.add_argument("--data-dir", default="data/cifar-10-batches-bin",
                        help="directory with CIFAR-10 binary batches")
        sp.add_argument("--classes", type=_positive_int, default=10,
                        help="synthetic: number of classes")
        sp.add_argument("--train-per-class", type=_positive_int, default=500,
                        help="synthetic: training images per class")
        sp.add_argument("--val-per-class", type=_positive_int, default=100,
                        help="synthetic: validation images per class")
        sp.add_argument("--data-seed", type=int, default=None,
                        help="synthetic: generator seed (default: --seed)")

    t = sub.add_parser("train", help="train a network", formatter_class=fmt)
    t.add_argument("--variant", choices=list(VARIANT_FLAGS), default="dirac")
    t.add_argument("--n", type=int, default=1, help="blocks per group N (2N convs per group)")
    t.add_argument("--k", type=int, default=1, help="width factor k")
    t.add_argument("--sigma", type=float, default=1e-8, help="resnet-dirac: init std")
    t.add_argument("--zero-init", action="store_true",
                   help="resnet-dirac: drop the identity term from the init")
    t.add_argument("--weight-init", choices=["normal", "orthogonal"], default="normal",
                   help="dirac: init of the raw weights")
    data_args(t)
    t.add_argument("--run-dir", default="runs/latest", help="output directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=_positive_int, default=OptimConfig.epochs)
    t.add_argument("--lr", type=float, default=OptimConfig.lr)
    t.add_argument("--momentum", type=float, default=OptimConfig.momentum)
    t.add_argument("--weight-decay", type=float, default=OptimConfig.weight_decay)
    t.add_argument("--batch-size", type=_positive_int, default=OptimConfig.batch_size)
    t.add_argument("--schedule", default=None,
                   help="LR schedule as 'epoch:mult,...' (default: 30%%/60%%/80%% of epochs x0.2)")
    t.add_argument("--no-augment", action="store_true", help="disable flips and crops")

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("checkpoint")
    data_args(e)
    e.add_argument("--seed", type=int, default=None, help="synthetic: data seed override")

    f = sub.add_parser("fold", help="fold Dirac scales and batch norm into plain convs",
                       formatter_class=fmt)
    f.add_argument("checkpoint")
    f.add_argument("--out", required=True, help="folded checkpoint path")
    f.add_argument("--report", default=None,
                   help="equivalence report CSV (default: <out>.report.csv)")
    f.add_argument("--inputs", type=_positive_int, default=256,
                   help="random inputs used for the equivalence report")
    f.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("check", help="run the built-in property checks", formatter_class=fmt)
    c.add_argument("--seed", type=int, default=0)
    return p


def parse_schedule(text: str | None, epochs: int):
    if text is None:
        # Same shape as the 60/120/160-of-200 recipe, scaled to the run length.
        marks = sorted({max(1, round(epochs * f)) for f in (0.3, 0.6, 0.8)})
        return tuple((m, 0.2) for m in marks if m < epochs)
    if not text.strip():
        return ()
    out = []
    for item in text.split(","):
        ep, mult = item.split(":")
        out.append((int(ep), float(mult)))
    return tuple(out)


def load_data(args, seed):
    if args.dataset == "cifar10":
        return load_cifar10(args.data_dir)
    return make_synthetic_split(args.classes, args.train_per_class, args.val_per_class, seed)


# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.n < 1 or args.k < 1:
        raise UsageError(f"--n and --k must be positive (got n={args.n}, k={args.k})")
    variant = VARIANT_FLAGS[args.variant]
    args.dataset = args.dataset or "synthetic"
    data_seed = args.seed if args.data_seed is None else args.data_seed
    train_data, val_data = load_data(args, data_seed)
    spec = NetworkSpec(args.n, args.k, train_data.num_classes, 3, variant,
                       init_sigma=args.sigma if variant == "resnet_dirac_init" else 0.0,
                       identity_init=not args.zero_init, weight_init=args.weight_init)
    cfg = OptimConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                      schedule=parse_schedule(args.schedule, args.epochs), epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed, augment=not args.no_augment)
    net = build_network(spec, seed=args.seed)

    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data_cfg = {"dataset": args.dataset, "data_dir": args.data_dir, "classes": args.classes,
                "train_per_class": args.train_per_class, "val_per_class": args.val_per_class,
                "data_seed": data_seed}
    echo = {"command": "train", "spec": spec.to_dict(), "optim": cfg.to_dict(),
            "data": data_cfg, "run_dir": str(run_dir), "threads": args.threads}
    (run_dir / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    log.info("training %s depth %d (%d parameters) on %d images", variant, spec.depth,
             net.parameter_count(), len(train_data))

    best = {"acc": -1.0}
    extras_base = {"seed": args.seed, "norm_mean": train_data.mean, "norm_std": train_data.std,
                   "data": data_cfg}

    def on_epoch(epoch, row, optimizer):
        extras = dict(extras_base, epoch=epoch + 1, optimizer=optimizer)
        serialize.save(net, run_dir / "latest.drcn", extras)
        if row["val_acc"] > best["acc"]:
            best["acc"] = row["val_acc"]
            serialize.save(net, run_dir / "best.drcn", extras)

    history = fit(net, train_data, val_data, cfg, run_dir=run_dir, on_epoch=on_epoch,
                  optimizer=SGD(cfg.momentum, cfg.weight_decay, cfg.nesterov))
    print(f"final val accuracy: {history[-1]['val_acc']:.4f}")
    return 0


def _eval_dataset(args, extras):
    stored = extras.get("data", {})
    if args.dataset is None:
        args.dataset = stored.get("dataset", "synthetic")
        for key in ("classes", "train_per_class", "val_per_class"):
            if key in stored:
                setattr(args, key, stored[key])
        if stored.get("dataset") == "cifar10":
            args.data_dir = stored.get("data_dir", args.data_dir)
    seed = args.seed if args.seed is not None else (
        args.data_seed if args.data_seed is not None else stored.get("data_seed", 0))
    _, val = load_data(args, seed)
    if extras.get("norm_mean") is not None:
        val = val.with_stats(extras["norm_mean"], extras["norm_std"])
    return val


def cmd_eval(args) -> int:
    net, extras = serialize.load(args.checkpoint)
    val = _eval_dataset(args, extras)
    loss, acc = evaluate(net, val)
    print(f"loss {loss:.6f} accuracy {acc:.4f} ({len(val)} images, {net.variant})")
    return 0


def equivalence_report(net, folded, n_inputs=256, seed=0, batch=64):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_inputs, 3, 32, 32)).astype(np.float32)
    diff, agree = 0.0, 0
    with ag.no_grad():
        for s in range(0, n_inputs, batch):
            a = net(x[s:s + batch]).value
            b = folded(x[s:s + batch]).value
            diff = max(diff, float(np.abs(a - b).max()))
            agree += int((a.argmax(1) == b.argmax(1)).sum())
    return {"inputs": n_inputs, "max_abs_diff": diff, "argmax_agreement": agree / n_inputs}


def cmd_fold(args) -> int:
    net, extras = serialize.load(args.checkpoint)
    if net.variant == "folded":
        raise AlreadyFoldedError(f"{args.checkpoint} is already folded")
    if net.variant != "dirac":
        raise UsageError(f"fold only applies to dirac checkpoints, got {net.variant!r}")
    net.eval()
    folded = fold_network(net)
    report = equivalence_report(net, folded, args.inputs, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extras.pop("optimizer", None)
    serialize.save(folded, out, extras)
    report_path = Path(args.report) if args.report else out.with_name(out.name + ".report.csv")
    with open(report_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in report.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    print(f"folded {net.conv_count()} convs; max abs diff {report['max_abs_diff']:.3e}, "
          f"argmax agreement {report['argmax_agreement']:.4f}")
    return 0


def cmd_check(args) -> int:
    return run_checks(args.seed)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "fold": cmd_fold, "check": cmd_check}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, ValueError, TypeError, SpecError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
