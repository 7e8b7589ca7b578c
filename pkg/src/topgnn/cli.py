"""Command-line entry point: gen -> partition -> precompute -> train -> eval / report.

Every subcommand writes its outputs and a ``manifest.txt`` (``key: value``
lines) under ``--out``. A manifest can be fed back through ``--config`` to
repeat a run; flags given on the command line win over file values.
"""

from __future__ import annotations

import argparse
import hashlib
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__, seeds
from .compensation import CacheHeader, load_cache, partition_digest, precompute_all, save_cache
from .datasets import DatasetError, check_dataset, gen_citation_like, gen_duplication, gen_two_orbit, gen_sbm, load_dataset, save_dataset
from .models import ACTIVATIONS, ARCHS, GnnModel, load_checkpoint, save_checkpoint
from .report import format_table, invariance_report, trained_pair, write_report_csv
from .samplers import group_clusters, load_partition, locality_partition, random_partition, random_walk_partition, save_partition
from .training import METHODS, TrainConfig, evaluate, layerwise_inference, train, write_metrics_csv

GENERATORS = ("two-orbit", "duplication", "sbm", "citation")
SUB_SEEDS = ("init", "partition", "subsample", "walk", "batch-order", "data")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config / manifest


def read_config(path) -> dict[str, str]:
    """``key = value`` or ``key: value`` per line; ``#`` starts a comment."""
    out = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            eq, colon = s.find("="), s.find(":")
            cut = min(p for p in (eq, colon) if p >= 0) if max(eq, colon) >= 0 else -1
            if cut < 0:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, value = s[:cut].strip(), s[cut + 1 :].strip()
            out[key.replace("-", "_")] = value
    return out


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def write_manifest(path: Path, entries: dict) -> None:
    with path.open("w") as fh:
        for k, v in entries.items():
            fh.write(f"{k}: {'' if v is None else v}\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def base_manifest(args) -> dict:
    entries = {"command": args.command}
    for k, v in sorted(vars(args).items()):
        if k in ("command", "func", "config"):
            continue
        entries[k.replace("_", "-")] = str(Path(v).resolve()) if k in _PATH_KEYS and v else v
    for name in SUB_SEEDS:
        entries[f"subseed.{name}"] = seeds.derive(args.seed, name)
    entries["version.topgnn"] = __version__
    entries["version.numpy"] = np.__version__
    entries["version.scipy"] = scipy.__version__
    entries["version.python"] = platform.python_version()
    return entries


_PATH_KEYS = {"data", "partition", "cache", "checkpoint", "out"}
# a directory written by an earlier step stands for the file it holds
_DIR_FILES = {"partition": "partition.txt", "cache": "compensation.bin", "checkpoint": "model.ckpt"}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key = value file; flags win")
    common.add_argument("--threads", type=int, default=1)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--arch", choices=ARCHS, default="gcn")
    model.add_argument("--layers", type=int, default=2)
    model.add_argument("--hidden", type=int, default=16)

    comp = argparse.ArgumentParser(add_help=False)
    comp.add_argument("--k", type=int, help="compensation rank (default: hidden size)")
    comp.add_argument("--n-inits", type=int, default=1)
    comp.add_argument("--mode", choices=("fast", "exact"), default="fast")

    p = argparse.ArgumentParser(prog="topgnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    g.add_argument("--kind", choices=GENERATORS, default="sbm")
    g.add_argument("--n", type=int, default=400)
    g.add_argument("--blocks", type=int, default=8)
    g.add_argument("--p-in", type=float, default=0.1)
    g.add_argument("--p-out", type=float, default=0.005)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--feature-dim", type=int)
    g.add_argument("--base-n", type=int, default=8)
    g.add_argument("--copies", type=int, default=4)
    g.add_argument("--p-edge", type=float, default=0.3)
    g.set_defaults(func=cmd_gen)

    q = sub.add_parser("partition", parents=[common], help="split nodes into batches")
    q.add_argument("--data")
    q.add_argument("--method", choices=("locality", "random", "random_walk"), default="locality")
    q.add_argument("--num-clusters", type=int, default=10)
    q.add_argument("--clusters-per-batch", type=int, default=1)
    q.add_argument("--walk-roots", type=int, default=10)
    q.add_argument("--walk-len", type=int, default=4)
    q.add_argument("--exclude-eval", type=_bool, default=False)
    q.set_defaults(func=cmd_partition)

    c = sub.add_parser("precompute", parents=[common, model, comp], help="fit one compensation per batch")
    c.add_argument("--data")
    c.add_argument("--partition")
    c.add_argument("--power-iters", type=int, default=0)
    c.set_defaults(func=cmd_precompute)

    t = sub.add_parser("train", parents=[common, model], help="train and log metrics")
    t.add_argument("--data")
    t.add_argument("--partition")
    t.add_argument("--cache")
    t.add_argument("--method", choices=METHODS, default="top")
    t.add_argument("--activation", choices=ACTIVATIONS, default="relu")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--refresh-every", type=int, default=0)
    t.add_argument("--clock", choices=("wall", "off"), default="wall", help="'off' writes wall_s = 0")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="exact layer-wise inference of a checkpoint")
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--chunk-size", type=int, default=1024)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("invariance-report", parents=[common, model, comp], help="approximation-error table")
    r.add_argument("--data")
    r.add_argument("--ratios", default="0.1,0.25,0.5,1.0")
    r.add_argument("--partition", help="fixed batches instead of --ratios")
    r.add_argument("--epochs", type=int, default=50)
    r.add_argument("--lr", type=float, default=0.5)
    r.add_argument("--gas-lag", type=int, default=5, help="epochs between history and current weights")
    r.set_defaults(func=cmd_invariance_report)

    k = sub.add_parser("check", parents=[common], help="dataset directory conformance")
    k.add_argument("--data")
    k.set_defaults(func=cmd_check)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in cfg.items():
            if key not in known or key in ("config", "help", "command"):
                continue
            if value == "":
                defaults[key] = None
            elif known[key].type is _bool:
                defaults[key] = _bool(value)
            else:
                defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _need(args, *names) -> None:
    for name in names:
        if getattr(args, name) in (None, ""):
            raise CliError(f"--{name.replace('_', '-')} is required for '{args.command}'")
    for name in names:
        path = Path(getattr(args, name))
        if name in _DIR_FILES and path.is_dir():
            setattr(args, name, str(path / _DIR_FILES[name]))
        if name in ("data", "partition", "cache", "checkpoint") and not Path(getattr(args, name)).exists():
            raise CliError(f"--{name}: {getattr(args, name)} does not exist")


def _out(args) -> Path:
    _need(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> dict:
    s = seeds.derive(args.seed, "data")
    if args.kind == "two-orbit":
        ds = gen_two_orbit(args.feature_dim or 4, s)
    elif args.kind == "duplication":
        ds = gen_duplication(args.base_n, args.copies, args.p_edge, args.feature_dim or 8, s)
    elif args.kind == "sbm":
        ds = gen_sbm(args.n, args.blocks, args.p_in, args.p_out, args.feature_dim, args.noise, s)
    else:
        ds = gen_citation_like(s)
    out = _out(args)
    save_dataset(ds, out)
    return {"nodes": ds.n, "edges": ds.graph.num_edges, "features": ds.features.shape[1], "classes": ds.num_classes}


def cmd_partition(args) -> dict:
    _need(args, "data")
    ds = load_dataset(args.data)
    exclude = np.concatenate([ds.masks["val"], ds.masks["test"]]) if args.exclude_eval else None
    if args.method == "locality":
        part = locality_partition(ds.graph, args.num_clusters, seeds.derive(args.seed, "partition"), exclude=exclude)
    elif args.method == "random":
        nodes = np.setdiff1d(np.arange(ds.n), exclude) if exclude is not None else np.arange(ds.n)
        part = random_partition(nodes, args.num_clusters, seeds.derive(args.seed, "partition"))
    else:
        part = random_walk_partition(
            ds.graph, args.walk_roots, args.walk_len, seeds.derive(args.seed, "walk"), exclude=exclude
        )
    part = group_clusters(part, args.clusters_per_batch, seeds.derive(args.seed, "partition", 1))
    out = _out(args)
    save_partition(part, out / "partition.txt")
    return {"batches": len(part), "cut_edges": part.total_cut(ds.graph)}


def cmd_precompute(args) -> dict:
    _need(args, "data", "partition")
    if args.k is not None and args.k < 1:
        raise CliError(f"invalid k {args.k}: must be >= 1")
    if args.n_inits < 1:
        raise CliError("--n-inits must be >= 1")
    ds = load_dataset(args.data)
    part = load_partition(args.partition)
    part.validate()
    if part.nodes().max() >= ds.n:
        raise CliError("partition references nodes outside the dataset")
    k = args.k or args.hidden
    sub = seeds.derive(args.seed, "subsample")
    pre = precompute_all(
        ds.graph,
        ds.features,
        part,
        arch=args.arch,
        num_layers=args.layers,
        k=k,
        n_inits=args.n_inits,
        seed=sub,
        hidden=args.hidden,
        mode=args.mode,
        power_iters=args.power_iters,
    )
    out = _out(args)
    header = CacheHeader(ds.graph.digest(), partition_digest(part.clusters), k, args.n_inits, sub, args.arch, args.mode)
    save_cache(out / "compensation.bin", pre.comps, header)
    return {"blocks": len(pre.comps), "k": k, "preprocess_seconds": f"{pre.seconds:.6f}", "cache_bytes": pre.nbytes}


def _manifest_value(path: Path, key: str) -> str | None:
    if not path.is_file():
        return None
    return read_config(path).get(key.replace("-", "_"))


def cmd_train(args) -> dict:
    _need(args, "data")
    ds = load_dataset(args.data)
    model = GnnModel.init(
        args.arch,
        [ds.features.shape[1]] + [args.hidden] * (args.layers - 1) + [ds.num_classes],
        activation=args.activation,
        seed=seeds.derive(args.seed, "init"),
    )
    cfg = TrainConfig(
        method=args.method,
        epochs=args.epochs,
        lr=args.lr,
        seed=seeds.derive(args.seed, "batch-order"),
        eval_every=args.eval_every,
        refresh_every=args.refresh_every,
        momentum=args.momentum,
    )
    part, comps, offset = None, None, 0.0
    if args.method != "full":
        _need(args, "partition")
        part = load_partition(args.partition)
    if args.method == "top":
        if not args.cache:
            raise CliError("method 'top' needs --cache (run 'precompute' first)")
        _need(args, "cache")
        header, comps = load_cache(args.cache)
        if header.graph_hash != ds.graph.digest():
            raise CliError(f"{args.cache}: cache was built for a different graph")
        if header.partition_hash != partition_digest(part.clusters):
            raise CliError(f"{args.cache}: cache was built for a different partition")
        if header.arch != args.arch:
            raise CliError(f"{args.cache}: cache arch {header.arch} != --arch {args.arch}")
        if args.clock == "wall":
            offset = float(_manifest_value(Path(args.cache).parent / "manifest.txt", "preprocess_seconds") or 0.0)
    clock = time.perf_counter if args.clock == "wall" else (lambda: 0.0)
    trained, rows = train(cfg, model, ds.graph, ds.features, ds.labels, ds.masks, part, comps, offset, clock)
    out = _out(args)
    write_metrics_csv(rows, out / "metrics.csv")
    save_checkpoint(trained, out / "model.ckpt")
    last = rows[-1]
    return {
        "final_test_acc": repr(last.test_acc),
        "final_val_acc": repr(last.val_acc),
        "metrics_sha256": file_digest(out / "metrics.csv"),
    }


def cmd_eval(args) -> dict:
    _need(args, "data", "checkpoint")
    ds = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    logits = layerwise_inference(model, ds.graph, ds.features, args.chunk_size)
    loss, acc = evaluate(model, ds.graph, ds.features, ds.labels, ds.masks)
    out = _out(args)
    with (out / "eval.csv").open("w") as fh:
        fh.write("split,accuracy\n")
        for split in ("train", "val", "test"):
            pred = logits[ds.masks[split]].argmax(axis=1)
            a = float(np.mean(pred == ds.labels[ds.masks[split]])) if pred.size else float("nan")
            fh.write(f"{split},{a!r}\n")
    return {"loss": repr(loss), **{f"{k}_acc": repr(v) for k, v in acc.items()}}


def cmd_invariance_report(args) -> dict:
    _need(args, "data")
    ds = load_dataset(args.data)
    ratios = [float(r) for r in str(args.ratios).split(",") if r.strip()]
    model = GnnModel.init(
        args.arch,
        [ds.features.shape[1]] + [args.hidden] * (args.layers - 1) + [ds.num_classes],
        seed=seeds.derive(args.seed, "init"),
    )
    final, stale = trained_pair(model, ds.graph, ds.features, ds.labels, ds.masks["train"], args.epochs, args.lr, args.gas_lag)
    part = None
    if args.partition:
        _need(args, "partition")
        part = load_partition(args.partition)
    rows = invariance_report(
        final, ds.graph, ds.features, ds.labels, ratios, args.seed, args.k, args.n_inits, stale, args.mode, part
    )
    out = _out(args)
    table = format_table(rows)
    (out / "report.txt").write_text(table)
    write_report_csv(rows, out / "report.csv")
    sys.stdout.write(table)
    return {"rows": len(rows)}


def cmd_check(args) -> dict:
    _need(args, "data")
    problems = check_dataset(args.data)
    for p in problems:
        print(p)
    if problems:
        raise CliError(f"{args.data}: {len(problems)} problem(s)")
    print(f"{args.data}: ok")
    return {"status": "ok"}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        with threadpool_limits(limits=args.threads):
            results = args.func(args)
        if args.out:
            entries = base_manifest(args)
            entries.update({f"result.{k}" if k != "preprocess_seconds" else k: v for k, v in results.items()})
            write_manifest(Path(args.out) / "manifest.txt", entries)
    except (CliError, DatasetError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
