"""Mini-batch training loop, exact layer-wise inference and approximation metrics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import seeds
from .baselines import HistoryStore, forward_gas, sgd_step
from .compensation import build_compensation_exact, build_compensation_fast
from .graph import SparseGraph, batch_context
from .models import (
    AccessCounter,
    GnnModel,
    accuracy,
    activate,
    backward,
    forward_batch,
    forward_full,
    softmax_xent,
)

METHODS = ("full", "plain", "gas", "top")
CSV_HEADER = ["step", "epoch", "loss", "train_acc", "val_acc", "test_acc", "wall_s", "peak_embeddings"]


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "top"
    epochs: int = 50
    lr: float = 0.1
    seed: int = 0
    clusters_per_batch: int = 1
    eval_every: int = 1
    refresh_every: int = 0
    remove_eval_nodes: bool = False
    momentum: float = 0.0
    k: int | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise TrainingError(f"unknown method {self.method!r}")
        if not self.lr >= 0:
            raise TrainingError("lr must be nonnegative")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.eval_every < 1:
            raise TrainingError("eval_every must be >= 1")


@dataclass
class MetricsRow:
    step: int
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    wall_s: float
    peak_embeddings: int


def evaluate(model: GnnModel, g: SparseGraph, x, labels, masks) -> tuple[float, dict[str, float]]:
    logits, _ = forward_full(model, g, x)
    loss, _ = softmax_xent(logits, labels, masks["train"])
    return loss, {k: accuracy(logits, labels, masks[k]) for k in ("train", "val", "test")}


def current_embeddings(model: GnnModel, g: SparseGraph, x) -> np.ndarray:
    """Layer inputs 0..L-1 of ``model`` concatenated; used to refresh coefficients."""
    _, tape = forward_full(model, g, x)
    return np.hstack([rec.h_in for rec in tape.layers])


def train(
    cfg: TrainConfig,
    model: GnnModel,
    g: SparseGraph,
    x,
    labels,
    masks: dict,
    partition=None,
    comps=None,
    time_offset: float = 0.0,
    clock=time.perf_counter,
) -> tuple[GnnModel, list[MetricsRow]]:
    """Run SGD for ``cfg.epochs`` epochs. Returns a trained copy and the metrics rows.

    Mini-batch methods draw one batch uniformly (with replacement) per step;
    an epoch is ``len(partition)`` steps. The loss of a step covers the
    training nodes inside the batch. ``clock`` supplies the wall_s column;
    pass a constant function for byte-reproducible logs.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.dims[-1]:
        raise TrainingError(f"labels must lie in [0, {model.dims[-1]})")
    model = model.copy()
    train_nodes = np.asarray(masks["train"], dtype=np.int64)
    t0 = clock()
    rows: list[MetricsRow] = []
    velocity = [np.zeros_like(p) for p in model.params]

    def update(grads) -> None:
        if cfg.momentum:
            for v, gr in zip(velocity, grads):
                v *= cfg.momentum
                v += gr
            grads = velocity
        sgd_step(model, grads, cfg.lr)

    def record(step: int, epoch: int, peak: int) -> None:
        loss, acc = evaluate(model, g, x, labels, masks)
        rows.append(
            MetricsRow(
                step=step,
                epoch=epoch,
                loss=loss,
                train_acc=acc["train"],
                val_acc=acc["val"],
                test_acc=acc["test"],
                wall_s=clock() - t0 + time_offset,
                peak_embeddings=peak,
            )
        )

    if cfg.method == "full":
        peak = 0
        for step in range(1, cfg.epochs + 1):
            counter = AccessCounter()
            logits, tape = forward_full(model, g, x, counter=counter)
            _, grad = softmax_xent(logits, labels, train_nodes)
            grads, _ = backward(model, tape, grad)
            update(grads)
            peak = max(peak, counter.rows)
            if step % cfg.eval_every == 0 or step == cfg.epochs:
                record(step, step, peak)
                peak = 0
        return model, rows

    if partition is None:
        raise TrainingError(f"method {cfg.method!r} needs a partition")
    clusters = getattr(partition, "clusters", partition)
    if cfg.method == "top":
        if comps is None or len(comps) != len(clusters):
            raise TrainingError("method 'top' needs one compensation per cluster")
        comps = list(comps)
    contexts = [batch_context(g, c) for c in clusters]
    is_train = np.zeros(g.n, dtype=bool)
    is_train[train_nodes] = True
    local_train = [np.flatnonzero(is_train[ctx.batch]) for ctx in contexts]
    hist = HistoryStore.zeros(g.n, model) if cfg.method == "gas" else None
    rng = seeds.rng(cfg.seed, "batch-order")
    steps_per_epoch = len(contexts)
    total = cfg.epochs * steps_per_epoch
    peak = 0
    for step in range(1, total + 1):
        i = int(rng.integers(steps_per_epoch))
        ctx = contexts[i]
        counter = AccessCounter()
        xb = x[ctx.batch]
        if cfg.method == "plain":
            logits, tape = forward_batch(model, ctx, xb, counter=counter)
        elif cfg.method == "top":
            logits, tape = forward_batch(model, ctx, xb, comp=comps[i], counter=counter)
        else:
            logits, tape = forward_gas(model, ctx, xb, hist, counter=counter)
        if local_train[i].size:
            _, grad = softmax_xent(logits, labels[ctx.batch], local_train[i])
            grads, _ = backward(model, tape, grad)
            update(grads)
        peak = max(peak, counter.rows)
        if cfg.method == "top" and cfg.refresh_every and step % cfg.refresh_every == 0:
            comps = refresh_compensations(model, g, x, contexts, comps, cfg)
        if step % (cfg.eval_every) == 0 or step == total:
            record(step, math.ceil(step / steps_per_epoch), peak)
            peak = 0
    return model, rows


def refresh_compensations(model, g, x, contexts, comps, cfg: TrainConfig):
    """Refit every compensation on the current model's embeddings."""
    hbar = current_embeddings(model, g, x)
    out = []
    for i, (ctx, old) in enumerate(zip(contexts, comps)):
        if old.mode == "exact":
            out.append(build_compensation_exact(hbar, ctx, old.arch))
        else:
            k = cfg.k or old.k
            out.append(build_compensation_fast(hbar, ctx, k, seeds.derive(cfg.seed, "refresh", i), old.arch))
    return out


def layerwise_inference(model: GnnModel, g: SparseGraph, x, chunk_size: int) -> np.ndarray:
    """Exact full-graph output, one layer at a time over node chunks.

    Only one full layer table plus one chunk of new rows is alive at a time.
    """
    if chunk_size < 1:
        raise TrainingError("chunk_size must be >= 1")
    op = g.operator(model.arch)
    h = np.asarray(x, dtype=np.float64)
    for l in range(model.num_layers):
        params = model.layer_params(l)
        nxt = np.empty((g.n, model.dims[l + 1]))
        for start in range(0, g.n, chunk_size):
            rows = slice(start, min(start + chunk_size, g.n))
            z = np.asarray(op[rows] @ h)
            if model.arch == "gcn":
                pre = z @ params[0]
            else:
                pre = h[rows] @ params[0] + z @ params[1]
            nxt[rows] = activate(pre, model.layer_activation(l), model.slope)
        h = nxt
    return h


def _check_batches(h_batches) -> None:
    if not h_batches:
        raise TrainingError("need at least one batch")


def relative_approx_error(h_star, h_batches: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """sqrt(sum_i ||H*_Bi - H_Bi||_F^2) / ||H*||_F over (nodes, rows) pairs."""
    _check_batches(h_batches)
    h_star = np.asarray(h_star, dtype=np.float64)
    num = sum(float(np.sum((h_star[np.asarray(nodes)] - np.asarray(h)) ** 2)) for nodes, h in h_batches)
    return math.sqrt(num) / float(np.linalg.norm(h_star))


def accuracy_degradation(h_star, h_batches, labels) -> float:
    """Mean over batches of (full-batch accuracy - method accuracy)."""
    _check_batches(h_batches)
    labels = np.asarray(labels)
    h_star = np.asarray(h_star)
    gaps = []
    for nodes, h in h_batches:
        nodes = np.asarray(nodes)
        y = labels[nodes]
        full = np.mean(h_star[nodes].argmax(axis=1) == y)
        mine = np.mean(np.asarray(h).argmax(axis=1) == y)
        gaps.append(full - mine)
    return float(np.mean(gaps))


def recursive_access_count(g: SparseGraph, batch, num_layers: int) -> float:
    """Embedding reads of node-wise recursive evaluation (no memoization).

    Computing h_i at layer l reads every h_j^(l-1), j in N(i) + {i}, and
    recursively whatever those need.
    """
    pattern = sp.csr_matrix(g.adj + sp.identity(g.n, format="csr"))
    pattern.data[:] = 1.0
    t = np.zeros(g.n)
    for _ in range(num_layers):
        t = pattern @ (1.0 + t)
    return float(t[np.asarray(batch, dtype=np.int64)].sum())


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(
                [
                    r.step,
                    r.epoch,
                    repr(float(r.loss)),
                    repr(float(r.train_acc)),
                    repr(float(r.val_acc)),
                    repr(float(r.test_acc)),
                    f"{r.wall_s:.6f}",
                    r.peak_embeddings,
                ]
            )


def read_metrics_csv(path) -> list[MetricsRow]:
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise TrainingError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for rec in reader:
            out.append(
                MetricsRow(
                    step=int(rec["step"]),
                    epoch=int(rec["epoch"]),
                    loss=float(rec["loss"]),
                    train_acc=float(rec["train_acc"]),
                    val_acc=float(rec["val_acc"]),
                    test_acc=float(rec["test_acc"]),
                    wall_s=float(rec["wall_s"]),
                    peak_embeddings=int(rec["peak_embeddings"]),
                )
            )
    return out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})
