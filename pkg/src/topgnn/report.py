"""Approximation-error report: plain subgraph, historical embeddings and TOP
against exact full-graph embeddings, over several batch sizes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeds
from .baselines import HistoryStore, forward_gas, forward_plain_subgraph, train_full_batch
from .compensation import precompute_all
from .graph import SparseGraph, batch_context
from .models import GnnModel, forward_batch, forward_full
from .samplers import locality_partition
from .training import accuracy_degradation, relative_approx_error

REPORT_METHODS = ("plain", "gas", "top")
REPORT_HEADER = ["ratio", "num_batches", "method", "rel_error", "acc_degradation"]


@dataclass
class ReportRow:
    ratio: float
    num_batches: int
    method: str
    rel_error: float
    acc_degradation: float


def clusters_for_ratio(n: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    return max(1, min(n, int(round(1.0 / ratio))))


def batch_outputs(model: GnnModel, g: SparseGraph, x, clusters, method: str, comps=None, hist=None):
    out = []
    for i, c in enumerate(clusters):
        ctx = batch_context(g, c)
        xb = x[ctx.batch]
        if method == "plain":
            h = forward_plain_subgraph(model, ctx, xb)
        elif method == "top":
            h, _ = forward_batch(model, ctx, xb, comp=comps[i])
        elif method == "gas":
            h, _ = forward_gas(model, ctx, xb, hist, update=False)
        else:
            raise ValueError(f"unknown method {method!r}")
        out.append((ctx.batch, h))
    return out


def partition_rows(
    model: GnnModel,
    g: SparseGraph,
    x,
    labels,
    clusters,
    h_star,
    hist: HistoryStore,
    seed: int = 0,
    k: int | None = None,
    n_inits: int = 1,
    mode: str = "fast",
    ratio: float | None = None,
) -> list[ReportRow]:
    """One row per method for a fixed list of batches."""
    pre = precompute_all(
        g,
        x,
        clusters,
        arch=model.arch,
        num_layers=model.num_layers,
        k=k,
        n_inits=n_inits,
        seed=seed,
        hidden=model.dims[1],
        mode=mode,
    )
    if ratio is None:
        ratio = float(np.mean([len(c) for c in clusters])) / g.n
    rows = []
    for method in REPORT_METHODS:
        outs = batch_outputs(model, g, x, clusters, method, comps=pre.comps, hist=hist)
        rows.append(
            ReportRow(
                ratio=float(ratio),
                num_batches=len(clusters),
                method=method,
                rel_error=relative_approx_error(h_star, outs),
                acc_degradation=accuracy_degradation(h_star, outs, labels) + 0.0,
            )
        )
    return rows


def invariance_report(
    model: GnnModel,
    g: SparseGraph,
    x,
    labels,
    ratios=(0.1, 0.25, 0.5, 1.0),
    seed: int = 0,
    k: int | None = None,
    n_inits: int = 1,
    stale_model: GnnModel | None = None,
    mode: str = "fast",
    partition=None,
) -> list[ReportRow]:
    """Errors of each method at the parameters of ``model``.

    Batches come from a locality partition with ``round(1 / ratio)`` clusters
    for each ratio, or from ``partition`` when given. Historical embeddings
    come from one exact pass of ``stale_model`` (the same model when omitted,
    which makes them exact).
    """
    x = np.asarray(x, dtype=np.float64)
    h_star, _ = forward_full(model, g, x)
    hist = HistoryStore.warm_start(stale_model or model, g, x)
    if partition is not None:
        clusters = getattr(partition, "clusters", partition)
        return partition_rows(model, g, x, labels, clusters, h_star, hist, seeds.derive(seed, "subsample"), k, n_inits, mode)
    rows = []
    for ratio in ratios:
        m = clusters_for_ratio(g.n, ratio)
        part = locality_partition(g, m, seed=seeds.derive(seed, "partition", m))
        rows.extend(
            partition_rows(
                model, g, x, labels, part.clusters, h_star, hist,
                seeds.derive(seed, "subsample", m), k, n_inits, mode, ratio=ratio,
            )
        )
    return rows


def trained_pair(model: GnnModel, g, x, labels, train_mask, epochs: int, lr: float, lag: int):
    """Train full-batch for ``epochs``; also return the weights from ``lag`` epochs earlier."""
    lag = min(lag, epochs)
    stale, _ = train_full_batch(model, g, x, labels, train_mask, epochs - lag, lr)
    final, _ = train_full_batch(stale, g, x, labels, train_mask, lag, lr)
    return final, stale


def format_table(rows: list[ReportRow]) -> str:
    lines = [f"{'ratio':>6} {'batches':>7} {'method':>6} {'rel_error':>12} {'acc_degr':>10}"]
    for r in rows:
        lines.append(
            f"{r.ratio:>6.3f} {r.num_batches:>7d} {r.method:>6} {r.rel_error:>12.6g} {r.acc_degradation:>10.4f}"
        )
    return "\n".join(lines) + "\n"


def write_report_csv(rows: list[ReportRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([repr(r.ratio), r.num_batches, r.method, repr(r.rel_error), repr(r.acc_degradation)])
