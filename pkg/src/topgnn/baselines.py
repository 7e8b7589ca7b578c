"""Reference mini-batch schemes: plain induced subgraph, historical
embeddings (GAS-style) and full-batch gradient descent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import BatchContext, SparseGraph
from .linalg import ShapeError
from .models import (
    AffinePropagator,
    GnnModel,
    backward,
    forward_batch,
    forward_full,
    run_layers,
    softmax_xent,
)


@dataclass
class HistoryStore:
    """Cached per-layer embeddings of every node, for layer inputs 0..L-1.

    Layer 0 caches features the same way as hidden layers, so a step never
    reads raw features of out-of-batch nodes; all tables start at zero.
    """

    tables: list[np.ndarray]
    staleness: np.ndarray

    @classmethod
    def zeros(cls, n: int, model: GnnModel) -> "HistoryStore":
        tables = [np.zeros((n, model.dims[l])) for l in range(model.num_layers)]
        return cls(tables, np.zeros(n, dtype=np.int64))

    @classmethod
    def warm_start(cls, model: GnnModel, g: SparseGraph, x) -> "HistoryStore":
        """Fill every table with exact embeddings from one full inference pass."""
        _, tape = forward_full(model, g, x)
        tables = [rec.h_in.copy() for rec in tape.layers]
        return cls(tables, np.zeros(g.n, dtype=np.int64))

    def push(self, nodes: np.ndarray, layer_inputs: list[np.ndarray]) -> None:
        for table, h in zip(self.tables, layer_inputs):
            table[nodes] = h
        self.staleness[nodes] = 0

    def tick(self) -> None:
        self.staleness += 1


def forward_plain_subgraph(model: GnnModel, ctx: BatchContext, x_batch, counter=None):
    """Forward on the induced subgraph only; out-of-batch messages are dropped."""
    h, _ = forward_batch(model, ctx, x_batch, comp=None, counter=counter)
    return h


def gas_propagators(model: GnnModel, ctx: BatchContext, hist: HistoryStore, counter=None):
    p_bb, p_bc = ctx.blocks(model.arch)
    props = []
    for l in range(model.num_layers):
        offset = np.asarray(p_bc @ hist.tables[l][ctx.boundary])
        if counter is not None:
            counter.add(ctx.boundary.size)
        props.append(AffinePropagator(p_bb, offset, tag="gas", counter=counter))
    return props


def forward_gas(model: GnnModel, ctx: BatchContext, x_batch, hist: HistoryStore, counter=None, update: bool = True):
    """Forward with boundary messages read from ``hist``; then push fresh batch rows.

    Returns ``(H_L, tape)``; the history is updated in place when ``update``.
    """
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.shape[0] != ctx.size:
        raise ShapeError(f"batch features must have {ctx.size} rows, got {x_batch.shape[0]}")
    if len(hist.tables) != model.num_layers:
        raise ShapeError("history depth does not match the model")
    props = gas_propagators(model, ctx, hist, counter)
    h, tape = run_layers(model, props, x_batch)
    if update:
        hist.tick()
        hist.push(ctx.batch, [rec.h_in for rec in tape.layers])
    return h, tape


def sgd_step(model: GnnModel, grads, lr: float) -> None:
    for p, g in zip(model.params, grads):
        p -= lr * g


def train_full_batch(
    model: GnnModel,
    g: SparseGraph,
    x,
    labels,
    train_mask,
    epochs: int,
    lr: float,
) -> tuple[GnnModel, list[float]]:
    """Plain gradient descent on the full-graph loss; returns a trained copy."""
    model = model.copy()
    losses = []
    for _ in range(epochs):
        logits, tape = forward_full(model, g, x)
        loss, grad = softmax_xent(logits, labels, train_mask)
        grads, _ = backward(model, tape, grad)
        sgd_step(model, grads, lr)
        losses.append(loss)
    return model, losses


def full_gradient(model: GnnModel, g: SparseGraph, x, labels, mask) -> tuple[float, list[np.ndarray]]:
    logits, tape = forward_full(model, g, x)
    loss, grad = softmax_xent(logits, labels, mask)
    grads, _ = backward(model, tape, grad)
    return loss, grads

