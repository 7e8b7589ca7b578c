"""GCN and mean-aggregation SAGE with hand-written backward passes.

A layer reads its neighborhood only through a *propagator*: a fixed linear
map over the rows it is given (the whole graph, the induced batch subgraph,
or the batch subgraph plus a low-rank compensation term). Backward treats
the propagator as a constant and applies its transpose.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
import scipy.sparse as sp

from .graph import BatchContext, SparseGraph
from .linalg import ShapeError

ARCHS = ("gcn", "sage")
ACTIVATIONS = ("relu", "leaky_relu", "identity")


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------- activations


def activate(x: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0, x, slope * x)
    if kind == "identity":
        return x
    raise ModelError(f"unknown activation {kind!r}")


def activate_grad(x: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(x >= 0, 1.0, slope)
    if kind == "identity":
        return np.ones_like(x)
    raise ModelError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- propagators


class AccessCounter:
    """Counts node embeddings touched by propagators.

    ``rows`` counts distinct embeddings per propagation, ``reads`` counts row
    reads (the compensation term re-reads the S rows).
    """

    def __init__(self) -> None:
        self.rows = 0
        self.reads = 0

    def add(self, rows: int, reads: int | None = None) -> None:
        self.rows += int(rows)
        self.reads += int(rows if reads is None else reads)


class SparsePropagator:
    """Z = P H for a fixed sparse P."""

    kind = "sparse"

    def __init__(self, op: sp.csr_matrix, tag: str, counter: AccessCounter | None = None):
        self.op = sp.csr_matrix(op)
        self.op_t = sp.csr_matrix(self.op.T)
        self.tag = tag
        self.counter = counter

    @property
    def rows(self) -> int:
        return self.op.shape[0]

    def __call__(self, h: np.ndarray) -> np.ndarray:
        if h.shape[0] != self.op.shape[1]:
            raise ShapeError(f"propagator expects {self.op.shape[1]} rows, got {h.shape[0]}")
        if self.counter is not None:
            self.counter.add(h.shape[0])
        return np.asarray(self.op @ h)

    def transpose(self, g: np.ndarray) -> np.ndarray:
        return np.asarray(self.op_t @ g)


class AffinePropagator(SparsePropagator):
    """Z = P H + c with a constant offset ``c`` (e.g. messages from cached rows)."""

    kind = "affine"

    def __init__(self, op, offset, tag: str = "affine", counter: AccessCounter | None = None):
        super().__init__(op, tag=tag, counter=counter)
        self.offset = np.asarray(offset, dtype=np.float64)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return super().__call__(h) + self.offset


class CompensatedPropagator:
    """Z_B = P_BB H_B + dA (Q_S^T H_S).

    ``d_hat_a`` is |B| x r, ``q_s`` is r x |S| and ``s_local`` indexes S
    inside the batch. No out-of-batch row is ever read.
    """

    kind = "compensated"

    def __init__(self, p_bb, d_hat_a, q_s, s_local, counter: AccessCounter | None = None):
        self.p_bb = sp.csr_matrix(p_bb)
        self.p_bb_t = sp.csr_matrix(self.p_bb.T)
        self.d_hat_a = np.asarray(d_hat_a, dtype=np.float64)
        self.q_s = np.asarray(q_s, dtype=np.float64)
        self.s_local = np.asarray(s_local, dtype=np.int64)
        self.counter = counter
        self.tag = "compensated"
        self.flops = 0

    @property
    def rows(self) -> int:
        return self.p_bb.shape[0]

    def __call__(self, h: np.ndarray) -> np.ndarray:
        if h.shape[0] != self.p_bb.shape[1]:
            raise ShapeError(f"propagator expects {self.p_bb.shape[1]} rows, got {h.shape[0]}")
        if self.counter is not None:
            self.counter.add(h.shape[0], h.shape[0] + self.s_local.size)
        h_s = h[self.s_local]
        small = self.q_s @ h_s
        r, s = self.q_s.shape
        d = h.shape[1]
        self.flops += 2 * r * s * d + 2 * self.d_hat_a.shape[0] * r * d
        return np.asarray(self.p_bb @ h) + self.d_hat_a @ small

    def transpose(self, g: np.ndarray) -> np.ndarray:
        out = np.asarray(self.p_bb_t @ g)
        back = self.q_s.T @ (self.d_hat_a.T @ g)
        np.add.at(out, self.s_local, back)
        return out


# ---------------------------------------------------------------- model


@dataclass
class GnnModel:
    """Bias-free GCN / SAGE-mean stack.

    ``params`` is a flat list: GCN stores one weight per layer, SAGE stores
    ``[W_self_0, W_nbr_0, W_self_1, W_nbr_1, ...]``. The last layer emits
    logits and skips the activation unless ``final_activation`` is set.
    """

    arch: str
    dims: list[int]
    activation: str = "relu"
    slope: float = 0.01
    final_activation: bool = False
    params: list[np.ndarray] = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ModelError(f"unknown architecture {self.arch!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if len(self.dims) < 2:
            raise ModelError("need at least one layer")
        per = 2 if self.arch == "sage" else 1
        if self.params:
            if len(self.params) != per * self.num_layers:
                raise ModelError("parameter count does not match the layer count")
            for l in range(self.num_layers):
                for p in self.layer_params(l):
                    if p.shape != (self.dims[l], self.dims[l + 1]):
                        raise ModelError(f"layer {l} weight has shape {p.shape}")
                    if not np.all(np.isfinite(p)):
                        raise ModelError(f"layer {l} weight has non-finite entries")

    @classmethod
    def init(cls, arch: str, dims, activation: str = "relu", seed: int = 0, **kw) -> "GnnModel":
        """Glorot-uniform initialization, deterministic in ``seed``."""
        dims = [int(d) for d in dims]
        rng = np.random.default_rng(seed)
        params = []
        per = 2 if arch == "sage" else 1
        for l in range(len(dims) - 1):
            limit = np.sqrt(6.0 / (dims[l] + dims[l + 1]))
            for _ in range(per):
                params.append(rng.uniform(-limit, limit, size=(dims[l], dims[l + 1])))
        return cls(arch=arch, dims=dims, activation=activation, params=params, seed=seed, **kw)

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def layer_params(self, l: int) -> list[np.ndarray]:
        if self.arch == "sage":
            return self.params[2 * l : 2 * l + 2]
        return [self.params[l]]

    def layer_activation(self, l: int) -> str:
        if l == self.num_layers - 1 and not self.final_activation:
            return "identity"
        return self.activation

    def copy(self) -> "GnnModel":
        return GnnModel(
            arch=self.arch,
            dims=list(self.dims),
            activation=self.activation,
            slope=self.slope,
            final_activation=self.final_activation,
            params=[p.copy() for p in self.params],
            seed=self.seed,
        )

    def with_params(self, params) -> "GnnModel":
        m = self.copy()
        m.params = [np.array(p, dtype=np.float64) for p in params]
        return m


@dataclass
class LayerRecord:
    h_in: np.ndarray
    z: np.ndarray
    pre: np.ndarray
    out: np.ndarray


@dataclass
class ForwardTape:
    """Per-layer inputs, propagated messages and pre-activations of one pass."""

    propagators: list
    layers: list[LayerRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def output(self) -> np.ndarray:
        return self.layers[-1].out

    def replay(self, model: GnnModel) -> np.ndarray:
        h, _ = run_layers(model, self.propagators, self.layers[0].h_in)
        return h


def _layer(model: GnnModel, l: int, prop, h: np.ndarray) -> LayerRecord:
    z = prop(h)
    if model.arch == "gcn":
        (w,) = model.layer_params(l)
        pre = z @ w
    else:
        w_self, w_nbr = model.layer_params(l)
        pre = h @ w_self + z @ w_nbr
    out = activate(pre, model.layer_activation(l), model.slope)
    return LayerRecord(h_in=h, z=z, pre=pre, out=out)


def run_layers(model: GnnModel, prop, x: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    """Run every layer; ``prop`` is one propagator or a list with one per layer."""
    x = np.asarray(x, dtype=np.float64)
    props = list(prop) if isinstance(prop, (list, tuple)) else [prop] * model.num_layers
    if len(props) != model.num_layers:
        raise ModelError("need one propagator per layer")
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ShapeError(f"features must have {model.dims[0]} columns, got shape {x.shape}")
    if x.shape[0] != props[0].rows:
        raise ShapeError(f"features have {x.shape[0]} rows, propagator expects {props[0].rows}")
    tape = ForwardTape(propagators=props)
    h = x
    for l in range(model.num_layers):
        rec = _layer(model, l, props[l], h)
        tape.layers.append(rec)
        h = rec.out
    return h, tape


def full_propagator(model: GnnModel, g: SparseGraph, counter: AccessCounter | None = None):
    return SparsePropagator(g.operator(model.arch), tag="full", counter=counter)


def forward_full(model: GnnModel, g: SparseGraph, x, counter: AccessCounter | None = None):
    """Whole-graph message passing. Returns ``(H_L, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != g.n:
        raise ShapeError(f"features must have {g.n} rows, got shape {x.shape}")
    return run_layers(model, full_propagator(model, g, counter), x)


def batch_propagator(model: GnnModel, ctx: BatchContext, comp=None, counter=None):
    p_bb, _ = ctx.blocks(model.arch)
    if comp is None:
        return SparsePropagator(p_bb, tag="plain", counter=counter)
    if not np.array_equal(comp.batch, ctx.batch):
        raise ModelError("compensation was built for a different batch")
    if comp.arch != model.arch:
        raise ModelError(f"compensation built for {comp.arch!r}, model is {model.arch!r}")
    return CompensatedPropagator(p_bb, comp.d_hat_a, comp.q_s, comp.s_local, counter=counter)


def forward_batch(model: GnnModel, ctx: BatchContext, x_batch, comp=None, counter=None):
    """Mini-batch forward over in-batch rows only.

    ``comp=None`` runs the plain induced subgraph; passing a
    :class:`~topgnn.compensation.Compensation` adds the compensation term.
    """
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2 or x_batch.shape[0] != ctx.size:
        raise ShapeError(f"batch features must have {ctx.size} rows, got shape {x_batch.shape}")
    return run_layers(model, batch_propagator(model, ctx, comp, counter), x_batch)


def backward(model: GnnModel, tape: ForwardTape, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass. Returns gradients aligned with ``model.params`` and d/dX."""
    if len(tape) != model.num_layers:
        raise ModelError("tape depth does not match the model")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise ShapeError(f"grad_out shape {g.shape} != output shape {tape.output.shape}")
    grads: list[np.ndarray | None] = [None] * len(model.params)
    for l in reversed(range(model.num_layers)):
        rec = tape.layers[l]
        prop = tape.propagators[l]
        if rec.h_in.shape[1] != model.dims[l]:
            raise ModelError("tape was recorded with a different model")
        g_pre = g * activate_grad(rec.pre, model.layer_activation(l), model.slope)
        if model.arch == "gcn":
            (w,) = model.layer_params(l)
            grads[l] = rec.z.T @ g_pre
            g = prop.transpose(g_pre @ w.T)
        else:
            w_self, w_nbr = model.layer_params(l)
            grads[2 * l] = rec.h_in.T @ g_pre
            grads[2 * l + 1] = rec.z.T @ g_pre
            g = g_pre @ w_self.T + prop.transpose(g_pre @ w_nbr.T)
    return grads, g


def softmax_xent(logits, labels, mask) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the rows in ``mask`` and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64).ravel()
    if mask.size == 0:
        raise ValueError("softmax_xent needs a nonempty mask")
    c = logits.shape[1]
    y = labels[mask]
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits[mask]
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    logp = z - log_norm[:, None]
    loss = float(-logp[np.arange(mask.size), y].mean())
    p = np.exp(logp)
    p[np.arange(mask.size), y] -= 1.0
    grad = np.zeros_like(logits)
    np.add.at(grad, mask, p / mask.size)
    return loss, grad


def accuracy(logits, labels, nodes) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return float("nan")
    pred = np.asarray(logits)[nodes].argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)[nodes]))


# ---------------------------------------------------------------- checkpoints
#
# Little-endian layout:
#   magic      8 bytes  b"TOPGNNW1"
#   arch       u8       0 = gcn, 1 = sage
#   activation u8       0 = relu, 1 = leaky_relu, 2 = identity
#   final_act  u8       0/1
#   pad        u8       0
#   slope      f64
#   L          u32
#   dims       (L+1) x u32
#   weights    row-major f64 blocks in params order

_MAGIC = b"TOPGNNW1"


def save_checkpoint(model: GnnModel, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        write_checkpoint(model, fh)


def write_checkpoint(model: GnnModel, fh: BinaryIO) -> None:
    fh.write(_MAGIC)
    fh.write(
        struct.pack(
            "<BBBBdI",
            ARCHS.index(model.arch),
            ACTIVATIONS.index(model.activation),
            int(model.final_activation),
            0,
            model.slope,
            model.num_layers,
        )
    )
    fh.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
    for p in model.params:
        fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> GnnModel:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ModelError(f"{path}: not a model checkpoint")
    off = 8
    arch_i, act_i, final, _, slope, n_layers = struct.unpack_from("<BBBBdI", data, off)
    off += struct.calcsize("<BBBBdI")
    dims = list(struct.unpack_from(f"<{n_layers + 1}I", data, off))
    off += 4 * (n_layers + 1)
    arch = ARCHS[arch_i]
    per = 2 if arch == "sage" else 1
    params = []
    for l in range(n_layers):
        for _ in range(per):
            size = dims[l] * dims[l + 1]
            block = np.frombuffer(data, dtype="<f8", count=size, offset=off)
            params.append(block.reshape(dims[l], dims[l + 1]).astype(np.float64))
            off += 8 * size
    if off != len(data):
        raise ModelError(f"{path}: trailing bytes after weights")
    return GnnModel(
        arch=arch,
        dims=dims,
        activation=ACTIVATIONS[act_i],
        slope=slope,
        final_activation=bool(final),
        params=params,
    )
