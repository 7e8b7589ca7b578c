"""Topological compensation: fit out-of-batch embeddings as linear
combinations of in-batch embeddings and fold the fit into extra in-batch edges.

Coefficients are fitted once on *basic embeddings* (layer-wise embeddings of
randomly initialized models), then reused at every training step.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeds
from .graph import BatchContext, SparseGraph, batch_context
from .linalg import pinv_solve, range_finder, spmm
from .models import GnnModel, forward_full


class CompensationError(ValueError):
    pass


@dataclass
class BasicEmbeddings:
    matrix: np.ndarray
    layer_dims: list[int]
    seeds: list[int]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]


def basic_embeddings(
    g: SparseGraph,
    x,
    arch: str = "gcn",
    num_layers: int = 2,
    hidden: int | None = None,
    n_inits: int = 1,
    seed: int = 0,
    activation: str = "leaky_relu",
) -> BasicEmbeddings:
    """Concatenate layers 0..num_layers of ``n_inits`` randomly initialized models.

    Layer 0 is ``x`` itself. Each init gets its own derived seed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != g.n:
        raise CompensationError(f"features must have {g.n} rows, got shape {x.shape}")
    if n_inits < 1:
        raise CompensationError("n_inits must be >= 1")
    hidden = x.shape[1] if hidden is None else hidden
    dims = [x.shape[1]] + [hidden] * num_layers
    blocks, layer_dims, init_seeds = [], [], []
    for i in range(n_inits):
        s = seeds.derive(seed, "basic-init", i)
        init_seeds.append(s)
        blocks.append(x)
        layer_dims.append(x.shape[1])
        if num_layers == 0:
            continue
        model = GnnModel.init(arch, dims, activation=activation, seed=s, final_activation=True)
        _, tape = forward_full(model, g, x)
        for rec in tape.layers:
            blocks.append(rec.out)
            layer_dims.append(rec.out.shape[1])
    return BasicEmbeddings(np.hstack(blocks), layer_dims, init_seeds)


def _hbar(hbar) -> np.ndarray:
    return hbar.matrix if isinstance(hbar, BasicEmbeddings) else np.asarray(hbar, dtype=np.float64)


def estimate_r_exact(hbar, ctx: BatchContext) -> np.ndarray:
    """Minimum-norm R with R H_B ~ H_boundary, shape (|boundary|, |B|)."""
    h = _hbar(hbar)
    h_b, h_c = h[ctx.batch], h[ctx.boundary]
    if ctx.boundary.size == 0:
        return np.zeros((0, ctx.size))
    return pinv_solve(h_b.T, h_c.T).T


@dataclass(eq=False)
class Compensation:
    """Per-batch compensation ``d_hat_a @ (q_s @ H[s_local])``.

    ``d_hat_a`` is |B| x r and already folds the boundary block of the
    propagation operator into the fitted coefficients; ``q_s`` is r x |S|.
    ``coef`` (the boundary coefficients themselves) is kept in memory for
    diagnostics and is not written to cache files.
    """

    batch: np.ndarray
    boundary: np.ndarray
    s_local: np.ndarray
    q_s: np.ndarray
    d_hat_a: np.ndarray
    arch: str = "gcn"
    mode: str = "fast"
    coef: np.ndarray | None = field(default=None, repr=False)

    @property
    def s_nodes(self) -> np.ndarray:
        return self.batch[self.s_local]

    @property
    def k(self) -> int:
        return int(self.s_local.size)

    @property
    def rank(self) -> int:
        return int(self.q_s.shape[0])

    def boundary_estimate(self, h_b: np.ndarray) -> np.ndarray:
        """Reconstructed boundary rows from in-batch rows (needs ``coef``)."""
        if self.coef is None:
            raise CompensationError("coefficients are not available (loaded from cache?)")
        return self.coef @ (self.q_s @ np.asarray(h_b)[self.s_local])

    @property
    def nbytes(self) -> int:
        return int(self.s_local.nbytes + self.q_s.nbytes + self.d_hat_a.nbytes + self.batch.nbytes)


def build_compensation_exact(hbar, ctx: BatchContext, arch: str = "gcn") -> Compensation:
    """Dense-R compensation: S = B, q_s = I, d_hat_a = P_bc R."""
    r = estimate_r_exact(hbar, ctx)
    _, p_bc = ctx.blocks(arch)
    d_hat_a = spmm(p_bc, r) if ctx.boundary.size else np.zeros((ctx.size, ctx.size))
    return Compensation(
        batch=ctx.batch.copy(),
        boundary=ctx.boundary.copy(),
        s_local=np.arange(ctx.size, dtype=np.int64),
        q_s=np.eye(ctx.size),
        d_hat_a=d_hat_a,
        arch=arch,
        mode="exact",
        coef=r,
    )


def build_compensation_fast(
    hbar,
    ctx: BatchContext,
    k: int,
    seed: int = 0,
    arch: str = "gcn",
    power_iters: int = 0,
) -> Compensation:
    """Low-rank compensation fitted on a uniform subsample S of the batch.

    Q spans the columns of H_B (rank ``min(k, |B|, cols)``), S has
    ``min(k, |B|)`` nodes, and the boundary coefficients solve
    ``coef (Q_S^T H_S) ~ H_boundary`` in the minimum-norm sense.
    """
    if ctx.size < 1:
        raise CompensationError("batch must be nonempty")
    if k < 1:
        raise CompensationError("k must be >= 1")
    h = _hbar(hbar)
    h_b = h[ctx.batch]
    rank = min(k, ctx.size, h.shape[1])
    q = range_finder(h_b, rank, seeds.derive(seed, "range-finder"), power_iters=power_iters)
    n_s = min(k, ctx.size)
    rng = seeds.rng(seed, "subsample")
    s_local = np.sort(rng.choice(ctx.size, size=n_s, replace=False)).astype(np.int64)
    q_s = q[s_local].T
    _, p_bc = ctx.blocks(arch)
    if ctx.boundary.size:
        basis = q_s @ h_b[s_local]
        coef = pinv_solve(basis.T, h[ctx.boundary].T).T
        d_hat_a = spmm(p_bc, coef)
    else:
        coef = np.zeros((0, q_s.shape[0]))
        d_hat_a = np.zeros((ctx.size, q_s.shape[0]))
    return Compensation(
        batch=ctx.batch.copy(),
        boundary=ctx.boundary.copy(),
        s_local=s_local,
        q_s=q_s,
        d_hat_a=d_hat_a,
        arch=arch,
        mode="fast",
        coef=coef,
    )


class FlopCounter:
    def __init__(self) -> None:
        self.flops = 0


def apply_compensation(comp: Compensation, a_bb, h_b, counter: FlopCounter | None = None) -> np.ndarray:
    """Z_B = A_bb H_B + d_hat_a (q_s H_S)."""
    h_b = np.asarray(h_b, dtype=np.float64)
    if h_b.shape[0] != comp.batch.size or a_bb.shape != (comp.batch.size, comp.batch.size):
        raise CompensationError(
            f"shape mismatch: batch {comp.batch.size}, a_bb {a_bb.shape}, h_b {h_b.shape}"
        )
    small = comp.q_s @ h_b[comp.s_local]
    if counter is not None:
        r, s = comp.q_s.shape
        d = h_b.shape[1]
        counter.flops += 2 * r * s * d + 2 * comp.d_hat_a.shape[0] * r * d
    return spmm(a_bb, h_b) + comp.d_hat_a @ small


@dataclass
class Precomputed:
    comps: list[Compensation]
    seconds: float
    nbytes: int


def precompute_all(
    g: SparseGraph,
    x,
    partition,
    arch: str = "gcn",
    num_layers: int = 2,
    k: int | None = None,
    n_inits: int = 1,
    seed: int = 0,
    hidden: int | None = None,
    mode: str = "fast",
    power_iters: int = 0,
    hbar: BasicEmbeddings | None = None,
) -> Precomputed:
    """One compensation per cluster of ``partition`` (a Partition or list of node lists)."""
    t0 = time.perf_counter()
    clusters = getattr(partition, "clusters", partition)
    x = np.asarray(x, dtype=np.float64)
    hidden = x.shape[1] if hidden is None else hidden
    k = hidden if k is None else k
    if hbar is None:
        hbar = basic_embeddings(g, x, arch, num_layers, hidden, n_inits, seeds.derive(seed, "basic"))
    comps = []
    for i, cluster in enumerate(clusters):
        ctx = batch_context(g, cluster)
        if mode == "exact":
            comps.append(build_compensation_exact(hbar, ctx, arch))
        elif mode == "fast":
            comps.append(
                build_compensation_fast(
                    hbar, ctx, k, seeds.derive(seed, "cluster", i), arch, power_iters=power_iters
                )
            )
        else:
            raise CompensationError(f"unknown compensation mode {mode!r}")
    elapsed = time.perf_counter() - t0
    return Precomputed(comps, elapsed, sum(c.nbytes for c in comps))


# ---------------------------------------------------------------- cache file
#
# Little-endian layout:
#   magic       8 bytes  b"TOPCOMP1"
#   graph hash  32 bytes sha256 of the graph CSR
#   part hash   32 bytes sha256 of the cluster lists
#   k u32, n_inits u32, seed u64, arch u8 (0 gcn / 1 sage), mode u8 (0 fast / 1 exact), pad u16
#   clusters    u32
#   per cluster: |B| u32, |boundary| u32, |S| u32, r u32,
#                batch i64[|B|], boundary i64[|boundary|], s_local i64[|S|],
#                q_s f64[r*|S|], d_hat_a f64[|B|*r]

_MAGIC = b"TOPCOMP1"
_HEAD = "<IIQBBHI"


def partition_digest(clusters) -> bytes:
    h = hashlib.sha256()
    for c in clusters:
        arr = np.asarray(c, dtype=np.int64)
        h.update(np.int64(arr.size).tobytes())
        h.update(arr.tobytes())
    return h.digest()


@dataclass
class CacheHeader:
    graph_hash: bytes
    partition_hash: bytes
    k: int
    n_inits: int
    seed: int
    arch: str
    mode: str


def save_cache(path, comps: list[Compensation], header: CacheHeader) -> None:
    archs, modes = ("gcn", "sage"), ("fast", "exact")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(header.graph_hash)
        fh.write(header.partition_hash)
        fh.write(
            struct.pack(
                _HEAD,
                header.k,
                header.n_inits,
                header.seed & 0xFFFFFFFFFFFFFFFF,
                archs.index(header.arch),
                modes.index(header.mode),
                0,
                len(comps),
            )
        )
        for c in comps:
            r, s = c.q_s.shape
            fh.write(struct.pack("<IIII", c.batch.size, c.boundary.size, s, r))
            for arr, dt in (
                (c.batch, "<i8"),
                (c.boundary, "<i8"),
                (c.s_local, "<i8"),
                (c.q_s, "<f8"),
                (c.d_hat_a, "<f8"),
            ):
                fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_cache(path) -> tuple[CacheHeader, list[Compensation]]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise CompensationError(f"{path}: not a compensation cache")
    off = 8
    g_hash, p_hash = data[off : off + 32], data[off + 32 : off + 64]
    off += 64
    k, n_inits, seed, arch_i, mode_i, _, count = struct.unpack_from(_HEAD, data, off)
    off += struct.calcsize(_HEAD)
    arch, mode = ("gcn", "sage")[arch_i], ("fast", "exact")[mode_i]

    def take(dt, count, shape=None):
        nonlocal off
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).copy()
        off += arr.nbytes
        arr = arr.astype(np.int64 if dt == "<i8" else np.float64)
        return arr.reshape(shape) if shape is not None else arr

    comps = []
    for _ in range(count):
        nb, nc, ns, r = struct.unpack_from("<IIII", data, off)
        off += 16
        batch = take("<i8", nb)
        boundary = take("<i8", nc)
        s_local = take("<i8", ns)
        q_s = take("<f8", r * ns, (r, ns))
        d_hat_a = take("<f8", nb * r, (nb, r))
        comps.append(Compensation(batch, boundary, s_local, q_s, d_hat_a, arch=arch, mode=mode))
    if off != len(data):
        raise CompensationError(f"{path}: trailing bytes")
    header = CacheHeader(g_hash, p_hash, k, n_inits, seed, arch, mode)
    return header, comps
