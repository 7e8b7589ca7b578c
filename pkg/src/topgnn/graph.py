"""Sparse graph storage, normalized propagation operators and batch splits.

Convention: ``A[i, j] = 1`` iff the directed edge ``j -> i`` exists, so row
``i`` of any propagation operator collects the messages node ``i`` receives.
An edge pair ``(u, v)`` in an edge list means ``u -> v``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


@dataclass(eq=False)
class SparseGraph:
    """Immutable CSR graph with the symmetric-normalized operator cached.

    ``adj`` holds the 0/1 adjacency A (sorted, deduplicated, no self loops
    added); ``norm`` holds (D+I)^-1/2 (A+I) (D+I)^-1/2 with D the in-degree.
    """

    n: int
    adj: sp.csr_matrix
    norm: sp.csr_matrix = field(repr=False)
    degrees: np.ndarray = field(repr=False)

    @property
    def row_ptr(self) -> np.ndarray:
        return self.adj.indptr

    @property
    def col_idx(self) -> np.ndarray:
        return self.adj.indices

    @property
    def norm_values(self) -> np.ndarray:
        return self.norm.data

    @property
    def num_edges(self) -> int:
        return int(self.adj.nnz)

    def neighbors(self, i: int) -> np.ndarray:
        """In-neighbors of ``i`` (the nodes whose messages ``i`` receives)."""
        return self.adj.indices[self.adj.indptr[i] : self.adj.indptr[i + 1]]

    @cached_property
    def mean_op(self) -> sp.csr_matrix:
        """Row-normalized adjacency D^-1 A; rows of isolated nodes stay zero."""
        deg = self.degrees.astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return sp.csr_matrix(sp.diags(inv) @ self.adj)

    def operator(self, arch: str) -> sp.csr_matrix:
        if arch == "gcn":
            return self.norm
        if arch == "sage":
            return self.mean_op
        raise GraphError(f"unknown architecture {arch!r}")

    def is_symmetric(self) -> bool:
        return (self.adj != self.adj.T).nnz == 0

    def edge_list(self) -> np.ndarray:
        """Edges as an (m, 2) array of ``(src, dst)`` pairs, sorted by dst then src."""
        coo = self.adj.tocoo()
        return np.stack([coo.col, coo.row], axis=1).astype(np.int64)

    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(self.adj.indptr.astype(np.int64).tobytes())
        h.update(self.adj.indices.astype(np.int64).tobytes())
        return h.digest()

    def check_invariants(self) -> None:
        ptr, idx = self.adj.indptr, self.adj.indices
        for i in range(self.n):
            row = idx[ptr[i] : ptr[i + 1]]
            if row.size and (np.any(np.diff(row) <= 0) or row[-1] >= self.n or row[0] < 0):
                raise GraphError(f"row {i} of the adjacency is not strictly increasing in range")
        diag = self.norm.diagonal()
        if np.any(diag <= 0):
            raise GraphError("normalized operator is missing a self loop")


def build_graph(edges: Iterable[Sequence[int]], n: int, undirected: bool = True) -> SparseGraph:
    """Build a graph from ``(u, v)`` pairs (edge ``u -> v``).

    Duplicates are collapsed. Self loops in the input are dropped, since the
    normalization adds exactly one per node.
    """
    if n <= 0:
        raise GraphError("graph must have at least one node")
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    e = e.reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
        raise GraphError(f"edge {tuple(int(v) for v in bad)} out of range for n={n}")
    src, dst = e[:, 0], e[:, 1]
    if undirected:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    keep = src != dst
    src, dst = src[keep], dst[keep]
    data = np.ones(src.size, dtype=np.float64)
    adj = sp.csr_matrix((data, (dst, src)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()
    adj.indptr = adj.indptr.astype(np.int64)
    adj.indices = adj.indices.astype(np.int64)

    degrees = np.diff(adj.indptr).astype(np.int64)
    scale = 1.0 / np.sqrt(degrees + 1.0)
    a_hat = adj + sp.identity(n, format="csr")
    norm = sp.csr_matrix(sp.diags(scale) @ a_hat @ sp.diags(scale))
    norm.sort_indices()
    return SparseGraph(n=n, adj=adj, norm=norm, degrees=degrees)


@dataclass(eq=False)
class BatchContext:
    """A mini-batch with its out-of-batch boundary and the split operator blocks.

    ``a_bb``/``a_bc`` are the batch rows of the GCN operator restricted to the
    batch and boundary columns; ``m_bb``/``m_bc`` are the same for the
    mean-aggregation operator.
    """

    batch: np.ndarray
    boundary: np.ndarray
    a_bb: sp.csr_matrix
    a_bc: sp.csr_matrix
    m_bb: sp.csr_matrix
    m_bc: sp.csr_matrix

    @property
    def size(self) -> int:
        return int(self.batch.size)

    @cached_property
    def global_to_local(self) -> dict[int, int]:
        return {int(v): i for i, v in enumerate(self.batch)}

    def blocks(self, arch: str) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        if arch == "gcn":
            return self.a_bb, self.a_bc
        if arch == "sage":
            return self.m_bb, self.m_bc
        raise GraphError(f"unknown architecture {arch!r}")


def _validate_batch(g: SparseGraph, batch: Sequence[int]) -> np.ndarray:
    b = np.asarray(batch, dtype=np.int64).ravel()
    if b.size == 0:
        raise GraphError("batch must be nonempty")
    if b.min() < 0 or b.max() >= g.n:
        raise GraphError("batch node out of range")
    uniq, counts = np.unique(b, return_counts=True)
    if np.any(counts > 1):
        raise GraphError(f"duplicate nodes in batch: {uniq[counts > 1].tolist()}")
    return b


def boundary_nodes(g: SparseGraph, batch: Sequence[int]) -> np.ndarray:
    b = _validate_batch(g, batch)
    rows = g.adj[b]
    nbrs = np.unique(rows.indices)
    return np.setdiff1d(nbrs, b, assume_unique=True)


def batch_context(g: SparseGraph, batch: Sequence[int]) -> BatchContext:
    b = _validate_batch(g, batch)
    boundary = boundary_nodes(g, b)
    norm_rows = g.norm[b]
    mean_rows = g.mean_op[b]
    return BatchContext(
        batch=b,
        boundary=boundary,
        a_bb=sp.csr_matrix(norm_rows[:, b]),
        a_bc=sp.csr_matrix(norm_rows[:, boundary]),
        m_bb=sp.csr_matrix(mean_rows[:, b]),
        m_bc=sp.csr_matrix(mean_rows[:, boundary]),
    )


def graph_cut(g: SparseGraph, batch: Sequence[int]) -> tuple[int, int]:
    """Return ``(cut_edges, boundary_size)``: edges from outside into the batch and |N_B^c|."""
    b = _validate_batch(g, batch)
    inside = np.zeros(g.n, dtype=bool)
    inside[b] = True
    cols = g.adj[b].indices
    cut = int(np.count_nonzero(~inside[cols]))
    return cut, int(np.unique(cols[~inside[cols]]).size)


def load_edge_list(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a ``u<TAB>v`` edge file; ``#`` lines are comments.

    A ``# nodes: N`` comment fixes the node count (needed for isolated
    trailing nodes); otherwise ``n = max id + 1``.
    """
    path = Path(path)
    edges = []
    n = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if body.startswith("nodes:"):
                    n = int(body.split(":", 1)[1])
                continue
            parts = s.split("\t")
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected 'u<TAB>v', got {s!r}")
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise GraphError(f"{path}:{lineno}: non-integer node id in {s!r}") from None
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if n is None:
        n = int(arr.max()) + 1 if arr.size else 0
    return arr, n


def save_edge_list(g: SparseGraph, path: str | Path) -> None:
    """Write every stored directed edge once; loading with ``undirected=False`` is exact."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# nodes: {g.n}\n")
        for u, v in g.edge_list():
            fh.write(f"{u}\t{v}\n")


def read_graph(path: str | Path) -> SparseGraph:
    edges, n = load_edge_list(path)
    return build_graph(edges, n, undirected=False)
