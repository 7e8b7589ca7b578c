"""Mini-batch construction: random partitions, greedy locality-aware
clustering (a self-contained stand-in for METIS) and random-walk node sets."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seeds
from .graph import SparseGraph, graph_cut


class PartitionError(ValueError):
    pass


@dataclass
class Partition:
    clusters: list[np.ndarray]
    method: str = "random"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clusters)

    def nodes(self) -> np.ndarray:
        return np.concatenate(self.clusters) if self.clusters else np.zeros(0, dtype=np.int64)

    def validate(self, target: Sequence[int] | None = None) -> None:
        seen = set()
        for i, c in enumerate(self.clusters):
            if len(c) == 0:
                raise PartitionError(f"cluster {i} is empty")
            for v in c:
                v = int(v)
                if v in seen:
                    raise PartitionError(f"node {v} appears in two clusters")
                seen.add(v)
        if target is not None and seen != {int(v) for v in target}:
            raise PartitionError("clusters do not cover the target node set")

    def total_cut(self, g: SparseGraph) -> int:
        return sum(graph_cut(g, c)[0] for c in self.clusters)


def _target_nodes(n: int, exclude=None) -> np.ndarray:
    nodes = np.arange(n, dtype=np.int64)
    if exclude is not None and len(exclude):
        nodes = np.setdiff1d(nodes, np.asarray(exclude, dtype=np.int64))
    return nodes


def random_partition(nodes, num_clusters: int, seed: int = 0) -> Partition:
    """Shuffle ``nodes`` and split into near-equal clusters (sizes differ by <= 1)."""
    nodes = np.asarray(nodes, dtype=np.int64).ravel()
    if num_clusters < 1:
        raise PartitionError("num_clusters must be >= 1")
    if num_clusters > nodes.size:
        raise PartitionError(f"cannot split {nodes.size} nodes into {num_clusters} clusters")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(nodes)
    clusters = [np.sort(c) for c in np.array_split(perm, num_clusters)]
    return Partition(clusters, method="random", seed=seed)


def _cluster_sizes(total: int, num_clusters: int) -> list[int]:
    base, extra = divmod(total, num_clusters)
    return [base + 1 if i < extra else base for i in range(num_clusters)]


def locality_partition(
    g: SparseGraph, num_clusters: int, seed: int = 0, exclude=None
) -> Partition:
    """Greedy graph-growing partition.

    Clusters are filled one after another up to near-equal capacities. Each
    cluster starts at the unassigned node with the fewest unassigned
    neighbors (ties broken by a seeded permutation) and repeatedly absorbs
    the frontier node with the most edges into the cluster; when the
    frontier dries up it restarts from a fresh peripheral node.
    """
    if num_clusters < 1:
        raise PartitionError("num_clusters must be >= 1")
    nodes = _target_nodes(g.n, exclude)
    if num_clusters > nodes.size:
        raise PartitionError(f"cannot split {nodes.size} nodes into {num_clusters} clusters")
    rng = np.random.default_rng(seed)
    tie = np.empty(g.n, dtype=np.int64)
    tie[rng.permutation(g.n)] = np.arange(g.n)

    sym = g.adj.maximum(g.adj.T).tocsr()
    ptr, idx = sym.indptr, sym.indices
    free = np.zeros(g.n, dtype=bool)
    free[nodes] = True
    free_deg = np.zeros(g.n, dtype=np.int64)
    for v in nodes:
        nb = idx[ptr[v] : ptr[v + 1]]
        free_deg[v] = np.count_nonzero(free[nb])

    # min-heap over (free degree, tie) for start selection; stale entries skipped
    start_heap = [(int(free_deg[v]), int(tie[v]), int(v)) for v in nodes]
    heapq.heapify(start_heap)

    def take(v: int) -> None:
        free[v] = False
        for u in idx[ptr[v] : ptr[v + 1]]:
            if free[u]:
                free_deg[u] -= 1
                heapq.heappush(start_heap, (int(free_deg[u]), int(tie[u]), int(u)))

    def next_start() -> int:
        while start_heap:
            d, _, v = heapq.heappop(start_heap)
            if free[v] and d == free_deg[v]:
                return v
        raise PartitionError("ran out of nodes")  # unreachable when sizes add up

    clusters = []
    for cap in _cluster_sizes(nodes.size, num_clusters):
        members: list[int] = []
        gain: dict[int, int] = {}
        frontier: list[tuple[int, int, int]] = []
        while len(members) < cap:
            v = -1
            while frontier:
                neg_gain, _, u = heapq.heappop(frontier)
                if free[u] and -neg_gain == gain.get(u, 0):
                    v = u
                    break
            if v < 0:
                v = next_start()
            members.append(v)
            take(v)
            for u in idx[ptr[v] : ptr[v + 1]]:
                if free[u]:
                    gain[u] = gain.get(u, 0) + 1
                    heapq.heappush(frontier, (-gain[u], int(tie[u]), int(u)))
        clusters.append(np.sort(np.asarray(members, dtype=np.int64)))
    return Partition(clusters, method="locality", seed=seed)


def random_walk_batch(g: SparseGraph, num_roots: int, walk_len: int, seed: int = 0) -> np.ndarray:
    """Union of nodes visited by ``num_roots`` uniform random walks of ``walk_len`` steps.

    Roots are drawn without replacement; a walk at a node without neighbors stays put.
    """
    if g.n == 0:
        raise PartitionError("empty graph")
    if num_roots < 1 or walk_len < 0:
        raise PartitionError("need num_roots >= 1 and walk_len >= 0")
    rng = np.random.default_rng(seed)
    roots = rng.choice(g.n, size=min(num_roots, g.n), replace=False)
    ptr, idx = g.adj.indptr, g.adj.indices
    visited = set(int(r) for r in roots)
    cur = roots.astype(np.int64)
    for _ in range(walk_len):
        deg = ptr[cur + 1] - ptr[cur]
        step = np.floor(rng.random(cur.size) * np.maximum(deg, 1)).astype(np.int64)
        moving = deg > 0
        cur = cur.copy()
        cur[moving] = idx[ptr[cur[moving]] + step[moving]]
        visited.update(int(v) for v in cur)
    return np.asarray(sorted(visited), dtype=np.int64)


def random_walk_partition(g: SparseGraph, num_roots: int, walk_len: int, seed: int = 0, exclude=None) -> Partition:
    """Cover the target nodes with disjoint random-walk batches.

    Each round draws a walk batch and keeps its not-yet-covered nodes; nodes
    still uncovered after the walks stop producing new nodes become a final cluster.
    """
    nodes = _target_nodes(g.n, exclude)
    remaining = np.zeros(g.n, dtype=bool)
    remaining[nodes] = True
    clusters = []
    rnd = 0
    stale = 0
    while remaining.any() and stale < 20:
        b = random_walk_batch(g, num_roots, walk_len, seed=seeds.derive(seed, "walk", rnd))
        rnd += 1
        fresh = b[remaining[b]]
        if fresh.size == 0:
            stale += 1
            continue
        stale = 0
        remaining[fresh] = False
        clusters.append(fresh)
    if remaining.any():
        clusters.append(np.flatnonzero(remaining).astype(np.int64))
    return Partition(clusters, method="random_walk", seed=seed)


def group_clusters(part: Partition, clusters_per_batch: int, seed: int = 0) -> Partition:
    """Merge clusters into batches of ``clusters_per_batch`` (union of node lists)."""
    if clusters_per_batch < 1:
        raise PartitionError("clusters_per_batch must be >= 1")
    if clusters_per_batch == 1:
        return part
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(part.clusters))
    merged = []
    for start in range(0, order.size, clusters_per_batch):
        chunk = [part.clusters[i] for i in order[start : start + clusters_per_batch]]
        merged.append(np.sort(np.concatenate(chunk)))
    return Partition(merged, method=part.method, seed=part.seed, meta={"clusters_per_batch": clusters_per_batch})


def save_partition(part: Partition, path) -> None:
    with Path(path).open("w") as fh:
        for c in part.clusters:
            fh.write(" ".join(str(int(v)) for v in c) + "\n")


def load_partition(path, method: str = "file") -> Partition:
    clusters = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                clusters.append(np.asarray([int(t) for t in s.split()], dtype=np.int64))
            except ValueError:
                raise PartitionError(f"{path}:{lineno}: non-integer node id") from None
    part = Partition(clusters, method=method)
    part.validate()
    return part
