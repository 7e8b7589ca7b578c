"""1-WL color refinement used as an independent oracle for embedding equality.

The refinement hashes, for every node, its previous color together with the
multiset of (neighbor color, edge weight) over its closed neighborhood, with
weights taken from the symmetric-normalized operator rounded to 12 decimals.
Colors are relabeled canonically (sorted signatures -> dense ids) each round,
so results do not depend on node order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .graph import SparseGraph
from .models import GnnModel, forward_full


@dataclass
class ColorTable:
    rounds: list[np.ndarray] = field(default_factory=list)

    def colors(self, r: int | None = None) -> np.ndarray:
        return self.rounds[-1 if r is None else r]

    def classes(self, r: int | None = None) -> list[list[int]]:
        c = self.colors(r)
        return [np.flatnonzero(c == v).tolist() for v in range(int(c.max()) + 1)]

    def num_classes(self, r: int | None = None) -> int:
        return int(self.colors(r).max()) + 1


def _relabel(signatures: list) -> np.ndarray:
    table = {sig: i for i, sig in enumerate(sorted(set(signatures)))}
    return np.asarray([table[s] for s in signatures], dtype=np.int64)


def _closed_neighborhoods(g: SparseGraph) -> list[list[tuple[int, float]]]:
    # edge weights recomputed from degrees rather than read from the cached operator
    deg = np.diff(g.adj.indptr)
    out = []
    for i in range(g.n):
        nb = [int(j) for j in g.adj.indices[g.adj.indptr[i] : g.adj.indptr[i + 1]]]
        entries = [(j, 1.0 / np.sqrt((deg[i] + 1.0) * (deg[j] + 1.0))) for j in nb + [i]]
        out.append(entries)
    return out


def wl_refine(g: SparseGraph, x, rounds: int) -> ColorTable:
    x = np.asarray(x)
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if x.ndim == 1:
        x = x[:, None]
    rows = [np.ascontiguousarray(x[i]).tobytes() for i in range(g.n)]
    table = ColorTable([_relabel(rows)])
    nbhd = _closed_neighborhoods(g)
    for _ in range(rounds):
        prev = table.rounds[-1]
        sigs = []
        for i in range(g.n):
            multiset = tuple(sorted((int(prev[j]), round(float(w), 12)) for j, w in nbhd[i]))
            sigs.append((int(prev[i]), multiset))
        table.rounds.append(_relabel(sigs))
    return table


@dataclass
class EqualColorReport:
    trials: int
    pairs: int
    violations: int
    max_gap: float


@dataclass
class SeparationReport:
    trials: int
    pairs: int
    separated_fraction: np.ndarray = field(repr=False)

    @property
    def min_fraction(self) -> float:
        return float(self.separated_fraction.min()) if self.pairs else 1.0

    @property
    def fully_separated(self) -> float:
        """Share of pairs separated in every trial."""
        return float(np.mean(self.separated_fraction == 1.0)) if self.pairs else 1.0


def _random_embeddings(g, x, arch, rounds, hidden, seed, activation):
    x = np.asarray(x, dtype=np.float64)
    dims = [x.shape[1]] + [hidden] * rounds
    model = GnnModel.init(arch, dims, activation=activation, seed=seed, final_activation=True)
    _, tape = forward_full(model, g, x)
    return [x] + [rec.out for rec in tape.layers]


def same_color_pairs(colors: np.ndarray) -> list[tuple[int, int]]:
    pairs = []
    for c in np.unique(colors):
        members = np.flatnonzero(colors == c)
        pairs.extend(combinations(members.tolist(), 2))
    return pairs


def check_equal_colors(
    g: SparseGraph,
    x,
    model_family: str = "gcn",
    rounds: int = 2,
    trials: int = 20,
    hidden: int = 8,
    seed: int = 0,
    activation: str = "leaky_relu",
    tol: float = 1e-9,
) -> EqualColorReport:
    """Same color after ``rounds`` rounds must mean equal layer-``rounds`` rows."""
    colors = wl_refine(g, x, rounds).colors(rounds)
    pairs = same_color_pairs(colors)
    violations, worst = 0, 0.0
    if rounds == 0 or not pairs:
        return EqualColorReport(trials, len(pairs), 0, 0.0)
    a = np.asarray([p[0] for p in pairs])
    b = np.asarray([p[1] for p in pairs])
    for t in range(trials):
        h = _random_embeddings(g, x, model_family, rounds, hidden, seed + t, activation)[rounds]
        gaps = np.abs(h[a] - h[b]).max(axis=1)
        violations += int(np.count_nonzero(gaps > tol))
        worst = max(worst, float(gaps.max()))
    return EqualColorReport(trials, len(pairs), violations, worst)


def check_color_separation(
    g: SparseGraph,
    x,
    rounds: int = 2,
    trials: int = 20,
    hidden: int = 8,
    seed: int = 0,
    model_family: str = "gcn",
    tol: float = 1e-6,
    max_pairs: int | None = None,
) -> SeparationReport:
    """For pairs with different colors, fraction of LeakyReLU trials that separate them.

    Separation is measured on the concatenation of layers 0..rounds, which is
    the information the refinement colors encode.
    """
    colors = wl_refine(g, x, rounds).colors(rounds)
    n = g.n
    ii, jj = np.triu_indices(n, k=1)
    keep = colors[ii] != colors[jj]
    ii, jj = ii[keep], jj[keep]
    if max_pairs is not None and ii.size > max_pairs:
        pick = np.random.default_rng(seed).choice(ii.size, size=max_pairs, replace=False)
        ii, jj = ii[pick], jj[pick]
    hits = np.zeros(ii.size)
    for t in range(trials):
        h = np.hstack(_random_embeddings(g, x, model_family, rounds, hidden, seed + t, "leaky_relu"))
        gaps = np.linalg.norm(h[ii] - h[jj], axis=1)
        hits += gaps > tol
    return SeparationReport(trials, int(ii.size), hits / max(trials, 1))
