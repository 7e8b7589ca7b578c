"""Synthetic graphs with planted structure and the plain-text dataset format.

A dataset directory holds four files:

``edges.tsv``
    ``u<TAB>v`` per line, 0-based. ``# nodes: N`` fixes the node count and
    ``# directed`` marks a directed graph; undirected graphs list each edge once.
``features.csv``
    Headerless, one node per line, comma-separated floats with ``.`` decimals.
``labels.csv``
    One integer class id per line.
``masks.csv``
    Exactly three lines (train, val, test) of space-separated node ids; a
    line may be empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import GraphError, SparseGraph, build_graph, load_edge_list

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    masks: dict[str, np.ndarray]
    name: str = "dataset"
    num_classes: int | None = None

    def __post_init__(self) -> None:
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        self.validate()

    @property
    def n(self) -> int:
        return self.graph.n

    def validate(self) -> None:
        if self.features.shape[0] != self.graph.n:
            raise DatasetError(f"{self.features.shape[0]} feature rows for {self.graph.n} nodes")
        if self.labels.shape != (self.graph.n,):
            raise DatasetError(f"{self.labels.size} labels for {self.graph.n} nodes")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        owner: dict[int, str] = {}
        for split in SPLITS:
            for v in self.masks.get(split, ()):
                v = int(v)
                if not 0 <= v < self.graph.n:
                    raise DatasetError(f"{split} mask node {v} out of range")
                if v in owner:
                    raise DatasetError(f"node {v} is in both the {owner[v]} and {split} masks")
                owner[v] = split

    def equals(self, other: "Dataset") -> bool:
        return (
            self.graph.n == other.graph.n
            and (self.graph.adj != other.graph.adj).nnz == 0
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(self.masks[s], other.masks[s]) for s in SPLITS)
        )


def _split(n_or_nodes, rng, fractions=(0.6, 0.2, 0.2)) -> dict[str, np.ndarray]:
    nodes = np.arange(n_or_nodes) if np.isscalar(n_or_nodes) else np.asarray(n_or_nodes)
    perm = rng.permutation(nodes)
    a = int(round(fractions[0] * perm.size))
    b = a + int(round(fractions[1] * perm.size))
    return {"train": np.sort(perm[:a]), "val": np.sort(perm[a:b]), "test": np.sort(perm[b:])}


TWO_ORBIT_EDGES = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (3, 5), (4, 5)]
TWO_ORBIT_ORBITS = ([0, 1, 4, 5], [2, 3])


def gen_two_orbit(feature_dim: int = 4, seed: int = 0) -> Dataset:
    """Two triangles joined by a bridge: orbits {v1,v2,v5,v6} and {v3,v4}.

    Nodes are 0-based (v1 -> 0). Features are shared within an orbit and the
    label is the orbit index; every node is a training node.
    """
    rng = np.random.default_rng(seed)
    g = build_graph(TWO_ORBIT_EDGES, 6, undirected=True)
    protos = rng.standard_normal((2, feature_dim))
    labels = np.zeros(6, dtype=np.int64)
    labels[TWO_ORBIT_ORBITS[1]] = 1
    feats = protos[labels]
    masks = {"train": np.arange(6), "val": np.zeros(0, dtype=np.int64), "test": np.zeros(0, dtype=np.int64)}
    return Dataset(g, feats, labels, masks, name="two-orbit", num_classes=2)


def _random_edges(rng, n: int, p: float) -> np.ndarray:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return np.stack([iu[keep], ju[keep]], axis=1)


def gen_duplication(
    base_n: int = 8,
    copies: int = 4,
    p_edge: float = 0.3,
    feature_dim: int = 8,
    seed: int = 0,
    num_classes: int = 2,
) -> Dataset:
    """``copies`` disjoint identical copies of one random graph (same features per copy).

    Copy ``c`` holds nodes ``c*base_n .. (c+1)*base_n - 1``. Any batch that
    contains one whole copy admits an exact compensation.
    """
    rng = np.random.default_rng(seed)
    base = _random_edges(rng, base_n, p_edge)
    edges = np.concatenate([base + c * base_n for c in range(copies)]) if base.size else base
    g = build_graph(edges, base_n * copies, undirected=True)
    feats_base = rng.standard_normal((base_n, feature_dim))
    score = feats_base @ rng.standard_normal(feature_dim)
    cuts = np.quantile(score, np.linspace(0, 1, num_classes + 1)[1:-1])
    labels_base = np.searchsorted(cuts, score).astype(np.int64)
    feats = np.tile(feats_base, (copies, 1))
    labels = np.tile(labels_base, copies)
    return Dataset(g, feats, labels, _split(g.n, rng), name="duplication", num_classes=num_classes)


def copy_nodes(base_n: int, c: int) -> np.ndarray:
    return np.arange(c * base_n, (c + 1) * base_n, dtype=np.int64)


def mixed_copy_batches(base_n: int, copies: int) -> list[np.ndarray]:
    """``copies // 2`` batches, each holding one whole copy plus two half copies.

    Batch ``c`` takes copy ``c``, the first half of copy ``m + c`` and the
    second half of copy ``m + (c + 1) % m`` (``m = copies // 2``). Half
    copies create out-of-batch neighbors, while the whole copy makes the
    compensation exact.
    """
    if copies < 2 or copies % 2:
        raise DatasetError("need an even number of copies")
    m, half = copies // 2, base_n // 2
    out = []
    for c in range(m):
        first = copy_nodes(base_n, m + c)[:half]
        second = copy_nodes(base_n, m + (c + 1) % m)[half:]
        out.append(np.sort(np.concatenate([copy_nodes(base_n, c), first, second])))
    return out


def gen_sbm(
    n: int = 400,
    blocks: int = 8,
    p_in: float = 0.1,
    p_out: float = 0.005,
    feature_dim: int | None = None,
    noise: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Stochastic block model; features are block one-hot plus Gaussian noise, labels are blocks."""
    feature_dim = blocks if feature_dim is None else feature_dim
    if feature_dim < blocks:
        raise DatasetError("feature_dim must be >= blocks")
    if blocks < 1 or n < blocks:
        raise DatasetError("need 1 <= blocks <= n")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) * blocks // n).astype(np.int64)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    g = build_graph(np.stack([iu[keep], ju[keep]], axis=1), n, undirected=True)
    feats = np.zeros((n, feature_dim))
    feats[np.arange(n), labels] = 1.0
    feats += noise * rng.standard_normal((n, feature_dim))
    return Dataset(g, feats, labels, _split(n, rng), name="sbm", num_classes=blocks)


CORA_CLASS_SIZES = (351, 217, 418, 818, 426, 298, 180)


def gen_citation_like(
    seed: int = 0,
    class_sizes=CORA_CLASS_SIZES,
    num_edges: int = 5429,
    num_features: int = 1433,
    homophily: float = 0.6,
    words_per_node: int = 18,
    topic_words: int = 150,
    topic_share: float = 0.33,
) -> Dataset:
    """Citation-network stand-in with Cora's counts.

    Exactly ``num_edges`` undirected edges, binary bag-of-words features from
    class topics, and the public split sizes (20 per class / 500 / 1000).
    """
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(class_sizes)), class_sizes).astype(np.int64)
    labels = labels[rng.permutation(labels.size)]
    n = labels.size
    members = [np.flatnonzero(labels == c) for c in range(len(class_sizes))]
    weights = np.asarray(class_sizes, dtype=np.float64) / n
    edges: set[tuple[int, int]] = set()
    while len(edges) < num_edges:
        if rng.random() < homophily:
            c = rng.choice(len(class_sizes), p=weights)
            u, v = rng.choice(members[c], size=2, replace=False)
        else:
            u, v = rng.choice(n, size=2, replace=False)
            if labels[u] == labels[v]:
                continue
        edges.add((int(min(u, v)), int(max(u, v))))
    g = build_graph(sorted(edges), n, undirected=True)

    vocab = [rng.choice(num_features, size=topic_words, replace=False) for _ in class_sizes]
    feats = np.zeros((n, num_features))
    for i in range(n):
        k_topic = rng.binomial(words_per_node, topic_share)
        words = np.concatenate(
            [
                rng.choice(vocab[labels[i]], size=k_topic, replace=False),
                rng.choice(num_features, size=words_per_node - k_topic, replace=False),
            ]
        )
        feats[i, words] = 1.0

    train = np.concatenate([rng.choice(m, size=20, replace=False) for m in members])
    rest = rng.permutation(np.setdiff1d(np.arange(n), train))
    masks = {"train": np.sort(train), "val": np.sort(rest[:500]), "test": np.sort(rest[500:1500])}
    return Dataset(g, feats, labels, masks, name="citation", num_classes=len(class_sizes))


# ---------------------------------------------------------------- file format


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = ds.graph
    symmetric = g.is_symmetric()
    with (d / "edges.tsv").open("w") as fh:
        fh.write(f"# nodes: {g.n}\n")
        if not symmetric:
            fh.write("# directed\n")
        for u, v in g.edge_list():
            if symmetric and u > v:
                continue
            fh.write(f"{u}\t{v}\n")
    with (d / "features.csv").open("w") as fh:
        for row in ds.features:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with (d / "labels.csv").open("w") as fh:
        for y in ds.labels:
            fh.write(f"{int(y)}\n")
    with (d / "masks.csv").open("w") as fh:
        for split in SPLITS:
            fh.write(" ".join(str(int(v)) for v in ds.masks[split]) + "\n")


def _read_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                raise DatasetError(f"{path}:{lineno}: empty line")
            parts = s.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric value") from None
    return np.asarray(rows, dtype=np.float64)


def _read_labels(path: Path) -> np.ndarray:
    out = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            try:
                out.append(int(s))
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: expected an integer label, got {s!r}") from None
    return np.asarray(out, dtype=np.int64)


def _read_masks(path: Path) -> dict[str, np.ndarray]:
    lines = path.read_text().split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    if len(lines) != 3:
        raise DatasetError(f"{path}: expected 3 lines (train/val/test), got {len(lines)}")
    masks = {}
    owner: dict[int, str] = {}
    for lineno, (split, line) in enumerate(zip(SPLITS, lines), 1):
        try:
            ids = [int(t) for t in line.split()]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-integer node id") from None
        for v in ids:
            if v in owner:
                raise DatasetError(f"{path}:{lineno}: node {v} is in both the {owner[v]} and {split} masks")
            owner[v] = split
        masks[split] = np.asarray(sorted(ids), dtype=np.int64)
    return masks


def load_dataset(directory, num_classes: int | None = None) -> Dataset:
    d = Path(directory)
    for name in ("edges.tsv", "features.csv", "labels.csv", "masks.csv"):
        if not (d / name).is_file():
            raise DatasetError(f"{d / name}: missing file")
    directed = any(line.strip() == "# directed" for line in (d / "edges.tsv").open())
    try:
        edges, n_edges = load_edge_list(d / "edges.tsv")
    except GraphError as e:
        raise DatasetError(str(e)) from None
    feats = _read_features(d / "features.csv")
    labels = _read_labels(d / "labels.csv")
    n = feats.shape[0]
    if n_edges > n:
        raise DatasetError(f"{d / 'edges.tsv'}: node ids reach {n_edges - 1} but only {n} feature rows")
    if labels.size != n:
        raise DatasetError(f"{d / 'labels.csv'}: {labels.size} labels for {n} feature rows")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        bad = int(np.flatnonzero(labels >= num_classes)[0])
        raise DatasetError(f"{d / 'labels.csv'}:{bad + 1}: label {labels[bad]} out of range [0, {num_classes})")
    if labels.size and labels.min() < 0:
        bad = int(np.flatnonzero(labels < 0)[0])
        raise DatasetError(f"{d / 'labels.csv'}:{bad + 1}: negative label")
    masks = _read_masks(d / "masks.csv")
    for split, ids in masks.items():
        if ids.size and (ids.max() >= n):
            raise DatasetError(f"{d / 'masks.csv'}: {split} node {int(ids.max())} out of range")
    g = build_graph(edges, n, undirected=not directed)
    return Dataset(g, feats, labels, masks, name=d.name, num_classes=num_classes)


def check_dataset(directory) -> list[str]:
    """Conformance check; returns a list of problems (empty when valid)."""
    try:
        ds = load_dataset(directory)
    except (DatasetError, GraphError, OSError) as e:
        return [str(e)]
    problems = []
    if ds.graph.num_edges == 0:
        problems.append("graph has no edges")
    if not ds.masks["train"].size:
        problems.append("train mask is empty")
    return problems
