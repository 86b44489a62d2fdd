"""
Graph construction, normalization, perturbation, splits and dataset bundles.
Graphs are undirected and stored as immutable CSR arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityError, ContractError, DegreeZeroError, StratificationError
from .tensor import RealTensor
from .utils.reproducibility import make_rng

logger = logging.getLogger(__name__)

TASKS = ("node-class", "graph-class", "graph-reg")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SparseGraph:
    """Symmetric adjacency in CSR form."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    normalized: bool = False
    self_loops: bool = False

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    @property
    def row_index(self) -> np.ndarray:
        """Row id of every stored entry (COO expansion of indptr)."""
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def coo(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.row_index, self.indices, self.values

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degree(self) -> np.ndarray:
        """Weighted row sums."""
        rows, _, vals = self.coo()
        deg = np.zeros(self.n)
        np.add.at(deg, rows, vals)
        return deg

    def edge_pairs(self) -> np.ndarray:
        """Undirected off-diagonal edges as (i, j) with i < j."""
        rows, cols, _ = self.coo()
        keep = rows < cols
        return np.stack([rows[keep], cols[keep]], axis=1)

    @property
    def num_edges(self) -> int:
        return int(self.edge_pairs().shape[0])

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n))
        rows, cols, vals = self.coo()
        dense[rows, cols] = vals
        return dense

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """A @ x for real or complex ``x`` (vector or matrix)."""
        rows, cols, vals = self.coo()
        x = np.asarray(x)
        shape = (self.n,) + x.shape[1:]
        out = np.zeros(shape, dtype=np.result_type(x.dtype, np.float64))
        weights = vals.reshape((-1,) + (1,) * (x.ndim - 1))
        np.add.at(out, rows, weights * x[cols])
        return out

    def without_self_loops(self) -> "SparseGraph":
        rows, cols, _ = self.coo()
        return build_graph(zip(rows[rows != cols], cols[rows != cols]), self.n, add_self_loops=False)


def _from_coo(n: int, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, normalized: bool, self_loops: bool) -> SparseGraph:
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    return SparseGraph(
        n=n,
        indptr=_frozen(indptr),
        indices=_frozen(cols.astype(np.int64)),
        values=_frozen(vals.astype(np.float64)),
        normalized=normalized,
        self_loops=self_loops,
    )


def build_graph(edge_list: Iterable[Tuple[int, int]], n: int, add_self_loops: bool = False) -> SparseGraph:
    """Symmetrize and deduplicate an edge list into a 0/1 CSR adjacency."""
    edges = np.array(list(edge_list), dtype=np.int64).reshape(-1, 2)
    bad = (edges < 0) | (edges >= n)
    if bad.any():
        row = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise ContractError(
            f"edge {row} has endpoint out of range [0, {n}): {tuple(edges[row])}",
            edge=row,
            endpoint=int(edges[row][bad[row]][0]),
        )
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    if add_self_loops:
        loops = np.repeat(np.arange(n, dtype=np.int64)[:, None], 2, axis=1)
        both = np.concatenate([both, loops], axis=0)
    both = np.unique(both, axis=0) if both.size else both.reshape(0, 2)
    return _from_coo(n, both[:, 0], both[:, 1], np.ones(both.shape[0]), normalized=False, self_loops=add_self_loops)


def normalize_sym(g: SparseGraph) -> SparseGraph:
    """Return D^{-1/2} A D^{-1/2}, with D the row sums of the stored adjacency."""
    rows, cols, vals = g.coo()
    deg = np.zeros(g.n)
    np.add.at(deg, rows, vals)
    if np.any(deg <= 0):
        node = int(np.argmax(deg <= 0))
        raise DegreeZeroError(f"node {node} has degree zero; add self-loops before normalizing", node=node)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return _from_coo(g.n, rows, cols, vals * inv_sqrt[rows] * inv_sqrt[cols], normalized=True, self_loops=g.self_loops)


def perturb_edges(g: SparseGraph, k: int, seed: int) -> SparseGraph:
    """Add ``k`` fake undirected edges drawn uniformly from the absent node pairs."""
    if k == 0:
        return g
    existing = g.edge_pairs()
    capacity = g.n * (g.n - 1) // 2 - existing.shape[0]
    if k > capacity:
        raise CapacityError(f"cannot add {k} edges; only {capacity} node pairs are absent", requested=k, capacity=capacity)

    rng = make_rng(seed, "perturb_edges")
    taken = set(map(tuple, existing.tolist()))
    if capacity <= 4 * k:
        iu, ju = np.triu_indices(g.n, k=1)
        absent = [(i, j) for i, j in zip(iu.tolist(), ju.tolist()) if (i, j) not in taken]
        picks = rng.choice(len(absent), size=k, replace=False)
        new_edges = [absent[p] for p in np.sort(picks)]
    else:
        new_edges: List[Tuple[int, int]] = []
        chosen = set()
        while len(new_edges) < k:
            i, j = rng.integers(0, g.n, size=2).tolist()
            pair = (min(i, j), max(i, j))
            if i == j or pair in taken or pair in chosen:
                continue
            chosen.add(pair)
            new_edges.append(pair)

    logger.debug("added %d fake edges to a %d-node graph", k, g.n)
    out = build_graph(existing.tolist() + list(new_edges), g.n, add_self_loops=g.self_loops)
    return normalize_sym(out) if g.normalized else out


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        overlap = (self.train & self.val) | (self.train & self.test) | (self.val & self.test)
        if overlap.any():
            raise ContractError("split masks overlap", count=int(overlap.sum()))

    def sizes(self) -> Tuple[int, int, int]:
        return int(self.train.sum()), int(self.val.sum()), int(self.test.sum())


@dataclass(frozen=True)
class DatasetBundle:
    """Graph, node features and targets for one learning task."""

    graph: SparseGraph
    features: RealTensor
    labels: np.ndarray
    task: str
    num_classes: int = 0
    graph_ids: Optional[np.ndarray] = None
    masks: Optional[SplitMasks] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}", allowed=list(TASKS))
        if self.features.rows != self.graph.n:
            raise ContractError("feature rows must equal node count", rows=self.features.rows, n=self.graph.n)
        expected = self.graph.n if self.task == "node-class" else self.num_graphs
        if self.labels.shape[0] != expected:
            raise ContractError("label count does not match task granularity", labels=self.labels.shape[0], expected=expected)
        if self.is_classification and self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ContractError("class labels must lie in [0, num_classes)", num_classes=self.num_classes)

    @property
    def is_classification(self) -> bool:
        return self.task != "graph-reg"

    @property
    def is_graph_level(self) -> bool:
        return self.task != "node-class"

    @property
    def num_graphs(self) -> int:
        if self.graph_ids is None:
            return 1
        return int(self.graph_ids.max()) + 1 if self.graph_ids.size else 0

    @property
    def num_units(self) -> int:
        """Number of labelled units: nodes for node tasks, graphs otherwise."""
        return int(self.labels.shape[0])

    def with_graph(self, graph: SparseGraph) -> "DatasetBundle":
        return DatasetBundle(graph, self.features, self.labels, self.task, self.num_classes, self.graph_ids, self.masks)


@dataclass(frozen=True)
class GraphBatch:
    """Model input: features on a (possibly block-diagonal) graph."""

    graph: SparseGraph
    features: RealTensor
    graph_ids: Optional[np.ndarray] = None
    num_graphs: int = 1


def full_batch(bundle: DatasetBundle) -> GraphBatch:
    return GraphBatch(bundle.graph, bundle.features, bundle.graph_ids, bundle.num_graphs)


def batch_graphs(bundle: DatasetBundle, graph_index: Sequence[int]) -> GraphBatch:
    """Block-diagonal batch of the selected graphs, relabelled 0..len-1 in the given order."""
    if bundle.graph_ids is None:
        raise ContractError("bundle has no graph membership vector")
    graph_index = np.asarray(graph_index, dtype=np.int64)
    pieces = [np.flatnonzero(bundle.graph_ids == gid) for gid in graph_index]
    nodes = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
    new_ids = np.concatenate([np.full(p.shape[0], k) for k, p in enumerate(pieces)]) if pieces else nodes
    relabel = -np.ones(bundle.graph.n, dtype=np.int64)
    relabel[nodes] = np.arange(nodes.shape[0])
    rows, cols, _ = bundle.graph.without_self_loops().coo()
    keep = (relabel[rows] >= 0) & (relabel[cols] >= 0)
    sub = build_graph(zip(relabel[rows[keep]], relabel[cols[keep]]), int(nodes.shape[0]), add_self_loops=False)
    features = RealTensor(bundle.features.data[nodes])
    return GraphBatch(sub, features, new_ids.astype(np.int64), int(graph_index.shape[0]))


def make_splits(bundle: DatasetBundle, train_per_class: int, val_count: int, seed: int) -> SplitMasks:
    """Per-class training sample, then a validation sample from the rest; remainder is test."""
    rng = make_rng(seed, "make_splits")
    n = bundle.num_units
    train = np.zeros(n, dtype=bool)
    if bundle.is_classification:
        for c in range(bundle.num_classes):
            members = np.flatnonzero(bundle.labels == c)
            if members.shape[0] < train_per_class:
                raise StratificationError(
                    f"class {c} has {members.shape[0]} members, fewer than train_per_class={train_per_class}",
                    label=c,
                    members=int(members.shape[0]),
                )
            train[rng.choice(members, size=train_per_class, replace=False)] = True
    else:
        if n < train_per_class:
            raise StratificationError(f"only {n} graphs for {train_per_class} training graphs")
        train[rng.choice(n, size=train_per_class, replace=False)] = True
    rest = np.flatnonzero(~train)
    if rest.shape[0] < val_count:
        raise StratificationError(f"only {rest.shape[0]} units left for {val_count} validation units")
    val = np.zeros(n, dtype=bool)
    val[rng.choice(rest, size=val_count, replace=False)] = True
    test = ~(train | val)
    return SplitMasks(train, val, test, seed)


# ---------------------------------------------------------------------------
# synthetic data

def make_sbm(
    blocks: int = 2,
    nodes_per_block: int = 50,
    p_in: float = 0.2,
    p_out: float = 0.02,
    feature_noise: float = 0.5,
    seed: int = 0,
) -> DatasetBundle:
    """Stochastic block model; features are the one-hot block plus Gaussian noise."""
    rng = make_rng(seed, "make_sbm")
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.shape[0]) < prob
    graph = build_graph(zip(iu[hit], ju[hit]), n)
    features = np.eye(blocks)[labels] + feature_noise * rng.standard_normal((n, blocks))
    return DatasetBundle(graph, RealTensor(features), labels, "node-class", num_classes=blocks)


def make_graph_task(num_graphs: int = 40, task: str = "graph-class", seed: int = 0, min_nodes: int = 4, max_nodes: int = 8) -> DatasetBundle:
    """Small ring-vs-star graphs (classification) or edge-density targets (regression)."""
    if task not in ("graph-class", "graph-reg"):
        raise ContractError(f"graph task expected, got {task!r}")
    rng = make_rng(seed, "make_graph_task")
    edges: List[Tuple[int, int]] = []
    graph_ids: List[int] = []
    features: List[np.ndarray] = []
    targets: List[float] = []
    offset = 0
    for gid in range(num_graphs):
        size = int(rng.integers(min_nodes, max_nodes + 1))
        kind = gid % 2
        if kind == 0:
            local = [(i, (i + 1) % size) for i in range(size)]
        else:
            local = [(0, i) for i in range(1, size)]
        extra = int(rng.integers(0, 2))
        for _ in range(extra):
            i, j = rng.integers(0, size, size=2).tolist()
            if i != j:
                local.append((i, j))
        edges.extend((offset + i, offset + j) for i, j in local)
        deg = np.zeros(size)
        for i, j in set((min(a, b), max(a, b)) for a, b in local):
            deg[i] += 1
            deg[j] += 1
        features.append(np.stack([np.ones(size), deg / size], axis=1) + 0.05 * rng.standard_normal((size, 2)))
        graph_ids.extend([gid] * size)
        pairs = len(set((min(a, b), max(a, b)) for a, b in local))
        targets.append(kind if task == "graph-class" else 2.0 * pairs / (size * (size - 1)))
        offset += size
    graph = build_graph(edges, offset)
    labels = np.array(targets, dtype=np.int64 if task == "graph-class" else np.float64)
    return DatasetBundle(
        graph,
        RealTensor(np.concatenate(features, axis=0)),
        labels,
        task,
        num_classes=2 if task == "graph-class" else 0,
        graph_ids=np.array(graph_ids, dtype=np.int64),
    )


def ring_graph(n: int, add_self_loops: bool = False) -> SparseGraph:
    return build_graph([(i, (i + 1) % n) for i in range(n)], n, add_self_loops)


def complete_graph(n: int, add_self_loops: bool = False) -> SparseGraph:
    return build_graph([(i, j) for i in range(n) for j in range(i + 1, n)], n, add_self_loops)
