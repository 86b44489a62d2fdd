"""
Learnable coupling functions shared by every model family.

Each coupling takes node features (a real tensor, or a complex matrix carried
as two planes) and returns a tensor of the same kind. Complex inputs reuse
the real weights on both planes unless ``complex_weights`` is set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import DimensionError, EmptySoftmaxError
from .graph import SparseGraph, build_graph, normalize_sym
from .schemas import CouplingConfig
from .tensor import (
    ComplexMatrix,
    RealTensor,
    add,
    concat_cols,
    complex_mul,
    hadamard,
    leaky_relu,
    matmul,
    mean_rows,
    row_sum,
    scale,
    segment_mean,
    segment_softmax,
    segment_sum,
    slice_cols,
    sparse_matmul,
    sub,
    take_rows,
)

Features = Union[RealTensor, ComplexMatrix]


@dataclass(frozen=True)
class CouplingGraphs:
    """The three views of one graph that the couplings need."""

    normalized: SparseGraph
    attention: SparseGraph
    difference: SparseGraph
    graph_ids: Optional[np.ndarray] = None
    num_graphs: int = 1


def prepare_graphs(g: SparseGraph, graph_ids: Optional[np.ndarray] = None, num_graphs: int = 1) -> CouplingGraphs:
    looped = build_graph(g.edge_pairs(), g.n, add_self_loops=True)
    return CouplingGraphs(
        normalized=normalize_sym(looped),
        attention=looped,
        difference=looped.without_self_loops(),
        graph_ids=None if graph_ids is None else np.asarray(graph_ids, dtype=np.int64),
        num_graphs=num_graphs,
    )


def _planes(X: Features) -> List[RealTensor]:
    return [X.re, X.im] if isinstance(X, ComplexMatrix) else [X]


def _like(X: Features, planes: List[RealTensor]) -> Features:
    return ComplexMatrix(planes[0], planes[1]) if isinstance(X, ComplexMatrix) else planes[0]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> RealTensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return RealTensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def _project(X: Features, W: Features) -> List[RealTensor]:
    if isinstance(W, ComplexMatrix):
        if not isinstance(X, ComplexMatrix):
            X = ComplexMatrix(X, scale(X, 0.0))
        return _planes(complex_mul(X, W, mode="matmul"))
    return [matmul(p, W) for p in _planes(X)]


def _check_rows(X: Features, g: SparseGraph) -> None:
    rows = _planes(X)[0].rows
    if rows != g.n:
        raise DimensionError(f"features have {rows} rows, graph has {g.n} nodes", rows=rows, n=g.n)


# ---------------------------------------------------------------------------
# GCN

def gcn_coupling(X: Features, g: SparseGraph, W: Features, slope: float) -> Features:
    """leaky(A_hat X W) with A_hat the normalized adjacency."""
    _check_rows(X, g)
    rows, cols, vals = g.coo()
    aggregated = [sparse_matmul(rows, cols, vals, g.n, p) for p in _planes(X)]
    mixed = _project(_like(X, aggregated), W)
    return _like(X, [leaky_relu(p, slope) for p in mixed])


# ---------------------------------------------------------------------------
# GAT

def _segments(g: SparseGraph):
    rows, cols, _ = g.coo()
    counts = np.bincount(rows, minlength=g.n)
    if np.any(counts == 0):
        node = int(np.argmax(counts == 0))
        raise EmptySoftmaxError(f"node {node} has an empty attention neighbourhood", node=node)
    return rows, cols


def _head_features(planes: List[RealTensor], head: int, width: int) -> List[RealTensor]:
    return [slice_cols(p, head * width, (head + 1) * width) for p in planes]


def gat_attention(
    H: List[RealTensor], g: SparseGraph, a_src: RealTensor, a_dst: RealTensor, heads: int, slope: float
) -> List[RealTensor]:
    """Per-head attention coefficients, one (E, 1) column per head in CSR entry order."""
    rows, cols = _segments(g)
    width = H[0].cols // heads
    out = []
    for k in range(heads):
        feats = concat_cols(_head_features(H, k, width))
        src = matmul(feats, slice_cols(a_src, k, k + 1))
        dst = matmul(feats, slice_cols(a_dst, k, k + 1))
        logits = leaky_relu(add(take_rows(src, rows), take_rows(dst, cols)), slope)
        out.append(segment_softmax(logits, rows, g.n))
    return out


def gat_coupling(
    X: Features, g: SparseGraph, W: Features, a_src: RealTensor, a_dst: RealTensor, slope: float, heads: int = 1
) -> Features:
    """Attention-weighted neighbour aggregation; heads concatenated, then leaky ReLU."""
    _check_rows(X, g)
    H = _project(X, W)
    if H[0].cols % heads != 0:
        raise DimensionError(f"width {H[0].cols} not divisible by {heads} heads")
    width = H[0].cols // heads
    rows, cols = _segments(g)
    attention = gat_attention(H, g, a_src, a_dst, heads, slope)
    planes = []
    for p in H:
        blocks = []
        for k in range(heads):
            head = slice_cols(p, k * width, (k + 1) * width)
            weighted = hadamard(take_rows(head, cols), attention[k])
            blocks.append(segment_sum(weighted, rows, g.n))
        planes.append(leaky_relu(concat_cols(blocks) if heads > 1 else blocks[0], slope))
    return _like(X, planes)


# ---------------------------------------------------------------------------
# Tran

def _centre(p: RealTensor, graph_ids: Optional[np.ndarray], num_graphs: int) -> RealTensor:
    if graph_ids is None:
        return sub(p, mean_rows(p))
    return sub(p, take_rows(segment_mean(p, graph_ids, num_graphs), graph_ids))


def tran_attention(
    X: Features, g: SparseGraph, W_Q: RealTensor, W_K: RealTensor, heads: int, attn_dim: int,
    graph_ids: Optional[np.ndarray] = None, num_graphs: int = 1,
) -> List[RealTensor]:
    """softmax_j(K_i . Q_j / d_k) over each node's neighbours, per head.

    Nodes without neighbours get no entries and contribute nothing.

    Keys and queries are read from features centred on their graph's column
    mean (the whole batch when ``graph_ids`` is None), so the weights ignore
    a constant shift of a graph and never mix graphs of one batch.
    """
    rows, cols, _ = g.coo()
    planes = [_centre(p, graph_ids, num_graphs) for p in _planes(X)]
    centred = concat_cols(planes) if len(planes) > 1 else planes[0]
    K = matmul(centred, W_K)
    Q = matmul(centred, W_Q)
    out = []
    for k in range(heads):
        Kk = slice_cols(K, k * attn_dim, (k + 1) * attn_dim)
        Qk = slice_cols(Q, k * attn_dim, (k + 1) * attn_dim)
        logits = scale(row_sum(hadamard(take_rows(Kk, rows), take_rows(Qk, cols))), 1.0 / attn_dim)
        out.append(segment_softmax(logits, rows, g.n))
    return out


def tran_coupling(
    X: Features, g: SparseGraph, W_Q: RealTensor, W_K: RealTensor, kappa: float, slope: float,
    heads: int = 1, attn_dim: Optional[int] = None, graph_ids: Optional[np.ndarray] = None, num_graphs: int = 1,
) -> Features:
    """leaky(kappa * sum_j a_ij (X_j - X_i)), heads averaged."""
    _check_rows(X, g)
    attn_dim = attn_dim or W_K.cols // heads
    if g.nnz == 0:
        return _like(X, [scale(p, 0.0) for p in _planes(X)])
    rows, cols, _ = g.coo()
    attention = tran_attention(X, g, W_Q, W_K, heads, attn_dim, graph_ids, num_graphs)
    planes = []
    for p in _planes(X):
        diff = sub(take_rows(p, cols), take_rows(p, rows))
        total = None
        for att in attention:
            agg = segment_sum(hadamard(diff, att), rows, g.n)
            total = agg if total is None else add(total, agg)
        planes.append(leaky_relu(scale(total, kappa / heads), slope))
    return _like(X, planes)


# ---------------------------------------------------------------------------
# parameters and dispatch

@dataclass
class CouplingWeights:
    """Parameters of one coupling instance."""

    cfg: CouplingConfig
    params: Dict[str, RealTensor] = field(default_factory=dict)
    prefix: str = ""

    @classmethod
    def init(cls, cfg: CouplingConfig, rng: np.random.Generator, complex_input: bool = False, prefix: str = "") -> "CouplingWeights":
        h = cfg.hidden_dim
        planes = 2 if complex_input else 1
        params: Dict[str, RealTensor] = {}
        if cfg.kind in ("gcn", "gat"):
            params[f"{prefix}W"] = _glorot(rng, h, h, f"{prefix}W")
            if complex_input and cfg.complex_weights:
                params[f"{prefix}W_im"] = _glorot(rng, h, h, f"{prefix}W_im")
        if cfg.kind == "gat":
            width = planes * (h // cfg.heads)
            params[f"{prefix}a_src"] = _glorot(rng, width, cfg.heads, f"{prefix}a_src")
            params[f"{prefix}a_dst"] = _glorot(rng, width, cfg.heads, f"{prefix}a_dst")
        if cfg.kind == "tran":
            params[f"{prefix}W_Q"] = _glorot(rng, planes * h, cfg.attn_dim * cfg.heads, f"{prefix}W_Q")
            params[f"{prefix}W_K"] = _glorot(rng, planes * h, cfg.attn_dim * cfg.heads, f"{prefix}W_K")
        return cls(cfg=cfg, params=params, prefix=prefix)

    def _get(self, key: str) -> Optional[RealTensor]:
        return self.params.get(self.prefix + key)

    def weight(self) -> Features:
        W, W_im = self._get("W"), self._get("W_im")
        return ComplexMatrix(W, W_im) if W_im is not None else W

    def __call__(self, X: Features, graphs: CouplingGraphs) -> Features:
        cfg = self.cfg
        if cfg.kind == "gcn":
            return gcn_coupling(X, graphs.normalized, self.weight(), cfg.leaky_slope)
        if cfg.kind == "gat":
            return gat_coupling(X, graphs.attention, self.weight(), self._get("a_src"), self._get("a_dst"), cfg.leaky_slope, cfg.heads)
        return tran_coupling(
            X, graphs.difference, self._get("W_Q"), self._get("W_K"), cfg.kappa, cfg.leaky_slope, cfg.heads, cfg.attn_dim,
            graphs.graph_ids, graphs.num_graphs,
        )
