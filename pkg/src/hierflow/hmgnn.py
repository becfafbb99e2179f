"""Horizontal (intra-layer) and hierarchical (top-down) message passing.

Node features are kept as one ``[B*V_m, F]`` tensor per layer, rows ordered
sample-major: row ``b*V_m + i`` is node ``i`` of sample ``b``. Graph structure
enters only through constant matrices, so a batch of ``B`` samples is the
block-diagonal union of ``B`` copies of each layer's graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hierflow import autograd as ag
from hierflow.autograd import ParameterStore, Tensor, uniform_init
from hierflow.errors import ConfigError, DimensionError, GraphError
from hierflow.hierarchy import MultiLayerGraph

AGGREGATORS = ("mean", "sum")


def adjacency(graph: MultiLayerGraph, layer: int) -> np.ndarray:
    nodes = graph.layers[layer]
    pos = {n: i for i, n in enumerate(nodes)}
    A = np.zeros((len(nodes), len(nodes)))
    for u, v in graph.intra_edges[layer]:
        A[pos[u], pos[v]] = A[pos[v], pos[u]] = 1.0
    return A


def aggregation_matrix(A: np.ndarray, aggregator: str) -> np.ndarray:
    """Row ``v`` combines the neighbours of ``v``; isolated nodes get an all-zero row."""
    if aggregator == "sum":
        return A.copy()
    if aggregator == "mean":
        deg = A.sum(axis=1, keepdims=True)
        return np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)
    raise ConfigError(f"unknown aggregator {aggregator!r}; choose from {AGGREGATORS}")


def parent_selector(graph: MultiLayerGraph, layer: int) -> np.ndarray:
    """``[V_m, V_{m+1}]`` 0/1 matrix picking each node's parent."""
    lower, upper = graph.layers[layer], graph.layers[layer + 1]
    pos = {n: i for i, n in enumerate(upper)}
    P = np.zeros((len(lower), len(upper)))
    for i, node in enumerate(lower):
        p = graph.parent_of.get(node)
        if p not in pos:
            raise GraphError(f"node {node!r} has no parent in layer {layer + 2}")
        P[i, pos[p]] = 1.0
    return P


def block_diag(M: np.ndarray, copies: int) -> np.ndarray:
    return np.kron(np.eye(copies), M) if copies > 1 else M.copy()


@dataclass(frozen=True)
class GraphOperators:
    """Constant matrices for a batch of ``batch`` copies of the graph."""

    adjacency: tuple[np.ndarray, ...]
    aggregate: tuple[np.ndarray, ...]
    parent: tuple[np.ndarray, ...]
    batch: int


def graph_operators(graph: MultiLayerGraph, aggregator: str = "mean", batch: int = 1) -> GraphOperators:
    adj = tuple(block_diag(adjacency(graph, m), batch) for m in range(3))
    agg = tuple(aggregation_matrix(a, aggregator) for a in adj)
    par = tuple(block_diag(parent_selector(graph, m), batch) for m in range(2))
    return GraphOperators(adj, agg, par, batch)


class HMGNNWeights:
    """Learnable maps of both passes.

    Allocation matrices act on row vectors (``h @ M``); the transition
    matrix is shared by every parent/child pair at that level.
    """

    def __init__(self, store: ParameterStore, features: int, rng: np.random.Generator,
                 prefix: str = "gnn"):
        F = features
        self.features = F
        self.horizontal = []
        for m in range(3):
            w = store.add(f"{prefix}.horizontal.layer{m + 1}.weight", uniform_init(rng, (2 * F, F), 2 * F))
            b = store.add(f"{prefix}.horizontal.layer{m + 1}.bias", uniform_init(rng, (F,), 2 * F))
            self.horizontal.append((w, b))
        self.alloc_3to2 = store.add(f"{prefix}.hierarchical.alloc_3to2", uniform_init(rng, (F, F), F))
        self.alloc_2to1 = store.add(f"{prefix}.hierarchical.alloc_2to1", uniform_init(rng, (F, F), F))
        self.update_3to2 = (
            store.add(f"{prefix}.hierarchical.update_3to2.weight", uniform_init(rng, (2 * F, F), 2 * F)),
            store.add(f"{prefix}.hierarchical.update_3to2.bias", uniform_init(rng, (F,), 2 * F)),
        )
        self.update_2to1 = (
            store.add(f"{prefix}.hierarchical.update_2to1.weight", uniform_init(rng, (2 * F, F), 2 * F)),
            store.add(f"{prefix}.hierarchical.update_2to1.bias", uniform_init(rng, (F,), 2 * F)),
        )


def _update(own: Tensor, message: Tensor, affine) -> Tensor:
    w, b = affine
    return ag.relu(ag.linear(ag.concat([own, message], axis=1), w, b))


def horizontal_pass(features, ops: GraphOperators, weights: HMGNNWeights) -> list[Tensor]:
    """One simultaneous round per layer: ``h(v) = relu(affine([x(v) || agg_{u in N(v)} x(u)]))``.

    Every message reads the pre-update features only.
    """
    out = []
    for m, x in enumerate(features):
        x = ag.constant(x)
        if x.shape[0] != ops.aggregate[m].shape[0]:
            raise DimensionError(
                f"layer {m + 1}: {x.shape[0]} feature rows for {ops.aggregate[m].shape[0]} nodes")
        msg = ag.matmul(ag.Tensor(ops.aggregate[m]), x)
        out.append(_update(x, msg, weights.horizontal[m]))
    return out


def hierarchical_pass(features, ops: GraphOperators, weights: HMGNNWeights) -> list[Tensor]:
    """Top-down sweep: top -> middle, then middle (already updated) -> bottom.

    Top nodes keep their features.
    """
    h1, h2, h3 = (ag.constant(f) for f in features)
    msg2 = ag.matmul(ag.Tensor(ops.parent[1]), ag.matmul(h3, weights.alloc_3to2))
    h2_new = _update(h2, msg2, weights.update_3to2)
    msg1 = ag.matmul(ag.Tensor(ops.parent[0]), ag.matmul(h2_new, weights.alloc_2to1))
    h1_new = _update(h1, msg1, weights.update_2to1)
    return [h1_new, h2_new, h3]


def forward_graph(features, ops: GraphOperators, weights: HMGNNWeights) -> list[Tensor]:
    """Horizontal round followed by the hierarchical sweep, on encoder outputs."""
    return hierarchical_pass(horizontal_pass(features, ops, weights), ops, weights)
