"""The full forecaster: per-layer patch encoders, HMGNN, grouped GRU heads, coordination."""

from __future__ import annotations

import numpy as np

from hierflow import autograd as ag
from hierflow.autograd import ParameterStore, Tensor
from hierflow.config import ModelConfig
from hierflow.errors import ConfigError, ContractError
from hierflow.heads import CoordinationHead, GruHead, coordinate, gru_forecast
from hierflow.hierarchy import HierarchyMatrix, MultiLayerGraph, Normalizer, build_hr
from hierflow.hmgnn import GraphOperators, HMGNNWeights, forward_graph, graph_operators
from hierflow.patch import PatchEncoder

# parameter groups, matching the training phases
PATCH, GNN, GRU, COORD = "patch", "gnn", "heads", "coord"


def head_group(graph: MultiLayerGraph, node: str) -> str:
    """Bottom nodes share a head per cluster; middle and top nodes one head per layer."""
    m = graph.layer_of(node)
    if m == 0:
        return f"cluster.{graph.cluster_of(node)}"
    return f"layer{m + 1}"


class IPFModel:
    """Forecaster over a fixed multi-layer graph.

    ``forward`` maps normalized input windows for every node of ``B`` samples
    (``[B, V_all, L]``) to normalized initial forecasts ``[B*V_Pr, T]``.
    """

    def __init__(self, graph: MultiLayerGraph, cfg: ModelConfig, normalizer: Normalizer | None = None):
        self.graph = graph
        self.cfg = cfg
        self.normalizer = normalizer
        self.params = ParameterStore()
        rng = np.random.default_rng(cfg.seed)
        pc = cfg.patch()
        pc.validate(cfg.L)
        F = pc.features()
        self.encoders = [PatchEncoder(self.params, f"{PATCH}.layer{m + 1}", pc, cfg.L, rng)
                         for m in range(3)]
        self.gnn = HMGNNWeights(self.params, F, rng, prefix=GNN)
        self.pred_nodes = tuple(graph.prediction_layer_nodes)
        groups: dict[str, list[int]] = {}
        for i, node in enumerate(self.pred_nodes):
            groups.setdefault(head_group(graph, node), []).append(i)
        self.groups = dict(sorted(groups.items()))
        self.heads = {g: GruHead(self.params, f"{GRU}.{g}", pc.D, F, cfg.T, rng) for g in self.groups}
        self.hr: HierarchyMatrix | None = None
        self.coord: CoordinationHead | None = None
        if cfg.mode == "hp":
            self.hr = build_hr(graph)
            scale = None
            if normalizer is not None:
                pr = [graph.index(n) for n in self.hr.row_nodes]
                bt = [graph.index(n) for n in self.hr.col_nodes]
                scale = (normalizer.mean[pr], normalizer.std[pr], normalizer.mean[bt], normalizer.std[bt])
            self.coord = CoordinationHead(self.params, COORD, self.hr, cfg.T, scale)
        self._ops: dict[int, GraphOperators] = {}
        self._gather: dict[int, tuple[list[np.ndarray], np.ndarray]] = {}
        sizes = [len(l) for l in graph.layers]
        self._layer_offsets = np.cumsum([0] + sizes)

    # -- structure caches -------------------------------------------------
    def operators(self, B: int) -> GraphOperators:
        if B not in self._ops:
            self._ops[B] = graph_operators(self.graph, self.cfg.aggregator, B)
        return self._ops[B]

    def _gather_plan(self, B: int):
        if B in self._gather:
            return self._gather[B]
        sizes = [len(l) for l in self.graph.layers]
        row_off = np.cumsum([0] + [B * s for s in sizes])
        where = {}
        for m, layer in enumerate(self.graph.layers):
            for p, node in enumerate(layer):
                where[node] = (m, p)
        V = len(self.pred_nodes)
        group_rows, order = [], []
        for idx in self.groups.values():
            rows = []
            for b in range(B):
                for i in idx:
                    m, p = where[self.pred_nodes[i]]
                    rows.append(row_off[m] + b * sizes[m] + p)
                    order.append(b * V + i)
            group_rows.append(np.array(rows))
        # position in concatenated group outputs -> sample-major prediction row
        perm = np.empty(len(order), dtype=np.intp)
        perm[np.array(order)] = np.arange(len(order))
        self._gather[B] = (group_rows, perm)
        return self._gather[B]

    # -- forward ----------------------------------------------------------
    def layer_inputs(self, X: np.ndarray) -> list[np.ndarray]:
        """``[B, V_all, L]`` -> one ``[B*V_m, L]`` block per layer (sample-major rows)."""
        B = X.shape[0]
        off = self._layer_offsets
        return [X[:, off[m]:off[m + 1], :].reshape(B * (off[m + 1] - off[m]), X.shape[2])
                for m in range(3)]

    def encode(self, X: np.ndarray) -> list[Tensor]:
        return [enc(x) for enc, x in zip(self.encoders, self.layer_inputs(X))]

    def node_features(self, X: np.ndarray) -> list[Tensor]:
        return forward_graph(self.encode(X), self.operators(X.shape[0]), self.gnn)

    def forward(self, X: np.ndarray) -> Tensor:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        B = X.shape[0]
        if X.shape[1] != len(self.graph.all_nodes) or X.shape[2] != self.cfg.L:
            raise ContractError(f"inputs {list(X.shape)} do not match [B, {len(self.graph.all_nodes)}, {self.cfg.L}]")
        h = self.node_features(X)
        stacked = ag.concat(h, axis=0)
        group_rows, perm = self._gather_plan(B)
        A = self.cfg.A
        outs = [gru_forecast(ag.take_rows(stacked, rows), self.heads[g], A)
                for g, rows in zip(self.groups, group_rows)]
        return ag.take_rows(ag.concat(outs, axis=0), perm)

    # -- coordination -----------------------------------------------------
    def _tiled_stats(self, B: int) -> tuple[np.ndarray, np.ndarray]:
        if self.normalizer is None:
            raise ContractError("model has no normalizer; cannot move between scales")
        idx = [self.graph.index(n) for n in self.pred_nodes]
        mean = np.tile(self.normalizer.mean[idx], B)[:, None] * np.ones((1, self.cfg.T))
        std = np.tile(self.normalizer.std[idx], B)[:, None] * np.ones((1, self.cfg.T))
        return mean, std

    def to_raw(self, pred) -> Tensor:
        x = ag.constant(pred)
        mean, std = self._tiled_stats(x.shape[0] // len(self.pred_nodes))
        return x * ag.Tensor(std) + ag.Tensor(mean)

    def to_normalized(self, pred) -> Tensor:
        x = ag.constant(pred)
        mean, std = self._tiled_stats(x.shape[0] // len(self.pred_nodes))
        return (x - ag.Tensor(mean)) / ag.Tensor(std)

    def coordinate_raw(self, initial_raw) -> Tensor:
        """Raw-scale initial forecasts ``[B*V_Pr, T]`` -> coherent raw forecasts."""
        if self.coord is None:
            raise ConfigError("coordination requires mode 'hp'")
        return coordinate(initial_raw, self.hr, self.coord)

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Raw-scale (initial, coordinated) forecasts shaped ``[B, V_Pr, T]``; no tape."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        B, V, T = X.shape[0], len(self.pred_nodes), self.cfg.T
        raw = self.to_raw(self.forward(X))
        coord = None
        if self.coord is not None:
            coord = self.coordinate_raw(raw).data.reshape(B, V, T)
        return raw.data.reshape(B, V, T), coord

    def base_params(self) -> ParameterStore:
        return self.params.subset((PATCH + ".", GNN + ".", GRU + "."))

    def coord_params(self) -> ParameterStore:
        return self.params.subset((COORD + ".",))
