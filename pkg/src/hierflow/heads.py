"""GRU forecasting heads, learnable coordination, SQL loss and error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hierflow import autograd as ag
from hierflow.autograd import ParameterStore, Tensor, uniform_init
from hierflow.errors import ConfigError, ContractError, DimensionError
from hierflow.hierarchy import HierarchyMatrix, MultiLayerGraph
from hierflow.hmgnn import block_diag


class GruHead:
    """Single-layer GRU followed by an affine readout to ``T`` values.

    Gates use one bias vector each (``r``, ``z``, ``n`` packed in that order);
    the hidden update is ``h = (1 - z) * n + z * h``.
    """

    def __init__(self, store: ParameterStore, prefix: str, input_size: int, hidden: int,
                 horizon: int, rng: np.random.Generator):
        H = hidden
        self.input_size = input_size
        self.hidden = H
        self.horizon = horizon
        self.w_in = store.add(f"{prefix}.w_in", uniform_init(rng, (input_size, 3 * H), H))
        self.w_hid = store.add(f"{prefix}.w_hid", uniform_init(rng, (H, 3 * H), H))
        self.bias = store.add(f"{prefix}.bias", uniform_init(rng, (3 * H,), H))
        self.out_w = store.add(f"{prefix}.out.weight", uniform_init(rng, (H, horizon), H))
        self.out_b = store.add(f"{prefix}.out.bias", uniform_init(rng, (horizon,), H))

    @staticmethod
    def n_params(input_size: int, hidden: int, horizon: int) -> int:
        return 3 * (hidden * (input_size + hidden) + hidden) + hidden * horizon + horizon

    def run(self, steps: list) -> Tensor:
        """Consume ``[R, input_size]`` step tensors; return the final hidden state."""
        H = self.hidden
        R = ag.constant(steps[0]).shape[0]
        h = ag.Tensor(np.zeros((R, H)))
        for x in steps:
            gi = ag.linear(x, self.w_in, self.bias)
            gh = ag.matmul(h, self.w_hid)
            r = ag.sigmoid(gi[:, :H] + gh[:, :H])
            z = ag.sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
            n = ag.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
            h = n + z * (h - n)
        return h

    def __call__(self, steps: list) -> Tensor:
        return ag.linear(self.run(steps), self.out_w, self.out_b)


def gru_forecast(features, head: GruHead, n_steps: int) -> Tensor:
    """``[R, A*D]`` node features read as ``A`` steps of ``D`` values -> ``[R, T]``."""
    x = ag.constant(features)
    R, F = x.shape
    if F % n_steps or F // n_steps != head.input_size:
        raise DimensionError(f"features of width {F} cannot feed {n_steps} steps of {head.input_size}")
    seq = ag.reshape(x, (R, n_steps, head.input_size))
    return head([seq[:, t, :] for t in range(n_steps)])


class CoordinationHead:
    """Linear map from all flattened initial predictions to the bottom block.

    Initialised as the selector that copies each bottom node's own initial
    forecast, so an untrained head leaves bottom forecasts unchanged.

    With ``scale=(in_mean, in_std, out_mean, out_std)`` the weights act on
    standardized values: inputs are z-scored per prediction node and outputs
    mapped back per bottom node. The composite is still one affine map on the
    raw scale, but with weights of order one regardless of flow magnitudes.
    """

    def __init__(self, store: ParameterStore, prefix: str, hr: HierarchyMatrix, horizon: int,
                 scale=None):
        T = horizon
        n_pred, n_bottom = hr.matrix.shape
        self.hr = hr
        self.horizon = T
        if scale is None:
            scale = (np.zeros(n_pred), np.ones(n_pred), np.zeros(n_bottom), np.ones(n_bottom))
        self.scale = tuple(np.asarray(v, dtype=np.float64) for v in scale)
        if [len(v) for v in self.scale] != [n_pred, n_pred, n_bottom, n_bottom]:
            raise DimensionError("coordination scale vectors do not match the hierarchy matrix")
        W = np.zeros((n_pred * T, n_bottom * T))
        rows = {n: i for i, n in enumerate(hr.row_nodes)}
        for j, node in enumerate(hr.col_nodes):
            i = rows[node]
            W[i * T:(i + 1) * T, j * T:(j + 1) * T] = np.eye(T)
        self.weight = store.add(f"{prefix}.weight", W)
        self.bias = store.add(f"{prefix}.bias", np.zeros(n_bottom * T))

    def _tile(self, v: np.ndarray, B: int) -> Tensor:
        return ag.Tensor(np.repeat(np.tile(v, B)[:, None], self.horizon, axis=1))

    def bottom_block(self, initial) -> Tensor:
        """``[B*V_Pr, T]`` -> ``[B*V_1, T]``."""
        x = ag.constant(initial)
        n_pred, n_bottom = self.hr.matrix.shape
        T = self.horizon
        if x.shape[0] % n_pred or x.shape[1] != T:
            raise ContractError(f"initial predictions {list(x.shape)} do not match {n_pred} nodes x {T} steps")
        B = x.shape[0] // n_pred
        in_mean, in_std, out_mean, out_std = self.scale
        x = (x - self._tile(in_mean, B)) / self._tile(in_std, B)
        flat = ag.reshape(x, (B, n_pred * T))
        out = ag.reshape(ag.linear(flat, self.weight, self.bias), (B * n_bottom, T))
        return out * self._tile(out_std, B) + self._tile(out_mean, B)


@dataclass
class PredictionSet:
    nodes: tuple[str, ...]
    initial: np.ndarray
    coordinated: np.ndarray | None = None

    @property
    def final(self) -> np.ndarray:
        return self.initial if self.coordinated is None else self.coordinated


def coordinate(initial, hr: HierarchyMatrix, head: CoordinationHead, nodes=None) -> Tensor:
    """Coherent forecasts ``H^r @ bottom_block`` for a stack of samples."""
    if nodes is not None and tuple(nodes) != tuple(hr.row_nodes):
        raise ContractError("prediction rows and hierarchy matrix rows are in different orders")
    if head.hr.row_nodes != hr.row_nodes or head.hr.col_nodes != hr.col_nodes:
        raise ContractError("coordination head was built for a different hierarchy matrix")
    bottom = head.bottom_block(initial)
    B = bottom.shape[0] // hr.matrix.shape[1]
    return ag.matmul(ag.Tensor(block_diag(hr.matrix, B)), bottom)


def coordinate_set(pred: PredictionSet, hr: HierarchyMatrix, head: CoordinationHead) -> PredictionSet:
    out = coordinate(pred.initial, hr, head, nodes=pred.nodes)
    return PredictionSet(pred.nodes, pred.initial, out.data.copy())


def sql_loss(pred, actual, z: float = 0.5) -> Tensor:
    """Smooth quadratic loss averaged over rows (nodes x samples).

    Per row: ``(1/T) * sum_{i=1}^{T-1} e_i^2 / (e_i^2 + z)`` with zero-based
    step ``i``; step 0 carries no penalty.
    """
    if not 0.0 < z < 1.0:
        raise ConfigError(f"z must lie in (0, 1), got {z}")
    pred = ag.constant(pred)
    actual = np.asarray(getattr(actual, "data", actual), dtype=np.float64)
    if pred.shape != actual.shape or pred.ndim != 2:
        raise DimensionError(f"prediction {list(pred.shape)} vs actual {list(actual.shape)}")
    R, T = pred.shape
    e2 = ag.square(pred - ag.Tensor(actual))
    ratio = e2 / (e2 + z)
    if T < 2:
        return ag.mul(ag.sum_(ratio), 0.0)
    return ag.sum_(ratio[:, 1:]) / float(R * T)


def metrics(pred, actual, nodes=None) -> dict:
    """Per-node MAE/RMSE over every sample and step, plus node averages.

    Arrays are ``[V, n]`` or ``[samples, V, T]``; node is axis ``-2`` or ``0``.
    """
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise DimensionError(f"prediction {p.shape} vs actual {a.shape}")
    if p.ndim == 3:
        err = np.transpose(p - a, (1, 0, 2)).reshape(p.shape[1], -1)
    else:
        err = (p - a).reshape(p.shape[0], -1)
    mae = np.abs(err).mean(axis=1)
    rmse = np.sqrt((err ** 2).mean(axis=1))
    names = list(nodes) if nodes is not None else list(range(len(mae)))
    return {
        "mae": float(mae.mean()),
        "rmse": float(rmse.mean()),
        "per_node": [{"node": n, "mae": float(m), "rmse": float(r)} for n, m, r in zip(names, mae, rmse)],
    }


def hierarchical_error(pred, graph: MultiLayerGraph, nodes=None) -> dict[str, np.ndarray]:
    """Signed ``sum(children) - parent`` for every parent whose children are all predicted.

    ``pred`` rows follow ``nodes`` (default: the graph's prediction layer);
    trailing axes (steps, samples) are kept.
    """
    nodes = tuple(graph.prediction_layer_nodes if nodes is None else nodes)
    p = np.asarray(pred, dtype=np.float64)
    axis = 0 if p.ndim <= 2 else 1
    if p.shape[axis] != len(nodes):
        raise DimensionError(f"{p.shape[axis]} prediction rows for {len(nodes)} nodes")
    pos = {n: i for i, n in enumerate(nodes)}
    out = {}
    for parent in nodes:
        if graph.layer_of(parent) == 0:
            continue
        kids = graph.children(parent)
        if not kids or any(k not in pos for k in kids):
            continue
        take = lambda i: np.take(p, i, axis=axis)
        out[parent] = sum(take(pos[k]) for k in kids) - take(pos[parent])
    return out
