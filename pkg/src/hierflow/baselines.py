"""Reference forecasters and classical reconciliation.

All reconciliation functions return forecasts for every node of the graph in
``graph.all_nodes`` order, coherent by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from hierflow import autograd as ag
from hierflow.autograd import ParameterStore, Tensor
from hierflow.heads import GruHead, PredictionSet
from hierflow.hierarchy import MultiLayerGraph, daily_profile


def ha_forecast(profile: np.ndarray, t_origin: int, T: int) -> np.ndarray:
    """Profile values for slots ``t_origin .. t_origin+T-1`` (slot 0 is slot-of-day 0).

    ``profile`` may be one vector or a ``[nodes x slots_per_day]`` matrix.
    """
    profile = np.asarray(profile, dtype=np.float64)
    spd = profile.shape[-1]
    idx = (t_origin + np.arange(T)) % spd
    return profile[..., idx]


class HistoricalAverage:
    def __init__(self, train_values: np.ndarray, slots_per_day: int):
        self.profile = daily_profile(train_values, slots_per_day)

    def predict(self, t_origins, T: int, rows=None) -> np.ndarray:
        """``[samples, nodes, T]`` forecasts."""
        prof = self.profile if rows is None else self.profile[rows]
        return np.stack([ha_forecast(prof, int(t), T) for t in t_origins])


@dataclass(frozen=True)
class ProportionTable:
    """Static share of each child in its parent's training-span total."""

    shares: dict[str, float]

    @classmethod
    def fit(cls, graph: MultiLayerGraph, train_values: np.ndarray) -> "ProportionTable":
        """``train_values`` rows follow ``graph.all_nodes``."""
        totals = {n: float(v) for n, v in zip(graph.all_nodes, np.asarray(train_values).sum(axis=1))}
        shares = {}
        for m in (1, 2):
            for parent in graph.layers[m]:
                kids = graph.children(parent)
                if not kids:
                    continue
                denom = sum(totals[c] for c in kids)
                if denom <= 0:
                    warnings.warn(f"parent {parent!r} has zero training flow; using uniform shares",
                                  RuntimeWarning, stacklevel=2)
                    for c in kids:
                        shares[c] = 1.0 / len(kids)
                else:
                    for c in kids:
                        shares[c] = totals[c] / denom
        return cls(shares)


def _assemble(graph: MultiLayerGraph, rows: dict[str, np.ndarray]) -> PredictionSet:
    return PredictionSet(graph.all_nodes, np.stack([rows[n] for n in graph.all_nodes]))


def _sum_up(graph: MultiLayerGraph, rows: dict[str, np.ndarray], from_layer: int) -> None:
    for m in range(from_layer + 1, 3):
        for p in graph.layers[m]:
            rows[p] = sum(rows[c] for c in graph.children(p))


def bottom_up(bottom_preds, graph: MultiLayerGraph) -> PredictionSet:
    """``bottom_preds`` rows follow ``graph.layers[0]``; trailing axes are kept."""
    b = np.asarray(bottom_preds, dtype=np.float64)
    rows = {n: b[i] for i, n in enumerate(graph.layers[0])}
    _sum_up(graph, rows, 0)
    return _assemble(graph, rows)


def middle_out(middle_preds, proportions: ProportionTable, graph: MultiLayerGraph) -> PredictionSet:
    mid = np.asarray(middle_preds, dtype=np.float64)
    rows = {n: mid[i] for i, n in enumerate(graph.layers[1])}
    for c in graph.layers[0]:
        rows[c] = proportions.shares[c] * rows[graph.parent_of[c]]
    _sum_up(graph, rows, 1)
    return _assemble(graph, rows)


def top_down(top_pred, proportions: ProportionTable, graph: MultiLayerGraph) -> PredictionSet:
    top = np.asarray(top_pred, dtype=np.float64)
    if len(graph.layers[2]) == 1 and (top.ndim == 0 or top.shape[0] != 1):
        top = top[None]  # a bare series for the single root
    rows = {n: top[i] for i, n in enumerate(graph.layers[2])}
    for m in (1, 0):
        for c in graph.layers[m]:
            rows[c] = proportions.shares[c] * rows[graph.parent_of[c]]
    return _assemble(graph, rows)


def reconcile(method: str, base_all: np.ndarray, graph: MultiLayerGraph,
              proportions: ProportionTable) -> np.ndarray:
    """Apply BU/MO/TD to base forecasts for every node (``[V_all, ...]``, all_nodes order)."""
    b = np.asarray(base_all)
    n1, n2 = len(graph.layers[0]), len(graph.layers[1])
    if method == "bu":
        return bottom_up(b[:n1], graph).initial
    if method == "mo":
        return middle_out(b[n1:n1 + n2], proportions, graph).initial
    if method == "td":
        return top_down(b[n1 + n2:], proportions, graph).initial
    raise ValueError(f"unknown reconciliation method {method!r}")


class GruBaseline:
    """One GRU shared by all nodes, reading each node's raw window one slot per step."""

    def __init__(self, hidden: int, horizon: int, seed: int = 0):
        self.params = ParameterStore()
        rng = np.random.default_rng(seed)
        self.head = GruHead(self.params, "gru", 1, hidden, horizon, rng)
        self.hidden = hidden
        self.horizon = horizon

    @property
    def n_params(self) -> int:
        return self.params.n_values()

    def forward(self, windows) -> Tensor:
        """``[R, L]`` normalized windows -> ``[R, T]`` normalized forecasts."""
        x = np.asarray(windows, dtype=np.float64)
        return self.head([ag.Tensor(x[:, t:t + 1]) for t in range(x.shape[1])])
