"""Data preparation, block-diagonal batching, two-phase training and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from hierflow import autograd as ag
from hierflow.autograd import Adam, ParameterStore, Tape, clip_grad_norm
from hierflow.baselines import GruBaseline, HistoricalAverage, ProportionTable, reconcile
from hierflow.config import ModelConfig
from hierflow.errors import ConfigError, NumericAbort
from hierflow.heads import hierarchical_error, metrics, sql_loss
from hierflow.hierarchy import (MultiLayerGraph, Normalizer, SeriesTable, SplitPlan, build_bottom_graph,
                                build_hierarchy, daily_profile, kmeans, shape_profiles)
from hierflow.hmgnn import adjacency, block_diag
from hierflow.model import IPFModel

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# data

def build_graph(series: SeriesTable, cfg: ModelConfig, train_end: int) -> MultiLayerGraph:
    """Similarity graph + k-means hierarchy from training-span daily profiles."""
    profiles = daily_profile(series.values[:, :train_end], cfg.slots_per_day)
    edges = build_bottom_graph(profiles, series.node_ids, cfg.K)
    labels = kmeans(shape_profiles(profiles), cfg.k, seed=cfg.seed).labels
    return build_hierarchy(series, edges, labels, cfg.pred_layer)


@dataclass
class SampleSet:
    """Stacked windows of one split; ``X`` and ``Y`` are normalized."""

    X: np.ndarray  # [n, V_all, L]
    Y: np.ndarray  # [n, V_Pr, T]
    Y_raw: np.ndarray
    t_origin: np.ndarray

    def __len__(self) -> int:
        return len(self.t_origin)


@dataclass
class PreparedData:
    graph: MultiLayerGraph
    normalizer: Normalizer
    splits: SplitPlan
    sets: dict[str, SampleSet]
    values: np.ndarray  # raw, all_nodes order


def windows_for(values: np.ndarray, normed: np.ndarray, pred_rows, L: int, T: int,
                origins) -> SampleSet:
    origins = np.asarray(origins, dtype=int)
    V = values.shape[0]
    if len(origins) == 0:
        return SampleSet(np.zeros((0, V, L)), np.zeros((0, len(pred_rows), T)),
                         np.zeros((0, len(pred_rows), T)), origins)
    X = np.stack([normed[:, t - L:t] for t in origins])
    Y = np.stack([normed[pred_rows, t:t + T] for t in origins])
    Yr = np.stack([values[pred_rows, t:t + T] for t in origins])
    return SampleSet(X, Y, Yr, origins)


def split_origins(n_slots: int, L: int, T: int, bounds: tuple[int, int]) -> np.ndarray:
    """Window origins whose last target slot falls in ``bounds`` (see ``make_windows``)."""
    lo, hi = bounds
    return np.array([t for t in range(L, n_slots - T + 1) if lo <= t + T - 1 < hi], dtype=int)


def prepare(series: SeriesTable, cfg: ModelConfig, graph: MultiLayerGraph | None = None) -> PreparedData:
    splits = SplitPlan.from_days(series.n_slots, cfg.slots_per_day, cfg.val_days, cfg.test_days)
    if graph is None:
        graph = build_graph(series, cfg, splits.train_end)
    else:
        if tuple(graph.layers[0]) != tuple(series.node_ids):
            graph = graph.with_values(series.values[[series.node_ids.index(n) for n in graph.layers[0]]])
        else:
            graph = graph.with_values(series.values)
        graph = graph.with_prediction_layer(cfg.pred_layer)
    values = graph.values
    normalizer = Normalizer.fit(values[:, :splits.train_end])
    normed = normalizer.transform(values)
    pred_rows = [graph.index(n) for n in graph.prediction_layer_nodes]
    sets = {name: windows_for(values, normed, pred_rows, cfg.L, cfg.T,
                              split_origins(values.shape[1], cfg.L, cfg.T, splits.bounds(name)))
            for name in SPLITS}
    if len(sets["train"]) == 0:
        raise ConfigError("training split yields no windows; lower L/T or add days")
    return PreparedData(graph, normalizer, splits, sets, values)


# ---------------------------------------------------------------------------
# batching

@dataclass
class SampleBatch:
    """``B`` samples merged into one disconnected graph (block-diagonal adjacency)."""

    graph: MultiLayerGraph = field(repr=False)
    inputs: np.ndarray  # [B, V_all, L]
    targets: np.ndarray  # [B*V_Pr, T]
    index: np.ndarray  # positions in the source SampleSet

    @property
    def size(self) -> int:
        return len(self.index)

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, ...]:
        return tuple(block_diag(adjacency(self.graph, m), self.size) for m in range(3))

    def stacked_inputs(self) -> np.ndarray:
        """``[B*V_all, L]`` with sample-major rows."""
        B, V, L = self.inputs.shape
        return self.inputs.reshape(B * V, L)

    def unbatch(self, pred) -> np.ndarray:
        p = np.asarray(getattr(pred, "data", pred))
        return p.reshape(self.size, -1, p.shape[-1])


def batch_samples(samples: SampleSet, graph: MultiLayerGraph, B: int,
                  order: np.ndarray | None = None) -> list[SampleBatch]:
    if B < 1:
        raise ConfigError(f"batch size must be >= 1, got {B}")
    order = np.arange(len(samples)) if order is None else np.asarray(order)
    out = []
    for lo in range(0, len(order), B):
        idx = order[lo:lo + B]
        Y = samples.Y[idx]
        out.append(SampleBatch(graph, samples.X[idx], Y.reshape(-1, Y.shape[-1]), idx))
    return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainState:
    phase: str
    epoch: int = 0
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_val: float = float("inf")
    best_epoch: int = -1
    best: dict | None = None
    optimizer: dict | None = None
    params: dict | None = None

    def to_json(self) -> dict:
        arrays = {}
        for prefix, d in (("best.", self.best), ("opt.", self.optimizer), ("param.", self.params)):
            for k, v in (d or {}).items():
                arrays[prefix + k] = v
        return {
            "phase": self.phase, "epoch": self.epoch, "history": self.history,
            "best_val": None if self.best_epoch < 0 else self.best_val, "best_epoch": self.best_epoch,
            "arrays": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(arrays.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainState":
        arrays = {k: np.array(e["data"], dtype=np.float64).reshape(e["shape"])
                  for k, e in obj["arrays"].items()}
        pick = lambda p: {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)} or None
        return cls(obj["phase"], obj["epoch"], [tuple(h) for h in obj["history"]], float("inf") if obj["best_val"] is None else obj["best_val"],
                   obj["best_epoch"], pick("best."), pick("opt."), pick("param."))


def _param_norms(params: ParameterStore) -> str:
    return ", ".join(f"{k}={np.linalg.norm(t.data):.3g}" for k, t in params.items())


def fit_loop(params: ParameterStore, n_train: int, batch_loss: Callable[[np.ndarray], ag.Tensor],
             val_loss: Callable[[], float | None], cfg: ModelConfig, epochs: int, phase: str,
             state: TrainState | None = None, stop_after: int | None = None,
             on_epoch: Callable | None = None) -> TrainState:
    """Seeded-shuffle minibatch Adam with clipping and best-validation selection.

    Leaves ``params`` at the best snapshot once all ``epochs`` are done;
    ``stop_after`` interrupts early (for checkpoint/resume) without restoring.
    """
    opt = Adam(params, lr=cfg.lr)
    if state is None:
        state = TrainState(phase)
    else:
        if state.params:
            params.restore(state.params)
        if state.optimizer:
            opt.load_state(state.optimizer)
    tag = {"phase1": 1, "phase2": 2, "gru": 3}.get(phase, 0)
    while state.epoch < epochs:
        e = state.epoch
        rng = np.random.default_rng([cfg.seed, tag, e])
        order = rng.permutation(n_train)
        total, count = 0.0, 0
        for bi, lo in enumerate(range(0, n_train, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            with Tape() as tape:
                loss = batch_loss(idx)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericAbort(f"{phase}: non-finite loss at epoch {e}, batch {bi}; "
                                   f"parameter norms: {_param_norms(params)}")
            tape.backward(loss)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        train = total / max(count, 1)
        val = val_loss()
        score = train if val is None else val
        state.history.append((e, train, val))
        if score < state.best_val:
            state.best_val, state.best_epoch = score, e
            state.best = params.snapshot()
        state.epoch = e + 1
        log.info("%s epoch %d train %.6f val %s", phase, e, train, val)
        if on_epoch is not None:
            on_epoch(phase, e, train, val)
        if stop_after is not None and state.epoch >= stop_after and state.epoch < epochs:
            state.optimizer = opt.state()
            state.params = params.snapshot()
            return state
    if state.best is not None:
        params.restore(state.best)
    state.optimizer = opt.state()
    state.params = params.snapshot()
    return state


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield np.arange(lo, min(lo + size, n))


def _mean_loss(n: int, size: int, loss_fn: Callable[[np.ndarray], float]) -> float | None:
    if n == 0:
        return None
    total = 0.0
    for idx in _chunks(n, size):
        total += loss_fn(idx) * len(idx)
    return total / n


def train_phase1(model: IPFModel, data: PreparedData, state: TrainState | None = None,
                 stop_after: int | None = None, on_epoch=None) -> TrainState:
    """Fit encoders, GNN and GRU heads on initial forecasts (SQL on the normalized scale)."""
    cfg = model.cfg
    tr, va = data.sets["train"], data.sets["val"]

    def batch_loss(idx):
        return sql_loss(model.forward(tr.X[idx]), tr.Y[idx].reshape(-1, cfg.T), cfg.z)

    def val_loss():
        return _mean_loss(len(va), cfg.batch_size,
                          lambda idx: sql_loss(model.forward(va.X[idx]), va.Y[idx].reshape(-1, cfg.T),
                                               cfg.z).item())

    return fit_loop(model.base_params(), len(tr), batch_loss, val_loss, cfg, cfg.epochs, "phase1",
                    state, stop_after, on_epoch)


def initial_raw(model: IPFModel, samples: SampleSet) -> np.ndarray:
    """Frozen-base raw-scale initial forecasts, ``[n*V_Pr, T]``."""
    V, T = len(model.pred_nodes), model.cfg.T
    out = np.zeros((len(samples) * V, T))
    for idx in _chunks(len(samples), model.cfg.batch_size):
        out[idx[0] * V:(idx[-1] + 1) * V] = model.to_raw(model.forward(samples.X[idx])).data
    return out


def train_phase2(model: IPFModel, data: PreparedData, state: TrainState | None = None,
                 stop_after: int | None = None, on_epoch=None) -> TrainState | None:
    """Fit only the coordination head on frozen initial forecasts; ``None`` in TP mode."""
    cfg = model.cfg
    if cfg.mode != "hp":
        return None
    V, T = len(model.pred_nodes), cfg.T
    tr, va = data.sets["train"], data.sets["val"]
    init_tr, init_va = initial_raw(model, tr), initial_raw(model, va)

    def rows(idx):
        return (idx[:, None] * V + np.arange(V)[None, :]).reshape(-1)

    def loss_on(init, samples, idx):
        coord = model.coordinate_raw(init[rows(idx)])
        return sql_loss(model.to_normalized(coord), samples.Y[idx].reshape(-1, T), cfg.z)

    def val_loss():
        return _mean_loss(len(va), cfg.batch_size, lambda idx: loss_on(init_va, va, idx).item())

    return fit_loop(model.coord_params(), len(tr), lambda idx: loss_on(init_tr, tr, idx), val_loss,
                    cfg, cfg.phase2_epochs, "phase2", state, stop_after, on_epoch)


# ---------------------------------------------------------------------------
# evaluation

def predict_set(model: IPFModel, samples: SampleSet) -> tuple[np.ndarray, np.ndarray | None]:
    """Raw (initial, coordinated) forecasts ``[n, V_Pr, T]`` without recording."""
    V, T = len(model.pred_nodes), model.cfg.T
    init = np.zeros((len(samples), V, T))
    coord = np.zeros_like(init) if model.coord is not None else None
    for idx in _chunks(len(samples), model.cfg.batch_size):
        a, c = model.predict(samples.X[idx])
        init[idx] = a
        if coord is not None:
            coord[idx] = c
    return init, coord


def hierarchy_summary(pred: np.ndarray, graph: MultiLayerGraph, nodes) -> list[dict]:
    """Per parent and step: mean, mean |E|, max |E| over samples."""
    errs = hierarchical_error(pred, graph, nodes)  # parent -> [n, T]
    out = []
    for parent, e in errs.items():
        for step in range(e.shape[-1]):
            col = e[..., step]
            out.append({"parent": parent, "step": step, "mean": float(col.mean()),
                        "mean_abs": float(np.abs(col).mean()), "max_abs": float(np.abs(col).max())})
    return out


def report_for(name: str, pred: np.ndarray, actual: np.ndarray, graph: MultiLayerGraph, nodes,
               **extra) -> dict:
    m = metrics(pred, actual, nodes)
    rep = {"name": name, "aggregate": {"mae": m["mae"], "rmse": m["rmse"]}, "per_node": m["per_node"],
           "hierarchical_error": hierarchy_summary(pred, graph, nodes)}
    rep.update(extra)
    return rep


def evaluate(model: IPFModel, data: PreparedData, split: str = "test") -> tuple[dict, dict]:
    """Metrics report for the model's final forecasts plus the raw arrays behind it."""
    samples = data.sets[split]
    init, coord = predict_set(model, samples)
    final = coord if coord is not None else init
    nodes = model.pred_nodes
    rep = report_for("ipf", final, samples.Y_raw, data.graph, nodes, mode=model.cfg.mode, split=split,
                     n_samples=len(samples))
    return rep, {"initial": init, "coordinated": coord, "actual": samples.Y_raw, "t_origin": samples.t_origin}


def select_rows(graph: MultiLayerGraph, nodes) -> list[int]:
    return [graph.index(n) for n in nodes]


def ha_all_nodes(data: PreparedData, cfg: ModelConfig, samples: SampleSet) -> np.ndarray:
    """HA forecasts for every node: ``[n, V_all, T]``."""
    ha = HistoricalAverage(data.values[:, :data.splits.train_end], cfg.slots_per_day)
    return ha.predict(samples.t_origin, cfg.T)


def train_gru_baseline(data: PreparedData, cfg: ModelConfig, on_epoch=None) -> tuple[GruBaseline, TrainState]:
    """Shared plain GRU over every node's normalized window (all layers)."""
    gru = GruBaseline(cfg.gru_hidden, cfg.T, seed=cfg.seed)
    tr, va = data.sets["train"], data.sets["val"]
    normed = data.normalizer.transform(data.values)

    def targets(samples, idx):
        return np.stack([normed[:, t:t + cfg.T] for t in samples.t_origin[idx]]).reshape(-1, cfg.T)

    def loss(samples, idx):
        return sql_loss(gru.forward(samples.X[idx].reshape(-1, cfg.L)), targets(samples, idx), cfg.z)

    def val_loss():
        return _mean_loss(len(va), cfg.batch_size, lambda idx: loss(va, idx).item())

    state = fit_loop(gru.params, len(tr), lambda idx: loss(tr, idx), val_loss, cfg, cfg.epochs, "gru",
                     on_epoch=on_epoch)
    return gru, state


def gru_all_nodes(gru: GruBaseline, data: PreparedData, cfg: ModelConfig, samples: SampleSet) -> np.ndarray:
    V = len(data.graph.all_nodes)
    mean, std = data.normalizer.mean[None, :, None], data.normalizer.std[None, :, None]
    out = np.zeros((len(samples), V, cfg.T))
    for idx in _chunks(len(samples), cfg.batch_size):
        p = gru.forward(samples.X[idx].reshape(-1, cfg.L)).data
        out[idx] = p.reshape(len(idx), V, cfg.T) * std + mean
    return out


BASELINES = ("ha", "gru", "bu", "mo", "td")


def evaluate_baselines(data: PreparedData, cfg: ModelConfig, names, split: str = "test",
                       reconcile_base: str = "ha", gru: GruBaseline | None = None,
                       gru_state: TrainState | None = None) -> list[dict]:
    """Baseline reports on ``split``; BU/MO/TD reconcile ``reconcile_base`` forecasts."""
    unknown = [n for n in names if n not in BASELINES]
    if unknown:
        raise ConfigError(f"unknown baseline(s) {unknown}; choose from {list(BASELINES)}")
    samples = data.sets[split]
    graph = data.graph
    nodes = graph.prediction_layer_nodes
    rows = select_rows(graph, nodes)
    actual = samples.Y_raw
    reports = []
    cache: dict[str, np.ndarray] = {}

    def base(kind):
        nonlocal gru, gru_state
        if kind not in cache:
            if kind == "ha":
                cache[kind] = ha_all_nodes(data, cfg, samples)
            elif kind == "gru":
                if gru is None:
                    gru, gru_state = train_gru_baseline(data, cfg)
                cache[kind] = gru_all_nodes(gru, data, cfg, samples)
            else:
                raise ConfigError(f"unknown reconciliation base {kind!r}")
        return cache[kind]

    props = ProportionTable.fit(graph, data.values[:, :data.splits.train_end])
    for name in names:
        if name in ("ha", "gru"):
            pred = base(name)[:, rows]
            extra = {}
            if name == "gru":
                extra = {"n_params": gru.n_params, "best_epoch": gru_state.best_epoch if gru_state else None}
            reports.append(report_for(name, pred, actual, graph, nodes, **extra))
        else:
            b = base(reconcile_base)  # [n, V_all, T]
            full = np.stack([reconcile(name, s, graph, props) for s in b])
            reports.append(report_for(name, full[:, rows], actual, graph, nodes, base=reconcile_base))
    return reports


# ---------------------------------------------------------------------------
# end to end

@dataclass
class RunResult:
    model: IPFModel
    data: PreparedData
    phase1: TrainState
    phase2: TrainState | None
    report: dict
    arrays: dict


def run(series: SeriesTable, cfg: ModelConfig, graph: MultiLayerGraph | None = None,
        on_epoch=None) -> RunResult:
    data = prepare(series, cfg, graph)
    model = IPFModel(data.graph, cfg, data.normalizer)
    s1 = train_phase1(model, data, on_epoch=on_epoch)
    s2 = train_phase2(model, data, on_epoch=on_epoch)
    report, arrays = evaluate(model, data, "test")
    return RunResult(model, data, s1, s2, report, arrays)
