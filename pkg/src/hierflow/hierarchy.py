"""Series ingestion, three-layer hierarchy construction, and sliding windows."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hierflow.errors import ConfigError, ContractError, DataError, GraphError

MIDDLE_PREFIX = "cluster_"
TOP_NODE = "total"
PREDICTION_MODES = ("bottom", "bottom+top", "bottom+middle", "all")


@dataclass(frozen=True)
class SeriesTable:
    """Per-node count series on a uniform slot grid.

    ``values`` is ``[nodes x slots]``; slot ``j`` is timestamp ``start + j``.
    """

    node_ids: tuple[str, ...]
    values: np.ndarray
    granularity_minutes: int = 15
    start: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.node_ids):
            raise DataError(f"values shape {v.shape} does not match {len(self.node_ids)} nodes")
        if len(set(self.node_ids)) != len(self.node_ids):
            raise DataError("duplicate node ids")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise DataError("values must be finite and non-negative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))

    @property
    def n_slots(self) -> int:
        return self.values.shape[1]

    @property
    def timestamps(self) -> range:
        return range(self.start, self.start + self.n_slots)

    def row(self, node: str) -> np.ndarray:
        return self.values[self.node_ids.index(node)]

    def to_csv(self) -> str:
        lines = ["node_id," + ",".join(f"slot_{j}" for j in range(self.n_slots))]
        for nid, row in zip(self.node_ids, self.values):
            lines.append(nid + "," + ",".join(_num(v) for v in row))
        return "\n".join(lines) + "\n"


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _parse_value(text: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse value {text!r}") from None
    if not np.isfinite(v):
        raise DataError(f"{where}: non-finite value {text!r}")
    if v < 0:
        raise DataError(f"{where}: negative value {text!r}")
    return v


def load_csv(path, long_format: bool = False, granularity_minutes: int = 15) -> SeriesTable:
    """Read a wide (``node_id,slot_0,...``) or long (``node_id,timestamp,value``) CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if long_format:
        return _load_long(header, body, granularity_minutes)
    if not header or header[0] != "node_id":
        raise DataError("row 1: header must start with 'node_id'")
    n = len(header) - 1
    if n < 1:
        raise DataError("row 1: no slot columns")
    ids, values, seen = [], [], set()
    for i, row in enumerate(body, start=2):
        if not row:
            continue
        if len(row) != n + 1:
            raise DataError(f"row {i}: expected {n + 1} fields, got {len(row)}")
        nid = row[0]
        if nid in seen:
            raise DataError(f"row {i}: duplicate node_id {nid!r}")
        seen.add(nid)
        ids.append(nid)
        values.append([_parse_value(x, f"row {i}") for x in row[1:]])
    if not ids:
        raise DataError("no data rows")
    return SeriesTable(tuple(ids), np.array(values), granularity_minutes)


def _load_long(header, body, granularity_minutes) -> SeriesTable:
    if [h.strip() for h in header[:3]] != ["node_id", "timestamp", "value"]:
        raise DataError("row 1: long format header must be node_id,timestamp,value")
    per_node: dict[str, dict[int, float]] = {}
    for i, row in enumerate(body, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise DataError(f"row {i}: expected 3 fields, got {len(row)}")
        nid, ts, val = row
        try:
            t = int(ts)
        except ValueError:
            raise DataError(f"row {i}: timestamp {ts!r} is not an integer slot index") from None
        slots = per_node.setdefault(nid, {})
        if t in slots:
            raise DataError(f"row {i}: duplicate entry for node {nid!r} slot {t}")
        slots[t] = _parse_value(val, f"row {i}")
    if not per_node:
        raise DataError("no data rows")
    lo = min(min(s) for s in per_node.values())
    hi = max(max(s) for s in per_node.values())
    ids = list(per_node)
    values = np.zeros((len(ids), hi - lo + 1))
    for r, nid in enumerate(ids):
        slots = per_node[nid]
        for t in range(lo, hi + 1):
            if t not in slots:
                raise DataError(f"node {nid!r} is missing slot {t}")
            values[r, t - lo] = slots[t]
    return SeriesTable(tuple(ids), values, granularity_minutes, start=lo)


# ---------------------------------------------------------------------------
# similarity graph

def daily_profile(series: np.ndarray, slots_per_day: int) -> np.ndarray:
    """Mean value at each slot-of-day; works on one series or a ``[nodes x slots]`` matrix."""
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[-1]
    if n < slots_per_day:
        raise ContractError(f"span of {n} slots is shorter than one day ({slots_per_day} slots)")
    pad = (-n) % slots_per_day
    if pad:
        filled = np.concatenate([x, np.full(x.shape[:-1] + (pad,), np.nan)], axis=-1)
    else:
        filled = x
    days = filled.reshape(x.shape[:-1] + (-1, slots_per_day))
    return np.nanmean(days, axis=-2)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ContractError(f"pearson needs equal-length vectors of length >= 2, got {a.shape}, {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0.0 or sb == 0.0:
        warnings.warn("zero-variance series in pearson(); similarity set to 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def shape_profiles(profiles: np.ndarray) -> np.ndarray:
    """Z-score each row so clustering sees the shape of a day, not the station size.

    Euclidean distance between rows is then a monotone function of their Pearson
    similarity. Flat rows become all zeros.
    """
    p = np.asarray(profiles, dtype=np.float64)
    centred = p - p.mean(axis=-1, keepdims=True)
    std = centred.std(axis=-1, keepdims=True)
    return np.divide(centred, std, out=np.zeros_like(centred), where=std > 0)


def similarity_matrix(profiles: np.ndarray) -> np.ndarray:
    p = np.asarray(profiles, dtype=np.float64)
    n = p.shape[0]
    s = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            s[i, j] = s[j, i] = pearson(p[i], p[j])
    return s


def top_k_edges(similarity: np.ndarray, node_ids: Sequence[str], K: int) -> set[tuple[str, str]]:
    """Each node links to its ``K`` most similar peers; the union of picks is returned.

    Ties are broken by node id so the result does not depend on row order.
    Edges are ``(u, v)`` with ``u < v``.
    """
    n = len(node_ids)
    if K <= 0 or K >= n:
        raise ConfigError(f"K must satisfy 0 < K < {n}, got {K}")
    edges = set()
    for i, u in enumerate(node_ids):
        others = sorted((j for j in range(n) if j != i),
                        key=lambda j: (-similarity[i, j], node_ids[j]))
        for j in others[:K]:
            v = node_ids[j]
            edges.add((u, v) if u < v else (v, u))
    return edges


def build_bottom_graph(profiles: np.ndarray, node_ids: Sequence[str], K: int) -> set[tuple[str, str]]:
    if K <= 0 or K >= len(node_ids):
        raise ConfigError(f"K must satisfy 0 < K < {len(node_ids)}, got {K}")
    return top_k_edges(similarity_matrix(profiles), node_ids, K)


# ---------------------------------------------------------------------------
# clustering

@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dist(X, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total == 0.0:
            idx = int(np.argmax(d2))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
    return np.array(centers, dtype=np.float64)


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments no longer change. An empty cluster is re-seeded at
    the point farthest from its current centroid. Labels are renumbered by
    first appearance so equal partitions always get equal label vectors.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must satisfy 1 <= k <= {n}, got {k}")
    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(X, k, rng)
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dist(X, C)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        taken: set[int] = set()
        for j in range(k):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(axis=0)
        own = d2[np.arange(n), labels]
        for j in range(k):
            if not (labels == j).any():
                order = sorted(range(n), key=lambda i: (-own[i], i))
                pick = next(i for i in order if i not in taken)
                taken.add(pick)
                C[j] = X[pick]
    d2 = _sq_dist(X, C)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    # renumber by first appearance
    order = list(dict.fromkeys(labels.tolist()))
    order += [j for j in range(k) if j not in order]
    remap = {old: new for new, old in enumerate(order)}
    labels = np.array([remap[l] for l in labels], dtype=int)
    return KMeansResult(labels, C[order], inertia, it)


# ---------------------------------------------------------------------------
# multi-layer graph

def _edge(u: str, v: str) -> tuple[str, str]:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class MultiLayerGraph:
    """Bottom / middle / top node layers with intra-layer edges and parent links.

    ``values`` holds the series of every node in ``all_nodes`` order
    (bottom, then middle, then top); it may be ``None`` for a bare structure.
    """

    layers: tuple[tuple[str, ...], ...]
    intra_edges: tuple[frozenset, ...]
    parent_of: Mapping[str, str]
    prediction_layer_nodes: tuple[str, ...]
    values: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.layers) != 3:
            raise GraphError(f"expected 3 layers, got {len(self.layers)}")
        if not self.layers[2]:
            raise GraphError("top layer is empty")
        known = set(self.all_nodes)
        if len(known) != len(self.all_nodes):
            raise GraphError("node ids must be unique across layers")
        for m, edges in enumerate(self.intra_edges):
            members = set(self.layers[m])
            for u, v in edges:
                if u == v:
                    raise GraphError(f"self-loop on {u!r}")
                if u not in members or v not in members:
                    raise GraphError(f"edge {u}-{v} leaves layer {m + 1}")
        for m in (0, 1):
            upper = set(self.layers[m + 1])
            for node in self.layers[m]:
                p = self.parent_of.get(node)
                if p is None:
                    raise GraphError(f"node {node!r} has no parent")
                if p not in upper:
                    raise GraphError(f"parent {p!r} of {node!r} is not in layer {m + 2}")
        for node in self.layers[2]:
            if node in self.parent_of:
                raise GraphError(f"top node {node!r} must not have a parent")
        for node in self.prediction_layer_nodes:
            if node not in known:
                raise GraphError(f"prediction node {node!r} is not in the graph")

    @property
    def all_nodes(self) -> tuple[str, ...]:
        return self.layers[0] + self.layers[1] + self.layers[2]

    @property
    def bottom(self) -> tuple[str, ...]:
        return self.layers[0]

    def index(self, node: str) -> int:
        return self.all_nodes.index(node)

    def layer_of(self, node: str) -> int:
        for m, layer in enumerate(self.layers):
            if node in layer:
                return m
        raise GraphError(f"unknown node {node!r}")

    def children(self, node: str) -> list[str]:
        m = self.layer_of(node)
        if m == 0:
            return []
        return [c for c in self.layers[m - 1] if self.parent_of[c] == node]

    def neighbors(self, node: str) -> list[str]:
        m = self.layer_of(node)
        out = [v if u == node else u for u, v in self.intra_edges[m] if node in (u, v)]
        return sorted(out, key=self.layers[m].index)

    def bottom_descendants(self, node: str) -> list[str]:
        if self.layer_of(node) == 0:
            return [node]
        out = []
        for c in self.children(node):
            out.extend(self.bottom_descendants(c))
        return sorted(out, key=self.layers[0].index)

    def cluster_of(self, bottom_node: str) -> str:
        return self.parent_of[bottom_node]

    def parents_in_prediction(self) -> list[str]:
        """Non-bottom prediction nodes whose children are all in the prediction layer."""
        pred = set(self.prediction_layer_nodes)
        return [v for v in self.prediction_layer_nodes
                if self.layer_of(v) > 0 and all(c in pred for c in self.children(v))]

    def series(self, node: str) -> np.ndarray:
        if self.values is None:
            raise ContractError("graph carries no series")
        return self.values[self.index(node)]

    def check_sums(self) -> None:
        """Raise if any parent series differs from the sum of its children."""
        if self.values is None:
            return
        for m in (1, 2):
            for p in self.layers[m]:
                kids = self.children(p)
                total = sum(self.series(c) for c in kids)
                if not np.array_equal(total, self.series(p)):
                    raise GraphError(f"series of {p!r} is not the sum of its children")

    def with_prediction_layer(self, mode_or_nodes) -> "MultiLayerGraph":
        nodes = prediction_nodes(self.layers, mode_or_nodes)
        return MultiLayerGraph(self.layers, self.intra_edges, dict(self.parent_of), nodes, self.values)

    def with_values(self, bottom_values: np.ndarray) -> "MultiLayerGraph":
        return MultiLayerGraph(self.layers, self.intra_edges, dict(self.parent_of),
                               self.prediction_layer_nodes, aggregate_values(self, bottom_values))

    def to_json(self) -> dict:
        return {
            "layers": [list(l) for l in self.layers],
            "edges": [sorted([list(e) for e in edges]) for edges in self.intra_edges],
            "parents": dict(sorted(self.parent_of.items())),
            "prediction_layer": list(self.prediction_layer_nodes),
        }

    @classmethod
    def from_json(cls, obj: dict, bottom_values: np.ndarray | None = None) -> "MultiLayerGraph":
        g = cls(
            tuple(tuple(l) for l in obj["layers"]),
            tuple(frozenset(_edge(*e) for e in edges) for edges in obj["edges"]),
            dict(obj["parents"]),
            tuple(obj["prediction_layer"]),
        )
        return g if bottom_values is None else g.with_values(bottom_values)


def prediction_nodes(layers, mode_or_nodes) -> tuple[str, ...]:
    if not isinstance(mode_or_nodes, str):
        return tuple(mode_or_nodes)
    mode = mode_or_nodes
    if mode == "bottom":
        return tuple(layers[0])
    if mode == "bottom+top":
        return tuple(layers[0]) + tuple(layers[2])
    if mode == "bottom+middle":
        return tuple(layers[0]) + tuple(layers[1])
    if mode == "all":
        return tuple(layers[0]) + tuple(layers[1]) + tuple(layers[2])
    raise ConfigError(f"unknown prediction layer mode {mode!r}; choose from {PREDICTION_MODES}")


def aggregate_values(graph: MultiLayerGraph, bottom_values: np.ndarray) -> np.ndarray:
    """Stack bottom series with exact child sums for middle and top nodes."""
    bottom_values = np.asarray(bottom_values, dtype=np.float64)
    if bottom_values.shape[0] != len(graph.layers[0]):
        raise DataError(f"{bottom_values.shape[0]} bottom series for {len(graph.layers[0])} nodes")
    rows = {n: bottom_values[i] for i, n in enumerate(graph.layers[0])}
    for m in (1, 2):
        for p in graph.layers[m]:
            kids = [c for c in graph.layers[m - 1] if graph.parent_of[c] == p]
            rows[p] = np.sum([rows[c] for c in kids], axis=0) if kids else np.zeros(bottom_values.shape[1])
    return np.array([rows[n] for n in graph.all_nodes])


def build_hierarchy(series: SeriesTable, bottom_edges, assignment,
                    prediction_layer="bottom") -> MultiLayerGraph:
    """Group bottom nodes into cluster parents under a single aggregate root.

    ``assignment`` is a label per bottom node (same order as ``series.node_ids``)
    or a mapping node -> label. Empty labels produce no middle node.
    """
    ids = list(series.node_ids)
    if isinstance(assignment, Mapping):
        missing = [n for n in ids if n not in assignment]
        if missing:
            raise ContractError(f"assignment misses bottom nodes {missing}")
        labels = [assignment[n] for n in ids]
    else:
        labels = list(assignment)
        if len(labels) != len(ids):
            raise ContractError(f"{len(labels)} labels for {len(ids)} bottom nodes")
    order = list(dict.fromkeys(labels))
    middle = tuple(f"{MIDDLE_PREFIX}{i}" for i in range(len(order)))
    name = {lab: middle[i] for i, lab in enumerate(order)}
    parent_of = {n: name[l] for n, l in zip(ids, labels)}
    parent_of.update({c: TOP_NODE for c in middle})
    edges0 = frozenset(_edge(u, v) for u, v in bottom_edges)
    edges1 = frozenset(_edge(middle[i], middle[j])
                       for i in range(len(middle)) for j in range(i + 1, len(middle)))
    layers = (tuple(ids), middle, (TOP_NODE,))
    g = MultiLayerGraph(layers, (edges0, edges1, frozenset()), parent_of,
                        prediction_nodes(layers, prediction_layer))
    return g.with_values(series.values)


# ---------------------------------------------------------------------------
# hierarchy matrix

@dataclass(frozen=True)
class HierarchyMatrix:
    matrix: np.ndarray
    row_nodes: tuple[str, ...]
    col_nodes: tuple[str, ...]

    def to_csv(self) -> str:
        lines = ["node_id," + ",".join(self.col_nodes)]
        for nid, row in zip(self.row_nodes, self.matrix):
            lines.append(nid + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def build_hr(graph: MultiLayerGraph) -> HierarchyMatrix:
    bottom = graph.layers[0]
    rows = graph.prediction_layer_nodes
    if not any(n in set(bottom) for n in rows):
        raise ConfigError("prediction layer contains no bottom nodes; coordination needs them")
    col = {n: j for j, n in enumerate(bottom)}
    H = np.zeros((len(rows), len(bottom)))
    for i, node in enumerate(rows):
        for d in graph.bottom_descendants(node):
            H[i, col[d]] = 1.0
    return HierarchyMatrix(H, tuple(rows), tuple(bottom))


# ---------------------------------------------------------------------------
# windows and normalization

@dataclass(frozen=True)
class WindowedSample:
    """``input`` covers slots ``[t_origin - L, t_origin)``; ``target`` covers ``[t_origin, t_origin + T)``."""

    input: np.ndarray
    target: np.ndarray
    t_origin: int


def make_windows(values: np.ndarray, L: int, T: int, split: tuple[int, int] | None = None,
                 target_rows: Sequence[int] | None = None) -> list[WindowedSample]:
    """Stride-1 windows over ``values`` (``[nodes x slots]``).

    With ``split=(start, end)`` a window is kept when its last target slot lies
    in ``[start, end)``. Fully contained targets qualify trivially; a target
    straddling a boundary goes to the later split. Inputs may reach back
    across the boundary.
    """
    values = np.asarray(values, dtype=np.float64)
    if L < 1 or T < 1:
        raise ConfigError(f"L and T must be >= 1, got L={L}, T={T}")
    n = values.shape[1]
    start, end = (0, n) if split is None else split
    if not 0 <= start <= end <= n:
        raise ConfigError(f"split {split} outside series span 0..{n}")
    if n < L + T:
        warnings.warn(f"series span {n} shorter than L+T={L + T}; no windows", RuntimeWarning,
                      stacklevel=2)
        return []
    rows = np.arange(values.shape[0]) if target_rows is None else np.asarray(target_rows)
    out = []
    for t in range(L, n - T + 1):
        last = t + T - 1
        if start <= last < end:
            out.append(WindowedSample(values[:, t - L:t], values[rows, t:t + T], t))
    return out


@dataclass(frozen=True)
class SplitPlan:
    """Slot boundaries ``train = [0, train_end)``, ``val = [train_end, val_end)``, ``test = [val_end, n)``."""

    train_end: int
    val_end: int
    n_slots: int

    @classmethod
    def from_days(cls, n_slots: int, slots_per_day: int, val_days: int, test_days: int) -> "SplitPlan":
        n_days = n_slots // slots_per_day
        train_days = n_days - val_days - test_days
        if train_days < 1 or val_days < 0 or test_days < 1:
            raise ConfigError(f"cannot split {n_days} days into val={val_days}, test={test_days}")
        train_end = train_days * slots_per_day
        return cls(train_end, train_end + val_days * slots_per_day, n_slots)

    def bounds(self, name: str) -> tuple[int, int]:
        return {"train": (0, self.train_end), "val": (self.train_end, self.val_end),
                "test": (self.val_end, self.n_slots)}[name]


@dataclass(frozen=True)
class Normalizer:
    """Per-node z-scoring with statistics from the training span."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        mean = values.mean(axis=1)
        std = values.std(axis=1)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def transform(self, x: np.ndarray, rows=None) -> np.ndarray:
        m, s = self._stats(rows)
        return (x - m[:, None]) / s[:, None]

    def inverse(self, x: np.ndarray, rows=None) -> np.ndarray:
        m, s = self._stats(rows)
        return x * s[:, None] + m[:, None]

    def _stats(self, rows):
        if rows is None:
            return self.mean, self.std
        return self.mean[rows], self.std[rows]

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Normalizer":
        return cls(np.array(obj["mean"], dtype=np.float64), np.array(obj["std"], dtype=np.float64))
