import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hierflow.hierarchy import SeriesTable, build_hierarchy  # noqa: E402


def toy_graph(n_bottom=6, n_clusters=2, n_slots=40, prediction_layer="all", seed=0, edges=None):
    """Bottom nodes ``b0..``, round-robin clusters, ring edges unless given."""
    rng = np.random.default_rng(seed)
    ids = tuple(f"b{i}" for i in range(n_bottom))
    values = rng.integers(0, 50, size=(n_bottom, n_slots)).astype(float)
    series = SeriesTable(ids, values)
    if edges is None:
        edges = {(ids[i], ids[(i + 1) % n_bottom]) for i in range(n_bottom)} if n_bottom > 2 else set()
    labels = [i % n_clusters for i in range(n_bottom)]
    return build_hierarchy(series, edges, labels, prediction_layer)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides):
    """Small but complete model settings for fast end-to-end tests."""
    from hierflow.config import ModelConfig
    base = dict(L=8, T=4, W=4, S=2, D=4, Q=3, A=2, K=2, k=2, epochs=2, batch_size=8, slots_per_day=8,
                val_days=2, test_days=2, gru_hidden=4, lr=0.01)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_series(n_nodes=6, days=10, spd=8, seed=0):
    from hierflow.synthetic import SyntheticConfig, generate
    return generate(SyntheticConfig(n_nodes=n_nodes, days=days, slots_per_day=spd, seed=seed))[0]
