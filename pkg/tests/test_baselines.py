import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config, toy_graph
from hierflow import training as tr
from hierflow.baselines import (GruBaseline, HistoricalAverage, ProportionTable, bottom_up, ha_forecast,
                                middle_out, reconcile, top_down)
from hierflow.hierarchy import MultiLayerGraph, build_hr
from hierflow.synthetic import SyntheticConfig, generate


def abc():
    # bottoms B, C under M under A
    return MultiLayerGraph((("B", "C"), ("M",), ("A",)), (frozenset(),) * 3, {"B": "M", "C": "M", "M": "A"},
                           ("A", "M", "B", "C"))


def graph_421():
    return toy_graph(4, 2)  # cluster_0 = {b0, b2}, cluster_1 = {b1, b3}


# -- historical average ------------------------------------------------------------

def test_ha_exact_on_noiseless_periodic_series():
    day = np.array([1.0, 5.0, 9.0, 2.0])
    ha = HistoricalAverage(np.tile(day, 5)[None], 4)
    assert ha.predict([20, 22], 4)[:, 0].tolist() == [day.tolist(), [9.0, 2.0, 1.0, 5.0]]


def test_ha_constant_and_wraparound():
    assert ha_forecast(np.full(6, 3.0), 17, 8).tolist() == [3.0] * 8
    prof = np.arange(6.0)
    assert ha_forecast(prof, 4, 5).tolist() == [4, 5, 0, 1, 2]


def test_ha_averages_days():
    x = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
    assert HistoricalAverage(x, 2).profile.tolist() == [[3.0, 4.0]]


# -- reconciliation ---------------------------------------------------------------

def test_bottom_up_examples():
    g = abc()
    ps = bottom_up(np.array([[3.0], [4.0]]), g)
    rows = dict(zip(ps.nodes, ps.initial[:, 0]))
    assert rows == {"B": 3.0, "C": 4.0, "M": 7.0, "A": 7.0}
    assert not bottom_up(np.zeros((2, 3)), g).initial.any()


def test_middle_out_example():
    g = abc()
    props = ProportionTable({"B": 0.6, "C": 0.4, "M": 1.0})
    rows = dict(zip(g.all_nodes, middle_out(np.array([[10.0]]), props, g).initial[:, 0]))
    assert rows["B"] == pytest.approx(6.0) and rows["C"] == pytest.approx(4.0)
    assert rows["A"] == pytest.approx(10.0)


def test_top_down_example():
    g = abc()
    props = ProportionTable({"B": 0.7, "C": 0.3, "M": 1.0})
    rows = dict(zip(g.all_nodes, top_down(np.array([100.0]), props, g).initial))
    assert rows["B"] == pytest.approx(70.0) and rows["C"] == pytest.approx(30.0)


def test_all_mass_in_one_leaf():
    g = abc()
    props = ProportionTable.fit(g, np.array([[5.0, 5.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]]))
    assert props.shares["B"] == 1.0 and props.shares["C"] == 0.0
    rows = dict(zip(g.all_nodes, top_down(np.array([8.0]), props, g).initial))
    assert rows["B"] == 8.0 and rows["C"] == 0.0


def test_single_child_gets_everything():
    g = MultiLayerGraph((("B",), ("M",), ("A",)), (frozenset(),) * 3, {"B": "M", "M": "A"}, ("A", "M", "B"))
    props = ProportionTable.fit(g, np.array([[3.0], [3.0], [3.0]]))
    assert props.shares == {"B": 1.0, "M": 1.0}


def test_zero_total_parent_gets_uniform_shares():
    g = abc()
    with pytest.warns(RuntimeWarning, match="zero training flow"):
        props = ProportionTable.fit(g, np.zeros((4, 3)))
    assert props.shares["B"] == props.shares["C"] == 0.5


def matrix_versions(g, props):
    """BU/MO/TD written as explicit matrix products with the aggregation matrix."""
    hr = build_hr(g)
    n1, n2 = len(g.layers[0]), len(g.layers[1])
    S = np.zeros((len(g.all_nodes), n1))  # all nodes from bottoms
    for j, b in enumerate(g.layers[0]):
        for i, n in enumerate(g.all_nodes):
            node = b
            while node is not None:
                if node == n:
                    S[i, j] = 1.0
                node = g.parent_of.get(node)
    share = np.array([props.shares[b] for b in g.layers[0]])
    P_mid = np.array([[share[j] if g.parent_of[b] == m else 0.0 for m in g.layers[1]]
                      for j, b in enumerate(g.layers[0])])
    mid_share = np.array([props.shares[m] for m in g.layers[1]])
    P_top = (share * mid_share[[g.layers[1].index(g.parent_of[b]) for b in g.layers[0]]])[:, None]
    assert hr.col_nodes == g.layers[0]
    return S, n1, n2, P_mid, P_top


def test_reconciliation_equals_matrix_forms(rng):
    g = graph_421()
    props = ProportionTable.fit(g, rng.uniform(1, 10, size=(len(g.all_nodes), 12)))
    S, n1, n2, P_mid, P_top = matrix_versions(g, props)
    base = rng.uniform(0, 50, size=(len(g.all_nodes), 5))
    assert np.allclose(reconcile("bu", base, g, props), S @ base[:n1], rtol=0, atol=1e-12)
    assert np.allclose(reconcile("mo", base, g, props), S @ (P_mid @ base[n1:n1 + n2]), rtol=0, atol=1e-12)
    assert np.allclose(reconcile("td", base, g, props), S @ (P_top @ base[n1 + n2:]), rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        reconcile("xx", base, g, props)


def test_bottom_up_of_middle_out_reproduces_middle(rng):
    g = graph_421()
    props = ProportionTable.fit(g, rng.uniform(1, 10, size=(len(g.all_nodes), 12)))
    mid = rng.uniform(0, 50, size=(2, 3))
    mo = middle_out(mid, props, g).initial
    bu = bottom_up(mo[:4], g).initial
    assert np.allclose(bu[4:6], mid, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 1e4))
def test_shares_scale_invariant_and_bu_idempotent(seed, c):
    rng = np.random.default_rng(seed)
    g = toy_graph(int(rng.integers(2, 7)), int(rng.integers(1, 3)))
    vals = rng.uniform(0.1, 10, size=(len(g.all_nodes), 6))
    a, b = ProportionTable.fit(g, vals), ProportionTable.fit(g, vals * c)
    assert all(a.shares[k] == pytest.approx(b.shares[k], rel=1e-12) for k in a.shares)
    base = rng.normal(size=(len(g.all_nodes), 3))
    once = reconcile("bu", base, g, a)
    assert np.array_equal(reconcile("bu", once, g, a), once)
    hr = build_hr(g)
    rows = [g.all_nodes.index(n) for n in hr.row_nodes]
    for m in ("mo", "td"):
        out = reconcile(m, base, g, a)
        assert np.allclose(hr.matrix @ out[:len(g.layers[0])], out[rows], rtol=1e-12, atol=1e-12)


# -- GRU baseline ----------------------------------------------------------------

def test_gru_baseline_param_count_formula():
    gru = GruBaseline(5, 3)
    assert gru.n_params == 3 * (5 * (1 + 5) + 5) + 5 * 3 + 3


def trend_data(**cfg):
    series, _ = generate(SyntheticConfig(n_nodes=4, days=12, slots_per_day=8, trend=0.2, noise=0.02,
                                         level_std=0.0))
    cfg = tiny_config(prediction_layer="all", **cfg)
    return tr.prepare(series, cfg), cfg


def test_gru_baseline_is_deterministic():
    data, cfg = trend_data(epochs=3, gru_hidden=4)
    a = tr.evaluate_baselines(data, cfg, ["gru"])
    b = tr.evaluate_baselines(data, cfg, ["gru"])
    assert a == b


def test_gru_beats_history_on_trending_flow():
    data, cfg = trend_data(epochs=100, gru_hidden=16)
    ha, gru = tr.evaluate_baselines(data, cfg, ["ha", "gru"])
    assert gru["aggregate"]["mae"] < 0.75 * ha["aggregate"]["mae"]
