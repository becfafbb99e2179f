import json
import warnings

import numpy as np
import pytest

from conftest import tiny_config, tiny_series
from hierflow import checkpoint as ckpt
from hierflow import training as tr
from hierflow.errors import NumericAbort
from hierflow.heads import sql_loss
from hierflow.hierarchy import SeriesTable
from hierflow.model import IPFModel


def fresh(series=None, **cfg):
    cfg = tiny_config(**cfg)
    data = tr.prepare(series if series is not None else tiny_series(), cfg)
    return IPFModel(data.graph, cfg, data.normalizer), data


def test_prepare_splits_and_shapes():
    model, data = fresh(mode="hp")
    cfg = model.cfg
    assert (data.splits.train_end, data.splits.val_end) == (6 * 8, 8 * 8)
    tr_, va, te = (data.sets[k] for k in tr.SPLITS)
    assert tr_.X.shape[1:] == (9, cfg.L) and tr_.Y.shape[1:] == (9, cfg.T)
    assert tr_.t_origin.min() == cfg.L and tr_.t_origin.max() + cfg.T - 1 < data.splits.train_end
    assert va.t_origin.min() + cfg.T - 1 == data.splits.train_end
    assert te.t_origin.max() + cfg.T == 80
    # targets keep the hierarchy exactly on the raw scale
    H = model.hr.matrix
    assert all(np.array_equal(H @ y[:6], y) for y in te.Y_raw)


def test_batch_samples_block_diagonal():
    model, data = fresh()
    batches = tr.batch_samples(data.sets["train"], data.graph, 2)
    b = batches[0]
    A = b.adjacency[0]
    V = len(data.graph.layers[0])
    assert A.shape == (2 * V, 2 * V)
    assert not A[:V, V:].any() and not A[V:, :V].any()
    assert np.array_equal(A[:V, :V], A[V:, V:])
    n = len(data.sets["train"])
    assert sum(x.size for x in batches) == n
    assert batches[-1].size == (n % 2 or 2)
    stacked = b.stacked_inputs()
    assert np.array_equal(stacked[len(data.graph.all_nodes)], data.sets["train"].X[1, 0])
    pred = model.forward(b.inputs)
    assert np.array_equal(b.unbatch(pred)[1], model.forward(b.inputs[1:2]).data)


def test_epochs_zero_leaves_parameters():
    model, data = fresh(epochs=0, mode="hp")
    before = model.params.snapshot()
    s1 = tr.train_phase1(model, data)
    s2 = tr.train_phase2(model, data)
    assert s1.history == [] and s2.history == []
    assert all(np.array_equal(before[k], v) for k, v in model.params.snapshot().items())


def test_zero_epoch_phase2_is_selector_coordination():
    model, data = fresh(mode="hp", epochs=1, coord_epochs=0)
    tr.train_phase1(model, data)
    tr.train_phase2(model, data)
    init, coord = tr.predict_set(model, data.sets["test"])
    H = model.hr.matrix
    assert np.allclose(coord, np.einsum("pb,nbt->npt", H, init[:, :6]), rtol=1e-12, atol=1e-9)


def test_constant_series_loss_drops_fast():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        series = SeriesTable(tuple(f"n{i}" for i in range(4)), np.full((4, 80), 7.0))
        model, data = fresh(series, epochs=5, lr=0.002, batch_size=4)
    train = data.sets["train"]
    initial = sql_loss(model.forward(train.X), train.Y.reshape(-1, 4)).item()
    losses = [h[1] for h in tr.train_phase1(model, data).history]
    assert all(a > b for a, b in zip([initial] + losses, losses))
    assert losses[-1] < 0.1 * initial


def test_phase2_never_touches_base():
    model, data = fresh(mode="hp", epochs=2)
    tr.train_phase1(model, data)
    base = model.base_params().snapshot()
    coord = model.coord_params().snapshot()
    tr.train_phase2(model, data)
    assert all(np.array_equal(base[k], v) for k, v in model.base_params().snapshot().items())
    assert any(not np.array_equal(coord[k], v) for k, v in model.coord_params().snapshot().items())


def test_tp_skips_phase2():
    model, data = fresh(epochs=1)
    tr.train_phase1(model, data)
    assert tr.train_phase2(model, data) is None


def test_identical_seeds_identical_losses():
    runs = []
    for _ in range(2):
        model, data = fresh(mode="hp", epochs=2)
        s1 = tr.train_phase1(model, data)
        s2 = tr.train_phase2(model, data)
        runs.append((s1.history, s2.history, tr.evaluate(model, data)[0]))
    assert runs[0][:2] == runs[1][:2]
    assert json.dumps(runs[0][2], sort_keys=True) == json.dumps(runs[1][2], sort_keys=True)


def test_resume_reproduces_trajectory_bitwise(tmp_path):
    model, data = fresh(epochs=4, mode="hp", coord_epochs=3)
    full1 = tr.train_phase1(model, data)
    full2 = tr.train_phase2(model, data)
    final = model.params.snapshot()

    model, data = fresh(epochs=4, mode="hp", coord_epochs=3)
    part = tr.train_phase1(model, data, stop_after=2)
    assert part.epoch == 2
    ckpt.save(tmp_path, model, part, None, complete=False)
    c = ckpt.load(tmp_path)
    model2 = IPFModel(data.graph, c.cfg, data.normalizer)
    model2.params.restore(c.model.params.snapshot())
    s1 = tr.train_phase1(model2, data, c.phase1)
    s2 = tr.train_phase2(model2, data, stop_after=1)
    ckpt.save(tmp_path, model2, s1, s2, complete=False)
    c = ckpt.load(tmp_path)
    model3 = IPFModel(data.graph, c.cfg, data.normalizer)
    model3.params.restore(c.model.params.snapshot())
    s2 = tr.train_phase2(model3, data, c.phase2)
    assert s1.history == full1.history and s2.history == full2.history
    assert all(np.array_equal(final[k], v) for k, v in model3.params.snapshot().items())


def test_best_validation_snapshot_is_restored():
    model, data = fresh(epochs=6, lr=0.05)
    s = tr.train_phase1(model, data)
    vals = [h[2] for h in s.history]
    assert s.best_epoch == int(np.argmin(vals))
    assert s.best_val == min(vals)
    assert all(np.array_equal(s.best[k], v) for k, v in model.base_params().snapshot().items())


def test_nan_loss_aborts_with_diagnostics():
    model, data = fresh(epochs=1)
    model.params["heads.cluster.cluster_0.out.bias"].data[:] = np.nan
    with pytest.raises(NumericAbort, match=r"epoch 0, batch 0.*norms"):
        tr.train_phase1(model, data)


def test_evaluate_is_side_effect_free_and_consistent():
    model, data = fresh(mode="hp", epochs=1)
    tr.train_phase1(model, data)
    tr.train_phase2(model, data)
    a, _ = tr.evaluate(model, data)
    b, _ = tr.evaluate(model, data)
    assert json.dumps(a) == json.dumps(b)
    assert a["aggregate"]["mae"] == pytest.approx(np.mean([r["mae"] for r in a["per_node"]]))
    assert a["mode"] == "hp" and a["n_samples"] == len(data.sets["test"])
    assert max(h["max_abs"] for h in a["hierarchical_error"]) < 1e-9


def test_tp_all_layers_has_incoherent_forecasts():
    model, data = fresh(epochs=2, prediction_layer="all")
    tr.train_phase1(model, data)
    rep, _ = tr.evaluate(model, data)
    assert max(h["max_abs"] for h in rep["hierarchical_error"]) > 0


def test_baselines_on_noiseless_periodic_data():
    from hierflow.synthetic import SyntheticConfig, generate
    series, _ = generate(SyntheticConfig(n_nodes=6, days=10, slots_per_day=8, noise=0.0, level_std=0.0))
    cfg = tiny_config()
    data = tr.prepare(series, cfg)
    reps = tr.evaluate_baselines(data, cfg, ["ha", "bu", "mo", "td"])
    assert [r["name"] for r in reps] == ["ha", "bu", "mo", "td"]
    assert reps[0]["aggregate"]["mae"] == 0.0 and reps[1]["aggregate"]["mae"] == 0.0
    for r in reps[1:]:
        assert all(h["max_abs"] < 1e-9 for h in r["hierarchical_error"])


def test_gru_baseline_reports_param_count():
    model, data = fresh(epochs=1, prediction_layer="all")
    (rep,) = tr.evaluate_baselines(data, model.cfg, ["gru"])
    H, T = model.cfg.gru_hidden, model.cfg.T
    assert rep["n_params"] == 3 * (H * (1 + H) + H) + H * T + T
