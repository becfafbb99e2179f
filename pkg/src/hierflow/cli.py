"""Command-line entry point: ``hierflow <command> ...``.

Exit codes: 0 success, 1 operational error, 2 usage/config, 3 data, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from hierflow import checkpoint as ckpt
from hierflow import training
from hierflow.config import ModelConfig, default_seed
from hierflow.errors import ConfigError, DataError, HierflowError
from hierflow.hierarchy import MultiLayerGraph, SeriesTable, SplitPlan, build_hr, load_csv
from hierflow.io import read_json, write_atomic, write_csv, write_json
from hierflow.model import IPFModel
from hierflow.synthetic import SyntheticConfig, generate

log = logging.getLogger("hierflow")

# flag name -> ModelConfig field
MODEL_FLAGS = {
    "L": int, "T": int, "W": int, "S": int, "Q": int, "A": int, "D": int, "K": int, "k": int,
    "z": float, "lr": float, "epochs": int, "coord_epochs": int, "batch_size": int, "seed": int,
    "aggregator": str, "prediction_layer": str, "slots_per_day": int, "val_days": int,
    "test_days": int, "gru_hidden": int,
}
FLAG_HELP = {
    "L": "input window length (slots)", "T": "forecast horizon (slots)", "W": "patch width",
    "S": "patch stride", "Q": "depthwise kernel size", "A": "pointwise output channels",
    "D": "patch embedding size", "K": "neighbours per node in the similarity graph",
    "k": "number of clusters", "z": "quantile of the SQL loss", "coord_epochs": "coordination epochs (hp)",
    "prediction_layer": "bottom, bottom+top, bottom+middle or all", "aggregator": "mean or sum",
}


def _add_model_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="JSON file with model settings; flags override it")
    for name, typ in MODEL_FLAGS.items():
        if name in skip:
            continue
        flag = "--" + name.replace("_", "-") if len(name) > 1 else f"-{name}"
        p.add_argument(flag, dest=name, type=typ, default=None, metavar=name.upper() if len(name) > 1 else name,
                       help=FLAG_HELP.get(name))


def model_config(args, **fixed) -> ModelConfig:
    obj = {}
    if getattr(args, "config", None):
        obj.update(_read_json(args.config, ConfigError))
    for name in MODEL_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            obj[name] = v
    obj.update({k: v for k, v in fixed.items() if v is not None})
    if "seed" not in obj:
        obj["seed"] = default_seed(0)
    try:
        return ModelConfig.from_json(obj)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def _read_json(path, err=DataError):
    try:
        return read_json(path)
    except FileNotFoundError:
        raise err(f"no such file: {path}") from None
    except ValueError as exc:
        raise err(f"{path}: invalid JSON ({exc})") from None


def _load_series(args) -> SeriesTable:
    if not Path(args.data).is_file():
        raise DataError(f"no such dataset: {args.data}")
    return load_csv(args.data, long_format=args.long_format)


def _graph_for(series: SeriesTable, path) -> MultiLayerGraph | None:
    if path is None:
        return None
    graph = MultiLayerGraph.from_json(_read_json(path))
    if sorted(graph.layers[0]) != sorted(series.node_ids):
        raise DataError(f"hierarchy {path} bottom nodes do not match the dataset")
    return graph


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synthetic(args) -> int:
    obj = _read_json(args.config, ConfigError) if args.config else {}
    for name in ("n_nodes", "days", "slots_per_day", "noise", "trend", "seed"):
        v = getattr(args, name)
        if v is not None:
            obj[name] = v
    obj.setdefault("seed", default_seed(0))
    cfg = SyntheticConfig.from_json(obj)
    series, labels = generate(cfg)
    write_atomic(args.out, series.to_csv())
    truth = Path(args.assignment) if args.assignment else Path(args.out).with_suffix(".clusters.json")
    write_json(truth, labels)
    print(f"wrote {series.n_slots} slots x {len(series.node_ids)} nodes to {args.out}; clusters in {truth}")
    return 0


def cmd_build_hierarchy(args) -> int:
    series = _load_series(args)
    cfg = model_config(args)
    plan = SplitPlan.from_days(series.n_slots, cfg.slots_per_day, cfg.val_days, cfg.test_days)
    graph = training.build_graph(series, cfg, plan.train_end)
    write_json(args.out, graph.to_json())
    if args.hr:
        write_atomic(args.hr, build_hr(graph).to_csv())
    sizes = [len(l) for l in graph.layers]
    edges = [len(e) for e in graph.intra_edges]
    print(f"layers {sizes}; intra-layer edges {edges}; prediction layer {len(graph.prediction_layer_nodes)} nodes")
    return 0


def cmd_train(args) -> int:
    series = _load_series(args)
    out = Path(args.out)
    if args.resume:
        prev = ckpt.load(out)
        cfg = prev.cfg
        graph = prev.model.graph
    else:
        cfg = model_config(args, mode=args.mode)
        graph = _graph_for(series, args.hierarchy)
    data = training.prepare(series, cfg, graph)
    model = IPFModel(data.graph, cfg, data.normalizer)
    s1 = s2 = None
    if args.resume:
        model.params.restore(prev.model.params.snapshot())
        s1, s2 = prev.phase1, prev.phase2
    log_path = out / ckpt.LOG

    def on_epoch(phase, epoch, train, val):
        print(f"{phase} epoch {epoch}: train {train:.6f} val {val if val is None else format(val, '.6f')}",
              flush=True)

    stop = args.stop_after
    if s1 is None or s1.epoch < cfg.epochs:
        s1 = training.train_phase1(model, data, s1, stop_after=stop, on_epoch=on_epoch)
        if s1.epoch < cfg.epochs:
            ckpt.save(out, model, s1, None, complete=False)
            print(f"stopped after {s1.epoch} epochs; resume with --resume")
            return 0
    if cfg.mode == "hp":
        s2 = training.train_phase2(model, data, s2, stop_after=stop, on_epoch=on_epoch)
        if s2.epoch < cfg.phase2_epochs:
            ckpt.save(out, model, s1, s2, complete=False)
            print(f"stopped coordination after {s2.epoch} epochs; resume with --resume")
            return 0
    ckpt.save(out, model, s1, s2)
    print(f"checkpoint written to {out} (log {log_path})")
    return 0


def _load_complete(path) -> ckpt.Checkpoint:
    if not Path(path).is_dir():
        raise HierflowError(f"no checkpoint directory at {path}")
    c = ckpt.load(path)
    if not c.complete:
        raise HierflowError(f"checkpoint {path} is from an interrupted run; finish it with train --resume")
    return c


def cmd_predict(args) -> int:
    c = _load_complete(args.checkpoint)
    cfg, model = c.cfg, c.model
    if args.t_origin < cfg.L:
        raise ConfigError(f"--t-origin must be >= L={cfg.L}, got {args.t_origin}")
    series = _load_series(args)
    graph = model.graph
    missing = sorted(set(graph.layers[0]) - set(series.node_ids))
    if missing:
        raise DataError(f"dataset lacks bottom nodes {missing}")
    bottom = np.array([series.row(n) for n in graph.layers[0]])
    values = graph.with_values(bottom).values
    if args.t_origin > values.shape[1]:
        raise DataError(f"--t-origin {args.t_origin} beyond the series end {values.shape[1]}")
    X = model.normalizer.transform(values[:, args.t_origin - cfg.L:args.t_origin])
    init, coord = model.predict(X[None])
    header = ["node_id", "t_origin", "step", "initial"] + (["coordinated"] if coord is not None else [])
    rows = []
    for i, node in enumerate(model.pred_nodes):
        for j in range(cfg.T):
            row = [node, args.t_origin, j, float(init[0, i, j])]
            if coord is not None:
                row.append(float(coord[0, i, j]))
            rows.append(row)
    write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    names = [n for n in (args.baselines or "").split(",") if n]
    unknown = [n for n in names if n not in training.BASELINES]
    if unknown:
        raise ConfigError(f"unknown baseline(s) {unknown}; choose from {list(training.BASELINES)}")
    if len(set(names)) != len(names):
        raise ConfigError("each baseline may be requested once")
    c = _load_complete(args.checkpoint)
    series = _load_series(args)
    cfg = c.cfg
    data = training.prepare(series, cfg, c.model.graph)
    model = c.model
    report, _ = training.evaluate(model, data, args.split)
    report["baselines"] = training.evaluate_baselines(data, cfg, names, args.split, args.reconcile_base)
    if args.debug_oracle:
        s = data.sets[args.split]
        report["baselines"].append(training.report_for("oracle", s.Y_raw, s.Y_raw, data.graph,
                                                       data.graph.prediction_layer_nodes))
    out = Path(args.out_dir)
    write_json(out / "report.json", report)
    entries = [report] + report["baselines"]
    write_csv(out / "per_node.csv", ["model", "node_id", "mae", "rmse"],
              [[e["name"], r["node"], r["mae"], r["rmse"]] for e in entries for r in e["per_node"]])
    write_csv(out / "hierarchical_error.csv", ["model", "parent", "step", "mean", "mean_abs", "max_abs"],
              [[e["name"], r["parent"], r["step"], r["mean"], r["mean_abs"], r["max_abs"]]
               for e in entries for r in e["hierarchical_error"]])
    for e in entries:
        print(f"{e['name']:>8}: MAE {e['aggregate']['mae']:.4f}  RMSE {e['aggregate']['rmse']:.4f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierflow", description="Hierarchical graph flow forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic two-archetype dataset")
    p.add_argument("--config", help="JSON synthetic-data config")
    p.add_argument("--nodes", dest="n_nodes", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--slots-per-day", dest="slots_per_day", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--trend", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="wide CSV to write")
    p.add_argument("--assignment", help="ground-truth cluster JSON (default: <out>.clusters.json)")
    p.set_defaults(func=cmd_gen_synthetic)

    def data_flags(p):
        p.add_argument("--data", required=True, help="bottom-node series CSV")
        p.add_argument("--long-format", action="store_true", help="CSV rows are node_id,t,value")

    p = sub.add_parser("build-hierarchy", help="similarity graph + clustering -> hierarchy JSON")
    data_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--hr", help="also write the hierarchy matrix as CSV")
    p.set_defaults(func=cmd_build_hierarchy)

    p = sub.add_parser("train", help="train a forecaster into a checkpoint directory")
    data_flags(p)
    _add_model_flags(p)
    p.add_argument("--hierarchy", help="hierarchy JSON (built from the data when omitted)")
    p.add_argument("--mode", choices=("tp", "hp"), default=None)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--stop-after", type=int, help="interrupt after this many epochs of the current phase")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast T steps from one origin")
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t-origin", type=int, required=True, help="first forecast slot (>= L)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics for the model and baselines")
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baselines", default="", help=f"comma list from {','.join(training.BASELINES)}")
    p.add_argument("--reconcile-base", choices=("ha", "gru"), default="ha",
                   help="base forecasts reconciled by bu/mo/td")
    p.add_argument("--split", choices=training.SPLITS, default="test")
    p.add_argument("--debug-oracle", action="store_true", help="add a perfect-forecast entry")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HierflowError as exc:
        print(f"hierflow: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hierflow: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
