"""Checkpoint directories: parameters, config, hierarchy, normalizer, resumable state, manifest."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

from hierflow.baselines import GruBaseline
from hierflow.config import ModelConfig
from hierflow.errors import HierflowError
from hierflow.hierarchy import MultiLayerGraph, Normalizer
from hierflow.io import read_json, write_csv, write_json
from hierflow.model import IPFModel
from hierflow.training import TrainState

PARAMS = "checkpoint.json"
CONFIG = "config.json"
HIERARCHY = "hierarchy.json"
NORMALIZER = "normalizer.json"
STATE = "train_state.json"
MANIFEST = "manifest.json"
LOG = "train_log.csv"


@dataclass
class Checkpoint:
    model: IPFModel
    manifest: dict
    phase1: TrainState | None
    phase2: TrainState | None

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg

    @property
    def complete(self) -> bool:
        return bool(self.manifest.get("complete"))


def log_rows(*states: TrainState | None) -> list[list]:
    rows = []
    for s in states:
        if s is None:
            continue
        for epoch, train, val in s.history:
            rows.append([s.phase, epoch, train, "" if val is None else val])
    return rows


def save(directory, model: IPFModel, phase1: TrainState, phase2: TrainState | None,
         complete: bool = True) -> Path:
    """Write every artifact atomically; the manifest carries the only timestamp."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    write_json(d / CONFIG, cfg.to_json())
    write_json(d / HIERARCHY, model.graph.to_json())
    write_json(d / NORMALIZER, model.normalizer.to_json())
    model.params.save(d / PARAMS)
    write_json(d / STATE, {"phase1": phase1.to_json(),
                           "phase2": None if phase2 is None else phase2.to_json()})
    write_csv(d / LOG, ["phase", "epoch", "train_loss", "val_loss"], log_rows(phase1, phase2))
    last = phase2 if phase2 is not None and phase2.history else phase1
    gru = GruBaseline(cfg.gru_hidden, cfg.T, seed=cfg.seed)
    write_json(d / MANIFEST, {
        "config_hash": cfg.digest(),
        "mode": cfg.mode,
        "complete": complete,
        "epoch": last.epoch,
        "phase1_best_epoch": phase1.best_epoch,
        "val_loss": None if last.best_epoch < 0 else last.best_val,
        "phase2": "present" if phase2 is not None else "absent",
        "n_params": model.params.n_values(),
        "gru_baseline_params": gru.n_params,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })
    return d


def load(directory) -> Checkpoint:
    d = Path(directory)
    missing = [n for n in (PARAMS, CONFIG, HIERARCHY, NORMALIZER, MANIFEST) if not (d / n).is_file()]
    if missing:
        raise HierflowError(f"checkpoint {d} is missing {', '.join(missing)}")
    cfg = ModelConfig.from_json(read_json(d / CONFIG))
    manifest = read_json(d / MANIFEST)
    if manifest.get("config_hash") != cfg.digest():
        raise HierflowError(f"checkpoint {d}: config does not match manifest hash")
    graph = MultiLayerGraph.from_json(read_json(d / HIERARCHY))
    model = IPFModel(graph, cfg, Normalizer.from_json(read_json(d / NORMALIZER)))
    model.params.load(d / PARAMS)
    phase1 = phase2 = None
    if (d / STATE).is_file():
        st = read_json(d / STATE)
        phase1 = TrainState.from_json(st["phase1"])
        phase2 = None if st["phase2"] is None else TrainState.from_json(st["phase2"])
    return Checkpoint(model, manifest, phase1, phase2)
