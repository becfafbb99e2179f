"""Synthetic station flows with morning/evening peak archetypes.

Each bottom node follows one archetype's daily shape, scaled by a node size,
modulated by a slowly varying demand level shared within the archetype, an
optional linear trend, and Gaussian noise; values are rounded to counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hierflow.errors import ConfigError
from hierflow.hierarchy import SeriesTable


@dataclass(frozen=True)
class Peak:
    position: float  # fraction of the operating day
    height: float
    width: float = 0.06


@dataclass(frozen=True)
class Archetype:
    peaks: tuple[Peak, ...]
    base: float = 0.15

    def shape(self, slots_per_day: int) -> np.ndarray:
        s = (np.arange(slots_per_day) + 0.5) / slots_per_day
        out = np.full(slots_per_day, self.base)
        for p in self.peaks:
            out += p.height * np.exp(-0.5 * ((s - p.position) / p.width) ** 2)
        return out


# evening-heavy (residential) and morning-heavy (employment) stations
RESIDENTIAL = Archetype((Peak(0.18, 0.55), Peak(0.72, 1.0)))
EMPLOYMENT = Archetype((Peak(0.18, 1.0), Peak(0.72, 0.45)))


@dataclass(frozen=True)
class SyntheticConfig:
    n_nodes: int = 12
    days: int = 30
    slots_per_day: int = 72
    archetypes: tuple[Archetype, ...] = field(default=(RESIDENTIAL, EMPLOYMENT))
    noise: float = 0.05  # std as a fraction of the node's peak flow
    level_std: float = 0.2
    level_phi: float = 0.99  # per slot; deviations persist for about a day
    trend: float = 0.0  # relative growth per day
    scale_range: tuple[float, float] = (0.7, 1.3)
    peak_flow: float = 200.0
    seed: int = 0

    def validate(self) -> None:
        checks = [
            ("n_nodes", self.n_nodes >= 1),
            ("days", self.days >= 1),
            ("slots_per_day", self.slots_per_day >= 2),
            ("archetypes", len(self.archetypes) >= 1 and len(self.archetypes) <= self.n_nodes),
            ("noise", self.noise >= 0),
            ("level_std", self.level_std >= 0),
            ("level_phi", 0 <= self.level_phi < 1),
            ("scale_range", 0 < self.scale_range[0] <= self.scale_range[1]),
            ("peak_flow", self.peak_flow > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid synthetic config field {name!r}: {getattr(self, name)!r}")

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticConfig":
        obj = dict(obj)
        if "archetypes" in obj:
            obj["archetypes"] = tuple(
                Archetype(tuple(Peak(**p) for p in a["peaks"]), a.get("base", 0.15))
                for a in obj["archetypes"])
        if "scale_range" in obj:
            obj["scale_range"] = tuple(obj["scale_range"])
        try:
            cfg = cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"invalid synthetic config: {exc}") from None
        cfg.validate()
        return cfg


def generate(cfg: SyntheticConfig) -> tuple[SeriesTable, dict[str, int]]:
    """Return the bottom-node series and the generating archetype of each node."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, spd = cfg.n_nodes, cfg.slots_per_day
    n_slots = cfg.days * spd
    ids = tuple(f"s{i:02d}" for i in range(n))
    labels = np.arange(n) % len(cfg.archetypes)
    scales = rng.uniform(*cfg.scale_range, size=n)
    shapes = np.array([a.shape(spd) for a in cfg.archetypes])

    level = np.zeros((len(cfg.archetypes), n_slots))
    innov = rng.normal(size=level.shape) * cfg.level_std * np.sqrt(1 - cfg.level_phi ** 2)
    level[:, 0] = rng.normal(size=len(cfg.archetypes)) * cfg.level_std
    for t in range(1, n_slots):
        level[:, t] = cfg.level_phi * level[:, t - 1] + innov[:, t]
    factor = np.maximum(1.0 + level, 0.0)
    trend = 1.0 + cfg.trend * np.arange(n_slots) / spd

    values = np.empty((n, n_slots))
    for i in range(n):
        profile = cfg.peak_flow * scales[i] * np.tile(shapes[labels[i]], cfg.days)
        peak = cfg.peak_flow * scales[i] * shapes[labels[i]].max()
        noise = rng.normal(size=n_slots) * cfg.noise * peak
        values[i] = profile * factor[labels[i]] * trend + noise
    values = np.rint(np.maximum(values, 0.0))
    return SeriesTable(ids, values, granularity_minutes=int(round(18 * 60 / spd)) or 1), \
        {nid: int(l) for nid, l in zip(ids, labels)}
