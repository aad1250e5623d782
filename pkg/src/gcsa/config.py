"""Run configuration: one JSON document covering every stage of a run.

Sections::

    world     synthetic world (see WorldConfig)
    train     training (see TrainConfig; ``stage`` is set by the command)
    side      side information and enabled affinity blocks (SideInfoConfig)
    baseline  query expansion and filtering parameters
    ks        cut-offs for mAP@k / Recall@k

Unknown keys anywhere raise ConfigError. The config hash is the first 16 hex
digits of the SHA-256 of the canonical JSON of the resolved config.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .affinity import SideInfoConfig
from .errors import ConfigError
from .retrieval import DEFAULT_KS
from .synthworld import WorldConfig
from .trainer import TrainConfig

SECTIONS = ("world", "train", "side", "baseline", "ks", "seed")

# Side information tuned to the synthetic world: its rooms are a few meters
# across and the receiver hears endpoints up to ~25 m away.
SYNTH_SIDE = dict(fov_radius=8.0, fov_angle=math.pi / 2, delta_max=30.0, beta=0.01,
                  blocks=("vis", "rad"), query_side=("rad",))


@dataclass(frozen=True)
class BaselineConfig:
    n_qe: int = 10                      # expansion depth for AQE / alpha-QE / AQEwD
    alpha: float | None = None          # alpha-QE exponent; None -> tuned on validation
    alpha_grid: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    heading_max_deg: float = 30.0
    radio_fraction: float = 0.1         # share of the candidate list kept by the radio filter

    def __post_init__(self):
        if self.n_qe < 0:
            raise ConfigError(f"n_qe must be >= 0, got {self.n_qe}")
        if not 0.0 < self.radio_fraction <= 1.0:
            raise ConfigError(f"radio_fraction must lie in (0, 1], got {self.radio_fraction}")
        if not 0.0 <= self.heading_max_deg <= 180.0:
            raise ConfigError(f"heading_max_deg must lie in [0, 180], got {self.heading_max_deg}")
        if not self.alpha_grid:
            raise ConfigError("alpha_grid must not be empty")
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))


def _build(cls, section: str, d: dict | None):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {section} config: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    side: SideInfoConfig = field(default_factory=lambda: SideInfoConfig(**SYNTH_SIDE))
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    ks: tuple[int, ...] = DEFAULT_KS
    seed: int = 0

    def __post_init__(self):
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ConfigError(f"ks must be a non-empty list of positive integers, got {self.ks}")
        object.__setattr__(self, "ks", tuple(sorted({int(k) for k in self.ks})))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown run config sections: {sorted(unknown)}")
        side = {**SYNTH_SIDE, **d.get("side", {})}
        cfg = cls(
            world=_build(WorldConfig, "world", d.get("world")),
            train=_build(TrainConfig, "train", d.get("train")),
            side=_build(SideInfoConfig, "side", side),
            baseline=_build(BaselineConfig, "baseline", d.get("baseline")),
            ks=tuple(d.get("ks", DEFAULT_KS)),
            seed=int(d.get("seed", 0)),
        )
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def with_seed(self, seed: int | None) -> "RunConfig":
        """Propagate one seed to the world and the trainer."""
        if seed is None:
            seed = self.seed
        return replace(self, seed=seed, world=replace(self.world, seed=seed),
                       train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {
            "world": asdict(self.world),
            "train": asdict(self.train),
            "side": {**asdict(self.side), "blocks": list(self.side.blocks),
                     "query_side": list(self.side.query_side)},
            "baseline": {**asdict(self.baseline), "alpha_grid": list(self.baseline.alpha_grid)},
            "ks": list(self.ks),
            "seed": self.seed,
        }

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
