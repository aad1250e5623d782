"""Affinity features: visual similarity plus positional, heading and radio blocks.

Node arrays are ordered query first (index 0), then the K candidates in
initial-ranking order. Anchors are nodes ``0..L``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import geometry
from .errors import ConfigError, DataError
from .tensor import EPS_NORM, l2_normalize_rows

TWO_PI = 2.0 * math.pi
BLOCK_ORDER = ("vis", "pos", "hdg", "rad")


def wrap_angle(a: float) -> float:
    w = math.fmod(a, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    return 0.0 if w >= TWO_PI else w


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float
    z: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.heading)):
            raise DataError(f"non-finite pose {self}")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.heading)


@dataclass(frozen=True)
class RadioReading:
    endpoint: str
    rssi: float
    frequency: float
    timestamp: float = 0.0


@dataclass
class RadioScan:
    readings: list[RadioReading]
    timestamp: float = 0.0

    def __post_init__(self):
        for r in self.readings:
            if r.frequency <= 0:
                raise DataError(f"endpoint {r.endpoint}: frequency must be positive, got {r.frequency}")


@dataclass(frozen=True)
class SideInfoConfig:
    """Side-information parameters and which affinity blocks are enabled.

    ``blocks`` lists the enabled blocks; ``query_side`` lists the heading /
    radio blocks for which the query contributes data (the query row and the
    query anchor column are zero otherwise).
    """

    fov_radius: float = 50.0
    fov_angle: float = math.pi / 2
    dz_max: float | None = None
    delta_max: float = 500.0
    beta: float = 2.5e-4
    radio_window: float = 10.0
    blocks: tuple[str, ...] = ("vis",)
    query_side: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.fov_angle <= math.pi:
            raise ConfigError(f"fov_angle must lie in (0, pi], got {self.fov_angle}")
        if self.fov_radius <= 0:
            raise ConfigError(f"fov_radius must be positive, got {self.fov_radius}")
        if self.delta_max <= 0 or self.beta <= 0:
            raise ConfigError("delta_max and beta must be positive")
        unknown = set(self.blocks) - set(BLOCK_ORDER)
        if unknown or not self.blocks:
            raise ConfigError(f"blocks must be a non-empty subset of {BLOCK_ORDER}, got {self.blocks}")
        bad_q = set(self.query_side) - {"hdg", "rad"}
        if bad_q:
            raise ConfigError(f"query_side may only contain 'hdg'/'rad', got {sorted(bad_q)}")
        object.__setattr__(self, "blocks", tuple(b for b in BLOCK_ORDER if b in self.blocks))
        object.__setattr__(self, "query_side", tuple(b for b in ("hdg", "rad") if b in self.query_side))

    def affinity_dim(self, L: int) -> int:
        return sum(L if b == "pos" else L + 1 for b in self.blocks)

    def beta_in_range(self, n_endpoints: int) -> bool:
        return self.beta * self.delta_max * math.sqrt(n_endpoints) <= 2.0


# ---------------------------------------------------------------------------
# visual
# ---------------------------------------------------------------------------

def visual_affinity(projected: np.ndarray, L: int) -> np.ndarray:
    """Cosine of every node against anchors ``0..L`` -> (N, L+1)."""
    projected = np.asarray(projected)
    n = projected.shape[0]
    if L > n - 1:
        raise ConfigError(f"L={L} exceeds the number of candidates K={n - 1}")
    norms = np.linalg.norm(projected, axis=1)
    if np.any(norms <= EPS_NORM):
        raise DataError("visual_affinity received a zero-norm projected descriptor")
    unit = l2_normalize_rows(projected)
    return np.clip(unit @ unit[: L + 1].T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# positional
# ---------------------------------------------------------------------------

def fov_overlap(p_i: Pose2D, p_j: Pose2D, cfg: SideInfoConfig) -> float:
    """Normalized field-of-view overlap of two viewing sectors, in [0, 1]."""
    out = geometry.overlap_pairs([p_i.as_row()], [p_j.as_row()], cfg.fov_radius,
                                 cfg.fov_angle, cfg.dz_max)
    return float(min(max(out[0], 0.0), 1.0))


def positional_affinity(poses: np.ndarray, L: int, cfg: SideInfoConfig,
                        ids: Sequence | None = None) -> np.ndarray:
    """FoV overlap of each candidate with candidate anchors ``1..L`` -> (N, L).

    ``poses`` rows are ``(x, y, z, heading)``; the query row may be NaN
    (unknown) and its affinity row is always zero.
    """
    poses = np.asarray(poses, dtype=np.float64)
    n = poses.shape[0]
    missing = ~np.all(np.isfinite(poses[1:]), axis=1)
    if np.any(missing):
        k = int(np.flatnonzero(missing)[0]) + 1
        rid = ids[k] if ids is not None else k
        raise DataError(f"record {rid}: positional affinity requires a database pose")
    out = np.zeros((n, L))
    if L > 0:
        out[1:] = geometry.overlap_matrix(poses[1:], poses[1:L + 1], cfg.fov_radius,
                                          cfg.fov_angle, cfg.dz_max)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# heading
# ---------------------------------------------------------------------------

def heading_similarity(a, b):
    d = np.abs(np.mod(np.asarray(a, dtype=np.float64), TWO_PI) - np.mod(np.asarray(b, dtype=np.float64), TWO_PI))
    return 1.0 - 2.0 * np.minimum(d, TWO_PI - d) / math.pi


def heading_affinity(headings: np.ndarray, L: int) -> np.ndarray:
    h = np.asarray(headings, dtype=np.float64)
    return np.clip(heading_similarity(h[:, None], h[None, : L + 1]), -1.0, 1.0)


# ---------------------------------------------------------------------------
# radio
# ---------------------------------------------------------------------------

@dataclass
class EndpointRegistry:
    """Closed-world map from endpoint id to descriptor column."""

    ids: list[str]
    unknown_seen: int = 0
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {e: i for i, e in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise DataError("endpoint registry contains duplicate ids")

    @classmethod
    def from_scans(cls, scans: Iterable[RadioScan]) -> "EndpointRegistry":
        seen: set[str] = set()
        for scan in scans:
            seen.update(r.endpoint for r in scan.readings)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, endpoint: str) -> int | None:
        return self._index.get(endpoint)


def rssi_to_distance(rssi, frequency):
    """Free-space distance in meters from RSSI (dBm) and frequency (MHz)."""
    return np.power(10.0, (27.55 + np.abs(rssi)) / 20.0) / np.asarray(frequency, dtype=np.float64)


def distance_to_rssi(distance, frequency):
    """Inverse of :func:`rssi_to_distance` (returns a negative dBm value)."""
    return -(20.0 * np.log10(np.asarray(frequency, dtype=np.float64) * np.asarray(distance)) - 27.55)


def window_readings(readings: Sequence[RadioReading], t_image: float, window: float,
                    causal: bool = False) -> list[RadioReading]:
    """Readings within ``window`` seconds of ``t_image``; only earlier ones if ``causal``."""
    if causal:
        return [r for r in readings if t_image - window <= r.timestamp <= t_image]
    return [r for r in readings if abs(r.timestamp - t_image) <= window]


def radio_descriptor(scan: RadioScan, registry: EndpointRegistry, cfg: SideInfoConfig) -> np.ndarray:
    """Distances to every registry endpoint, clamped at ``delta_max``.

    Unobserved endpoints get ``delta_max``. Readings from endpoints not in the
    registry are ignored and counted in ``registry.unknown_seen``. Repeated
    readings of one endpoint keep the shortest distance.
    """
    out = np.full(len(registry), cfg.delta_max)
    for r in scan.readings:
        j = registry.index(r.endpoint)
        if j is None:
            registry.unknown_seen += 1
            continue
        d = min(float(rssi_to_distance(r.rssi, r.frequency)), cfg.delta_max)
        out[j] = min(out[j], d)
    return out


def radio_affinity(descriptors: np.ndarray, L: int, beta: float) -> np.ndarray:
    """``1 - beta * ||delta_i - delta_j||`` against anchors ``0..L``, clamped to [-1, 1]."""
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 2:
        raise DataError(f"radio descriptors must be a 2-D array, got shape {d.shape}")
    anchors = d[: L + 1]
    sq = (d * d).sum(1)[:, None] + (anchors * anchors).sum(1)[None, :] - 2.0 * d @ anchors.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    # exact zeros on self-pairs regardless of cancellation error
    k = min(L + 1, d.shape[0])
    dist[np.arange(k), np.arange(k)] = 0.0
    return np.clip(1.0 - beta * dist, -1.0, 1.0)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class NodeData:
    """Per-node inputs for one retrieval context (query first).

    ``poses`` rows are ``(x, y, z, heading)`` with NaN for unknown values;
    ``radio`` holds radio descriptors (query row may be meaningless when the
    query carries no radio).
    """

    ids: list
    descriptors: np.ndarray
    poses: np.ndarray | None = None
    radio: np.ndarray | None = None


def _zero_query(block: np.ndarray) -> np.ndarray:
    block = block.copy()
    block[0, :] = 0.0
    block[:, 0] = 0.0
    return block


def side_affinity(nodes: NodeData, L: int, cfg: SideInfoConfig,
                  pos_block: np.ndarray | None = None) -> np.ndarray:
    """Concatenated non-visual blocks (pos | hdg | rad) for all nodes.

    ``pos_block`` lets callers pass a precomputed positional block.
    """
    n = len(nodes.ids)
    parts = []
    if "pos" in cfg.blocks:
        if pos_block is None:
            if nodes.poses is None:
                raise DataError("positional block enabled but no poses supplied")
            pos_block = positional_affinity(nodes.poses, L, cfg, nodes.ids)
        parts.append(pos_block)
    if "hdg" in cfg.blocks:
        if nodes.poses is None:
            raise DataError("heading block enabled but no poses supplied")
        h = nodes.poses[:, 3].copy()
        if np.any(~np.isfinite(h[1:])):
            k = int(np.flatnonzero(~np.isfinite(h[1:]))[0]) + 1
            raise DataError(f"record {nodes.ids[k]}: heading block requires a database heading")
        query_has = "hdg" in cfg.query_side and np.isfinite(h[0])
        if not query_has:
            h[0] = 0.0
        block = heading_affinity(h, L)
        parts.append(block if query_has else _zero_query(block))
    if "rad" in cfg.blocks:
        if nodes.radio is None:
            raise DataError("radio block enabled but no radio descriptors supplied")
        block = radio_affinity(nodes.radio, L, cfg.beta)
        parts.append(block if "rad" in cfg.query_side else _zero_query(block))
    if not parts:
        return np.zeros((n, 0))
    return np.concatenate(parts, axis=1)


def assemble_affinity(nodes: NodeData, L: int, cfg: SideInfoConfig,
                      projection: np.ndarray | None = None) -> np.ndarray:
    """Full affinity matrix (N, D_a) in block order vis | pos | hdg | rad.

    ``projection`` is the learned ``W`` (D0, D); identity when omitted.
    """
    n = len(nodes.ids)
    if L > n - 1:
        raise ConfigError(f"L={L} exceeds the number of candidates K={n - 1}")
    parts = []
    if "vis" in cfg.blocks:
        d = np.asarray(nodes.descriptors, dtype=np.float64)
        proj = d if projection is None else d @ np.asarray(projection, dtype=np.float64).T
        parts.append(visual_affinity(proj, L))
    side = side_affinity(nodes, L, cfg)
    if side.shape[1]:
        parts.append(side)
    out = np.concatenate(parts, axis=1)
    assert out.shape[1] == cfg.affinity_dim(L)
    return out
