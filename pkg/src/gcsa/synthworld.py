"""Synthetic multi-modal worlds with visual aliasing.

Every floor shares one layout of appearance classes, and within a floor the
class pattern repeats ``aliasing`` times, so visually identical places exist
on several floors and blocks. Descriptors mix the appearance seen inside the
viewing sector, a per-session condition offset (lighting, season) and
Gaussian noise; beyond the floor edge cameras see a ring of wall cells.
Radio endpoints are placed per floor; readings follow the
free-space model with a per-floor attenuation, so radio separates floors.

Images are collected along random-walk sessions; splits are session-disjoint.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .affinity import RadioReading, distance_to_rssi
from .dataset import Dataset, Record, save_dataset
from .errors import ConfigError

LAYOUTS = ("multi-floor", "street-grid")
FREQUENCIES = (2412.0, 2437.0, 2462.0, 5180.0, 5240.0, 5745.0)
HEADING_BINS = 8
SECTOR_RINGS = 4
SECTOR_RAYS = 5


@dataclass(frozen=True)
class WorldConfig:
    layout: str = "multi-floor"
    cells: int = 8                 # cells per axis
    floors: int = 2
    images_per_cell: float = 26.0
    aliasing: int = 1              # repeats of the appearance pattern within a floor
    detail: float = 0.0            # weight of per-cell detail that tells horizontal aliases apart
    dim: int = 128
    noise: float = 1.6             # descriptor noise, relative to the appearance norm
    condition: float = 0.8         # per-session condition offset norm
    condition_rank: int = 8
    cell_size: float = 4.0
    floor_height: float = 4.0
    endpoints: int = 12            # radio endpoints per floor
    rssi_noise: float = 6.0        # dB
    floor_loss: float = 20.0       # dB per floor crossed
    detection_range: float = 25.0  # same-floor free-space range of the receiver
    endpoint_dropout: float = 0.3  # chance an endpoint is off for a whole session
    session_length: int = 28
    query_fraction: float = 0.1    # fraction of sessions held out as queries
    val_fraction: float = 0.2      # fraction of query sessions used for validation
    fov_radius: float = 8.0
    fov_angle: float = math.pi / 2
    relevance_threshold: float = 1.0 / 3.0
    seed: int = 0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.layout == "street-grid" and self.floors != 1:
            raise ConfigError("street-grid layout has a single floor")
        if self.cells < 1 or self.floors < 1 or self.dim < 2 or self.session_length < 1:
            raise ConfigError("cells, floors, session_length must be >= 1 and dim >= 2")
        if self.aliasing < 1 or (self.cells * self.cells) % self.aliasing:
            raise ConfigError(f"aliasing {self.aliasing} must divide the {self.cells ** 2} cells of a floor")
        if min(self.noise, self.condition, self.detail, self.rssi_noise, self.floor_loss) < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.condition_rank < 1 or self.condition_rank > self.dim:
            raise ConfigError("condition_rank must lie in [1, dim]")
        if self.endpoints > self.cells * self.cells:
            raise ConfigError(
                f"{self.endpoints} endpoints per floor exceed the {self.cells ** 2} placement slots"
            )
        if not 0.0 <= self.endpoint_dropout < 1.0:
            raise ConfigError("endpoint_dropout must lie in [0, 1)")
        if not 0.0 <= self.query_fraction < 1.0 or not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("query_fraction and val_fraction must lie in [0, 1)")
        if self.images_per_cell <= 0 or self.cell_size <= 0 or self.fov_radius <= 0:
            raise ConfigError("images_per_cell, cell_size and fov_radius must be positive")

    @property
    def extent(self) -> float:
        return self.cells * self.cell_size

    @property
    def classes(self) -> int:
        return self.cells * self.cells // self.aliasing

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)


def cell_classes(cfg: WorldConfig) -> np.ndarray:
    """Appearance class of each cell (row-major); the pattern tiles ``aliasing`` times."""
    return np.arange(cfg.cells * cfg.cells) % cfg.classes


def _wall_classes(cfg: WorldConfig, pad: int) -> np.ndarray:
    """Class grid of the floor surrounded by ``pad`` rings of wall cells.

    Side walls repeat with the floor pattern, so vertically aliased cells keep
    seeing the same walls; top and bottom walls and corners are unique.
    """
    n, classes = cfg.cells, cfg.classes
    size = n + 2 * pad
    grid = np.full((size, size), -1, dtype=np.int64)
    grid[pad:pad + n, pad:pad + n] = cell_classes(cfg).reshape(n, n)
    period = classes // n if classes % n == 0 else n
    keys: dict[tuple, int] = {}
    for i in range(size):
        for j in range(size):
            if grid[i, j] >= 0:
                continue
            key = ("side", j, (i - pad) % period) if pad <= i < pad + n else ("end", i, j)
            grid[i, j] = keys.setdefault(key, classes + len(keys))
    return grid


# ---------------------------------------------------------------------------
# appearance model
# ---------------------------------------------------------------------------

class Appearance:
    """Smooth map from a camera pose to a noiseless appearance vector."""

    def __init__(self, cfg: WorldConfig, rng: np.random.Generator):
        self.cfg = cfg
        n = cfg.cells
        # a ring of wall cells wide enough that no viewing sector leaves the grid
        self.pad = pad = math.ceil(cfg.fov_radius / cfg.cell_size) + 1
        grid = _wall_classes(cfg, pad)
        table = rng.standard_normal((int(grid.max()) + 1, HEADING_BINS, cfg.dim)) / math.sqrt(cfg.dim)
        self.table = table[grid]
        # per-cell detail is shared by all floors: floors stay indistinguishable
        local = rng.standard_normal((n, n, HEADING_BINS, cfg.dim)) / math.sqrt(cfg.dim)
        self.table[pad:pad + n, pad:pad + n] += cfg.detail * local
        self.size = grid.shape[0]
        self.table = self.table.reshape(self.size * self.size, HEADING_BINS, cfg.dim)
        self.cell = np.arange(self.size * self.size).reshape(self.size, self.size)  # [row=y, col=x]

        # sample points covering the viewing sector, weighted by the area they stand for
        radii = cfg.fov_radius * (np.arange(SECTOR_RINGS) + 0.5) / SECTOR_RINGS
        offsets = cfg.fov_angle * ((np.arange(SECTOR_RAYS) + 0.5) / SECTOR_RAYS - 0.5)
        self.rad, self.off = [a.ravel() for a in np.meshgrid(radii, offsets, indexing="ij")]
        self.weight = self.rad / self.rad.sum()

    def __call__(self, x: float, y: float, heading: float) -> np.ndarray:
        """Area-weighted appearance of everything inside the viewing sector."""
        cfg = self.cfg
        ray = heading + self.off
        top = self.size - 1.0
        gx = np.clip((x + self.rad * np.cos(ray)) / cfg.cell_size - 0.5 + self.pad, 0.0, top)
        gy = np.clip((y + self.rad * np.sin(ray)) / cfg.cell_size - 0.5 + self.pad, 0.0, top)
        x0 = np.minimum(gx.astype(np.int64), self.size - 2)
        y0 = np.minimum(gy.astype(np.int64), self.size - 2)
        fx, fy = gx - x0, gy - y0
        hb = np.mod(ray, 2 * math.pi) / (2 * math.pi) * HEADING_BINS
        b0 = np.floor(hb).astype(np.int64) % HEADING_BINS
        fb = hb - np.floor(hb)
        b1 = (b0 + 1) % HEADING_BINS
        x1, y1 = x0 + 1, y0 + 1
        cells = np.stack([self.cell[y0, x0], self.cell[y0, x1], self.cell[y1, x0], self.cell[y1, x1]])
        wc = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]) * self.weight
        out = np.einsum("cp,cpd->d", wc * (1 - fb), self.table[cells, b0[None, :]])
        out += np.einsum("cp,cpd->d", wc * fb, self.table[cells, b1[None, :]])
        return out


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------

def _walk(cfg: WorldConfig, rng: np.random.Generator, n: int):
    """Random-walk positions and camera headings on one floor."""
    ext = cfg.extent
    x, y = rng.uniform(0.0, ext, size=2)
    walk = rng.uniform(-math.pi, math.pi)
    out = []
    for _ in range(n):
        cam = walk + rng.normal(0.0, 0.5)
        out.append((x, y, math.atan2(math.sin(cam), math.cos(cam))))
        walk += rng.normal(0.0, 0.6)
        step = rng.uniform(0.6, 1.4)
        nx, ny = x + step * math.cos(walk), y + step * math.sin(walk)
        # reflect at the walls
        if not 0.0 <= nx <= ext:
            walk = math.pi - walk
            nx = min(max(nx, 0.0), ext)
        if not 0.0 <= ny <= ext:
            walk = -walk
            ny = min(max(ny, 0.0), ext)
        x, y = nx, ny
    return out


def _endpoints(cfg: WorldConfig, rng: np.random.Generator):
    eps = []
    for f in range(cfg.floors):
        slots = rng.choice(cfg.cells * cfg.cells, size=cfg.endpoints, replace=False)
        for k, s in enumerate(sorted(slots)):
            cy, cx = divmod(int(s), cfg.cells)
            ex = (cx + rng.uniform(0.2, 0.8)) * cfg.cell_size
            ey = (cy + rng.uniform(0.2, 0.8)) * cfg.cell_size
            eps.append({
                "id": f"ap-{f}-{k:03d}",
                "floor": f,
                "position": [ex, ey, f * cfg.floor_height + 2.5],
                "frequency": float(FREQUENCIES[int(rng.integers(len(FREQUENCIES)))]),
            })
    return eps


def _readings(cfg: WorldConfig, rng: np.random.Generator, eps, pos, floor: int, t: float, active):
    """Readings heard around time ``t``: up to 3 s before and 1 s after the image."""
    out = []
    for e, on in zip(eps, active):
        if not on:
            continue
        ex, ey, ez = e["position"]
        d = math.sqrt((pos[0] - ex) ** 2 + (pos[1] - ey) ** 2 + (pos[2] - ez) ** 2)
        f = e["frequency"]
        loss = cfg.floor_loss * abs(e["floor"] - floor)
        threshold = float(distance_to_rssi(cfg.detection_range, f))
        for _ in range(2):
            rssi = float(distance_to_rssi(max(d, 0.5), f)) - loss + rng.normal(0.0, cfg.rssi_noise)
            ts = t + rng.uniform(-3.0, 1.0)
            if rssi >= threshold:
                out.append(RadioReading(e["id"], rssi, f, round(ts, 3)))
    out.sort(key=lambda r: (r.timestamp, r.endpoint))
    return out


def split_sessions(n_sessions: int, cfg: WorldConfig) -> dict[int, str]:
    """Deterministic session-disjoint assignment to db / val / query."""
    rng = np.random.default_rng([cfg.seed, 1])
    order = rng.permutation(n_sessions)
    n_q = int(round(cfg.query_fraction * n_sessions))
    n_val = int(round(cfg.val_fraction * n_q))
    if cfg.val_fraction > 0 and n_q >= 2:
        n_val = max(n_val, 1)
    out = {int(s): "db" for s in order}
    for s in order[:n_val]:
        out[int(s)] = "val"
    for s in order[n_val:n_q]:
        out[int(s)] = "query"
    return out


def split(ds: Dataset, cfg: WorldConfig) -> dict[str, np.ndarray]:
    """Row indices of each split, recomputed from the session ids."""
    assign = split_sessions(int(ds.sessions.max()) + 1 if len(ds.sessions) else 0, cfg)
    labels = np.array([assign[int(s)] for s in ds.sessions])
    return {name: np.flatnonzero(labels == name) for name in ("db", "val", "query")}


def generate(cfg: WorldConfig) -> Dataset:
    """Build a dataset in memory; :func:`write` puts it on disk."""
    rng = np.random.default_rng(cfg.seed)
    look = Appearance(cfg, rng)
    basis, _ = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.condition_rank)))
    eps = _endpoints(cfg, rng)

    total = int(round(cfg.images_per_cell * cfg.cells * cfg.cells * cfg.floors))
    n_sessions = max(1, math.ceil(total / cfg.session_length))
    assign = split_sessions(n_sessions, cfg)

    records, desc = [], []
    t0 = 0.0
    for s in range(n_sessions):
        floor = int(rng.integers(cfg.floors))
        z = floor * cfg.floor_height + 1.5
        cond = basis @ rng.standard_normal(cfg.condition_rank) / math.sqrt(cfg.condition_rank)
        n = min(cfg.session_length, total - s * cfg.session_length)
        active = rng.random(len(eps)) >= cfg.endpoint_dropout
        for i, (x, y, h) in enumerate(_walk(cfg, rng, n)):
            t = t0 + float(i)
            app = look(x, y, h)
            app /= max(np.linalg.norm(app), 1e-12)
            v = app + cfg.condition * cond + cfg.noise * rng.standard_normal(cfg.dim) / math.sqrt(cfg.dim)
            desc.append(v / max(np.linalg.norm(v), 1e-12))
            rid = len(records)
            records.append(Record(rid, assign[s], s, x, y, z, h,
                                  t, floor, _readings(cfg, rng, eps, (x, y, z), floor, t, active)))
        t0 += 1000.0

    ds = Dataset({"world": asdict(cfg), "endpoints": sorted(e["id"] for e in eps), "endpoint_info": eps},
                 records, np.asarray(desc, dtype=np.float32).reshape(len(records), cfg.dim), {})
    db = ds.indices("db")
    for split_name in ("val", "query"):
        rows = ds.indices(split_name)
        if rows.size == 0 or db.size == 0:
            continue
        rel = ds.relevance(rows, db)
        for k, r in enumerate(rows):
            hits = ds.ids[db[rel[k]]]
            ds.labels[int(ds.ids[r])] = [int(i) for i in hits]
            if hits.size == 0:
                records[r].flags.append("no_relevant")
    return ds


def write(cfg: WorldConfig, out) -> Dataset:
    ds = generate(cfg)
    save_dataset(out, ds)
    return ds
