"""On-disk dataset format shared by the generator, trainer and CLI.

A dataset directory holds::

    meta.json         descriptor dim, endpoint registry, world config, format version
    records.jsonl     one object per image (id, split, session, pose, heading,
                      timestamp, floor, radio readings)
    descriptors.f32   row-major little-endian float32, M x D, records order
    labels.jsonl      one object per evaluation query: id -> relevant ids
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affinity import EndpointRegistry, RadioReading, RadioScan, SideInfoConfig, radio_descriptor, window_readings
from .errors import DataError
from .geometry import overlap_matrix

FORMAT_VERSION = 1
SPLITS = ("db", "val", "query")


@dataclass
class Record:
    id: int
    split: str
    session: int
    x: float
    y: float
    z: float
    heading: float
    timestamp: float
    floor: int = 0
    readings: list[RadioReading] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "session": self.session,
            "pose": [self.x, self.y, self.z],
            "heading": self.heading,
            "timestamp": self.timestamp,
            "floor": self.floor,
            "radio": [[r.endpoint, r.rssi, r.frequency, r.timestamp] for r in self.readings],
            "flags": self.flags,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Record":
        try:
            x, y, z = obj["pose"]
            readings = [RadioReading(str(e), float(s), float(f), float(t)) for e, s, f, t in obj.get("radio", [])]
            return cls(int(obj["id"]), str(obj["split"]), int(obj["session"]), float(x), float(y), float(z),
                       float(obj["heading"]), float(obj["timestamp"]), int(obj.get("floor", 0)),
                       readings, list(obj.get("flags", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed record {obj.get('id', '?')}: {exc}") from exc


@dataclass
class Dataset:
    meta: dict
    records: list[Record]
    descriptors: np.ndarray
    labels: dict[int, list[int]]
    root: Path | None = None

    def __post_init__(self):
        if self.descriptors.shape[0] != len(self.records):
            raise DataError(
                f"{len(self.records)} records but {self.descriptors.shape[0]} descriptor rows"
            )
        self.ids = np.array([r.id for r in self.records], dtype=np.int64)
        self.sessions = np.array([r.session for r in self.records], dtype=np.int64)
        self.splits = np.array([r.split for r in self.records])
        self.poses = np.array([[r.x, r.y, r.z, r.heading] for r in self.records], dtype=np.float64).reshape(-1, 4)
        self.floors = np.array([r.floor for r in self.records], dtype=np.int64)
        self._row = {int(i): k for k, i in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return int(self.descriptors.shape[1])

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
        return np.flatnonzero(self.splits == split)

    def row(self, rid: int) -> int:
        try:
            return self._row[int(rid)]
        except KeyError:
            raise DataError(f"unknown record id {rid}") from None

    def registry(self) -> EndpointRegistry:
        """Endpoints heard in the database split (closed world for queries)."""
        return EndpointRegistry.from_scans(RadioScan(r.readings) for r in self.records if r.split == "db")

    def radio_descriptors(self, cfg: SideInfoConfig, causal_splits=("val", "query")) -> np.ndarray:
        """Radio descriptors for every record.

        Readings are restricted to ``cfg.radio_window`` seconds around the
        image; for ``causal_splits`` only readings at or before the image
        timestamp are used.
        """
        reg = self.registry()
        out = np.empty((len(self.records), len(reg)))
        for k, r in enumerate(self.records):
            kept = window_readings(r.readings, r.timestamp, cfg.radio_window, causal=r.split in causal_splits)
            out[k] = radio_descriptor(RadioScan(kept, r.timestamp), reg, cfg)
        return out

    def relevance(self, rows_a, rows_b) -> np.ndarray:
        """Ground-truth relevance: FoV overlap above the threshold on the same floor."""
        world = self.meta["world"]
        a, b = np.atleast_1d(rows_a), np.atleast_1d(rows_b)
        ov = overlap_matrix(self.poses[a], self.poses[b], world["fov_radius"], world["fov_angle"])
        same_floor = self.floors[a][:, None] == self.floors[b][None, :]
        return (ov > world["relevance_threshold"]) & same_floor


def save_dataset(root: str | Path, ds: Dataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = dict(ds.meta, format_version=FORMAT_VERSION, dim=ds.dim, count=len(ds.records))
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    with open(root / "records.jsonl", "w") as fh:
        for r in ds.records:
            fh.write(json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
    (root / "descriptors.f32").write_bytes(np.ascontiguousarray(ds.descriptors, dtype="<f4").tobytes())
    with open(root / "labels.jsonl", "w") as fh:
        for qid in sorted(ds.labels):
            fh.write(json.dumps({"id": qid, "relevant": sorted(ds.labels[qid])}, separators=(",", ":")) + "\n")


def read_labels(path: str | Path) -> dict[int, list[int]]:
    labels = {}
    try:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    labels[int(obj["id"])] = [int(x) for x in obj["relevant"]]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read labels {path}: {exc}") from exc
    return labels


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    try:
        meta = json.loads((root / "meta.json").read_text())
        with open(root / "records.jsonl") as fh:
            records = [Record.from_json(json.loads(line)) for line in fh if line.strip()]
        raw = (root / "descriptors.f32").read_bytes()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset at {root}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{root}: unsupported dataset format {meta.get('format_version')!r}")
    dim = int(meta["dim"])
    if len(raw) != 4 * dim * len(records):
        raise DataError(f"{root}: descriptors.f32 has {len(raw)} bytes, expected {4 * dim * len(records)}")
    desc = np.frombuffer(raw, dtype="<f4").reshape(len(records), dim).astype(np.float32)
    labels = read_labels(root / "labels.jsonl") if (root / "labels.jsonl").exists() else {}
    return Dataset(meta, records, desc, labels, root)
