"""Field-of-view overlap between 2-D viewing sectors.

A camera at ``(x, y)`` looking along ``heading`` (radians, measured from the
+x axis towards +y) sees a circular sector of radius ``r`` and opening
angle ``theta``. Each sector is discretized into an apex plus ``n_chords``
arc chords; the overlap of two sectors is the area of the clipped convex
polygons divided by the area of one discretized sector, so identical poses
give exactly 1.

The batch kernels come from the compiled ``_kernels`` module when it is
importable; otherwise (or when ``GCSA_PURE_PYTHON`` is set) the numpy
implementation below is used.
"""
from __future__ import annotations

import math
import os

import numpy as np

from .errors import ShapeError

N_CHORDS = 64

try:
    if os.environ.get("GCSA_PURE_PYTHON"):
        raise ImportError("pure-Python backend requested")
    from . import _kernels
except ImportError:
    _kernels = None

BACKEND = "cython" if _kernels is not None else "python"


def sector_polygon(x: float, y: float, heading: float, r: float, theta: float,
                   n_chords: int = N_CHORDS) -> np.ndarray:
    """Counter-clockwise vertices (apex first) of a discretized sector."""
    ang = heading - 0.5 * theta + np.arange(n_chords + 1) * (theta / n_chords)
    arc = np.stack([x + r * np.cos(ang), y + r * np.sin(ang)], axis=1)
    return np.vstack([[x, y], arc])


def sector_area(r: float, theta: float, n_chords: int = N_CHORDS) -> float:
    return 0.5 * r * r * n_chords * math.sin(theta / n_chords)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    nc = len(clip)
    for j in range(nc):
        if len(out) < 3:
            return np.empty((0, 2))
        ax, ay = clip[j]
        bx, by = clip[(j + 1) % nc]
        src, out = out, []
        sx, sy = src[-1]
        ds = (bx - ax) * (sy - ay) - (by - ay) * (sx - ax)
        for ex, ey in src:
            de = (bx - ax) * (ey - ay) - (by - ay) * (ex - ax)
            if de >= 0.0:
                if ds < 0.0:
                    t = ds / (ds - de)
                    out.append((sx + t * (ex - sx), sy + t * (ey - sy)))
                out.append((ex, ey))
            elif ds >= 0.0:
                t = ds / (ds - de)
                out.append((sx + t * (ex - sx), sy + t * (ey - sy)))
            sx, sy, ds = ex, ey, de
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def _pair_py(pa, pb, r, theta, n_chords, dz_max, norm) -> float:
    if abs(pa[2] - pb[2]) > dz_max:
        return 0.0
    dx, dy = pa[0] - pb[0], pa[1] - pb[1]
    if dx * dx + dy * dy >= 4.0 * r * r:
        return 0.0
    sa = sector_polygon(pa[0], pa[1], pa[3], r, theta, n_chords)
    sb = sector_polygon(pb[0], pb[1], pb[3], r, theta, n_chords)
    return polygon_area(clip_convex(sa, sb)) / norm


def _as_poses(p) -> np.ndarray:
    arr = np.ascontiguousarray(np.atleast_2d(np.asarray(p, dtype=np.float64)))
    if arr.shape[1] != 4:
        raise ShapeError(f"pose arrays need columns (x, y, z, heading), got shape {arr.shape}")
    return arr


def overlap_matrix(a, b, r: float, theta: float, dz_max: float | None = None,
                   n_chords: int = N_CHORDS, backend: str | None = None) -> np.ndarray:
    """Pairwise overlap of pose rows ``a`` (n, 4) against ``b`` (m, 4)."""
    a, b = _as_poses(a), _as_poses(b)
    gate = math.inf if dz_max is None else float(dz_max)
    backend = backend or BACKEND
    if backend == "cython":
        return _kernels.overlap_matrix(a, b, float(r), float(theta), int(n_chords), gate)
    norm = sector_area(r, theta, n_chords)
    out = np.zeros((len(a), len(b)))
    for i, pa in enumerate(a):
        for j, pb in enumerate(b):
            out[i, j] = _pair_py(pa, pb, r, theta, n_chords, gate, norm)
    return out


def overlap_pairs(a, b, r: float, theta: float, dz_max: float | None = None,
                  n_chords: int = N_CHORDS, backend: str | None = None) -> np.ndarray:
    """Row-wise overlap of ``a[i]`` with ``b[i]``."""
    a, b = _as_poses(a), _as_poses(b)
    if a.shape != b.shape:
        raise ShapeError(f"overlap_pairs needs equal shapes, got {a.shape} and {b.shape}")
    gate = math.inf if dz_max is None else float(dz_max)
    backend = backend or BACKEND
    if backend == "cython":
        return _kernels.overlap_pairs(a, b, float(r), float(theta), int(n_chords), gate)
    norm = sector_area(r, theta, n_chords)
    return np.array([_pair_py(pa, pb, r, theta, n_chords, gate, norm) for pa, pb in zip(a, b)])


def monte_carlo_overlap(pa, pb, r: float, theta: float, samples: int = 1_000_000,
                        rng: np.random.Generator | None = None) -> float:
    """Rejection-sampling estimate of the exact (curved) sector overlap.

    Independent of the polygon path: points are drawn uniformly in the
    exact sector of ``pa`` and tested for membership in the exact sector of
    ``pb``.
    """
    rng = rng or np.random.default_rng(0)
    rad = r * np.sqrt(rng.random(samples))
    ang = pa[3] + theta * (rng.random(samples) - 0.5)
    px = pa[0] + rad * np.cos(ang)
    py = pa[1] + rad * np.sin(ang)
    dx, dy = px - pb[0], py - pb[1]
    inside_r = dx * dx + dy * dy <= r * r
    rel = np.angle(np.exp(1j * (np.arctan2(dy, dx) - pb[3])))
    inside = inside_r & (np.abs(rel) <= 0.5 * theta)
    return float(inside.mean())
