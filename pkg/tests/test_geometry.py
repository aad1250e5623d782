from __future__ import annotations

import math

import numpy as np
import pytest

from gcsa import geometry
from gcsa.errors import ShapeError
from gcsa.geometry import (
    BACKEND, clip_convex, monte_carlo_overlap, overlap_matrix, overlap_pairs, polygon_area,
    sector_area, sector_polygon,
)

R, THETA = 50.0, math.pi / 2


def _random_poses(rng, n, spread=60.0):
    return np.column_stack([rng.uniform(0, spread, n), rng.uniform(0, spread, n),
                            np.zeros(n), rng.uniform(-math.pi, math.pi, n)])


def test_polygon_area_unit_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert polygon_area(sq) == pytest.approx(1.0)
    assert polygon_area(sq[:2]) == 0.0


def test_clip_convex_squares():
    a = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], dtype=float)
    b = a + 1.0
    assert polygon_area(clip_convex(a, b)) == pytest.approx(1.0)
    far = a + 10.0
    assert polygon_area(clip_convex(a, far)) == 0.0


def test_sector_area_approaches_exact_sector():
    exact = 0.5 * R * R * THETA
    assert sector_area(R, THETA, 64) == pytest.approx(exact, rel=2e-4)
    assert polygon_area(sector_polygon(0, 0, 0.3, R, THETA)) == pytest.approx(sector_area(R, THETA))


def test_identical_poses_overlap_one():
    p = [[3.0, -2.0, 0.0, 1.1]]
    assert overlap_matrix(p, p, R, THETA)[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_far_apart_and_opposite_headings_zero():
    a = [[0.0, 0.0, 0.0, 0.0]]
    assert overlap_matrix(a, [[200.0, 0.0, 0.0, 0.0]], R, THETA)[0, 0] == 0.0
    # back to back: sectors only share the apex
    assert overlap_matrix(a, [[0.0, 0.0, 0.0, math.pi]], R, THETA)[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_elevation_gate():
    a = [[0.0, 0.0, 0.0, 0.0]]
    b = [[0.0, 0.0, 4.0, 0.0]]
    assert overlap_matrix(a, b, R, THETA)[0, 0] == pytest.approx(1.0)
    assert overlap_matrix(a, b, R, THETA, dz_max=2.0)[0, 0] == 0.0


def test_shifted_sector_against_monte_carlo():
    # same heading, 10 m apart along the viewing direction
    a = np.array([0.0, 0.0, 0.0, 0.0])
    b = np.array([10.0, 0.0, 0.0, 0.0])
    mc = monte_carlo_overlap(a, b, R, THETA, samples=2_000_000, rng=np.random.default_rng(3))
    assert overlap_matrix([a], [b], R, THETA)[0, 0] == pytest.approx(mc, abs=2e-3)


def test_overlap_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    p = _random_poses(rng, 40)
    m = overlap_matrix(p, p, R, THETA)
    assert np.abs(m - m.T).max() < 1e-9
    assert m.min() >= 0.0 and m.max() <= 1.0 + 1e-12


def test_backends_agree():
    rng = np.random.default_rng(1)
    a, b = _random_poses(rng, 12), _random_poses(rng, 9)
    py = overlap_matrix(a, b, R, THETA, backend="python")
    if BACKEND == "cython":
        np.testing.assert_allclose(overlap_matrix(a, b, R, THETA, backend="cython"), py, atol=1e-12)
    np.testing.assert_allclose(overlap_pairs(a[:9], b, R, THETA, backend="python"),
                               np.diag(py[:9]), atol=1e-12)


def test_pose_shape_errors():
    with pytest.raises(ShapeError):
        overlap_matrix(np.zeros((2, 3)), np.zeros((2, 4)), R, THETA)
    with pytest.raises(ShapeError):
        overlap_pairs(np.zeros((2, 4)), np.zeros((3, 4)), R, THETA)


def test_backend_is_selected_at_import():
    assert geometry.BACKEND in ("cython", "python")
