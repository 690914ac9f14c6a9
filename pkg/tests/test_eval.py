"""Accuracy metric tests: Hausdorff, Canny edges, landmark errors."""

import numpy as np
import pytest

from defreg.errors import FormatError
from defreg.eval import (
    LandmarkPair,
    canny_edges,
    edge_hd,
    evaluation_report,
    hausdorff,
    landmark_errors,
    read_landmark_pairs,
    write_landmark_pairs,
)
from defreg.volume import DenseDeformation, Grid, ScalarVolume, zero_field


def binary_sphere(dims=32, radius=10.0, center=None, value=1000.0) -> ScalarVolume:
    grid = Grid((dims,) * 3)
    centers = grid.voxel_centers()
    if center is None:
        center = (np.array(grid.dims) - 1) / 2.0
    r = np.linalg.norm(centers - np.asarray(center, dtype=float), axis=-1)
    vox = np.where(r <= radius, value, 0.0).astype(np.float32)
    return ScalarVolume(grid, vox)


class TestHausdorff:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(40, 3))
        h, h_ab, h_ba = hausdorff(a, a)
        assert h == h_ab == h_ba == 0.0

    def test_analytic_two_points(self):
        a = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        b = np.array([[0.0, 0.0, 0.0]])
        h, h_ab, h_ba = hausdorff(a, b)
        assert (h, h_ab, h_ba) == (10.0, 10.0, 0.0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-5, 5, size=(200, 3))
        b = rng.uniform(-5, 5, size=(200, 3))
        h, h_ab, h_ba = hausdorff(a, b)
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        brute_ab = d.min(axis=1).max()
        brute_ba = d.min(axis=0).max()
        assert abs(h_ab - brute_ab) <= 1e-12
        assert abs(h_ba - brute_ba) <= 1e-12
        assert abs(h - max(brute_ab, brute_ba)) <= 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(30, 3))
        b = rng.normal(size=(25, 3))
        assert hausdorff(a, b)[0] == hausdorff(b, a)[0]

    def test_far_point_never_decreases_directed_distance(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(20, 3))
        b = rng.normal(size=(20, 3))
        _, h_ab, _ = hausdorff(a, b)
        a2 = np.vstack([a, [100.0, 100.0, 100.0]])
        _, h_ab2, _ = hausdorff(a2, b)
        assert h_ab2 >= h_ab

    def test_percentile_bounded_by_max(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(50, 3))
        b = rng.normal(size=(50, 3))
        assert hausdorff(a, b, percentile=95.0)[0] <= hausdorff(a, b)[0]

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty"):
            hausdorff(np.zeros((0, 3)), np.zeros((1, 3)))
        with pytest.raises(ValueError, match="empty"):
            hausdorff(np.zeros((1, 3)), np.zeros((0, 3)))


class TestCannyEdges:
    def test_constant_volume_gives_no_edges(self):
        vol = ScalarVolume(Grid((20, 20, 20)), np.full((20, 20, 20), 7.0, dtype=np.float32))
        assert len(canny_edges(vol)) == 0

    def test_high_threshold_above_max_gives_no_edges(self):
        vol = binary_sphere()
        assert len(canny_edges(vol, high=1.5, low=0.5)) == 0

    def test_sphere_edges_near_surface_with_coverage(self):
        radius = 10.0
        vol = binary_sphere(radius=radius)
        center = (np.array(vol.grid.dims) - 1) / 2.0
        pts = canny_edges(vol)
        assert len(pts) > 100
        r = np.linalg.norm(pts - center, axis=1)
        assert np.all(np.abs(r - radius) <= 1.5)
        # golden-spiral directions; every surface patch needs a nearby edge point
        k = np.arange(500)
        z = 1.0 - 2.0 * (k + 0.5) / 500
        phi = k * np.pi * (3.0 - np.sqrt(5.0))
        s = np.sqrt(1.0 - z * z)
        dirs = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
        surface = center + radius * dirs
        from scipy.spatial import cKDTree

        d, _ = cKDTree(pts).query(surface, k=1)
        assert np.mean(d <= 1.5) >= 0.9

    def test_translation_equivariance(self):
        base = binary_sphere(dims=48, radius=8.0, center=(20.0, 20.0, 20.0))
        shifted = binary_sphere(dims=48, radius=8.0, center=(23.0, 22.0, 21.0))
        a = canny_edges(base)
        b = canny_edges(shifted)
        assert len(a) == len(b)
        a_sorted = a[np.lexsort(a.T)]
        b_sorted = b[np.lexsort(b.T)] - np.array([3.0, 2.0, 1.0])
        np.testing.assert_allclose(a_sorted, b_sorted, atol=1e-9)

    def test_parameter_validation(self):
        vol = binary_sphere()
        with pytest.raises(ValueError, match="sigma"):
            canny_edges(vol, sigma=0.0)
        with pytest.raises(ValueError, match="low < high"):
            canny_edges(vol, low=0.3, high=0.2)


class TestEdgeHd:
    def test_identical_volumes_give_zero(self):
        vol = binary_sphere()
        assert edge_hd(vol, vol) == 0.0

    def test_known_shift_bounded(self):
        a = binary_sphere(dims=48, radius=8.0, center=(20.0, 20.0, 20.0))
        b = binary_sphere(dims=48, radius=8.0, center=(23.0, 20.0, 20.0))
        hd = edge_hd(a, b)
        assert 3.0 - 1.5 <= hd <= 3.0 + 1.5

    def test_empty_edges_raise(self):
        flat = ScalarVolume(Grid((20, 20, 20)), np.zeros((20, 20, 20), dtype=np.float32))
        with pytest.raises(ValueError, match="empty edge set"):
            edge_hd(flat, flat)


class TestLandmarkErrors:
    def test_zero_field_coincident_pairs(self):
        field = zero_field(Grid((16, 16, 16)))
        pairs = [LandmarkPair("A", (3.0, 4.0, 5.0), (3.0, 4.0, 5.0))]
        rep = landmark_errors(pairs, field)
        assert rep.min_mm == rep.max_mm == rep.mean_mm == 0.0

    def test_zero_field_offset_pairs(self):
        field = zero_field(Grid((16, 16, 16)))
        pairs = [
            LandmarkPair(n, (5.0 + i, 5.0, 5.0), (8.0 + i, 9.0, 5.0))
            for i, n in enumerate("ABC")
        ]
        rep = landmark_errors(pairs, field)
        assert rep.min_mm == pytest.approx(5.0)
        assert rep.max_mm == pytest.approx(5.0)
        assert rep.mean_mm == pytest.approx(5.0)
        assert rep.per_landmark == {"A": pytest.approx(5.0), "B": pytest.approx(5.0),
                                    "C": pytest.approx(5.0)}

    def test_field_matching_offsets_gives_zero(self):
        grid = Grid((16, 16, 16))
        vectors = np.broadcast_to(
            np.array([1.0, -2.0, 0.5], dtype=np.float32), grid.dims + (3,)
        ).copy()
        field = DenseDeformation(grid, vectors)
        pairs = [LandmarkPair("A", (4.0, 6.0, 8.0), (5.0, 4.0, 8.5))]
        rep = landmark_errors(pairs, field)
        assert rep.mean_mm == pytest.approx(0.0, abs=1e-6)

    def test_outside_landmark_excluded_and_reported(self):
        field = zero_field(Grid((16, 16, 16)))
        pairs = [
            LandmarkPair("in", (5.0, 5.0, 5.0), (5.0, 5.0, 5.0)),
            LandmarkPair("out", (50.0, 5.0, 5.0), (50.0, 5.0, 5.0)),
        ]
        rep = landmark_errors(pairs, field)
        assert rep.excluded == ["out"]
        assert list(rep.per_landmark) == ["in"]

    def test_all_outside_raises(self):
        field = zero_field(Grid((16, 16, 16)))
        pairs = [LandmarkPair("out", (50.0, 5.0, 5.0), (50.0, 5.0, 5.0))]
        with pytest.raises(ValueError, match="outside"):
            landmark_errors(pairs, field)

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="at least one"):
            landmark_errors([], zero_field(Grid((16, 16, 16))))


class TestReportAndCsv:
    def test_report_mirrors_table_columns(self):
        from defreg.eval import LandmarkReport

        rep = evaluation_report(
            2.5, LandmarkReport(0.5, 3.0, 1.2), n_tets=1000, n_vertices=300
        )
        assert rep["HD"] == 2.5
        assert rep["Min error"] == 0.5
        assert rep["Max error"] == 3.0
        assert rep["Mean error"] == 1.2
        assert rep["# tets"] == 1000
        assert rep["# vertices"] == 300
        assert "note" in rep

    def test_csv_round_trip(self, tmp_path):
        pairs = [
            LandmarkPair("A", (1.0, 2.5, -3.0), (1.5, 2.0, -3.5)),
            LandmarkPair("mid line", (0.1, 0.2, 0.3), (0.4, 0.5, 0.6)),
        ]
        path = tmp_path / "lm.csv"
        write_landmark_pairs(pairs, path)
        back = read_landmark_pairs(path)
        assert back == pairs

    def test_bad_header_raises(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("name,x,y,z\nA,1,2,3\n")
        with pytest.raises(FormatError, match="header"):
            read_landmark_pairs(p)

    def test_bad_row_raises(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("name,pre_x,pre_y,pre_z,intra_x,intra_y,intra_z\nA,1,2\n")
        with pytest.raises(FormatError, match="line 2"):
            read_landmark_pairs(p)

    def test_non_numeric_raises(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("name,pre_x,pre_y,pre_z,intra_x,intra_y,intra_z\nA,1,2,x,4,5,6\n")
        with pytest.raises(FormatError, match="line 2"):
            read_landmark_pairs(p)
