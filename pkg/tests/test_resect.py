"""Nested-EM resection handling: BGI segmentation, removed-submesh growth,
soft correspondence, and the joint registration driver."""

import json
from collections import deque
from itertools import combinations

import numpy as np
import pytest
from scipy import ndimage

from defreg import fem
from defreg.featmatch import (
    FeatureMatch,
    FeaturePoint,
    MatchConfig,
    block_match,
    select_features,
)
from defreg.fem import Material, SolveConfig
from defreg.mesh import TetMesh, i2m_bcc
from defreg.resect import (
    Correspondence,
    NemConfig,
    estimate_correspondence,
    grow_removed,
    nem_register,
    segment_bgi,
)
from defreg.volume import Grid, LabelVolume, ScalarVolume

MAT = {1: Material(3000.0, 0.45), 2: Material(9000.0, 0.45)}


def box_labels(dims=24, lo=6, hi=18) -> LabelVolume:
    lab = np.zeros((dims,) * 3, dtype=np.uint16)
    lab[lo:hi, lo:hi, lo:hi] = 1
    return LabelVolume(Grid((dims,) * 3), lab)


def ball_label(grid: Grid, centers_radii) -> LabelVolume:
    """Union of balls flagged 1 on the grid (mm == voxel for unit spacing)."""
    pos = grid.voxel_centers()
    mask = np.zeros(grid.dims, dtype=bool)
    for center, radius in centers_radii:
        r = np.linalg.norm(pos - np.asarray(center, dtype=float), axis=-1)
        mask |= r <= radius
    return LabelVolume(grid, mask.astype(np.uint16))


def adjacency_oracle(tets: np.ndarray) -> list:
    faces: dict = {}
    for t, tet in enumerate(tets):
        for f in combinations(sorted(int(v) for v in tet), 3):
            faces.setdefault(f, []).append(t)
    nbrs: list = [set() for _ in range(len(tets))]
    for tids in faces.values():
        for a, b in combinations(tids, 2):
            nbrs[a].add(b)
            nbrs[b].add(a)
    return nbrs


def candidates_oracle(mesh: TetMesh, bgi: LabelVolume) -> np.ndarray:
    vox = np.rint(bgi.grid.mm_to_voxel(mesh.centroids())).astype(int)
    ok = np.all((vox >= 0) & (vox < np.array(bgi.dims)), axis=1)
    cand = np.zeros(mesh.n_tets, dtype=bool)
    idx = np.flatnonzero(ok)
    cand[idx] = bgi.labels[tuple(vox[idx].T)] == 1
    return cand


def components_oracle(cand: np.ndarray, nbrs: list) -> list:
    seen = np.zeros(len(cand), dtype=bool)
    comps = []
    for s in np.flatnonzero(cand):
        if seen[s]:
            continue
        comp, queue = [], deque([s])
        seen[s] = True
        while queue:
            t = queue.popleft()
            comp.append(t)
            for nb in nbrs[t]:
                if cand[nb] and not seen[nb]:
                    seen[nb] = True
                    queue.append(nb)
        comps.append(sorted(comp))
    return sorted(comps, key=lambda c: (-len(c), c[0]))


def direct_energy(mesh: TetMesh, materials, sources, confidences, corr, u, cfg):
    """Recompute the cost by per-element and per-match summation."""
    strain = 0.0
    uvec = np.asarray(u, dtype=np.float64)
    for t in np.flatnonzero(~mesh.removed):
        vidx = mesh.tets[t]
        ke = fem.element_stiffness(mesh.vertices[vidx], materials[int(mesh.labels[t])])
        dofs = (3 * vidx[:, None] + np.arange(3)).ravel()
        ue = uvec[dofs]
        strain += float(ue @ ke @ ue)

    kmat = fem.assemble_stiffness(mesh, materials)
    diag = kmat.diagonal()
    scale = float(diag[diag > 0].mean())
    tids, bary = fem.locate_in_mesh(mesh, sources)
    proj = corr.project()
    orphan = corr.orphaned
    udisp = uvec.reshape(-1, 3)
    match = 0.0
    for i in range(len(sources)):
        if tids[i] < 0 or orphan[i]:
            continue
        hu = bary[i] @ udisp[mesh.tets[tids[i]]]
        d = proj[i] - sources[i]
        match += cfg.lambda1 * confidences[i] * scale * float(np.sum((hu - d) ** 2))

    volume = cfg.lambda2 * float(mesh.tet_volumes()[mesh.removed].sum())
    return strain + match + volume


def assert_inner_monotone(trace):
    assert trace
    for a, b in zip(trace, trace[1:]):
        if b["outer"] == a["outer"]:
            assert b["J"] <= a["J"] * (1 + 1e-6) + 1e-12
    json.dumps(trace)


class TestSegmentBgi:
    def test_resected_phantom_flags_all_carved_voxels(self, two_tissue_40, resected_40):
        _, pre_lab, _ = two_tissue_40
        res_scalar, res_lab, _ = resected_40
        carved = (pre_lab.labels > 0) & (res_lab.labels == 0)
        assert carved.any()
        bgi = segment_bgi(res_scalar, 100.0)
        flagged = bgi.labels == 1
        assert flagged[carved].all()
        # flagged voxels are dark by definition
        assert not (res_scalar.voxels[flagged] >= 100.0).any()
        # far corner lies outside the brain extent
        assert not flagged[0, 0, 0]

    def test_threshold_zero_on_nonnegative_volume_is_empty(self, caplog, two_tissue_32):
        scalar, _, _ = two_tissue_32
        with caplog.at_level("WARNING", logger="defreg.resect"):
            bgi = segment_bgi(scalar, 0.0)
        assert not bgi.labels.any()
        assert "no voxels" in caplog.text

    def test_uniform_dark_volume_flags_everything(self, caplog):
        vol = ScalarVolume(Grid((16, 16, 16)), np.full((16, 16, 16), 5.0, np.float32))
        with caplog.at_level("WARNING", logger="defreg.resect"):
            bgi = segment_bgi(vol, 100.0)
        assert bgi.labels.all()
        assert "whole volume" in caplog.text
        assert "every voxel" in caplog.text


@pytest.fixture(scope="module")
def mesh():
    return i2m_bcc(box_labels(), 3.0)


class TestGrowRemoved:
    def test_first_call_takes_largest_connected_component(self, mesh):
        bgi = ball_label(mesh_grid(), [((14.0, 14.0, 14.0), 3.5),
                                       ((8.0, 8.0, 8.0), 1.0)])
        cand = candidates_oracle(mesh, bgi)
        nbrs = adjacency_oracle(mesh.tets)
        comps = components_oracle(cand, nbrs)
        assert len(comps) >= 2, "fixture must produce an isolated far candidate"
        removed = grow_removed(mesh, bgi, np.zeros(mesh.n_tets, dtype=bool))
        assert sorted(np.flatnonzero(removed)) == comps[0]

    def test_second_call_adds_candidates_reachable_from_current_set(self, mesh):
        bgi1 = ball_label(mesh_grid(), [((14.0, 14.0, 14.0), 3.5)])
        removed1 = grow_removed(mesh, bgi1, np.zeros(mesh.n_tets, dtype=bool))
        assert removed1.any()
        bgi2 = ball_label(mesh_grid(), [((14.0, 14.0, 14.0), 5.0),
                                        ((8.0, 8.0, 8.0), 1.0)])
        removed2 = grow_removed(mesh, bgi2, removed1)
        # oracle: flood from removed1 through the enlarged candidate set
        cand2 = candidates_oracle(mesh, bgi2)
        nbrs = adjacency_oracle(mesh.tets)
        expect = removed1.copy()
        queue = deque(np.flatnonzero(removed1))
        while queue:
            t = queue.popleft()
            for nb in nbrs[t]:
                if cand2[nb] and not expect[nb]:
                    expect[nb] = True
                    queue.append(nb)
        assert np.array_equal(removed2, expect)
        assert removed2.sum() > removed1.sum()
        assert removed2[removed1].all(), "growth must never un-remove"
        # the far candidate component stays out: not reachable
        far = candidates_oracle(mesh, ball_label(mesh_grid(), [((8.0, 8.0, 8.0), 1.0)]))
        assert far.any()
        assert not removed2[far].any()

    def test_empty_bgi_leaves_removed_unchanged(self, mesh):
        empty = LabelVolume(mesh_grid(), np.zeros(mesh_grid().dims, np.uint16))
        start = np.zeros(mesh.n_tets, dtype=bool)
        start[:3] = True
        out = grow_removed(mesh, empty, start)
        assert np.array_equal(out, start)
        out0 = grow_removed(mesh, empty, np.zeros(mesh.n_tets, dtype=bool))
        assert not out0.any()

    def test_wrong_flag_shape_raises(self, mesh):
        bgi = ball_label(mesh_grid(), [((14.0, 14.0, 14.0), 3.0)])
        with pytest.raises(ValueError, match="one entry per tet"):
            grow_removed(mesh, bgi, np.zeros(3, dtype=bool))


def mesh_grid() -> Grid:
    return Grid((24, 24, 24))


class TestEstimateCorrespondence:
    def test_coincident_targets_concentrate_as_sigma_shrinks(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 20, size=(30, 3))
        corr = estimate_correspondence(pts, pts, sigma=1e-3)
        assert not corr.orphaned.any()
        np.testing.assert_array_equal(corr.indices[:, 0], np.arange(30))
        np.testing.assert_allclose(corr.weights[:, 0], 1.0, atol=1e-12)
        np.testing.assert_allclose(corr.project(), pts, atol=1e-9)

    def test_two_equidistant_targets_split_evenly(self):
        corr = estimate_correspondence(
            [[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], sigma=0.7
        )
        np.testing.assert_allclose(np.sort(corr.weights[0]), [0.5, 0.5])
        np.testing.assert_allclose(corr.project()[0], [0.0, 0.0, 0.0], atol=1e-15)

    def test_source_beyond_cutoff_is_orphaned(self):
        corr = estimate_correspondence(
            [[10.0, 0.0, 0.0], [0.1, 0.0, 0.0]], [[0.0, 0.0, 0.0]], sigma=1.0
        )
        assert corr.orphaned.tolist() == [True, False]
        assert corr.indices[0, 0] == -1
        assert corr.weights[0].sum() == 0.0
        np.testing.assert_array_equal(corr.project()[0], [0.0, 0.0, 0.0])

    def test_rows_are_convex_combinations(self):
        rng = np.random.default_rng(3)
        src = rng.uniform(0, 30, size=(100, 3))
        tgt = rng.uniform(0, 30, size=(40, 3))
        corr = estimate_correspondence(src, tgt, sigma=2.5)
        sums = corr.row_sums()
        orphan = corr.orphaned
        np.testing.assert_allclose(sums[~orphan], 1.0, atol=1e-12)
        assert (sums[orphan] == 0.0).all()
        assert (corr.weights >= 0.0).all() and (corr.weights <= 1.0).all()
        # nearest candidate always carries the largest weight
        live = corr.weights[~orphan]
        assert np.all(live[:, 0] >= live.max(axis=1) - 1e-15)

    def test_validation(self):
        with pytest.raises(ValueError, match="at least one target"):
            estimate_correspondence([[0.0, 0.0, 0.0]], np.zeros((0, 3)), sigma=1.0)
        with pytest.raises(ValueError, match="sigma"):
            estimate_correspondence([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], sigma=0.0)
        with pytest.raises(ValueError, match="k must be"):
            estimate_correspondence([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], 1.0, k=0)


class TestNemConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="lambda1"):
            NemConfig(lambda1=0.0)
        with pytest.raises(ValueError, match="lambda2"):
            NemConfig(lambda2=-0.1)
        with pytest.raises(ValueError, match="sigma"):
            NemConfig(sigma=0.0)
        with pytest.raises(ValueError, match="anneal"):
            NemConfig(anneal=0.0)
        with pytest.raises(ValueError, match="anneal"):
            NemConfig(anneal=1.2)
        with pytest.raises(ValueError, match="inner_max_iters"):
            NemConfig(inner_max_iters=0)
        with pytest.raises(ValueError, match="bgi_threshold"):
            NemConfig(bgi_threshold=float("inf"))
        assert NemConfig(anneal=1.0).anneal == 1.0


def lattice_matches(lo, hi, step, rng, spread=1.5):
    """Synthetic full-confidence matches on an integer lattice."""
    axes = np.arange(lo, hi + 1, step)
    centers = np.stack(np.meshgrid(axes, axes, axes, indexing="ij"), -1).reshape(-1, 3)
    disp = rng.uniform(-spread, spread, size=(len(centers), 3))
    out = []
    for i, (c, d) in enumerate(zip(centers, disp)):
        fp = FeaturePoint(index=i, center=tuple(int(v) for v in c), variability=1.0)
        out.append(FeatureMatch(point=fp, displacement=tuple(float(v) for v in d),
                                ncc=1.0, confidence=1.0))
    return out


class TestNemRegister:
    def test_hard_correspondence_reduces_to_single_elastic_solve(self):
        labels = box_labels()
        mesh = i2m_bcc(labels, 4.0)
        grid = labels.grid
        rng = np.random.default_rng(5)
        matches = lattice_matches(8, 16, 4, rng)
        sources = grid.voxel_to_mm(np.array([m.point.center for m in matches]))
        disp = np.array([m.displacement for m in matches])
        targets = sources + disp
        intra = ScalarVolume(grid, np.full(grid.dims, 500.0, np.float32))
        pre = ScalarVolume(grid, np.full(grid.dims, 500.0, np.float32))

        res = nem_register(
            pre, intra, mesh, matches, {1: MAT[1]},
            NemConfig(sigma=1e-6, inner_max_iters=4, outer_max_iters=2),
            targets=targets,
        )
        sys = fem.assemble(mesh, {1: MAT[1]}, sources, disp,
                           np.ones(len(matches)), match_stiffness_scale=1.0)
        ref = fem.robust_solve(sys, SolveConfig(rejection_rounds=0, max_final_iters=1))
        np.testing.assert_allclose(res.u, ref.u, atol=1e-10)
        assert not res.removed.any()
        assert res.trace[0]["n_orphans"] == 0

    def test_identity_inputs_stay_put(self, two_tissue_32):
        scalar, labels, _ = two_tissue_32
        mesh = i2m_bcc(labels, 4.0)
        mcfg = MatchConfig()
        feats = select_features(scalar, mcfg)
        matches = block_match(scalar, scalar, feats, mcfg)
        res = nem_register(scalar, scalar, mesh, matches, MAT, NemConfig())
        assert not res.removed.any()
        assert np.max(np.abs(res.u)) < 0.1
        assert_inner_monotone(res.trace)
        assert all(e["n_removed"] == 0 for e in res.trace)

    def test_resected_phantom_recovers_cavity_submesh(self, two_tissue_40, resected_40):
        pre_scalar, pre_lab, _ = two_tissue_40
        res_scalar, res_lab, _ = resected_40
        mesh = i2m_bcc(pre_lab, 3.0)
        mcfg = MatchConfig()
        feats = select_features(pre_scalar, mcfg)
        matches = block_match(pre_scalar, res_scalar, feats, mcfg)
        cfg = NemConfig(lambda2=0.5)
        res = nem_register(pre_scalar, res_scalar, mesh, matches, MAT, cfg)

        carved = (pre_lab.labels > 0) & (res_lab.labels == 0)
        cav_tets = candidates_oracle(mesh, LabelVolume(pre_lab.grid,
                                                       carved.astype(np.uint16)))
        interior_mask = ndimage.binary_erosion(carved)
        interior = candidates_oracle(mesh, LabelVolume(pre_lab.grid,
                                                       interior_mask.astype(np.uint16)))
        assert interior.any()
        coverage = float(res.removed[interior].mean())
        assert coverage >= 0.9, f"cavity coverage {coverage:.2f}"

        # no removal beyond one tet of the cavity surface: the band holds
        # every tet sharing at least a vertex with a cavity tet
        cav_verts = np.zeros(mesh.n_vertices, dtype=bool)
        cav_verts[mesh.tets[cav_tets].ravel()] = True
        allowed = cav_tets | cav_verts[mesh.tets].any(axis=1)
        outside = res.removed & ~allowed
        assert not outside.any(), f"{int(outside.sum())} tets removed outside the band"

        assert_inner_monotone(res.trace)
        last = res.trace[-1]
        work = mesh.copy()
        work.removed = res.removed.copy()
        sources = pre_lab.grid.voxel_to_mm(np.array([m.point.center for m in matches]))
        conf = np.array([m.confidence for m in matches])
        recomputed = direct_energy(work, MAT, sources, conf,
                                   res.correspondence, res.u, cfg)
        assert last["J"] == pytest.approx(recomputed, rel=1e-9)
        assert last["volume"] == pytest.approx(
            0.5 * float(work.tet_volumes()[res.removed].sum()), rel=1e-12
        )

    def test_too_few_matches_raises(self, two_tissue_32):
        scalar, labels, _ = two_tissue_32
        mesh = i2m_bcc(labels, 4.0)
        rng = np.random.default_rng(0)
        matches = lattice_matches(14, 18, 4, rng)[:3]
        with pytest.raises(ValueError, match="at least 4"):
            nem_register(scalar, scalar, mesh, matches, MAT)

    def test_featureless_intra_raises(self, two_tissue_32):
        scalar, labels, _ = two_tissue_32
        mesh = i2m_bcc(labels, 4.0)
        mcfg = MatchConfig()
        feats = select_features(scalar, mcfg)
        matches = block_match(scalar, scalar, feats, mcfg)
        flat = ScalarVolume(scalar.grid, np.zeros(scalar.grid.dims, np.float32))
        with pytest.raises(ValueError, match="no feature points"):
            nem_register(scalar, flat, mesh, matches, MAT)
