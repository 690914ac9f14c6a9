"""Resection-aware registration by nested expectation maximization.

Tissue removed during surgery has no counterpart in the intra-operative
image, so fixed point correspondences do not exist there. This module
jointly estimates three unknowns: a fuzzy correspondence between warped
registration points and intra-operative feature points, the deformation
of the elastic model, and the removed submesh approximating the
resection cavity. The inner EM alternates correspondence (E) and
deformation (M) with the removed set frozen; the outer EM grows the
removed set from a threshold segmentation of the intra-operative image
and stops once it no longer changes.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field as dc_field
from itertools import combinations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import fem
from .featmatch import FeatureMatch, MatchConfig, select_features
from .fem import Material, SolveConfig
from .mesh import TetMesh
from .volume import LabelVolume, ScalarVolume

logger = logging.getLogger(__name__)

# nearest-target distance beyond which a source keeps no correspondence
ORPHAN_CUTOFF_SIGMAS = 3.0
K_TARGETS = 8
# structuring-element radius (voxels) used to seal the resection tract
# before hole filling; must exceed half the tract diameter
BGI_CLOSING_RADIUS = 4


@dataclass(frozen=True)
class NemConfig:
    """Weights and schedules for the nested EM registration.

    lambda1 balances the point-match term against the strain energy and is
    expressed relative to the mean stiffness diagonal, so 1.0 puts both
    terms on an equal footing. lambda2 prices removed volume (mm^3) in the
    energy report; growth itself is geometric. sigma is the soft-assign
    width in mm, annealed by ``anneal`` per inner iteration.
    """

    lambda1: float = 1.0
    lambda2: float = 0.0
    bgi_threshold: float = 100.0
    sigma: float = 3.0
    inner_max_iters: int = 12
    outer_max_iters: int = 8
    anneal: float = 0.8

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ValueError(f"lambda1 must be positive, got {self.lambda1}")
        if self.lambda2 < 0:
            raise ValueError(f"lambda2 must be non-negative, got {self.lambda2}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not np.isfinite(self.bgi_threshold):
            raise ValueError("bgi_threshold must be finite")
        for name in ("inner_max_iters", "outer_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not 0.0 < self.anneal <= 1.0:
            raise ValueError(f"anneal must lie in (0, 1], got {self.anneal}")


@dataclass
class Correspondence:
    """Fuzzy assignment of sources to their nearest candidate targets.

    Row i holds up to k candidate target indices with convex weights
    (sum 1); an orphaned source has an all-zero row and indices -1.
    """

    targets: np.ndarray  # (t, 3) mm
    indices: np.ndarray  # (n, k) int, -1 where unused
    weights: np.ndarray  # (n, k) float

    @property
    def n_sources(self) -> int:
        return len(self.weights)

    @property
    def orphaned(self) -> np.ndarray:
        return ~(self.weights.sum(axis=1) > 0)

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def project(self) -> np.ndarray:
        """Weighted target position per source, zero rows for orphans."""
        cand = self.targets[np.maximum(self.indices, 0)]
        return np.einsum("nk,nkc->nc", self.weights, cand)


@dataclass
class NemResult:
    u: np.ndarray  # (3n,) vertex displacements, mm
    removed: np.ndarray  # (m,) bool, the estimated resection submesh
    correspondence: Correspondence | None
    trace: list = dc_field(default_factory=list)


# ---------------------------------------------------------------------------
# resection segmentation and removed-submesh growth
# ---------------------------------------------------------------------------


def _ball(radius: int) -> np.ndarray:
    g = np.indices((2 * radius + 1,) * 3) - radius
    return (g * g).sum(axis=0) <= radius * radius


def segment_bgi(intra: ScalarVolume, threshold: float) -> LabelVolume:
    """Flag dark voxels inside the brain extent (background-in-brain).

    The extent is the thresholded bright mask after morphological closing
    and hole filling, which seals the resection tract so the cavity counts
    as interior; one voxel of dilation offsets the inward bias of the seal
    at the tract mouth. A volume with no bright voxel at all yields the
    whole grid flagged.
    """
    dark = intra.voxels < threshold
    bright = ~dark
    if not bright.any():
        logger.warning(
            "no voxel reaches the background threshold %g; flagging the whole volume",
            threshold,
        )
        extent = np.ones(intra.dims, dtype=bool)
    else:
        closed = ndimage.binary_closing(bright, structure=_ball(BGI_CLOSING_RADIUS))
        extent = ndimage.binary_dilation(ndimage.binary_fill_holes(closed))
    bgi = dark & extent
    if not bgi.any():
        logger.warning("background-in-brain segmentation flagged no voxels")
    elif bgi.all():
        logger.warning("background-in-brain segmentation flagged every voxel")
    return LabelVolume(intra.grid, bgi.astype(np.uint16))


def _face_neighbors(tets: np.ndarray) -> list:
    """Per-tet list of face-adjacent tet ids."""
    faces: dict = {}
    for t, tet in enumerate(tets):
        for f in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
            key = tuple(sorted((int(tet[f[0]]), int(tet[f[1]]), int(tet[f[2]]))))
            faces.setdefault(key, []).append(t)
    neighbors: list = [[] for _ in range(len(tets))]
    for tids in faces.values():
        for a, b in combinations(tids, 2):
            neighbors[a].append(b)
            neighbors[b].append(a)
    return neighbors


def _tets_in_bgi(mesh: TetMesh, bgi: LabelVolume) -> np.ndarray:
    """Tets whose centroid falls on a flagged voxel (nearest-voxel lookup)."""
    vox = np.rint(bgi.grid.mm_to_voxel(mesh.centroids())).astype(np.int64)
    dims = np.array(bgi.dims)
    inside = np.all((vox >= 0) & (vox < dims), axis=1)
    cand = np.zeros(mesh.n_tets, dtype=bool)
    idx = np.flatnonzero(inside)
    cand[idx] = bgi.labels[tuple(vox[idx].T)] == 1
    return cand


def grow_removed(mesh: TetMesh, bgi: LabelVolume, removed) -> np.ndarray:
    """Grow the removed submesh from tets whose warped centroid is in the BGI.

    ``mesh`` must already carry the current deformation. On the first call
    (no tet removed yet) the largest face-connected candidate component is
    taken; afterwards only candidates reachable from the current removed
    set through candidate tets are added. Never un-removes.
    """
    removed = np.asarray(removed, dtype=bool)
    if removed.shape != (mesh.n_tets,):
        raise ValueError(
            f"removed flags must have one entry per tet, got {removed.shape}"
        )
    cand = _tets_in_bgi(mesh, bgi)
    if not cand.any():
        return removed.copy()

    neighbors = _face_neighbors(mesh.tets)
    new = removed.copy()
    if not removed.any():
        # first call: pick the largest candidate component (face adjacency)
        seen = np.zeros(mesh.n_tets, dtype=bool)
        components = []
        for start in np.flatnonzero(cand):
            if seen[start]:
                continue
            comp = []
            queue = deque([start])
            seen[start] = True
            while queue:
                t = queue.popleft()
                comp.append(t)
                for nb in neighbors[t]:
                    if cand[nb] and not seen[nb]:
                        seen[nb] = True
                        queue.append(nb)
            components.append(comp)
        components.sort(key=lambda c: (-len(c), min(c)))
        new[components[0]] = True
        return new

    # later calls: flood from the current removed set through candidates
    queue = deque(np.flatnonzero(removed))
    while queue:
        t = queue.popleft()
        for nb in neighbors[t]:
            if cand[nb] and not new[nb]:
                new[nb] = True
                queue.append(nb)
    return new


# ---------------------------------------------------------------------------
# correspondence estimation (inner E-step)
# ---------------------------------------------------------------------------


def estimate_correspondence(sources, targets, sigma: float, k: int = K_TARGETS) -> Correspondence:
    """Gaussian soft assignment of each source to its k nearest targets.

    Weights are proportional to exp(-d^2 / 2 sigma^2) and row-normalized;
    sources whose nearest target is farther than 3 sigma are orphaned.
    """
    sources = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if len(targets) == 0:
        raise ValueError("correspondence needs at least one target point")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    kq = min(int(k), len(targets))
    dist, idx = cKDTree(targets).query(sources, k=kq, workers=1)
    dist = np.atleast_2d(np.asarray(dist, dtype=np.float64).reshape(len(sources), kq))
    idx = np.asarray(idx, dtype=np.int64).reshape(len(sources), kq)

    orphan = dist[:, 0] > ORPHAN_CUTOFF_SIGMAS * sigma
    # stabilize on the nearest candidate so the leading weight is exp(0)
    expo = (dist * dist - dist[:, :1] * dist[:, :1]) / (2.0 * sigma * sigma)
    weights = np.exp(-expo)
    weights[orphan] = 0.0
    idx[orphan] = -1
    sums = weights.sum(axis=1, keepdims=True)
    np.divide(weights, sums, out=weights, where=sums > 0)
    return Correspondence(targets=targets, indices=idx, weights=weights)


# ---------------------------------------------------------------------------
# nested EM driver
# ---------------------------------------------------------------------------


def _energy_terms(sys: fem.FemSystem, u: np.ndarray, cfg: NemConfig,
                  removed_volume: float) -> dict:
    strain = float(u @ (sys.K @ u))
    res = (sys.H @ u - sys.D).reshape(-1, 3)
    w = np.where(sys.active, sys.s, 0.0)
    match = float(np.sum(w * np.sum(res * res, axis=1)))
    volume = cfg.lambda2 * removed_volume
    return {"strain": strain, "match": match, "volume": volume,
            "J": strain + match + volume}


def nem_register(
    pre: ScalarVolume,
    intra: ScalarVolume,
    mesh: TetMesh,
    matches: list[FeatureMatch],
    materials: dict[int, Material],
    cfg: NemConfig | None = None,
    match_cfg: MatchConfig | None = None,
    targets=None,
    solve_cfg: SolveConfig | None = None,
) -> NemResult:
    """Jointly estimate deformation, correspondence and the removed submesh.

    The match displacements seed the first correspondence search; after
    that sources are warped by the current deformation. ``targets``
    defaults to feature points selected in the intra-operative image.
    Energy is re-minimized from the current deformation each time the
    removed set grows; within one inner EM the trace is strictly
    decreasing because a non-improving step is discarded.
    """
    cfg = cfg or NemConfig()
    match_cfg = match_cfg or MatchConfig()
    solve_cfg = solve_cfg or SolveConfig()
    if len(matches) < fem.MIN_ACTIVE_MATCHES:
        raise ValueError(
            f"nested EM needs at least {fem.MIN_ACTIVE_MATCHES} matches to pin "
            f"the rigid modes, got {len(matches)}"
        )

    sources = pre.grid.voxel_to_mm(np.array([m.point.center for m in matches]))
    seeds = np.array([m.displacement for m in matches], dtype=np.float64)
    confidences = np.array([m.confidence for m in matches], dtype=np.float64)
    if targets is None:
        feats = select_features(intra, match_cfg)
        if not feats:
            raise ValueError("no feature points selected in the intra-operative image")
        targets = intra.grid.voxel_to_mm(np.array([f.center for f in feats]))
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)

    bgi = segment_bgi(intra, cfg.bgi_threshold)
    work = mesh.copy()
    m_rem = work.removed.copy()
    n_match = len(matches)
    u = np.zeros(3 * work.n_vertices)
    corr: Correspondence | None = None
    trace: list = []

    for outer in range(cfg.outer_max_iters):
        warped = TetMesh(work.vertices + u.reshape(-1, 3), work.tets,
                         work.labels, m_rem)
        grown = grow_removed(warped, bgi, m_rem)
        if outer > 0 and np.array_equal(grown, m_rem):
            break
        m_rem = grown
        work.removed = m_rem.copy()
        if m_rem.all():
            raise ValueError("every tet was removed; nothing left to register")

        # rebuild over M \ M_Rem: matches in removed tets drop out here
        sys = fem.assemble(work, materials, sources, np.zeros_like(sources),
                           confidences, match_stiffness_scale=1.0)
        sys.s = sys.s * cfg.lambda1
        in_mesh = sys.active.copy()
        removed_volume = float(work.tet_volumes()[m_rem].sum()) if m_rem.any() else 0.0

        sigma = cfg.sigma
        best_j = np.inf
        for inner in range(cfg.inner_max_iters):
            query = sources + (sys.H @ u).reshape(-1, 3)
            if outer == 0 and inner == 0:
                query = sources + seeds
            cand = estimate_correspondence(query, targets, sigma)
            active = in_mesh & ~cand.orphaned
            if not active.any():
                logger.warning("every source is orphaned at sigma %.3g mm", sigma)
                break
            d_rows = np.where(active[:, None], cand.project() - sources, 0.0)
            sys.D = d_rows.ravel()
            sys.active = active
            u_new = fem.solve_linear(sys, solve_cfg, x0=u)
            terms = _energy_terms(sys, u_new, cfg, removed_volume)
            if not terms["J"] < best_j:
                break
            best_j = terms["J"]
            u = u_new
            corr = cand
            trace.append({
                "outer": outer, "inner": inner, **terms,
                "n_removed": int(m_rem.sum()),
                "n_orphans": int(cand.orphaned.sum()),
                "n_active": int(active.sum()),
                "sigma_mm": sigma,
            })
            sigma *= cfg.anneal
        else:
            logger.warning(
                "inner EM used its full budget (%d iterations) in outer round %d",
                cfg.inner_max_iters, outer,
            )
    else:
        logger.warning(
            "outer EM stopped at its budget (%d rounds) with the removed set "
            "still growing", cfg.outer_max_iters,
        )

    logger.info(
        "nested EM finished: %d of %d tets removed, %d of %d matches active",
        int(m_rem.sum()), work.n_tets,
        trace[-1]["n_active"] if trace else 0, n_match,
    )
    return NemResult(u=u, removed=m_rem, correspondence=corr, trace=trace)
