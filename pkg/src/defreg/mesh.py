"""Tetrahedral meshing from labeled volumes, quality audits, sizing fields,
and metric-conforming refinement.

Meshes live in mm coordinates. Tets are positively oriented; `removed`
marks elements excluded from the mechanical model (resection handling).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError
from .volume import Grid, LabelVolume

logger = logging.getLogger(__name__)

MESH_MAGIC = "TMESH1"
SQRT2 = math.sqrt(2.0)

# semi-axis floor for rank-deficient neighborhoods, relative to the largest axis
ELLIPSOID_AXIS_FLOOR = 0.1
# absolute fallback when every sample coincides with the center (mm)
_AXIS_FLOOR_ABS = 1e-9

_EDGE_PAIRS = ((0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2),
               (1, 2, 0, 3), (1, 3, 0, 2), (2, 3, 0, 1))

# barycentric slack shared with the dense rasterizers
_BARY_TOL = 1e-9


@dataclass
class TetMesh:
    """Tet mesh with per-element tissue labels and removed flags."""

    vertices: np.ndarray  # (n, 3) float64 mm
    tets: np.ndarray  # (m, 4) int64, positively oriented
    labels: np.ndarray  # (m,) uint16
    removed: np.ndarray  # (m,) bool

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        self.removed = np.ascontiguousarray(self.removed, dtype=bool)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {self.vertices.shape}")
        m = len(self.tets)
        if self.tets.shape != (m, 4):
            raise ValueError(f"tets must be (m, 4), got {self.tets.shape}")
        if self.labels.shape != (m,) or self.removed.shape != (m,):
            raise ValueError("labels and removed must have one entry per tet")
        if m and (self.tets.min() < 0 or self.tets.max() >= len(self.vertices)):
            raise ValueError("tet vertex index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def tet_volumes(self) -> np.ndarray:
        p = self.vertices[self.tets]
        return np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0

    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    def copy(self) -> "TetMesh":
        return TetMesh(self.vertices.copy(), self.tets.copy(),
                       self.labels.copy(), self.removed.copy())


def _fix_orientation(vertices, tets):
    """Swap two vertices of every negatively oriented tet."""
    p = vertices[tets]
    vol = np.linalg.det(p[:, 1:] - p[:, :1])
    flip = vol < 0
    if flip.any():
        tets = tets.copy()
        tets[flip, 2], tets[flip, 3] = tets[flip, 3], tets[flip, 2].copy()
    return tets


def face_counts(mesh: TetMesh) -> dict:
    """Sorted vertex triple -> number of tets sharing it (conformity aid)."""
    counts: dict = {}
    for tet in mesh.tets:
        for f in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
            key = tuple(sorted((int(tet[f[0]]), int(tet[f[1]]), int(tet[f[2]]))))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_conforming(mesh: TetMesh) -> bool:
    """Every face is shared by at most two tets."""
    return all(c <= 2 for c in face_counts(mesh).values())


# ---------------------------------------------------------------------------
# image-to-mesh conversion (BCC lattice)
# ---------------------------------------------------------------------------


def i2m_bcc(labels: LabelVolume, delta: float) -> TetMesh:
    """Mesh the nonzero-label region with body-centered-cubic tetrahedra.

    A BCC lattice of spacing ``delta`` (mm) covers the nonzero bounding box
    with one cell of margin; each square face between adjacent cells spawns
    four tets joining the two cell centers to a face edge. Tets whose
    centroid falls on a nonzero label are kept and inherit that label.
    """
    delta = float(delta)
    lab = labels.labels
    nz = np.argwhere(lab != 0)
    if nz.size == 0:
        raise ValueError("empty label volume: nothing to mesh")
    if delta < max(labels.grid.spacing):
        raise ValueError(
            f"delta ({delta} mm) must be at least the largest voxel spacing "
            f"({max(labels.grid.spacing)} mm)"
        )
    grid = labels.grid
    lo_mm = grid.voxel_to_mm(nz.min(axis=0))
    hi_mm = grid.voxel_to_mm(nz.max(axis=0))
    base = lo_mm - delta
    ncell = np.ceil((hi_mm + delta - base) / delta).astype(int)

    ci, cj, ck = np.meshgrid(
        np.arange(ncell[0]), np.arange(ncell[1]), np.arange(ncell[2]), indexing="ij"
    )
    cells = np.stack([ci.ravel(), cj.ravel(), ck.ravel()], axis=1)

    batches = []
    for axis in range(3):
        cc = cells[cells[:, axis] < ncell[axis] - 1]
        if len(cc) == 0:
            continue
        c1 = 2 * cc + 1
        c2 = c1.copy()
        c2[:, axis] += 2
        a1, a2 = [a for a in range(3) if a != axis]
        fbase = 2 * cc
        fbase[:, axis] += 2
        ring = []
        for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
            c = fbase.copy()
            c[:, a1] += 2 * da
            c[:, a2] += 2 * db
            ring.append(c)
        for e in range(4):
            batches.append(np.stack([c1, c2, ring[e], ring[(e + 1) % 4]], axis=1))
    keys = np.concatenate(batches, axis=0)  # (T, 4, 3) half-lattice integer keys

    pos = base + keys * (delta / 2.0)
    centroids = pos.mean(axis=1)
    vox = np.rint(grid.mm_to_voxel(centroids)).astype(np.int64)
    inside = np.all((vox >= 0) & (vox < np.array(grid.dims)), axis=1)
    tet_label = np.zeros(len(keys), dtype=np.uint16)
    iv = vox[inside]
    tet_label[inside] = lab[iv[:, 0], iv[:, 1], iv[:, 2]]
    kept = tet_label > 0
    if not kept.any():
        raise ValueError("no tet centroid falls on a nonzero label")
    keys = keys[kept]
    tet_label = tet_label[kept]

    flat = keys.reshape(-1, 3)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    tets = inv.reshape(-1, 4).astype(np.int64)
    vertices = base + uniq * (delta / 2.0)
    tets = _fix_orientation(vertices, tets)
    return TetMesh(vertices, tets, tet_label, np.zeros(len(tets), dtype=bool))


# ---------------------------------------------------------------------------
# quality auditing
# ---------------------------------------------------------------------------


@dataclass
class MeshQualityReport:
    n_tets: int
    n_vertices: int
    alpha_min_deg: float
    alpha_max_deg: float
    min_volume_mm3: float
    degenerate_tets: list = dc_field(default_factory=list)
    fidelity_dice: dict | None = None

    def to_json_dict(self) -> dict:
        out = {
            "#Tets": self.n_tets,
            "#Vertices": self.n_vertices,
            "alpha_min_deg": self.alpha_min_deg,
            "alpha_max_deg": self.alpha_max_deg,
            "min_volume_mm3": self.min_volume_mm3,
            "degenerate_tets": list(self.degenerate_tets),
        }
        if self.fidelity_dice is not None:
            out["fidelity_dice"] = {str(k): v for k, v in self.fidelity_dice.items()}
        return out


def tet_dihedrals_deg(p: np.ndarray) -> np.ndarray:
    """Dihedral angles (degrees) of tets stacked as (m, 4, 3) -> (m, 6)."""
    angles = np.empty((len(p), 6))
    for col, (a, b, c, d) in enumerate(_EDGE_PAIRS):
        e = p[:, b] - p[:, a]
        en = np.linalg.norm(e, axis=1, keepdims=True)
        ehat = np.divide(e, en, out=np.zeros_like(e), where=en > 0)
        pc = p[:, c] - p[:, a]
        pd = p[:, d] - p[:, a]
        u = pc - np.sum(pc * ehat, axis=1, keepdims=True) * ehat
        v = pd - np.sum(pd * ehat, axis=1, keepdims=True) * ehat
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        dot = np.sum(u * v, axis=1)
        angles[:, col] = np.degrees(np.arctan2(cross, dot))
    return angles


def dihedral_angles(mesh: TetMesh, labels: LabelVolume | None = None) -> MeshQualityReport:
    """Audit the non-removed elements: dihedral extrema, volumes, fidelity.

    Degenerate (zero-volume) tets are listed in the report rather than
    silently skipped; their angles do not enter the extrema. When a label
    volume is supplied, per-label Dice of the rasterized mesh is included.
    """
    keep = np.flatnonzero(~mesh.removed)
    if keep.size == 0:
        raise ValueError("mesh has no active (non-removed) tets to audit")
    p = mesh.vertices[mesh.tets[keep]]
    vols = np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0
    edge_scale = np.max(np.linalg.norm(p[:, 1:] - p[:, :1], axis=2), axis=1)
    degenerate = np.abs(vols) <= 1e-12 * np.maximum(edge_scale, 1.0) ** 3
    angles = tet_dihedrals_deg(p)
    valid = ~degenerate
    if valid.any():
        a_min = float(angles[valid].min())
        a_max = float(angles[valid].max())
        v_min = float(vols[valid].min())
    else:
        a_min = a_max = float("nan")
        v_min = 0.0
    fidelity = None
    if labels is not None:
        fidelity = _fidelity_dice(mesh, labels)
    return MeshQualityReport(
        n_tets=int(keep.size),
        n_vertices=mesh.n_vertices,
        alpha_min_deg=a_min,
        alpha_max_deg=a_max,
        min_volume_mm3=v_min,
        degenerate_tets=[int(keep[i]) for i in np.flatnonzero(degenerate)],
        fidelity_dice=fidelity,
    )


def rasterize_labels(mesh: TetMesh, grid: Grid) -> np.ndarray:
    """Per-voxel tet label (0 where no non-removed tet contains the center)."""
    out = np.zeros(grid.dims, dtype=np.uint16)
    keep = np.flatnonzero(~mesh.removed)
    if keep.size == 0:
        return out
    verts = mesh.vertices
    tets = mesh.tets
    v0 = verts[tets[:, 0]]
    edges = np.stack([verts[tets[:, k]] - v0 for k in (1, 2, 3)], axis=-1)
    inv = np.linalg.inv(edges[keep])
    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    dims = np.array(grid.dims)
    for row, t in enumerate(keep):
        pts = verts[tets[t]]
        lo = np.maximum(np.ceil((pts.min(axis=0) - origin) / spacing - _BARY_TOL), 0).astype(int)
        hi = np.minimum(np.floor((pts.max(axis=0) - origin) / spacing + _BARY_TOL), dims - 1).astype(int)
        if np.any(hi < lo):
            continue
        ax = [origin[a] + spacing[a] * np.arange(lo[a], hi[a] + 1) for a in range(3)]
        px, py, pz = np.meshgrid(*ax, indexing="ij")
        p = np.stack([px, py, pz], axis=-1) - v0[t]
        bary = p @ inv[row].T
        b0 = 1.0 - bary.sum(axis=-1)
        inside = (bary >= -_BARY_TOL).all(axis=-1) & (b0 >= -_BARY_TOL)
        if inside.any():
            block = out[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
            block[inside] = mesh.labels[t]
    return out


def _fidelity_dice(mesh: TetMesh, labels: LabelVolume) -> dict:
    raster = rasterize_labels(mesh, labels.grid)
    out = {}
    for lv in sorted(int(v) for v in np.unique(labels.labels) if v != 0):
        a = labels.labels == lv
        b = raster == lv
        denom = int(a.sum()) + int(b.sum())
        out[lv] = 2.0 * int((a & b).sum()) / denom if denom else 0.0
    return out


# ---------------------------------------------------------------------------
# sizing fields
# ---------------------------------------------------------------------------


@dataclass
class SizingField:
    """Per-vertex target spacing: scalar h (mm) or SPD metric tensor."""

    h: np.ndarray | None = None  # (n,)
    tensors: np.ndarray | None = None  # (n, 3, 3)

    def __post_init__(self):
        if (self.h is None) == (self.tensors is None):
            raise ValueError("exactly one of h or tensors must be set")
        if self.h is not None:
            self.h = np.asarray(self.h, dtype=np.float64)
            if not np.all(np.isfinite(self.h)) or np.any(self.h <= 0):
                raise ValueError("h must be finite and positive")
        else:
            self.tensors = np.asarray(self.tensors, dtype=np.float64)
            if self.tensors.ndim != 3 or self.tensors.shape[1:] != (3, 3):
                raise ValueError(f"tensors must be (n, 3, 3), got {self.tensors.shape}")

    @property
    def n(self) -> int:
        return len(self.h) if self.h is not None else len(self.tensors)

    def value_at(self, i: int):
        return self.h[i] if self.h is not None else self.tensors[i]

    def append_midpoint(self, a: int, b: int) -> int:
        """Extend with the average of two vertex values; returns the new index."""
        if self.h is not None:
            self.h = np.append(self.h, 0.5 * (self.h[a] + self.h[b]))
            return len(self.h) - 1
        mid = 0.5 * (self.tensors[a] + self.tensors[b])
        self.tensors = np.concatenate([self.tensors, mid[None]], axis=0)
        return len(self.tensors) - 1

    def edge_length(self, pa: np.ndarray, pb: np.ndarray, ia: int, ib: int) -> float:
        """Metric edge length, trapezoidal rule with the endpoint values."""
        e = pb - pa
        if self.h is not None:
            geo = float(np.linalg.norm(e))
            return 0.5 * geo * (1.0 / self.h[ia] + 1.0 / self.h[ib])
        la = math.sqrt(max(float(e @ self.tensors[ia] @ e), 0.0))
        lb = math.sqrt(max(float(e @ self.tensors[ib] @ e), 0.0))
        return 0.5 * (la + lb)


def isotropic_sizing(mesh: TetMesh, points, k: int = 5) -> SizingField:
    """h(v) = distance from vertex v to its k-th nearest registration point."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(points) < k:
        raise ValueError(f"need at least k={k} registration points, got {len(points)}")
    tree = cKDTree(points)
    d, _ = tree.query(mesh.vertices, k=k)
    h = d if k == 1 else d[:, k - 1]
    return SizingField(h=np.asarray(h, dtype=np.float64))


def min_enclosing_ellipsoid(points, center, eps: float = 1e-3,
                            max_iter: int = 10000) -> np.ndarray:
    """(1+eps)-approximate minimum-volume enclosing ellipsoid, centered.

    Each point is reflected through ``center`` and Khachiyan's algorithm runs
    on the union, which by symmetry is centered at ``center`` exactly. The
    returned SPD matrix M satisfies (p - c)^T M (p - c) <= 1 + eps for all
    inputs. Rank-deficient directions are floored at
    ELLIPSOID_AXIS_FLOOR x the largest semi-axis.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] < 1 or pts.shape[1] != 3:
        raise ValueError(f"need at least one 3D point, got shape {pts.shape}")
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    c = np.asarray(center, dtype=np.float64)
    q = pts - c
    Q = np.vstack([q, -q])

    sv = np.linalg.svd(Q, compute_uv=False)
    rank = int(np.sum(sv > sv[0] * 1e-10)) if sv[0] > 0 else 0
    if rank == 0:
        return np.eye(3) / _AXIS_FLOOR_ABS**2

    n = len(Q)
    u = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        X = Q.T @ (u[:, None] * Q)
        Xinv = np.linalg.pinv(X, hermitian=True)
        m = np.einsum("ij,jk,ik->i", Q, Xinv, Q)
        mx = float(m.max())
        if mx <= rank * (1.0 + eps):
            break
        step = (mx - rank) / (rank * (mx - 1.0))
        if not math.isfinite(step) or step <= 0.0:
            break
        u *= 1.0 - step
        u[int(np.argmax(m))] += step

    X = Q.T @ (u[:, None] * Q)
    mu, V = np.linalg.eigh(X)
    mu = np.clip(mu, 0.0, None)
    axes = np.sqrt(rank * mu)
    a_max = float(axes.max())
    if a_max <= 0.0:
        axes = np.full(3, _AXIS_FLOOR_ABS)
    else:
        axes = np.maximum(axes, ELLIPSOID_AXIS_FLOOR * a_max)
    M = (V * (1.0 / axes**2)) @ V.T
    return 0.5 * (M + M.T)


def metric_field(mesh: TetMesh, points, k: int = 5, inflation: float = 1.0,
                 eps: float = 1e-3) -> SizingField:
    """Anisotropic sizing: per-vertex enclosing ellipsoid of the k-NN points.

    Inflation by ``a`` enlarges every ellipsoid by that factor, i.e. scales
    each tensor by 1/a^2.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(points) < k:
        raise ValueError(f"need at least k={k} registration points, got {len(points)}")
    if inflation <= 0:
        raise ValueError(f"inflation must be positive, got {inflation}")
    tree = cKDTree(points)
    _, idx = tree.query(mesh.vertices, k=k)
    if k == 1:
        idx = idx[:, None]
    tensors = np.empty((mesh.n_vertices, 3, 3))
    for i in range(mesh.n_vertices):
        M = min_enclosing_ellipsoid(points[idx[i]], mesh.vertices[i], eps=eps)
        tensors[i] = M / (inflation * inflation)
    return SizingField(tensors=tensors)


# ---------------------------------------------------------------------------
# metric-conforming refinement
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    mesh: TetMesh
    passes_used: int
    residual_overlong: int


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def refine_to_metric(mesh: TetMesh, field: SizingField,
                     max_passes: int = 5) -> RefineResult:
    """Bisect edges whose metric length exceeds sqrt(2), longest first.

    Splitting an edge splits every incident tet in two (midpoint inherits the
    averaged field value, children inherit label and removed flag), which
    keeps the mesh conforming and never flips orientation. Passes repeat
    until no edge exceeds the bound or the budget runs out; leftover
    over-long edges are reported, not raised.
    """
    if field.n != mesh.n_vertices:
        raise ValueError(
            f"field has {field.n} entries for {mesh.n_vertices} vertices"
        )
    verts = [mesh.vertices[i] for i in range(mesh.n_vertices)]
    fld = SizingField(h=None if field.h is None else field.h.copy(),
                      tensors=None if field.tensors is None else field.tensors.copy())
    tets: list[tuple[int, int, int, int]] = [tuple(int(v) for v in t) for t in mesh.tets]
    labels: list[int] = [int(v) for v in mesh.labels]
    removed: list[bool] = [bool(v) for v in mesh.removed]
    alive: list[bool] = [True] * len(tets)

    edge_map: dict[tuple[int, int], set[int]] = {}

    def register(tid: int):
        t = tets[tid]
        for i in range(4):
            for j in range(i + 1, 4):
                edge_map.setdefault(_edge_key(t[i], t[j]), set()).add(tid)

    def unregister(tid: int):
        t = tets[tid]
        for i in range(4):
            for j in range(i + 1, 4):
                key = _edge_key(t[i], t[j])
                tids = edge_map.get(key)
                if tids is not None:
                    tids.discard(tid)
                    if not tids:
                        del edge_map[key]

    for tid in range(len(tets)):
        register(tid)

    def metric_len(key: tuple[int, int]) -> float:
        a, b = key
        return fld.edge_length(verts[a], verts[b], a, b)

    def overlong_edges() -> list[tuple[float, tuple[int, int]]]:
        out = []
        for key in edge_map:
            L = metric_len(key)
            if L > SQRT2 * (1.0 + 1e-12):
                out.append((L, key))
        out.sort(key=lambda item: (-item[0], item[1]))
        return out

    passes_used = 0
    for _ in range(max_passes):
        marked = overlong_edges()
        if not marked:
            break
        passes_used += 1
        for _, key in marked:
            tids = edge_map.get(key)
            if not tids:
                continue
            a, b = key
            mid = 0.5 * (verts[a] + verts[b])
            m_idx = len(verts)
            verts.append(mid)
            fld.append_midpoint(a, b)
            for tid in sorted(tids):
                alive[tid] = False
                unregister(tid)
                t = tets[tid]
                child_a = tuple(m_idx if v == b else v for v in t)
                child_b = tuple(m_idx if v == a else v for v in t)
                for child in (child_a, child_b):
                    tets.append(child)
                    labels.append(labels[tid])
                    removed.append(removed[tid])
                    alive.append(True)
                    register(len(tets) - 1)

    residual = len(overlong_edges())
    if residual:
        logger.warning(
            "refinement budget (%d passes) exhausted with %d over-long edges",
            max_passes, residual,
        )

    keep = [i for i, a in enumerate(alive) if a]
    out = TetMesh(
        np.asarray(verts),
        np.asarray([tets[i] for i in keep], dtype=np.int64),
        np.asarray([labels[i] for i in keep], dtype=np.uint16),
        np.asarray([removed[i] for i in keep], dtype=bool),
    )
    return RefineResult(mesh=out, passes_used=passes_used, residual_overlong=residual)


# ---------------------------------------------------------------------------
# mesh file format
# ---------------------------------------------------------------------------


def write_mesh(mesh: TetMesh, path) -> None:
    lines = [MESH_MAGIC, str(mesh.n_vertices)]
    for v in mesh.vertices:
        lines.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    lines.append(str(mesh.n_tets))
    for t, lab, rem in zip(mesh.tets, mesh.labels, mesh.removed):
        lines.append(f"{t[0]} {t[1]} {t[2]} {t[3]} {lab} {1 if rem else 0}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> TetMesh:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    try:
        if not lines or lines[0] != MESH_MAGIC:
            raise FormatError(f"{path}: malformed header: expected magic {MESH_MAGIC}")
        nv = int(lines[1])
        verts = np.array(
            [[float(x) for x in lines[2 + i].split()] for i in range(nv)]
        ).reshape(nv, 3)
        nt = int(lines[2 + nv])
        rows = [lines[3 + nv + i].split() for i in range(nt)]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed mesh file: {exc}") from exc
    if any(len(r) != 6 for r in rows):
        raise FormatError(f"{path}: malformed mesh file: tet rows need 6 fields")
    tets = np.array([[int(v) for v in r[:4]] for r in rows], dtype=np.int64).reshape(nt, 4)
    labels = np.array([int(r[4]) for r in rows], dtype=np.uint16)
    removed = np.array([r[5] == "1" for r in rows], dtype=bool)
    return TetMesh(verts, tets, labels, removed)
