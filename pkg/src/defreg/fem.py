"""Linear-elastic tetrahedral FEM and the robust block-match solver.

The mechanical system couples a mesh stiffness matrix K with sparse match
constraints: [K + H^T S H] U = H^T S D + F, where H interpolates vertex
displacements at match points, S carries per-match weights, and D holds the
matched displacements (mm). A fixed-point force-relaxation loop drives the
solution from approximating the matches toward interpolating the inliers,
with the worst-fitting matches rejected on a fixed schedule in between.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree

from .errors import SingularSystemError
from .mesh import TetMesh

logger = logging.getLogger(__name__)

_BARY_TOL = 1e-9
# fewest matches that can pin down the six rigid modes
MIN_ACTIVE_MATCHES = 4


@dataclass(frozen=True)
class Material:
    """Isotropic linear-elastic tissue parameters."""

    young_modulus: float  # Pa
    poisson: float

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ValueError(f"young_modulus must be positive, got {self.young_modulus}")
        if not 0.0 < self.poisson <= 0.49:
            raise ValueError(
                f"poisson must lie in (0, 0.49] (away from incompressibility), "
                f"got {self.poisson}"
            )

    @property
    def lame(self) -> tuple[float, float]:
        e, nu = self.young_modulus, self.poisson
        lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        mu = e / (2.0 * (1.0 + nu))
        return lam, mu


@dataclass
class SolveConfig:
    """Rejection schedule and linear-solver tolerances."""

    rejection_fraction: float = 0.25  # f_R
    rejection_rounds: int = 10  # n_R
    cg_tol: float = 1e-8
    cg_max_iter: int = 20000
    convergence_tol: float = 1e-4  # mm, infinity norm on successive iterates
    max_final_iters: int = 50
    # match-weight multiplier for the convergence phase only; the fixed point
    # is scale-invariant, so this trades approximation for convergence speed
    final_scale_boost: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.rejection_fraction < 1.0:
            raise ValueError(
                f"rejection_fraction must lie in [0, 1), got {self.rejection_fraction}"
            )
        if self.rejection_rounds < 0:
            raise ValueError(f"rejection_rounds must be >= 0, got {self.rejection_rounds}")
        for name in ("cg_tol", "convergence_tol", "final_scale_boost"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("cg_max_iter", "max_final_iters"):
            if not getattr(self, name) >= 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class FemSystem:
    """Assembled registration system (all quantities in mm / Pa)."""

    K: sp.csr_matrix  # (3n, 3n)
    H: sp.csr_matrix  # (3m, 3n)
    s: np.ndarray  # (m,) match weights, confidence x stiffness scale
    D: np.ndarray  # (3m,)
    F: np.ndarray  # (3n,)
    active: np.ndarray  # (m,) bool
    points: np.ndarray  # (m, 3) match positions, for reporting
    match_scale: float

    @property
    def n_dof(self) -> int:
        return self.K.shape[0]

    @property
    def n_matches(self) -> int:
        return len(self.s)

    def s_diag(self) -> np.ndarray:
        """Per-row weights of S, zero for inactive matches."""
        return np.repeat(np.where(self.active, self.s, 0.0), 3)

    def lhs(self) -> sp.csr_matrix:
        """K + H^T S H for the current active set."""
        sd = self.s_diag()
        return (self.K + self.H.T @ sp.diags(sd) @ self.H).tocsr()

    def rhs(self, force: np.ndarray | None = None) -> np.ndarray:
        """H^T S D plus the external force."""
        out = self.H.T @ (self.s_diag() * self.D)
        if force is not None:
            out = out + force
        return out

    def match_errors(self, u: np.ndarray) -> np.ndarray:
        """Euclidean mismatch (mm) for every match, active or not."""
        res = (self.H @ u - self.D).reshape(-1, 3)
        return np.linalg.norm(res, axis=1)


# ---------------------------------------------------------------------------
# element and global stiffness
# ---------------------------------------------------------------------------


def _batch_gradients(p: np.ndarray):
    """Shape-function gradients and volumes for tets stacked (m, 4, 3)."""
    m = len(p)
    vols = np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0
    edge = np.max(np.linalg.norm(p[:, 1:] - p[:, :1], axis=2), axis=1)
    bad = vols <= 1e-12 * np.maximum(edge, 1.0) ** 3
    if bad.any():
        raise ValueError(
            f"{int(bad.sum())} degenerate or inverted tets (first index "
            f"{int(np.flatnonzero(bad)[0])})"
        )
    a4 = np.concatenate([np.ones((m, 4, 1)), p], axis=2)
    coeff = np.linalg.inv(a4)  # column a holds the affine coefficients of bary a
    grads = np.transpose(coeff[:, 1:4, :], (0, 2, 1))  # (m, 4, 3)
    return grads, vols


def _batch_stiffness(p: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Element stiffness V * B^T C B for tets stacked (m, 4, 3) -> (m, 12, 12)."""
    m = len(p)
    grads, vols = _batch_gradients(p)
    gx, gy, gz = grads[..., 0], grads[..., 1], grads[..., 2]
    b = np.zeros((m, 6, 12))
    for a in range(4):
        c = 3 * a
        b[:, 0, c] = gx[:, a]
        b[:, 1, c + 1] = gy[:, a]
        b[:, 2, c + 2] = gz[:, a]
        b[:, 3, c] = gy[:, a]
        b[:, 3, c + 1] = gx[:, a]
        b[:, 4, c + 1] = gz[:, a]
        b[:, 4, c + 2] = gy[:, a]
        b[:, 5, c] = gz[:, a]
        b[:, 5, c + 2] = gx[:, a]
    cmat = np.zeros((m, 6, 6))
    for i in range(3):
        for j in range(3):
            cmat[:, i, j] = lam
        cmat[:, i, i] += 2.0 * mu
        cmat[:, 3 + i, 3 + i] = mu
    ke = np.einsum("mka,mkl,mlb->mab", b, cmat, b, optimize=True)
    return vols[:, None, None] * ke


def element_stiffness(p, material: Material) -> np.ndarray:
    """12x12 stiffness of one positively oriented tet (rows x,y,z per vertex)."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 4, 3)
    lam, mu = material.lame
    return _batch_stiffness(p, np.array([lam]), np.array([mu]))[0]


def assemble_stiffness(mesh: TetMesh, materials: dict[int, Material]) -> sp.csr_matrix:
    """Global stiffness over non-removed tets; removed tets contribute nothing."""
    n = mesh.n_vertices
    keep = np.flatnonzero(~mesh.removed)
    if keep.size == 0:
        return sp.csr_matrix((3 * n, 3 * n))
    labs = mesh.labels[keep]
    missing = sorted(set(int(v) for v in np.unique(labs)) - set(materials))
    if missing:
        raise ValueError(f"no material for tissue labels {missing}")
    lam = np.empty(keep.size)
    mu = np.empty(keep.size)
    for lab, mat in materials.items():
        sel = labs == lab
        if sel.any():
            lam[sel], mu[sel] = mat.lame
    ke = _batch_stiffness(mesh.vertices[mesh.tets[keep]], lam, mu)
    dof = (3 * mesh.tets[keep][:, :, None] + np.arange(3)).reshape(keep.size, 12)
    rows = np.repeat(dof, 12, axis=1).ravel()
    cols = np.tile(dof, (1, 12)).ravel()
    k = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(3 * n, 3 * n)).tocsr()
    k.sum_duplicates()
    return k


# ---------------------------------------------------------------------------
# system assembly
# ---------------------------------------------------------------------------


def locate_in_mesh(mesh: TetMesh, points: np.ndarray, candidates: int = 32):
    """Containing non-removed tet and barycentric weights for each point.

    Returns (tet_ids, bary) with tet_id -1 where no tet contains the point.
    Candidates are scanned nearest-centroid first with index tie-breaks.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.flatnonzero(~mesh.removed)
    tet_ids = np.full(len(points), -1, dtype=np.int64)
    bary = np.zeros((len(points), 4))
    if keep.size == 0:
        return tet_ids, bary
    verts = mesh.vertices
    tets = mesh.tets[keep]
    v0 = verts[tets[:, 0]]
    edges = np.stack([verts[tets[:, a]] - v0 for a in (1, 2, 3)], axis=-1)
    inv = np.linalg.inv(edges)
    tree = cKDTree(verts[tets].mean(axis=1))
    kq = int(min(candidates, keep.size))
    dist, near = tree.query(points, k=kq, workers=1)
    if kq == 1:
        dist = dist[:, None]
        near = near[:, None]
    for i in range(len(points)):
        order = np.lexsort((near[i], dist[i]))
        for j in order:
            t = int(near[i, j])
            b = (points[i] - v0[t]) @ inv[t].T
            b0 = 1.0 - b.sum()
            if b.min() >= -_BARY_TOL and b0 >= -_BARY_TOL:
                tet_ids[i] = keep[t]
                bary[i, 0] = b0
                bary[i, 1:] = b
                break
    return tet_ids, bary


def assemble(
    mesh: TetMesh,
    materials: dict[int, Material],
    points,
    displacements,
    confidences,
    match_stiffness_scale: float = 0.005,
) -> FemSystem:
    """Build the coupled system from a mesh and block matches (all in mm).

    Matches outside every non-removed tet are deactivated with a warning.
    Match weights are the confidences scaled by the mean stiffness diagonal
    times match_stiffness_scale. Keeping the elastic term dominant makes the
    early approximation solves robust for outlier ranking; the balance
    factor cancels in the fixed point of the force-relaxation loop, which
    still interpolates the surviving matches.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    displacements = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    confidences = np.asarray(confidences, dtype=np.float64).reshape(-1)
    m = len(points)
    if len(displacements) != m or len(confidences) != m:
        raise ValueError(
            f"points ({m}), displacements ({len(displacements)}) and confidences "
            f"({len(confidences)}) must agree in length"
        )
    if m and (not np.all(np.isfinite(confidences)) or confidences.min() < 0):
        raise ValueError("confidences must be finite and non-negative")
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(displacements))):
        raise ValueError("match positions and displacements must be finite")
    if match_stiffness_scale <= 0:
        raise ValueError(f"match_stiffness_scale must be positive, got {match_stiffness_scale}")

    k = assemble_stiffness(mesh, materials)
    n = mesh.n_vertices

    tet_ids, bary = locate_in_mesh(mesh, points)
    active = tet_ids >= 0
    dropped = int(m - active.sum())
    if dropped:
        logger.warning("%d of %d matches fall outside the mesh and were deactivated",
                       dropped, m)

    rows, cols, vals = [], [], []
    for i in np.flatnonzero(active):
        vidx = mesh.tets[tet_ids[i]]
        for c in range(3):
            rows.append(np.full(4, 3 * i + c))
            cols.append(3 * vidx + c)
            vals.append(bary[i])
    if rows:
        h = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(3 * m, 3 * n),
        ).tocsr()
    else:
        h = sp.csr_matrix((3 * m, 3 * n))

    diag = k.diagonal()
    pos = diag[diag > 0]
    scale = match_stiffness_scale * (float(pos.mean()) if pos.size else 1.0)
    return FemSystem(
        K=k,
        H=h,
        s=confidences * scale,
        D=displacements.ravel().copy(),
        F=np.zeros(3 * n),
        active=active,
        points=points.copy(),
        match_scale=scale,
    )


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def solve_linear(sys: FemSystem, cfg: SolveConfig | None = None,
                 force: np.ndarray | None = None,
                 x0: np.ndarray | None = None) -> np.ndarray:
    """Solve [K + H^T S H] U = H^T S D + F by Jacobi-preconditioned CG.

    Vertices touched by no non-removed tet and no match are held at zero.
    """
    cfg = cfg or SolveConfig()
    n_active = int(sys.active.sum())
    if n_active < MIN_ACTIVE_MATCHES:
        raise SingularSystemError(
            f"system needs at least {MIN_ACTIVE_MATCHES} active matches to pin the "
            f"rigid modes, got {n_active}"
        )
    a = sys.lhs()
    b = sys.rhs(force if force is not None else sys.F)
    diag = a.diagonal()
    free = diag > 0
    u = np.zeros(sys.n_dof)
    if not free.any():
        return u
    a_red = a[free][:, free].tocsr()
    b_red = b[free]
    if not np.linalg.norm(b_red) > 0:
        return u
    x0_red = None if x0 is None else np.asarray(x0, dtype=np.float64)[free]
    precond = sp.diags(1.0 / diag[free])
    x, info = cg(
        a_red, b_red, x0=x0_red, rtol=cfg.cg_tol, atol=0.0,
        maxiter=cfg.cg_max_iter, M=precond,
    )
    if info != 0 or not np.all(np.isfinite(x)):
        raise SingularSystemError(
            f"conjugate gradient failed (info={info}) within {cfg.cg_max_iter} iterations"
        )
    u[free] = x
    return u


def match_error(sys: FemSystem, u: np.ndarray, k: int) -> float:
    """Euclidean mismatch (mm) of active match k under displacement u."""
    if not sys.active[k]:
        raise ValueError(f"match {k} is not active")
    return float(sys.match_errors(u)[k])


def _quantiles(values: np.ndarray) -> dict:
    if values.size == 0:
        return {"min": 0.0, "q25": 0.0, "median": 0.0, "q75": 0.0, "max": 0.0}
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return {"min": float(q[0]), "q25": float(q[1]), "median": float(q[2]),
            "q75": float(q[3]), "max": float(q[4])}


@dataclass
class RobustResult:
    u: np.ndarray
    rejected: list
    trace: list = dc_field(default_factory=list)


def robust_solve(sys: FemSystem, cfg: SolveConfig | None = None) -> RobustResult:
    """Outlier-rejecting approximation-to-interpolation solve.

    Each rejection round applies one force-relaxation step
    (F <- K U, solve, rank active matches by mismatch, deactivate the
    scheduled quota). The convergence phase then restarts from zero and
    relaxes until successive iterates differ by less than convergence_tol
    (infinity norm) or the iteration budget runs out. The fixed point
    satisfies the match normal equations H^T S H U = H^T S D over the
    surviving active set.
    """
    cfg = cfg or SolveConfig()
    m0 = int(sys.active.sum())
    quota = 0
    if cfg.rejection_rounds > 0 and cfg.rejection_fraction > 0:
        quota = max(
            int(math.floor(cfg.rejection_fraction * m0 / cfg.rejection_rounds)), 1
        )
    u = np.zeros(sys.n_dof)
    rejected: list[int] = []
    trace: list[dict] = []

    for rnd in range(cfg.rejection_rounds):
        force = sys.K @ u
        u = solve_linear(sys, cfg, force=force, x0=u)
        xi = sys.match_errors(u)
        act = np.flatnonzero(sys.active)
        take = min(quota, act.size)
        drop = act[np.lexsort((act, -xi[act]))[:take]] if take else np.empty(0, int)
        sys.active[drop] = False
        rejected.extend(int(i) for i in drop)
        trace.append({
            "phase": "reject",
            "round": rnd,
            "active_before": int(act.size),
            "active_after": int(act.size - take),
            "rejected_now": [int(i) for i in drop],
            "xi_mm": _quantiles(xi[act]),
        })

    # the rejection rounds above only decide the active set; the displacement
    # is rebuilt from scratch so deactivated matches leave no residue in
    # directions the surviving matches cannot observe
    u = np.zeros(sys.n_dof)
    s_saved = sys.s
    sys.s = sys.s * cfg.final_scale_boost
    try:
        for it in range(cfg.max_final_iters):
            force = sys.K @ u
            u_next = solve_linear(sys, cfg, force=force, x0=u)
            delta = float(np.max(np.abs(u_next - u))) if u_next.size else 0.0
            u = u_next
            act = np.flatnonzero(sys.active)
            trace.append({
                "phase": "relax",
                "iteration": it,
                "delta_inf_mm": delta,
                "active": int(act.size),
                "xi_mm": _quantiles(sys.match_errors(u)[act]),
            })
            if delta < cfg.convergence_tol:
                break
    finally:
        sys.s = s_saved

    sys.F = sys.K @ u
    rejected.sort()
    return RobustResult(u=u, rejected=rejected, trace=trace)
