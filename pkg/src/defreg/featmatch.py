"""Feature selection and exhaustive block matching between volume pairs.

Blocks are odd-extent boxes of voxels; a feature's search window is an odd
box at least as large as the block. Displacements are reported in mm from
the floating volume toward the reference volume.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volume import ScalarVolume

logger = logging.getLogger(__name__)

CONNECTIVITIES = ("face", "vertex")


@dataclass(frozen=True)
class MatchConfig:
    """Block-matching parameters (extents in voxels, odd per axis)."""

    block: tuple[int, int, int] = (3, 3, 3)
    window: tuple[int, int, int] = (7, 7, 3)
    selection_fraction: float = 0.05
    connectivity: str = "face"

    def __post_init__(self):
        object.__setattr__(self, "block", tuple(int(v) for v in self.block))
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        for name, ext in (("block", self.block), ("window", self.window)):
            if len(ext) != 3 or any(v < 1 or v % 2 == 0 for v in ext):
                raise ValueError(f"{name} extents must be odd positive ints, got {ext}")
        if any(w < b for w, b in zip(self.window, self.block)):
            raise ValueError(
                f"window {self.window} must contain block {self.block} on every axis"
            )
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ValueError(
                f"selection_fraction must lie in (0, 1], got {self.selection_fraction}"
            )
        if self.connectivity not in CONNECTIVITIES:
            raise ValueError(
                f"connectivity must be one of {CONNECTIVITIES}, got {self.connectivity!r}"
            )

    @property
    def half_block(self):
        return tuple(b // 2 for b in self.block)

    @property
    def half_window(self):
        return tuple(w // 2 for w in self.window)

    @property
    def margin(self):
        """Minimum center distance from the boundary: half block + half window."""
        return tuple(b // 2 + w // 2 for b, w in zip(self.block, self.window))


@dataclass(frozen=True)
class FeaturePoint:
    """Selected block center; index is the x-fastest flat voxel index."""

    index: int
    center: tuple[int, int, int]
    variability: float


@dataclass(frozen=True)
class FeatureMatch:
    point: FeaturePoint
    displacement: tuple[float, float, float]  # mm
    ncc: float
    confidence: float


def ncc(a, b) -> float:
    """Zero-mean normalized cross-correlation in [-1, 1]; 0 if either block is flat."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"blocks must have equal size, got {a.size} and {b.size}")
    da = a - a.mean()
    db = b - b.mean()
    na = float(da @ da)
    nb = float(db @ db)
    if na <= 0.0 or nb <= 0.0:
        return 0.0
    return float(np.clip((da @ db) / math.sqrt(na * nb), -1.0, 1.0))


def _candidate_axes(dims, cfg: MatchConfig):
    """Block-lattice center coordinates per axis (may be empty)."""
    axes = []
    for a in range(3):
        lo = cfg.margin[a]
        hi = dims[a] - 1 - cfg.margin[a]
        axes.append(np.arange(lo, hi + 1, cfg.block[a]) if hi >= lo else np.arange(0))
    return axes


def select_features(vol: ScalarVolume, cfg: MatchConfig) -> list[FeaturePoint]:
    """Rank candidate blocks by intensity variance and keep the top fraction.

    Candidates tile the volume on a block-pitch lattice whose centers keep a
    half-block-plus-half-window margin from every boundary; flat blocks
    (zero variance) never become candidates. Selection walks the ranking and
    skips blocks adjacent (per cfg.connectivity) on the lattice to an
    already selected block, until ceil(fraction * candidate count) features
    are kept. The result is sorted by flat voxel index.
    """
    dims = vol.grid.dims
    axes = _candidate_axes(dims, cfg)
    if any(ax.size == 0 for ax in axes):
        logger.warning("no feature candidates: volume too small for block/window")
        return []
    hb = cfg.half_block
    sw = sliding_window_view(vol.voxels, cfg.block)
    starts = [ax - hb[a] for a, ax in enumerate(axes)]
    blocks = sw[np.ix_(starts[0], starts[1], starts[2])].astype(np.float64)
    flat = blocks.reshape(blocks.shape[:3] + (-1,))
    variances = flat.var(axis=-1)

    gx, gy, gz = np.meshgrid(
        np.arange(axes[0].size), np.arange(axes[1].size), np.arange(axes[2].size),
        indexing="ij",
    )
    lattice = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    centers = np.stack(
        [axes[0][lattice[:, 0]], axes[1][lattice[:, 1]], axes[2][lattice[:, 2]]], axis=1
    )
    var = variances.ravel()
    keep = var > 0.0
    if not keep.any():
        logger.warning("no feature candidates: every block has zero intensity variance")
        return []
    lattice = lattice[keep]
    centers = centers[keep]
    var = var[keep]
    n_candidates = var.size
    target = math.ceil(cfg.selection_fraction * n_candidates)

    nx, ny = dims[0], dims[1]
    flat_index = centers[:, 0] + nx * (centers[:, 1] + ny * centers[:, 2])
    order = np.lexsort((flat_index, -var))

    selected: list[int] = []
    occupied: set[tuple[int, int, int]] = set()
    for row in order:
        if len(selected) >= target:
            break
        cell = tuple(int(v) for v in lattice[row])
        if _is_adjacent(cell, occupied, cfg.connectivity):
            continue
        occupied.add(cell)
        selected.append(int(row))
    if len(selected) < target:
        logger.warning(
            "connectivity suppression left %d features (target %d)", len(selected), target
        )

    selected.sort(key=lambda r: int(flat_index[r]))
    return [
        FeaturePoint(
            index=int(flat_index[r]),
            center=tuple(int(v) for v in centers[r]),
            variability=float(var[r]),
        )
        for r in selected
    ]


def _is_adjacent(cell, occupied, connectivity) -> bool:
    x, y, z = cell
    if connectivity == "face":
        steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        steps = [
            (dx, dy, dz)
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dz in (-1, 0, 1)
            if (dx, dy, dz) != (0, 0, 0)
        ]
    return any((x + dx, y + dy, z + dz) in occupied for dx, dy, dz in steps)


def offset_grid(cfg: MatchConfig) -> np.ndarray:
    """All block placements inside the window, as integer voxel offsets.

    Ordered so the zero offset sorts first among equal-magnitude candidates:
    rows are lexicographic in (z, y, x).
    """
    ranges = [
        np.arange(-(hw - hb), hw - hb + 1)
        for hw, hb in zip(cfg.half_window, cfg.half_block)
    ]
    oz, oy, ox = np.meshgrid(ranges[2], ranges[1], ranges[0], indexing="ij")
    return np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)


def block_match(
    floating: ScalarVolume,
    reference: ScalarVolume,
    features: list[FeaturePoint],
    cfg: MatchConfig,
) -> list[FeatureMatch]:
    """Exhaustive NCC search of each feature block over its window.

    The displacement is argmax-NCC in mm; ties prefer the smallest
    displacement magnitude, then lexicographic (z, y, x) offset order.
    Confidence is max(0, ncc) squared.
    """
    if floating.grid.dims != reference.grid.dims:
        raise ValueError("floating and reference volumes must share dimensions")
    dims = floating.grid.dims
    spacing = np.asarray(floating.grid.spacing)
    hb = cfg.half_block
    hw = cfg.half_window
    offsets = offset_grid(cfg)
    disp_mm = offsets * spacing
    mag2 = np.sum(disp_mm * disp_mm, axis=1)
    # lexicographic (z, y, x) rank; offset_grid rows are already in that order
    lex_rank = np.arange(len(offsets))

    fvox = floating.voxels
    rvox = reference.voxels
    matches = []
    for fp in features:
        c = fp.center
        for a in range(3):
            if c[a] < cfg.margin[a] or c[a] > dims[a] - 1 - cfg.margin[a]:
                raise ValueError(
                    f"feature {fp.index} at {c} is too close to the boundary for "
                    f"window {cfg.window}"
                )
        block = fvox[
            c[0] - hb[0] : c[0] + hb[0] + 1,
            c[1] - hb[1] : c[1] + hb[1] + 1,
            c[2] - hb[2] : c[2] + hb[2] + 1,
        ].astype(np.float64)
        window = rvox[
            c[0] - hw[0] : c[0] + hw[0] + 1,
            c[1] - hw[1] : c[1] + hw[1] + 1,
            c[2] - hw[2] : c[2] + hw[2] + 1,
        ]
        sw = sliding_window_view(window, cfg.block).astype(np.float64)
        # sliding axes are (x, y, z); flatten in the offset_grid's (z, y, x) order
        cand = sw.transpose(2, 1, 0, 3, 4, 5).reshape(len(offsets), -1)
        db = block.ravel() - block.mean()
        nb = float(db @ db)
        dc = cand - cand.mean(axis=1, keepdims=True)
        ncand = np.einsum("ij,ij->i", dc, dc)
        num = dc @ db
        scores = np.zeros(len(offsets))
        ok = (ncand > 0.0) & (nb > 0.0)
        scores[ok] = np.clip(num[ok] / np.sqrt(ncand[ok] * nb), -1.0, 1.0)
        best = np.lexsort((lex_rank, mag2, -scores))[0]
        score = float(scores[best])
        matches.append(
            FeatureMatch(
                point=fp,
                displacement=tuple(float(v) for v in disp_mm[best]),
                ncc=score,
                confidence=max(0.0, score) ** 2,
            )
        )
    return matches


MATCH_CSV_HEADER = "index,cx,cy,cz,dx_mm,dy_mm,dz_mm,ncc,confidence"


def write_matches_csv(matches: list[FeatureMatch], path) -> None:
    lines = [MATCH_CSV_HEADER]
    for m in matches:
        cx, cy, cz = m.point.center
        dx, dy, dz = m.displacement
        lines.append(
            f"{m.point.index},{cx},{cy},{cz},{dx!r},{dy!r},{dz!r},{m.ncc!r},{m.confidence!r}"
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
