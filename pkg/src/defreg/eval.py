"""Registration accuracy metrics.

Edge point sets come from a 3D Canny detector (smooth, central-difference
gradient, non-maximum suppression along 13 quantized directions, hysteresis);
mismatch between point sets is the symmetric Hausdorff distance. Edge-based
HD is a relative comparison figure only, not a clinical accuracy measure.
Landmark errors compare warped positions against intraoperative ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import FormatError
from .volume import DenseDeformation, ScalarVolume, sample_field

LANDMARK_CSV_HEADER = "name,pre_x,pre_y,pre_z,intra_x,intra_y,intra_z"

# axis and diagonal direction classes for gradient quantization
_NMS_DIRECTIONS = np.array([
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
    (1, 1, 1), (1, -1, 1), (1, 1, -1), (1, -1, -1),
], dtype=np.float64)


@dataclass(frozen=True)
class LandmarkPair:
    """Corresponding positions (mm) in the pre- and intraoperative frames."""

    name: str
    pre: tuple[float, float, float]
    intra: tuple[float, float, float]

    def __post_init__(self):
        for label, v in (("pre", self.pre), ("intra", self.intra)):
            if len(v) != 3 or not all(np.isfinite(v)):
                raise ValueError(f"landmark {self.name!r}: {label} must be a finite 3-vector")


@dataclass
class LandmarkReport:
    min_mm: float
    max_mm: float
    mean_mm: float
    per_landmark: dict = dc_field(default_factory=dict)
    excluded: list = dc_field(default_factory=list)


def _as_points(points, label: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError(f"{label} point set is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{label} point set has non-finite coordinates")
    return pts


def hausdorff(a, b, percentile: float = 100.0) -> tuple[float, float, float]:
    """Symmetric Hausdorff distance (mm): (H, h(A,B), h(B,A)).

    h(A,B) = max_a min_b ||a-b||; the percentile option replaces the max by
    the given percentile of the directed distances (100 = exact max).
    """
    a = _as_points(a, "first")
    b = _as_points(b, "second")
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    d_ab = cKDTree(b).query(a, k=1, workers=1)[0]
    d_ba = cKDTree(a).query(b, k=1, workers=1)[0]
    if percentile >= 100.0:
        h_ab, h_ba = float(d_ab.max()), float(d_ba.max())
    else:
        h_ab = float(np.percentile(d_ab, percentile))
        h_ba = float(np.percentile(d_ba, percentile))
    return max(h_ab, h_ba), h_ab, h_ba


def canny_edges(vol: ScalarVolume, sigma: float = 1.0, low: float = 0.1,
                high: float = 0.2) -> np.ndarray:
    """Edge voxel centers (mm) of a 3D Canny detector.

    sigma is the Gaussian scale in voxels; low and high are hysteresis
    thresholds as fractions of the maximum gradient magnitude, so a high
    value above 1 suppresses every edge.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not 0.0 <= low < high:
        raise ValueError(f"thresholds need 0 <= low < high, got {low}, {high}")
    smooth = ndimage.gaussian_filter(vol.voxels.astype(np.float64), sigma=sigma)
    grad = np.stack(np.gradient(smooth), axis=0)  # (3, nx, ny, nz), voxel units
    mag = np.sqrt(np.sum(grad * grad, axis=0))
    gmax = float(mag.max())
    if gmax <= 0:
        return np.zeros((0, 3))

    dhat = _NMS_DIRECTIONS / np.linalg.norm(_NMS_DIRECTIONS, axis=1, keepdims=True)
    dots = np.abs(np.einsum("cd,dxyz->cxyz", dhat, grad))
    cls = np.argmax(dots, axis=0)

    padded = np.pad(mag, 1)
    keep = np.zeros(mag.shape, dtype=bool)
    for c, off in enumerate(_NMS_DIRECTIONS.astype(int)):
        plus = padded[tuple(slice(1 + o, (-1 + o) or None) for o in off)]
        minus = padded[tuple(slice(1 - o, (-1 - o) or None) for o in off)]
        sel = (cls == c) & (mag >= plus) & (mag >= minus)
        keep |= sel

    weak = keep & (mag >= low * gmax)
    strong = keep & (mag >= high * gmax)
    if not strong.any():
        return np.zeros((0, 3))
    lab, _ = ndimage.label(weak, structure=np.ones((3, 3, 3), dtype=bool))
    ids = np.unique(lab[strong])
    final = weak & np.isin(lab, ids[ids > 0])
    idx = np.argwhere(final)
    return vol.grid.voxel_to_mm(idx)


def edge_hd(pre_warped: ScalarVolume, intra: ScalarVolume, sigma: float = 1.0,
            low: float = 0.1, high: float = 0.2, percentile: float = 100.0) -> float:
    """Hausdorff distance (mm) between the Canny edge sets of two volumes."""
    a = canny_edges(pre_warped, sigma=sigma, low=low, high=high)
    b = canny_edges(intra, sigma=sigma, low=low, high=high)
    if len(a) == 0 or len(b) == 0:
        raise ValueError(
            f"empty edge set (pre: {len(a)} points, intra: {len(b)} points); "
            f"lower the thresholds or check the volumes"
        )
    return hausdorff(a, b, percentile=percentile)[0]


def landmark_errors(pairs, field: DenseDeformation) -> LandmarkReport:
    """Distance (mm) between warped pre positions and intra positions.

    The warped position is pre + field(pre). Landmarks outside the field
    extent are excluded and listed in the report.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one landmark pair")
    dims = np.array(field.grid.dims)
    inside, outside = [], []
    for p in pairs:
        coords = field.grid.mm_to_voxel(p.pre)
        if np.all(coords >= 0) and np.all(coords <= dims - 1):
            inside.append(p)
        else:
            outside.append(p.name)
    if not inside:
        raise ValueError("every landmark lies outside the field extent")
    pre = np.array([p.pre for p in inside])
    intra = np.array([p.intra for p in inside])
    warped = pre + sample_field(field, pre)
    errs = np.linalg.norm(warped - intra, axis=1)
    return LandmarkReport(
        min_mm=float(errs.min()),
        max_mm=float(errs.max()),
        mean_mm=float(errs.mean()),
        per_landmark={p.name: float(e) for p, e in zip(inside, errs)},
        excluded=outside,
    )


def evaluation_report(hd_mm: float, landmarks: LandmarkReport | None = None,
                      n_tets: int | None = None,
                      n_vertices: int | None = None) -> dict:
    """Accuracy summary; keys mirror the standard result-table columns."""
    out: dict = {"HD": hd_mm}
    if landmarks is not None:
        out["Min error"] = landmarks.min_mm
        out["Max error"] = landmarks.max_mm
        out["Mean error"] = landmarks.mean_mm
        if landmarks.excluded:
            out["excluded_landmarks"] = list(landmarks.excluded)
    if n_tets is not None:
        out["# tets"] = int(n_tets)
    if n_vertices is not None:
        out["# vertices"] = int(n_vertices)
    out["note"] = "edge HD is a relative comparison figure, not a clinical measure"
    return out


# ---------------------------------------------------------------------------
# landmark file format
# ---------------------------------------------------------------------------


def write_landmark_pairs(pairs, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        fh.write(LANDMARK_CSV_HEADER + "\n")
        writer = csv.writer(fh)
        for p in pairs:
            writer.writerow([p.name, *(repr(float(v)) for v in p.pre),
                             *(repr(float(v)) for v in p.intra)])


def read_landmark_pairs(path) -> list[LandmarkPair]:
    with open(path, "r", newline="", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != LANDMARK_CSV_HEADER:
        raise FormatError(
            f"{path}: malformed landmark file: expected header {LANDMARK_CSV_HEADER!r}"
        )
    pairs = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row:
            continue
        if len(row) != 7:
            raise FormatError(f"{path}: line {lineno}: expected 7 fields, got {len(row)}")
        try:
            pre = tuple(float(v) for v in row[1:4])
            intra = tuple(float(v) for v in row[4:7])
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from exc
        pairs.append(LandmarkPair(row[0], pre, intra))
    return pairs
