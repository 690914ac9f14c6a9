"""Volume containers, synthetic phantoms, warping, and the DVOL/DVEC file formats.

Conventions used throughout the package: voxel (i, j, k) has its center at
``origin + (i, j, k) * spacing`` in millimetres, arrays are indexed
``[x, y, z]``, and serialized payloads are x-fastest little-endian.
"""

from __future__ import annotations

import itertools
import logging
import zlib
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from .errors import FormatError

if TYPE_CHECKING:
    from .mesh import TetMesh

logger = logging.getLogger(__name__)

VOLUME_MAGIC = "DVOL1"
FIELD_MAGIC = "DVEC1"
MIN_PHANTOM_DIM = 16
PHANTOM_KINDS = ("sphere-shell", "two-tissue-tumor", "resected-tumor")

# barycentric slack when deciding whether a voxel center sits inside a tet
_BARY_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Regular voxel lattice: dimensions, spacing (mm), and origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValueError(f"origin must have three components, got {self.origin}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def voxel_to_mm(self, idx) -> np.ndarray:
        """Map voxel coordinates (any leading shape, last axis 3) to mm."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def mm_to_voxel(self, pts) -> np.ndarray:
        """Map mm positions to continuous voxel coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers in mm, shaped (nx, ny, nz, 3)."""
        axes = [
            self.origin[a] + self.spacing[a] * np.arange(self.dims[a], dtype=np.float64)
            for a in range(3)
        ]
        xs, ys, zs = np.meshgrid(*axes, indexing="ij")
        return np.stack([xs, ys, zs], axis=-1)


@dataclass
class ScalarVolume:
    """Intensity volume, float32 voxels indexed [x, y, z]."""

    grid: Grid
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.shape != self.grid.dims:
            raise ValueError(
                f"voxel array shape {self.voxels.shape} does not match dims {self.grid.dims}"
            )

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin


@dataclass
class LabelVolume:
    """Segmentation labels on the same lattice, uint16, 0 = background."""

    grid: Grid
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.labels.shape != self.grid.dims:
            raise ValueError(
                f"label array shape {self.labels.shape} does not match dims {self.grid.dims}"
            )

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin


@dataclass
class DenseDeformation:
    """Per-voxel displacement in mm, float32, shaped (nx, ny, nz, 3).

    The field is a pullback map: a warped image reads its value at
    ``x - d(x)``. Voxels outside the meshed region carry zero vectors.
    """

    grid: Grid
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.shape != self.grid.dims + (3,):
            raise ValueError(
                f"vector array shape {self.vectors.shape} does not match dims {self.grid.dims}"
            )

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin


def zero_field(grid: Grid) -> DenseDeformation:
    return DenseDeformation(grid, np.zeros(grid.dims + (3,), dtype=np.float32))


@dataclass(frozen=True)
class Landmark:
    """Named anatomical position in mm (undeformed frame)."""

    name: str
    position: tuple[float, float, float]


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------


def _ellipsoid_mask(centers_mm: np.ndarray, center, semi) -> np.ndarray:
    rel = (centers_mm - np.asarray(center)) / np.asarray(semi)
    return np.sum(rel * rel, axis=-1) <= 1.0


def _sphere_shell(grid: Grid):
    centers = grid.voxel_centers()
    extent = (np.array(grid.dims) - 1) * np.array(grid.spacing)
    center = np.asarray(grid.origin) + extent / 2.0
    r_out = 0.38 * extent.min()
    r_in = r_out - 2.0 * min(grid.spacing)
    r = np.linalg.norm(centers - center, axis=-1)
    vox = np.zeros(grid.dims, dtype=np.float32)
    vox[r <= r_out] = 1000.0
    vox[r <= r_in] = 500.0
    labels = np.zeros(grid.dims, dtype=np.uint16)
    labels[r <= r_out] = 1
    return ScalarVolume(grid, vox), LabelVolume(grid, labels), []


def _two_tissue_geometry(grid: Grid):
    extent = (np.array(grid.dims) - 1) * np.array(grid.spacing)
    center = np.asarray(grid.origin) + extent / 2.0
    head_semi = extent * np.array([0.42, 0.40, 0.38])
    tumor_center = center + extent * np.array([0.08, 0.05, 0.03])
    tumor_semi = extent * np.array([0.16, 0.13, 0.11])
    return center, head_semi, tumor_center, tumor_semi


def _two_tissue(grid: Grid, seed: int):
    rng = np.random.default_rng(seed)
    centers = grid.voxel_centers()
    center, head_semi, tumor_center, tumor_semi = _two_tissue_geometry(grid)
    head = _ellipsoid_mask(centers, center, head_semi)
    tumor = _ellipsoid_mask(centers, tumor_center, tumor_semi)

    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=grid.dims), sigma=1.2)
    texture *= 130.0 / max(float(texture.std()), 1e-12)

    vox = np.zeros(grid.dims, dtype=np.float64)
    vox[head] = 500.0 + texture[head]
    vox[tumor] = 900.0 + texture[tumor]
    # keep tissue well above any dark-cavity threshold
    vox[head] = np.maximum(vox[head], 200.0)

    labels = np.zeros(grid.dims, dtype=np.uint16)
    labels[head] = 1
    labels[tumor] = 2

    a = tumor_semi
    landmarks = [
        Landmark("A", tuple(tumor_center + np.array([a[0] + 2.0, 0.0, 0.0]))),
        Landmark("B", tuple(tumor_center - np.array([a[0] + 2.0, 0.0, 0.0]))),
        Landmark("C", tuple(center + np.array([0.0, 0.6 * head_semi[1], 0.0]))),
        Landmark("D", tuple(center - np.array([0.0, 0.6 * head_semi[1], 0.0]))),
        Landmark("E", tuple(center + np.array([0.0, 0.0, 0.6 * head_semi[2]]))),
        Landmark("F", tuple(center - np.array([0.0, 0.0, 0.6 * head_semi[2]]))),
    ]
    return ScalarVolume(grid, vox.astype(np.float32)), LabelVolume(grid, labels), landmarks


def _carve_resection(grid: Grid, scalar: ScalarVolume, labels: LabelVolume, landmarks):
    centers = grid.voxel_centers()
    _, _, tumor_center, tumor_semi = _two_tissue_geometry(grid)
    tumor = _ellipsoid_mask(centers, tumor_center, tumor_semi)
    # open resection: the cavity continues through a tract to the +x face so
    # that cavity and outside background form one connected component
    tract_r = 2.5 * min(grid.spacing)
    dy = centers[..., 1] - tumor_center[1]
    dz = centers[..., 2] - tumor_center[2]
    tract = (dy * dy + dz * dz <= tract_r * tract_r) & (centers[..., 0] >= tumor_center[0])
    cavity = tumor | tract
    vox = scalar.voxels.copy()
    vox[cavity] = 0.0
    lab = labels.labels.copy()
    lab[cavity] = 0
    return ScalarVolume(grid, vox), LabelVolume(grid, lab), landmarks


def make_phantom(kind: str, dims, seed: int = 0):
    """Build a deterministic synthetic phantom.

    Args:
        kind: one of ``sphere-shell``, ``two-tissue-tumor``, ``resected-tumor``.
        dims: int or 3-tuple of ints, at least 16 voxels per axis.
        seed: texture RNG seed; identical seeds give identical volumes.

    Returns:
        (ScalarVolume, LabelVolume, list[Landmark]); the landmark list is
        empty for ``sphere-shell``.
    """
    if isinstance(dims, (int, np.integer)):
        dims = (int(dims),) * 3
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError(f"dims must be an int or a 3-tuple, got {dims}")
    if any(d < MIN_PHANTOM_DIM for d in dims):
        raise ValueError(
            f"phantom dims must be at least {MIN_PHANTOM_DIM} voxels per axis, got {dims}"
        )
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    grid = Grid(dims)
    if kind == "sphere-shell":
        return _sphere_shell(grid)
    scalar, labels, landmarks = _two_tissue(grid, seed)
    if kind == "two-tissue-tumor":
        return scalar, labels, landmarks
    return _carve_resection(grid, scalar, labels, landmarks)


# ---------------------------------------------------------------------------
# sampling, warping, composition
# ---------------------------------------------------------------------------


def _sample_trilinear(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear sampling at continuous voxel coords; out-of-bounds reads are 0.

    values may have a trailing component axis (vector fields).
    """
    dims = values.shape[:3]
    comp = values.shape[3:]
    floor = np.floor(coords)
    frac = coords - floor
    base = floor.astype(np.int64)
    out_shape = coords.shape[:-1] + comp
    out = np.zeros(out_shape, dtype=np.float64)
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + np.array(corner)
        w = np.ones(coords.shape[:-1], dtype=np.float64)
        valid = np.ones(coords.shape[:-1], dtype=bool)
        for ax in range(3):
            w = w * (frac[..., ax] if corner[ax] else 1.0 - frac[..., ax])
            valid &= (idx[..., ax] >= 0) & (idx[..., ax] < dims[ax])
        ix = np.clip(idx[..., 0], 0, dims[0] - 1)
        iy = np.clip(idx[..., 1], 0, dims[1] - 1)
        iz = np.clip(idx[..., 2], 0, dims[2] - 1)
        vals = values[ix, iy, iz].astype(np.float64)
        if comp:
            w = w[..., None]
            valid = valid[..., None]
        out += np.where(valid, w * vals, 0.0)
    return out


def _sample_nearest(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    dims = values.shape[:3]
    idx = np.rint(coords).astype(np.int64)
    valid = np.ones(coords.shape[:-1], dtype=bool)
    for ax in range(3):
        valid &= (idx[..., ax] >= 0) & (idx[..., ax] < dims[ax])
    ix = np.clip(idx[..., 0], 0, dims[0] - 1)
    iy = np.clip(idx[..., 1], 0, dims[1] - 1)
    iz = np.clip(idx[..., 2], 0, dims[2] - 1)
    vals = values[ix, iy, iz]
    if values.ndim > 3:
        valid = valid[..., None]
    return np.where(valid, vals, 0)


def sample_field(field: DenseDeformation, pts_mm) -> np.ndarray:
    """Trilinearly sample displacement vectors (mm) at arbitrary mm positions."""
    coords = field.grid.mm_to_voxel(pts_mm)
    return _sample_trilinear(field.vectors, coords)


def warp_volume(vol: ScalarVolume, field: DenseDeformation, interp: str = "linear") -> ScalarVolume:
    """Backward-map ``vol`` through ``field``: output(x) = vol(x - d(x)).

    Sampling happens at voxel centers; reads outside the volume yield 0.
    """
    if interp not in ("linear", "nearest"):
        raise ValueError(f"interp must be 'linear' or 'nearest', got {interp!r}")
    if field.grid.dims != vol.grid.dims:
        raise ValueError("field and volume must share the same lattice")
    spacing = np.asarray(vol.grid.spacing)
    idx = np.indices(vol.grid.dims, dtype=np.float64)
    coords = np.stack([idx[0], idx[1], idx[2]], axis=-1)
    coords -= field.vectors.astype(np.float64) / spacing
    if interp == "linear":
        out = _sample_trilinear(vol.voxels, coords)
    else:
        out = _sample_nearest(vol.voxels, coords)
    return ScalarVolume(vol.grid, out.astype(np.float32))


def warp_labels(labels: LabelVolume, field: DenseDeformation) -> LabelVolume:
    """Nearest-neighbor backward warp for label volumes."""
    if field.grid.dims != labels.grid.dims:
        raise ValueError("field and volume must share the same lattice")
    spacing = np.asarray(labels.grid.spacing)
    idx = np.indices(labels.grid.dims, dtype=np.float64)
    coords = np.stack([idx[0], idx[1], idx[2]], axis=-1)
    coords -= field.vectors.astype(np.float64) / spacing
    out = _sample_nearest(labels.labels, coords)
    return LabelVolume(labels.grid, out.astype(np.uint16))


def compose_pullback(increment: DenseDeformation, previous: DenseDeformation) -> DenseDeformation:
    """Compose pullback fields: d_total(x) = d_inc(x) + d_prev(x - d_inc(x)).

    Warping once by the result matches warping by ``previous`` then by
    ``increment`` up to interpolation error.
    """
    if increment.grid.dims != previous.grid.dims:
        raise ValueError("fields must share the same lattice")
    grid = increment.grid
    centers = grid.voxel_centers()
    inc = increment.vectors.astype(np.float64)
    prev_at = _sample_trilinear(
        previous.vectors, grid.mm_to_voxel(centers - inc)
    )
    return DenseDeformation(grid, (inc + prev_at).astype(np.float32))


def mesh_to_dense(mesh: "TetMesh", u: np.ndarray, grid: Grid) -> DenseDeformation:
    """Rasterize per-vertex displacements to a dense field.

    Each voxel center inside a non-removed tetrahedron gets the barycentric
    interpolation of that tet's vertex displacements; everything else is zero.
    Tets are processed in index order, so the result is deterministic.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (len(mesh.vertices), 3):
        raise ValueError(f"u must be ({len(mesh.vertices)}, 3), got {u.shape}")
    verts = mesh.vertices
    tets = mesh.tets
    keep = np.flatnonzero(~mesh.removed)
    vectors = np.zeros(grid.dims + (3,), dtype=np.float64)
    if keep.size == 0:
        return DenseDeformation(grid, vectors.astype(np.float32))

    v0 = verts[tets[:, 0]]
    edges = np.stack(
        [verts[tets[:, k]] - v0 for k in (1, 2, 3)], axis=-1
    )  # (m, 3, 3), columns are edge vectors
    inv = np.linalg.inv(edges[keep])

    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    dims = grid.dims
    for row, t in enumerate(keep):
        pts = verts[tets[t]]
        lo = np.maximum(np.ceil((pts.min(axis=0) - origin) / spacing - _BARY_TOL), 0).astype(int)
        hi = np.minimum(
            np.floor((pts.max(axis=0) - origin) / spacing + _BARY_TOL),
            np.array(dims) - 1,
        ).astype(int)
        if np.any(hi < lo):
            continue
        ax = [origin[a] + spacing[a] * np.arange(lo[a], hi[a] + 1) for a in range(3)]
        px, py, pz = np.meshgrid(*ax, indexing="ij")
        p = np.stack([px, py, pz], axis=-1) - v0[t]
        bary = p @ inv[row].T  # (..., 3) weights of vertices 1..3
        b0 = 1.0 - bary.sum(axis=-1)
        inside = (bary >= -_BARY_TOL).all(axis=-1) & (b0 >= -_BARY_TOL)
        if not inside.any():
            continue
        disp = (
            b0[..., None] * u[tets[t, 0]]
            + bary[..., 0:1] * u[tets[t, 1]]
            + bary[..., 1:2] * u[tets[t, 2]]
            + bary[..., 2:3] * u[tets[t, 3]]
        )
        block = vectors[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
        block[inside] = disp[inside]
    return DenseDeformation(grid, vectors.astype(np.float32))


# ---------------------------------------------------------------------------
# DVOL / DVEC file formats
# ---------------------------------------------------------------------------


def _format_floats(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def _header_bytes(magic: str, dtype: str, grid: Grid, payload: bytes) -> bytes:
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    lines = [
        magic,
        f"dtype {dtype}",
        "dims {} {} {}".format(*grid.dims),
        f"spacing {_format_floats(grid.spacing)}",
        f"origin {_format_floats(grid.origin)}",
        f"crc32 {crc:08x}",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def _split_header(blob: bytes, path) -> tuple[list[str], bytes]:
    pos = 0
    lines = []
    for _ in range(6):
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: malformed header: fewer than 6 header lines")
        try:
            lines.append(blob[pos:nl].decode("ascii"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: malformed header: non-ASCII bytes") from exc
        pos = nl + 1
    return lines, blob[pos:]


def _parse_header(lines: list[str], expected_magic: str, path) -> tuple[str, Grid, int]:
    if lines[0] != expected_magic:
        raise FormatError(
            f"{path}: malformed header: expected magic {expected_magic}, got {lines[0]!r}"
        )
    fields = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    for key in ("dtype", "dims", "spacing", "origin", "crc32"):
        if key not in fields:
            raise FormatError(f"{path}: malformed header: missing {key!r} line")
    dtype = fields["dtype"]
    if dtype not in ("f32", "u16"):
        raise FormatError(f"{path}: malformed header: unknown dtype {dtype!r}")
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        origin = tuple(float(v) for v in fields["origin"].split())
        crc = int(fields["crc32"], 16)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    try:
        grid = Grid(dims, spacing, origin)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    return dtype, grid, crc


def _check_payload(payload: bytes, expected: int, crc: int, path):
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated payload: expected {expected} bytes, got {len(payload)}"
        )
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != crc:
        raise FormatError(
            f"{path}: checksum mismatch: header says {crc:08x}, payload is {actual:08x}"
        )


def write_volume(vol: ScalarVolume | LabelVolume, path) -> None:
    """Write a scalar or label volume as DVOL1 (round-trips bit-exactly)."""
    if isinstance(vol, ScalarVolume):
        dtype, arr = "f32", vol.voxels.astype("<f4")
    elif isinstance(vol, LabelVolume):
        dtype, arr = "u16", vol.labels.astype("<u2")
    else:
        raise TypeError(f"expected ScalarVolume or LabelVolume, got {type(vol)!r}")
    payload = arr.ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(_header_bytes(VOLUME_MAGIC, dtype, vol.grid, payload))
        fh.write(payload)


def read_volume(path) -> ScalarVolume | LabelVolume:
    """Read a DVOL1 file; dtype f32 gives a ScalarVolume, u16 a LabelVolume."""
    with open(path, "rb") as fh:
        blob = fh.read()
    lines, payload = _split_header(blob, path)
    dtype, grid, crc = _parse_header(lines, VOLUME_MAGIC, path)
    itemsize = 4 if dtype == "f32" else 2
    _check_payload(payload, grid.n_voxels * itemsize, crc, path)
    if dtype == "f32":
        arr = np.frombuffer(payload, dtype="<f4").reshape(grid.dims, order="F")
        return ScalarVolume(grid, arr)
    arr = np.frombuffer(payload, dtype="<u2").reshape(grid.dims, order="F")
    return LabelVolume(grid, arr)


def write_field(field: DenseDeformation, path) -> None:
    """Write a dense deformation as DVEC1 (3 interleaved f32 per voxel)."""
    arr = field.vectors.astype("<f4")
    payload = arr.transpose(2, 1, 0, 3).ravel(order="C").tobytes()
    with open(path, "wb") as fh:
        fh.write(_header_bytes(FIELD_MAGIC, "f32", field.grid, payload))
        fh.write(payload)


def read_field(path) -> DenseDeformation:
    with open(path, "rb") as fh:
        blob = fh.read()
    lines, payload = _split_header(blob, path)
    dtype, grid, crc = _parse_header(lines, FIELD_MAGIC, path)
    if dtype != "f32":
        raise FormatError(f"{path}: malformed header: deformation fields must be f32")
    _check_payload(payload, grid.n_voxels * 12, crc, path)
    arr = np.frombuffer(payload, dtype="<f4").reshape(
        (grid.dims[2], grid.dims[1], grid.dims[0], 3)
    )
    return DenseDeformation(grid, arr.transpose(2, 1, 0, 3))
