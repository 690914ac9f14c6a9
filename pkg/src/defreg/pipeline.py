"""Registration pipeline: single-pass, resection-aware, and adaptive modes.

Three modes share one flat configuration surface:

* ``pbnrr``: one block-matching pass feeding the robust elastic solve.
* ``nemnrr``: nested correspondence / deformation / resection estimation.
* ``anrr``: adaptive loop that re-matches and re-meshes against the
  incrementally warped volume until the increment stalls or the
  iteration budget runs out.

The numeric work lives in the stage modules; this module owns sequencing,
configuration parsing, metrics packaging, and provenance. Every stage
failure is re-raised as a StageError tagged with the stage name.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field as dc_field, fields as dc_fields, asdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import ConfigError, DefregError, SingularSystemError, StageError
from .eval import edge_hd, evaluation_report, landmark_errors
from .featmatch import MatchConfig, block_match, select_features
from .fem import Material, SolveConfig, assemble, assemble_stiffness, robust_solve
from .mesh import (
    TetMesh,
    dihedral_angles,
    i2m_bcc,
    isotropic_sizing,
    metric_field,
    refine_to_metric,
    write_mesh,
)
from .resect import NemConfig, nem_register
from .volume import (
    DenseDeformation,
    LabelVolume,
    ScalarVolume,
    compose_pullback,
    mesh_to_dense,
    warp_labels,
    warp_volume,
    write_field,
    write_volume,
)

logger = logging.getLogger(__name__)

MODES = ("pbnrr", "nemnrr", "anrr")
SIZINGS = ("none", "isotropic", "anisotropic")

# elastic-dominant weighting for outlier ranking; the convergence phase of
# robust_solve then boosts the match weights so the force relaxation reaches
# its (weight-independent) fixed point within the iteration budget
MATCH_STIFFNESS_SCALE = 0.005
FINAL_SCALE_BOOST = 100.0

# adaptive loop controls
INCREMENT_STOP_VOXELS = 0.1
REMESH_MIN_DIHEDRAL_DEG = 5.0

# edge extraction used for the per-iteration HD metric
CANNY = {"sigma": 1.0, "low": 0.1, "high": 0.2}


def _default_young() -> dict:
    return {1: 2100.0, 2: 21000.0}


def _default_poisson() -> dict:
    return {1: 0.45, 2: 0.45}


@dataclass(frozen=True)
class RegistrationConfig:
    """Every tunable of the three registration modes, flat and validated.

    Units: mm for delta, Pa for young, fractions in (0, 1] for the
    percentages. ``young``/``poisson`` map tissue label -> constant and must
    cover every label present in the mesh. ``window_after_first`` optionally
    shrinks the search window from the second adaptive iteration on;
    ``None`` keeps the initial window. ``seed`` is recorded in provenance;
    the pipeline itself draws no random numbers.
    """

    mode: str = "pbnrr"
    selection_fraction: float = 0.05
    block: tuple = (3, 3, 3)
    window: tuple = (7, 7, 3)
    window_after_first: tuple | None = None
    connectivity: str = "face"
    delta: float = 5.0
    young: dict = dc_field(default_factory=_default_young)
    poisson: dict = dc_field(default_factory=_default_poisson)
    rejection_fraction: float = 0.25
    rejection_rounds: int = 10
    max_adaptive_iters: int = 10
    sizing: str = "none"
    sizing_k: int = 5
    inflation: float = 1.0
    nem: NemConfig = dc_field(default_factory=NemConfig)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sizing not in SIZINGS:
            raise ValueError(f"sizing must be one of {SIZINGS}, got {self.sizing!r}")
        object.__setattr__(self, "block", tuple(int(v) for v in self.block))
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        if self.window_after_first is not None:
            object.__setattr__(
                self, "window_after_first", tuple(int(v) for v in self.window_after_first)
            )
        object.__setattr__(self, "delta", float(self.delta))
        if not np.isfinite(self.delta) or self.delta <= 0:
            raise ValueError(f"delta must be positive and finite, got {self.delta}")
        object.__setattr__(
            self, "young", {int(k): float(v) for k, v in self.young.items()}
        )
        object.__setattr__(
            self, "poisson", {int(k): float(v) for k, v in self.poisson.items()}
        )
        if set(self.young) != set(self.poisson):
            raise ValueError(
                f"young and poisson must cover the same labels, got "
                f"{sorted(self.young)} vs {sorted(self.poisson)}"
            )
        if not self.young:
            raise ValueError("at least one tissue label needs material constants")
        object.__setattr__(self, "max_adaptive_iters", int(self.max_adaptive_iters))
        if self.max_adaptive_iters < 1:
            raise ValueError(
                f"max_adaptive_iters must be >= 1, got {self.max_adaptive_iters}"
            )
        object.__setattr__(self, "sizing_k", int(self.sizing_k))
        if self.sizing_k < 1:
            raise ValueError(f"sizing_k must be >= 1, got {self.sizing_k}")
        object.__setattr__(self, "inflation", float(self.inflation))
        if not np.isfinite(self.inflation) or self.inflation <= 0:
            raise ValueError(f"inflation must be positive, got {self.inflation}")
        if not isinstance(self.nem, NemConfig):
            raise ValueError(f"nem must be a NemConfig, got {type(self.nem).__name__}")
        object.__setattr__(self, "seed", int(self.seed))
        # the owning dataclasses hold the remaining range checks
        self.materials()
        self.match_config()
        if self.window_after_first is not None:
            self.match_config(first=False)
        self.solve_config()

    def match_config(self, first: bool = True) -> MatchConfig:
        window = self.window
        if not first and self.window_after_first is not None:
            window = self.window_after_first
        return MatchConfig(
            block=self.block,
            window=window,
            selection_fraction=self.selection_fraction,
            connectivity=self.connectivity,
        )

    def materials(self) -> dict:
        return {
            lab: Material(self.young[lab], self.poisson[lab]) for lab in sorted(self.young)
        }

    def solve_config(self) -> SolveConfig:
        return SolveConfig(
            rejection_fraction=self.rejection_fraction,
            rejection_rounds=self.rejection_rounds,
            final_scale_boost=FINAL_SCALE_BOOST,
        )

    def to_flat(self) -> dict:
        """Flat key -> value mapping; exactly the config-file surface."""
        out = {
            "mode": self.mode,
            "selection_fraction": self.selection_fraction,
            "block": self.block,
            "window": self.window,
            "window_after_first": self.window_after_first,
            "connectivity": self.connectivity,
            "delta": self.delta,
        }
        for lab in sorted(self.young):
            out[f"young_{lab}"] = self.young[lab]
        for lab in sorted(self.poisson):
            out[f"poisson_{lab}"] = self.poisson[lab]
        out.update(
            {
                "rejection_fraction": self.rejection_fraction,
                "rejection_rounds": self.rejection_rounds,
                "max_adaptive_iters": self.max_adaptive_iters,
                "sizing": self.sizing,
                "sizing_k": self.sizing_k,
                "inflation": self.inflation,
            }
        )
        for f in dc_fields(NemConfig):
            out[f"nem_{f.name}"] = getattr(self.nem, f.name)
        out["seed"] = self.seed
        return out

    def sha256(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# config file format: flat UTF-8 "key = value" lines
# ---------------------------------------------------------------------------

_STR_KEYS = {"mode", "sizing", "connectivity"}
_TRIPLE_KEYS = {"block", "window", "window_after_first"}
_INT_KEYS = {"rejection_rounds", "max_adaptive_iters", "sizing_k", "seed"}
_FLOAT_KEYS = {"selection_fraction", "delta", "rejection_fraction", "inflation"}
_NEM_INT = {"inner_max_iters", "outer_max_iters"}


def _nem_keys() -> set:
    return {f"nem_{f.name}" for f in dc_fields(NemConfig)}


def _parse_triple(raw: str, line: int) -> tuple:
    parts = [p for p in re.split(r"[x,]", raw.strip()) if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"expected three integers like 3x3x3, got {raw!r}", line)
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"expected three integers like 3x3x3, got {raw!r}", line) from None


def _parse_int(raw: str, line: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", line) from None


def _parse_float(raw: str, line: int) -> float:
    try:
        val = float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}", line) from None
    if not np.isfinite(val):
        raise ConfigError(f"value must be finite, got {raw!r}", line)
    return val


def parse_config(text: str) -> RegistrationConfig:
    """Parse flat ``key = value`` text; '#' comments and blank lines allowed.

    Unknown and duplicate keys are hard errors citing the line number.
    Material constants use label-suffixed keys (young_1, poisson_1, ...);
    the embedded nested-correspondence settings use the nem_ prefix.
    """
    kwargs: dict = {}
    young: dict = {}
    poisson: dict = {}
    nem: dict = {}
    seen: dict = {}
    nem_keys = _nem_keys()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", ln)
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key:
            raise ConfigError("missing key before '='", ln)
        if key in seen:
            raise ConfigError(
                f"duplicate key {key!r} (first set on line {seen[key]})", ln
            )
        seen[key] = ln
        if key in _STR_KEYS:
            kwargs[key] = val
        elif key in _TRIPLE_KEYS:
            if key == "window_after_first" and val.lower() == "none":
                kwargs[key] = None
            else:
                kwargs[key] = _parse_triple(val, ln)
        elif key in _INT_KEYS:
            kwargs[key] = _parse_int(val, ln)
        elif key in _FLOAT_KEYS:
            kwargs[key] = _parse_float(val, ln)
        elif key in nem_keys:
            name = key[len("nem_"):]
            nem[name] = (
                _parse_int(val, ln) if name in _NEM_INT else _parse_float(val, ln)
            )
        elif key.startswith("young_") or key.startswith("poisson_"):
            prefix, _, suffix = key.partition("_")
            try:
                label = int(suffix)
            except ValueError:
                raise ConfigError(
                    f"material key must end in an integer label, got {key!r}", ln
                ) from None
            target = young if prefix == "young" else poisson
            target[label] = _parse_float(val, ln)
        else:
            raise ConfigError(f"unknown key {key!r}", ln)
    if young or poisson:
        kwargs["young"] = young
        kwargs["poisson"] = poisson
    if nem:
        try:
            kwargs["nem"] = NemConfig(**nem)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return RegistrationConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def read_config(path) -> RegistrationConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: RegistrationConfig) -> str:
    """Render a config as the flat text format; parse_config round-trips it."""
    lines = []
    for key, val in cfg.to_flat().items():
        if val is None:
            text = "none"
        elif isinstance(val, tuple):
            text = "x".join(str(v) for v in val)
        elif isinstance(val, float):
            text = repr(val)
        else:
            text = str(val)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RegistrationConfig, path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class RegistrationResult:
    """Final field plus per-iteration metrics, meshes, and solver traces.

    ``iterations``, ``meshes``, ``vertex_u``, and ``trace`` have one entry
    per executed iteration. ``partial`` flags runs the adaptive loop had to
    abandon (mesh regeneration failure); the field is the last usable
    composite.
    """

    field: DenseDeformation
    warped: ScalarVolume
    iterations: list
    provenance: dict
    meshes: list
    vertex_u: list
    trace: list
    partial: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.field.vectors)):
            raise ValueError("deformation field contains non-finite values")
        n = len(self.iterations)
        if len(self.meshes) != n or len(self.trace) != n or len(self.vertex_u) != n:
            raise ValueError(
                f"iterations ({n}), meshes ({len(self.meshes)}), vertex_u "
                f"({len(self.vertex_u)}) and trace ({len(self.trace)}) must "
                f"have one entry per iteration"
            )
        if n == 0:
            raise ValueError("result needs at least one executed iteration")

    @property
    def final_metrics(self) -> dict:
        return self.iterations[-1]

    def metrics_bytes(self) -> bytes:
        """Canonical bytes of the per-iteration metrics, for replay checks."""
        return json.dumps(
            _jsonable(self.iterations), sort_keys=True, separators=(",", ":")
        ).encode("utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_results(result: RegistrationResult, outdir) -> dict:
    """Write the standard results layout; returns the path of each artifact."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "result": outdir / "result.json",
        "warped": outdir / "warped.dvol",
        "field": outdir / "field.dvec",
        "trace": outdir / "trace.json",
    }
    write_volume(result.warped, paths["warped"])
    write_field(result.field, paths["field"])
    for i, m in enumerate(result.meshes):
        p = outdir / f"mesh_iter_{i}.tmesh"
        write_mesh(m, p)
        paths[f"mesh_iter_{i}"] = p
    payload = {
        "final": result.final_metrics,
        "iterations": result.iterations,
        "partial": result.partial,
        "provenance": result.provenance,
    }
    paths["result"].write_text(
        json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    paths["trace"].write_text(
        json.dumps(_jsonable(result.trace), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return paths


# ---------------------------------------------------------------------------
# shared stage plumbing
# ---------------------------------------------------------------------------


def _run_stage(timings: dict, name: str, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except StageError:
        raise
    except (DefregError, ValueError) as exc:
        raise StageError(name, str(exc)) from exc
    timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
    return out


def _require_mode(cfg: RegistrationConfig, expected: str, entry: str) -> None:
    if cfg.mode != expected:
        raise ConfigError(f"config mode is {cfg.mode!r} but {entry} was invoked")


def _check_geometry(pre: ScalarVolume, intra: ScalarVolume, labels: LabelVolume) -> None:
    if pre.grid != intra.grid or pre.grid != labels.grid:
        raise ValueError("pre, intra, and label volumes must share one grid")


def _single_pass(floating, intra, work_mesh, cfg, mcfg, timings):
    """Feature selection, block matching, assembly, and the robust solve."""
    feats = _run_stage(timings, "feature-selection", select_features, floating, mcfg)
    if not feats:
        raise StageError(
            "feature-selection", "no feature points selected in the floating volume"
        )
    matches = _run_stage(timings, "block-matching", block_match, floating, intra, feats, mcfg)
    if not matches:
        raise StageError("block-matching", "block matching produced no matches")
    centers = np.asarray([m.point.center for m in matches], dtype=np.float64)
    points = floating.grid.voxel_to_mm(centers)
    disp = np.asarray([m.displacement for m in matches], dtype=np.float64)
    conf = np.asarray([m.confidence for m in matches], dtype=np.float64)
    sys_ = _run_stage(
        timings,
        "assembly",
        assemble,
        work_mesh,
        cfg.materials(),
        points,
        disp,
        conf,
        match_stiffness_scale=MATCH_STIFFNESS_SCALE,
    )
    res = _run_stage(timings, "solve", robust_solve, sys_, cfg.solve_config())
    return len(feats), matches, res


def _iteration_entry(idx, work_mesh, n_features, n_matches, n_rejected, u3,
                     warped, intra, total_field, landmarks):
    """Metrics dict for one executed iteration; keys shared by all modes."""
    quality = dihedral_angles(work_mesh)
    hd = edge_hd(warped, intra, **CANNY)
    lm = landmark_errors(landmarks, total_field) if landmarks else None
    entry = evaluation_report(hd, lm, quality.n_tets, quality.n_vertices)
    spacing = np.asarray(warped.grid.spacing, dtype=np.float64)
    inc = float(np.max(np.abs(u3) / spacing)) if len(u3) else 0.0
    entry.update(
        {
            "iteration": int(idx),
            "alpha_min_deg": float(quality.alpha_min_deg),
            "alpha_max_deg": float(quality.alpha_max_deg),
            "n_features": int(n_features),
            "n_matches": int(n_matches),
            "n_rejected": int(n_rejected),
            "n_removed_tets": int(work_mesh.removed.sum()),
            "increment_inf_voxels": inc,
        }
    )
    return entry


def _provenance(cfg: RegistrationConfig, timings: dict, t_start: float,
                stop_reason: str, notes: list) -> dict:
    timings = {k: float(v) for k, v in timings.items()}
    timings["total"] = time.perf_counter() - t_start
    return {
        "config": cfg.to_flat(),
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "solver": asdict(cfg.solve_config()),
        "match_stiffness_scale": MATCH_STIFFNESS_SCALE,
        "canny": dict(CANNY),
        "stop_reason": stop_reason,
        "notes": list(notes),
        "timings_s": timings,
    }


# ---------------------------------------------------------------------------
# registration modes
# ---------------------------------------------------------------------------


def run_pbnrr(pre, intra, labels, cfg: RegistrationConfig | None = None,
              landmarks=None) -> RegistrationResult:
    """Single-pass registration: match once, solve robustly, warp."""
    cfg = cfg or RegistrationConfig()
    _require_mode(cfg, "pbnrr", "run_pbnrr")
    _check_geometry(pre, intra, labels)
    t_start = time.perf_counter()
    timings: dict = {}
    work_mesh = _run_stage(timings, "meshing", i2m_bcc, labels, cfg.delta)
    n_features, matches, res = _single_pass(
        pre, intra, work_mesh, cfg, cfg.match_config(), timings
    )
    u3 = res.u.reshape(-1, 3)
    field = _run_stage(timings, "rasterize", mesh_to_dense, work_mesh, u3, pre.grid)
    warped = _run_stage(timings, "warp", warp_volume, pre, field)
    entry = _run_stage(
        timings, "metrics", _iteration_entry,
        0, work_mesh, n_features, len(matches), len(res.rejected), u3,
        warped, intra, field, landmarks,
    )
    logger.info(
        "single-pass registration: %d matches, %d rejected, HD %.3f mm",
        len(matches), len(res.rejected), entry["HD"],
    )
    prov = _provenance(cfg, timings, t_start, "single_pass", [])
    return RegistrationResult(
        field=field, warped=warped, iterations=[entry], provenance=prov,
        meshes=[work_mesh], vertex_u=[u3], trace=[res.trace],
    )


def run_nemnrr(pre, intra, labels, cfg: RegistrationConfig | None = None,
               landmarks=None) -> RegistrationResult:
    """Resection-aware registration via the nested correspondence EM."""
    cfg = cfg or RegistrationConfig(mode="nemnrr")
    _require_mode(cfg, "nemnrr", "run_nemnrr")
    _check_geometry(pre, intra, labels)
    t_start = time.perf_counter()
    timings: dict = {}
    mcfg = cfg.match_config()
    work_mesh = _run_stage(timings, "meshing", i2m_bcc, labels, cfg.delta)
    feats = _run_stage(timings, "feature-selection", select_features, pre, mcfg)
    if not feats:
        raise StageError(
            "feature-selection", "no feature points selected in the floating volume"
        )
    matches = _run_stage(timings, "block-matching", block_match, pre, intra, feats, mcfg)
    if not matches:
        raise StageError("block-matching", "block matching produced no matches")
    nres = _run_stage(
        timings, "nested-em", nem_register,
        pre, intra, work_mesh, matches, cfg.materials(),
        cfg=cfg.nem, match_cfg=mcfg, solve_cfg=cfg.solve_config(),
    )
    carved = TetMesh(work_mesh.vertices, work_mesh.tets, work_mesh.labels, nres.removed)
    u3 = nres.u.reshape(-1, 3)
    field = _run_stage(timings, "rasterize", mesh_to_dense, carved, u3, pre.grid)
    warped = _run_stage(timings, "warp", warp_volume, pre, field)
    n_orphans = int(nres.trace[-1]["n_orphans"]) if nres.trace else 0
    entry = _run_stage(
        timings, "metrics", _iteration_entry,
        0, carved, len(feats), len(matches), n_orphans, u3,
        warped, intra, field, landmarks,
    )
    logger.info(
        "nested-EM registration: %d matches, %d tets removed, HD %.3f mm",
        len(matches), int(nres.removed.sum()), entry["HD"],
    )
    prov = _provenance(cfg, timings, t_start, "nested_em", [])
    return RegistrationResult(
        field=field, warped=warped, iterations=[entry], provenance=prov,
        meshes=[carved], vertex_u=[u3], trace=[nres.trace],
    )


def _prepare_next_mesh(work_mesh, u3, warped_labels, matches, rejected, cfg, timings, notes):
    """Deform, then regenerate on quality collapse or refine toward matches.

    Returns None when mesh regeneration fails; the adaptive loop then stops
    with a partial result.
    """
    deformed = TetMesh(
        work_mesh.vertices + u3, work_mesh.tets, work_mesh.labels,
        work_mesh.removed.copy(),
    )
    quality = dihedral_angles(deformed)
    collapsed = (
        quality.min_volume_mm3 <= 0.0
        or len(quality.degenerate_tets) > 0
        or quality.alpha_min_deg < REMESH_MIN_DIHEDRAL_DEG
    )
    if collapsed:
        try:
            nxt = _run_stage(timings, "re-meshing", i2m_bcc, warped_labels, cfg.delta)
        except StageError as exc:
            logger.warning("mesh regeneration failed: %s", exc)
            notes.append(f"mesh regeneration failed: {exc}")
            return None
        logger.info(
            "re-meshed on warped labels (min dihedral %.2f deg, min volume %.3g)",
            quality.alpha_min_deg, quality.min_volume_mm3,
        )
    else:
        nxt = deformed
    if cfg.sizing != "none":
        keep = sorted(set(range(len(matches))) - set(rejected))
        if len(keep) < cfg.sizing_k:
            notes.append(
                f"sizing skipped: {len(keep)} surviving matches < sizing_k {cfg.sizing_k}"
            )
            return nxt
        centers = np.asarray([matches[i].point.center for i in keep], dtype=np.float64)
        disp = np.asarray([matches[i].displacement for i in keep], dtype=np.float64)
        grid_pts = warped_labels.grid.voxel_to_mm(centers) + disp
        if cfg.sizing == "isotropic":
            sizing = isotropic_sizing(nxt, grid_pts, k=cfg.sizing_k)
        else:
            sizing = metric_field(nxt, grid_pts, k=cfg.sizing_k, inflation=cfg.inflation)
        nxt = _run_stage(timings, "refine", refine_to_metric, nxt, sizing).mesh
    return nxt


def run_anrr(pre, intra, labels, cfg: RegistrationConfig | None = None,
             landmarks=None) -> RegistrationResult:
    """Adaptive registration: warp, re-match, and re-mesh until stable."""
    cfg = cfg or RegistrationConfig(mode="anrr")
    _require_mode(cfg, "anrr", "run_anrr")
    _check_geometry(pre, intra, labels)
    t_start = time.perf_counter()
    timings: dict = {}
    work_mesh = _run_stage(timings, "meshing", i2m_bcc, labels, cfg.delta)
    floating = pre
    total = None
    iterations: list = []
    meshes: list = []
    vertex_us: list = []
    traces: list = []
    notes: list = []
    partial = False
    stop_reason = "max_iterations"
    for i in range(cfg.max_adaptive_iters):
        n_features, matches, res = _single_pass(
            floating, intra, work_mesh, cfg, cfg.match_config(first=i == 0), timings
        )
        u3 = res.u.reshape(-1, 3)
        inc = _run_stage(timings, "rasterize", mesh_to_dense, work_mesh, u3, pre.grid)
        if total is None:
            total = inc
        else:
            total = _run_stage(timings, "compose", compose_pullback, inc, total)
        warped = _run_stage(timings, "warp", warp_volume, pre, total)
        entry = _run_stage(
            timings, "metrics", _iteration_entry,
            i, work_mesh, n_features, len(matches), len(res.rejected), u3,
            warped, intra, total, landmarks,
        )
        iterations.append(entry)
        meshes.append(work_mesh)
        vertex_us.append(u3)
        traces.append(res.trace)
        logger.info(
            "adaptive iteration %d: HD %.3f mm, increment %.3f voxel",
            i, entry["HD"], entry["increment_inf_voxels"],
        )
        if entry["increment_inf_voxels"] < INCREMENT_STOP_VOXELS:
            stop_reason = "increment_below_threshold"
            break
        if i + 1 == cfg.max_adaptive_iters:
            break
        floating = warped
        warped_labels = _run_stage(timings, "warp-labels", warp_labels, labels, total)
        nxt = _prepare_next_mesh(
            work_mesh, u3, warped_labels, matches, res.rejected, cfg, timings, notes
        )
        if nxt is None:
            partial = True
            stop_reason = "mesh_regeneration_failed"
            break
        work_mesh = nxt
    prov = _provenance(cfg, timings, t_start, stop_reason, notes)
    return RegistrationResult(
        field=total, warped=warped, iterations=iterations, provenance=prov,
        meshes=meshes, vertex_u=vertex_us, trace=traces, partial=partial,
    )


def register(pre, intra, labels, cfg: RegistrationConfig,
             landmarks=None) -> RegistrationResult:
    """Dispatch on cfg.mode."""
    runner = {"pbnrr": run_pbnrr, "nemnrr": run_nemnrr, "anrr": run_anrr}[cfg.mode]
    return runner(pre, intra, labels, cfg, landmarks=landmarks)


# ---------------------------------------------------------------------------
# synthetic ground truth
# ---------------------------------------------------------------------------


def _corner_vertices(vertices: np.ndarray) -> np.ndarray:
    """One extreme vertex per bounding-box corner octant (deduplicated)."""
    picks = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                score = sx * vertices[:, 0] + sy * vertices[:, 1] + sz * vertices[:, 2]
                picks.append(int(np.argmax(score)))
    return np.unique(picks)


def _vertex_adjacency(mesh: TetMesh) -> sp.csr_matrix:
    pairs = []
    for a in range(4):
        for b in range(4):
            if a != b:
                pairs.append(mesh.tets[:, [a, b]])
    edges = np.concatenate(pairs, axis=0)
    ones = np.ones(len(edges))
    n = mesh.n_vertices
    adj = sp.coo_matrix((ones, (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
    adj.data[:] = 1.0
    return adj


def generate_synthetic_truth(mesh: TetMesh, materials: dict, magnitude: float,
                             seed: int, grid, axis_scale=(1.0, 1.0, 1.0),
                             smoothing_rounds: int = 6, envelope=None,
                             direction=None, force_envelope=None):
    """Elastically consistent random deformation with a known vertex field.

    Draws per-vertex random forces, smooths them over the vertex graph,
    solves K U = F with the eight bounding-box corner vertices pinned
    (K alone is singular under rigid motions; the pinned set is logged),
    attenuates the solved displacement per axis by ``axis_scale``, and
    scales so the rasterized field's largest voxel displacement norm equals
    ``magnitude`` mm. The axis attenuation acts on displacements rather
    than forces: with nearly incompressible materials the coupling would
    otherwise regenerate the attenuated component. ``force_envelope``, a
    ``(center_mm, sigma_mm)`` pair, windows the forces before the solve so
    the load concentrates around a site while the field stays an exact
    equilibrium solution everywhere (it still spreads elliptically).
    ``direction`` optionally projects the solved displacements onto a fixed
    axis (a random signed profile along a known direction); ``envelope``
    optionally shapes the field directly: a ``(center_mm, sigma_mm)`` pair
    multiplies the solved displacements by a Gaussian about ``center_mm``
    (``sigma_mm`` may be a scalar, per-axis values, or a covariance),
    confining the deformation to a compact bump at the cost of breaking
    force balance outside it. Returns the dense field on ``grid`` plus the
    per-vertex displacements that generate it exactly through
    mesh_to_dense. Deterministic per seed.
    """
    magnitude = float(magnitude)
    if not np.isfinite(magnitude) or magnitude < 0:
        raise ValueError(f"magnitude must be non-negative, got {magnitude}")
    axis_scale = np.asarray(axis_scale, dtype=np.float64)
    if axis_scale.shape != (3,) or not np.all(axis_scale >= 0):
        raise ValueError("axis_scale must be three non-negative factors")
    if envelope is not None:
        env_center = np.asarray(envelope[0], dtype=np.float64)
        if env_center.shape != (3,) or not np.all(np.isfinite(env_center)):
            raise ValueError("envelope center must be a finite 3-vector (mm)")
        sig = np.asarray(envelope[1], dtype=np.float64)
        if sig.ndim == 0:
            sig = np.full(3, float(sig))
        if sig.shape == (3,):
            if not np.all(np.isfinite(sig)) or not np.all(sig > 0):
                raise ValueError("envelope sigma values must be positive")
            env_prec = np.diag(1.0 / sig**2)
        elif sig.shape == (3, 3):
            # covariance matrix: must be symmetric positive definite
            if not np.allclose(sig, sig.T):
                raise ValueError("envelope covariance must be symmetric")
            eigval = np.linalg.eigvalsh(sig)
            if not np.all(np.isfinite(eigval)) or eigval.min() <= 0:
                raise ValueError("envelope covariance must be positive definite")
            env_prec = np.linalg.inv(sig)
        else:
            raise ValueError(
                "envelope sigma must be a scalar, three per-axis values, "
                f"or a 3x3 covariance, got shape {sig.shape}"
            )
    if direction is not None:
        direction = np.asarray(direction, dtype=np.float64)
        norm = float(np.linalg.norm(direction))
        if direction.shape != (3,) or not np.isfinite(norm) or norm <= 0:
            raise ValueError("direction must be a nonzero 3-vector")
        direction = direction / norm
    if force_envelope is not None:
        f_center = np.asarray(force_envelope[0], dtype=np.float64)
        f_sigma = float(force_envelope[1])
        if f_center.shape != (3,) or not np.all(np.isfinite(f_center)):
            raise ValueError("force_envelope center must be a finite 3-vector (mm)")
        if not np.isfinite(f_sigma) or f_sigma <= 0:
            raise ValueError(f"force_envelope sigma must be positive, got {f_sigma}")
    n = mesh.n_vertices
    u3 = np.zeros((n, 3))
    if magnitude == 0.0:
        return mesh_to_dense(mesh, u3, grid), u3

    rng = np.random.default_rng(seed)
    force = rng.standard_normal((n, 3))
    adj = _vertex_adjacency(mesh)
    degree = np.asarray(adj.sum(axis=1)).ravel()
    safe = np.maximum(degree, 1.0)
    for _ in range(smoothing_rounds):
        force = 0.5 * (force + (adj @ force) / safe[:, None])
    if force_envelope is not None:
        r2 = np.sum((mesh.vertices - f_center) ** 2, axis=1)
        force = force * np.exp(-0.5 * r2 / (f_sigma * f_sigma))[:, None]

    k = assemble_stiffness(mesh, materials)
    pinned = _corner_vertices(mesh.vertices)
    logger.info("pinned %d corner vertices to remove rigid modes", len(pinned))
    fixed = (3 * pinned[:, None] + np.arange(3)).ravel()
    free = k.diagonal() > 0
    free[fixed] = False
    if not free.any():
        raise SingularSystemError("no free degrees of freedom after pinning")
    reduced = k[free][:, free].tocsc()
    x = spsolve(reduced, force.ravel()[free])
    if not np.all(np.isfinite(x)):
        raise SingularSystemError(
            "stiffness solve produced non-finite values; mesh may be disconnected"
        )
    u3[np.unravel_index(np.flatnonzero(free), (n, 3))] = x
    u3 = u3 * axis_scale
    if direction is not None:
        u3 = np.outer(u3 @ direction, direction)
    if envelope is not None:
        dv = mesh.vertices - env_center
        r2 = np.einsum("ij,jk,ik->i", dv, env_prec, dv)
        u3 = u3 * np.exp(-0.5 * r2)[:, None]

    raw = mesh_to_dense(mesh, u3, grid)
    peak = float(np.linalg.norm(raw.vectors.astype(np.float64), axis=-1).max())
    if peak <= 0.0:
        raise ValueError("mesh covers no voxel centers; cannot scale the field")
    u3 = u3 * (magnitude / peak)
    return mesh_to_dense(mesh, u3, grid), u3
