"""Command-line front end: phantoms, meshing, registration, evaluation, truth.

Subcommands write machine-readable artifacts and keep scripting-stable
output on stdout; logs go to stderr. Exit codes: 0 success, 2 usage or
input validation, 3 configuration, 4 stage failure. Every command is
replay-deterministic given identical arguments and input files; --threads
(or the DEFREG_THREADS environment variable, which wins) only sizes the
linear-algebra thread pools and never changes numerical results.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DefregError, StageError
from .eval import (
    edge_hd,
    evaluation_report,
    landmark_errors,
    read_landmark_pairs,
    write_landmark_pairs,
    LandmarkPair,
)
from .mesh import dihedral_angles, i2m_bcc, read_mesh, write_mesh
from .pipeline import (
    RegistrationConfig,
    generate_synthetic_truth,
    read_config,
    register,
    write_results,
)
from .volume import (
    LabelVolume,
    make_phantom,
    read_field,
    read_volume,
    sample_field,
    warp_volume,
    write_field,
    write_volume,
)

logger = logging.getLogger("defreg.cli")

POSITION_CSV_HEADER = "name,x,y,z"

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _resolve_threads(flag: int | None) -> int | None:
    """DEFREG_THREADS beats --threads; None means library defaults."""
    env = os.environ.get("DEFREG_THREADS")
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"DEFREG_THREADS must be an integer, got {env!r}") from None
    else:
        value = flag
    if value is None:
        return None
    if value < 1:
        raise ValueError(f"thread count must be >= 1, got {value}")
    return value


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:  # env vars still cover pools not yet started
        pass


# ---------------------------------------------------------------------------
# landmark position files (single frame, unlike the pre/intra pair format)
# ---------------------------------------------------------------------------


def write_landmark_positions(landmarks, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        fh.write(POSITION_CSV_HEADER + "\n")
        writer = csv.writer(fh)
        for lm in landmarks:
            writer.writerow([lm.name, *(repr(float(v)) for v in lm.position)])


def read_landmark_positions(path) -> list:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != POSITION_CSV_HEADER:
        raise ValueError(
            f"{path}: malformed landmark positions: expected header "
            f"{POSITION_CSV_HEADER!r}"
        )
    out = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
        out.append((row[0], tuple(float(v) for v in row[1:])))
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    scalar, labels, landmarks = make_phantom(args.kind, args.dims, seed=args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_volume(scalar, outdir / "phantom.dvol")
    write_volume(labels, outdir / "labels.dvol")
    write_landmark_positions(landmarks, outdir / "landmarks.csv")
    logger.info("phantom %s dims=%s seed=%d -> %s", args.kind, args.dims, args.seed, outdir)
    print(f"phantom={outdir / 'phantom.dvol'} labels={outdir / 'labels.dvol'} "
          f"landmarks={outdir / 'landmarks.csv'}")
    return 0


def cmd_mesh(args) -> int:
    labels = read_volume(args.labels)
    if not isinstance(labels, LabelVolume):
        raise ValueError(f"{args.labels} is not a label volume")
    mesh = i2m_bcc(labels, args.delta)
    write_mesh(mesh, args.out)
    quality = dihedral_angles(mesh, labels)
    report = quality.to_json_dict()
    report["delta_mm"] = float(args.delta)
    if args.report:
        Path(args.report).write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    print(json.dumps(report, sort_keys=True))
    return 0


def _load_register_config(args) -> RegistrationConfig:
    if args.config:
        cfg = read_config(args.config)
        if args.mode and cfg.mode != args.mode:
            raise ConfigError(
                f"--mode {args.mode} conflicts with config mode {cfg.mode!r}"
            )
        return cfg
    return RegistrationConfig(mode=args.mode or "pbnrr")


def cmd_register(args) -> int:
    cfg = _load_register_config(args)
    pre = read_volume(args.pre)
    intra = read_volume(args.intra)
    labels = read_volume(args.labels)
    if not isinstance(labels, LabelVolume):
        raise ValueError(f"{args.labels} is not a label volume")
    pairs = read_landmark_pairs(args.landmarks) if args.landmarks else None
    result = register(pre, intra, labels, cfg, landmarks=pairs)
    paths = write_results(result, args.out)
    final = result.final_metrics
    mean_err = final.get("Mean error", float("nan"))
    print(f"HD_mm={final['HD']:.3f} mean_err_mm={mean_err:.3f}")
    logger.info("results written to %s", paths["result"].parent)
    return 0


def cmd_eval(args) -> int:
    a = read_volume(args.a)
    b = read_volume(args.b)
    hd = edge_hd(a, b, sigma=args.sigma, low=args.low, high=args.high)
    lm = None
    if args.landmarks:
        if not args.field:
            raise ValueError("--landmarks needs --field to map the pre positions")
        pairs = read_landmark_pairs(args.landmarks)
        lm = landmark_errors(pairs, read_field(args.field))
    n_tets = n_vertices = None
    if args.mesh:
        mesh = read_mesh(args.mesh)
        n_tets, n_vertices = mesh.n_tets, mesh.n_vertices
    report = evaluation_report(hd, lm, n_tets, n_vertices)
    if args.json:
        Path(args.json).write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    row = [
        args.case,
        args.variant,
        f"{hd:.3f}",
        "" if lm is None else f"{lm.min_mm:.3f}",
        "" if lm is None else f"{lm.max_mm:.3f}",
        "" if lm is None else f"{lm.mean_mm:.3f}",
        "" if n_tets is None else str(n_tets),
        "" if n_vertices is None else str(n_vertices),
    ]
    if args.csv:
        path = Path(args.csv)
        fresh = not path.exists()
        with open(path, "a", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(
                    ["case", "variant", "HD", "min", "max", "mean", "tets", "vertices"]
                )
            writer.writerow(row)
    print(",".join(row))
    return 0


def cmd_truth(args) -> int:
    pre = read_volume(args.pre)
    labels = read_volume(args.labels)
    if not isinstance(labels, LabelVolume):
        raise ValueError(f"{args.labels} is not a label volume")
    cfg = read_config(args.config) if args.config else RegistrationConfig()
    mesh = i2m_bcc(labels, args.delta if args.delta is not None else cfg.delta)
    axis_scale = (1.0, 1.0, 1.0)
    if args.axis_scale:
        parts = args.axis_scale.split(",")
        if len(parts) != 3:
            raise ValueError(
                f"--axis-scale expects three comma-separated factors, got {args.axis_scale!r}"
            )
        axis_scale = tuple(float(p) for p in parts)
    field, _ = generate_synthetic_truth(
        mesh, cfg.materials(), args.magnitude, args.seed, pre.grid,
        axis_scale=axis_scale,
    )
    moved = warp_volume(pre, field)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_volume(moved, outdir / "moved.dvol")
    write_field(field, outdir / "truth.dvec")
    written = [outdir / "moved.dvol", outdir / "truth.dvec"]
    if args.landmarks:
        positions = read_landmark_positions(args.landmarks)
        pairs = [
            LandmarkPair(
                name, pos, tuple(np.asarray(pos) + sample_field(field, [pos])[0])
            )
            for name, pos in positions
        ]
        write_landmark_pairs(pairs, outdir / "pairs.csv")
        written.append(outdir / "pairs.csv")
    print(" ".join(str(p) for p in written))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defreg",
        description="Physics-based non-rigid registration of deformable volumes.",
    )
    parser.add_argument(
        "--threads", type=int, default=None,
        help="thread-pool size (default: library defaults; DEFREG_THREADS wins)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom")
    p.add_argument("--kind", required=True,
                   choices=("sphere-shell", "two-tissue-tumor", "resected-tumor"))
    p.add_argument("--dims", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("mesh", help="image-to-mesh conversion plus quality report")
    p.add_argument("--labels", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="also write the JSON report to this path")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("register", help="run one registration")
    p.add_argument("--mode", choices=("pbnrr", "nemnrr", "anrr"))
    p.add_argument("--pre", required=True)
    p.add_argument("--intra", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", help="flat key = value file; omitted keys use defaults")
    p.add_argument("--landmarks", help="pre/intra landmark pair CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="edge Hausdorff distance and landmark errors")
    p.add_argument("--a", required=True, help="warped (or unregistered) volume")
    p.add_argument("--b", required=True, help="reference volume")
    p.add_argument("--landmarks", help="pre/intra landmark pair CSV")
    p.add_argument("--field", help="deformation field mapping the pre positions")
    p.add_argument("--mesh", help="mesh whose size is quoted in the table row")
    p.add_argument("--case", default="")
    p.add_argument("--variant", default="")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--low", type=float, default=0.1)
    p.add_argument("--high", type=float, default=0.2)
    p.add_argument("--json", help="write the full report to this path")
    p.add_argument("--csv", help="append the table row to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("truth", help="synthetic deformation with known field")
    p.add_argument("--pre", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--magnitude", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--config", help="materials and delta come from this config")
    p.add_argument("--axis-scale", help="per-axis factors, e.g. 1,1,0")
    p.add_argument("--landmarks", help="positions CSV to carry through the field")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_truth)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(_resolve_threads(args.threads))
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 4
    except DefregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
