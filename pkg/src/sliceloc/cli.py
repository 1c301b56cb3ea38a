"""Command-line pipeline: phantom cohorts, atlas, pairs, bank, positioning,
and evaluation, with deterministic file outputs."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .atlas import build_atlas, save_atlas_build
from .errors import (
    DataError,
    NumericError,
    SlicelocError,
    StageError,
    UsageError,
)
from .fileio import (
    load_pose,
    load_slice,
    load_volume,
    read_json,
    save_volume,
    write_json,
)
from .geom import Pose, SliceGeometry
from .pairs import PairSpec, generate_pairs, save_pairs_manifest
from .phantom import PhantomParams, make_phantom
from .positioning import FineConfig, position, save_position_result
from .predictor import (
    KnnPredictor,
    PosePredictor,
    build_bank,
    evaluate_predictor,
    load_bank,
    save_bank,
)
from .registration import RegistrationConfig
from .similarity import default_ssim_params, mse_image, ssim
from .volume import Slice

log = logging.getLogger("sliceloc")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class _FixedPosePredictor(PosePredictor):
    """Serves one externally supplied pose, the file-based protocol."""

    def __init__(self, pose: Pose):
        self._pose = pose

    def predict(self, s: Slice) -> Pose:
        return self._pose


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"cannot parse dims {text!r}") from exc
    if len(values) == 1:
        values = values * 3
    if len(values) != 3 or any(v < 2 for v in values):
        raise UsageError("dims must be one or three integers of at least 2")
    return tuple(values)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise UsageError(message)


def cmd_phantom(args) -> int:
    _require(args.n >= 1, "--n must be at least 1")
    _require(args.spacing > 0, "--spacing must be positive")
    dims = _parse_dims(args.dims)
    params = PhantomParams(
        seed=args.seed,
        n_subjects=args.n,
        dims=dims,
        spacing=args.spacing,
        jitter_rot_max=args.jitter_rot,
        jitter_trans_max=args.jitter_trans,
        intensity_noise_sd=args.noise_sd,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.threads or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        subjects = list(pool.map(lambda i: make_phantom(params, i), range(args.n)))
    entries = []
    for i, (volume, jitter) in enumerate(subjects):
        name = f"subject_{i:03d}.vvol"
        save_volume(volume, out / name)
        entries.append({"file": name, "jitter": jitter.to_json_dict()})
        log.info("wrote %s", name)
    write_json(
        {
            "seed": args.seed,
            "n": args.n,
            "dims": list(dims),
            "spacing_mm": args.spacing,
            "jitter_rot_max_deg": args.jitter_rot,
            "jitter_trans_max_mm": args.jitter_trans,
            "intensity_noise_sd": args.noise_sd,
            "subjects": entries,
        },
        out / "cohort.json",
    )
    return 0


def _load_cohort(path: str) -> tuple[list, list[str]]:
    base = Path(path)
    manifest = base / "cohort.json" if base.is_dir() else base
    if manifest.is_file() and manifest.suffix == ".json":
        doc = read_json(manifest)
        try:
            names = [entry["file"] for entry in doc["subjects"]]
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed cohort manifest {manifest}") from exc
        root = manifest.parent
    elif base.is_dir():
        names = sorted(p.name for p in base.glob("*.vvol"))
        root = base
        if not names:
            raise DataError(f"no .vvol volumes under {base}")
    else:
        raise DataError(f"cohort path {path} is neither a directory nor a manifest")
    return [load_volume(root / n) for n in names], names


def _registration_config(args) -> RegistrationConfig:
    return RegistrationConfig(
        rot_search_deg=args.rot_search,
        trans_search_mm=args.trans_search,
        local_opt_iters=args.opt_iters,
    )


def cmd_build_atlas(args) -> int:
    _require(args.size >= 32, "--size must be at least 32")
    _require(args.max_iters >= 0, "--max-iters must be non-negative")
    cohort, names = _load_cohort(args.cohort)
    build = build_atlas(
        cohort,
        size=args.size,
        max_iters=args.max_iters,
        cfg=_registration_config(args),
        spacing=args.spacing,
    )
    manifest = args.manifest or f"{args.out}.build.json"
    save_atlas_build(build, args.out, manifest, subject_files=names)
    log.info(
        "atlas written to %s after %d iterations, mean NCC %.4f",
        args.out,
        build.iterations_run,
        build.mean_ncc[-1],
    )
    if build.flagged:
        log.warning("flagged subjects: %s", list(build.flagged))
    return 0


def cmd_gen_pairs(args) -> int:
    _require(args.n_rotations >= 1, "--n-rotations must be at least 1")
    _require(args.inplane_per_normal >= 0, "--inplane-per-normal must be non-negative")
    _require(args.trans_step > 0, "--trans-step must be positive")
    _require(args.slice_size >= 2, "--slice-size must be at least 2")
    _require(args.slice_spacing > 0, "--slice-spacing must be positive")
    volume = load_volume(args.volume)
    spec = PairSpec(
        n_rotations=args.n_rotations,
        inplane_per_normal=args.inplane_per_normal,
        trans_min_mm=args.trans_min,
        trans_max_mm=args.trans_max,
        trans_step_mm=args.trans_step,
        slice_geometry=SliceGeometry(
            width=args.slice_size, height=args.slice_size, spacing=args.slice_spacing
        ),
    )
    pairs = generate_pairs(
        volume, spec, seed=args.seed, subject_id=args.subject_id, out_dir=args.out
    )
    save_pairs_manifest(pairs, Path(args.out) / "pairs.jsonl")
    log.info("wrote %d pairs under %s", len(pairs), args.out)
    return 0


def cmd_build_bank(args) -> int:
    _require(args.d >= 1, "--d must be at least 1")
    bank = build_bank(args.pairs, d=args.d)
    save_bank(bank, args.out)
    log.info("bank of %d entries written to %s", len(bank), args.out)
    return 0


def cmd_position(args) -> int:
    _require((args.bank is None) != (args.pose_file is None),
             "exactly one of --bank or --pose-file is required")
    _require(args.gamma > 0, "--gamma must be positive")
    try:
        query = load_slice(args.query)
        target = load_volume(args.target)
        atlas = load_volume(args.atlas)
        if args.bank is not None:
            predictor: PosePredictor = KnnPredictor(load_bank(args.bank))
        else:
            predictor = _FixedPosePredictor(load_pose(args.pose_file))
    except SlicelocError as exc:
        raise StageError("load", exc) from exc
    fine_cfg = FineConfig(
        gamma=args.gamma,
        n_normal_candidates=args.n_normals,
        inplane_step=args.inplane_step,
        trans_step=args.trans_step,
        max_iters=args.max_iters,
    )
    result = position(
        query, target, atlas, predictor, _registration_config(args), fine_cfg
    )
    for message in result.warnings:
        log.warning("%s", message)
    save_position_result(result, args.out, args.slice_out)
    log.info("result score %.4f after %d iterations", result.score, result.iterations)
    return 0


def _emit_report(report: dict, args) -> None:
    if args.format == "json":
        text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    else:
        lines = []
        for key in sorted(report):
            value = report[key]
            if isinstance(value, dict):
                inner = "  ".join(f"{k}={value[k]:.4f}" for k in sorted(value))
                lines.append(f"{key}: {inner}")
            else:
                lines.append(f"{key}: {value}")
        text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)


def cmd_evaluate(args) -> int:
    predictor_mode = args.pairs is not None
    slice_mode = args.query is not None or args.result is not None
    if predictor_mode == slice_mode:
        raise UsageError("pass either --pairs with --bank, or --query with --result")
    if predictor_mode:
        _require(args.bank is not None, "--bank is required with --pairs")
        report = evaluate_predictor(KnnPredictor(load_bank(args.bank)), args.pairs)
    else:
        _require(args.query is not None and args.result is not None,
                 "--query and --result are both required")
        q = load_slice(args.query)
        r = load_slice(args.result)
        report = {
            "ssim": ssim(q.data, r.data, default_ssim_params(q.data)),
            "mse": mse_image(q.data, r.data),
        }
    _emit_report(report, args)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sliceloc",
        description="Locate a 2D slice inside a 3D volume via a reference-frame prompt.",
    )
    parser.add_argument("--log-level", default="warning",
                        choices=("debug", "info", "warning", "error"))
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for data-parallel stages (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="render a synthetic cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dims", default="96")
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--jitter-rot", type=float, default=8.0)
    p.add_argument("--jitter-trans", type=float, default=4.0)
    p.add_argument("--noise-sd", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("build-atlas", help="average a cohort into a reference volume")
    p.add_argument("--cohort", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--max-iters", type=int, default=5)
    p.add_argument("--spacing", type=float, default=None)
    p.add_argument("--rot-search", type=float, default=20.0)
    p.add_argument("--trans-search", type=float, default=20.0)
    p.add_argument("--opt-iters", type=int, default=120)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_build_atlas)

    p = sub.add_parser("gen-pairs", help="sample labeled slice-pose pairs from a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-rotations", type=int, required=True)
    p.add_argument("--inplane-per-normal", type=int, default=1)
    p.add_argument("--trans-min", type=float, required=True)
    p.add_argument("--trans-max", type=float, required=True)
    p.add_argument("--trans-step", type=float, required=True)
    p.add_argument("--slice-size", type=int, default=96)
    p.add_argument("--slice-spacing", type=float, default=1.0)
    p.add_argument("--subject-id", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_pairs)

    p = sub.add_parser("build-bank", help="index pair slices for nearest-neighbor lookup")
    p.add_argument("--pairs", required=True, help="pairs.jsonl manifest path")
    p.add_argument("--d", type=int, default=48)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("position", help="locate a query slice inside a target volume")
    p.add_argument("--query", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--pose-file", default=None,
                   help="externally predicted pose JSON instead of a bank")
    p.add_argument("--gamma", type=float, default=6.0)
    p.add_argument("--n-normals", type=int, default=9)
    p.add_argument("--inplane-step", type=float, default=3.0)
    p.add_argument("--trans-step", type=float, default=2.0)
    p.add_argument("--max-iters", type=int, default=20)
    p.add_argument("--rot-search", type=float, default=20.0)
    p.add_argument("--trans-search", type=float, default=20.0)
    p.add_argument("--opt-iters", type=int, default=120)
    p.add_argument("--out", required=True)
    p.add_argument("--slice-out", default=None)
    p.set_defaults(func=cmd_position)

    p = sub.add_parser("evaluate", help="score a predictor or a positioning result")
    p.add_argument("--pairs", default=None, help="held-out pairs.jsonl")
    p.add_argument("--bank", default=None)
    p.add_argument("--query", default=None)
    p.add_argument("--result", default=None)
    p.add_argument("--format", default="text", choices=("text", "json"))
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()), stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC if isinstance(exc.cause, NumericError) else EXIT_DATA
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (DataError, SlicelocError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
