"""Operator-facing commands: calibrate, verify, heatmap, drift, synth, baseline.

Exit codes: 0 success (or verification pass), 1 verification fail,
2 solver non-convergence, 3 input error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataio, solver, synth
from .chain import RegularizationConfig, board_rmse, make_grid_board, per_camera_rmse
from .verify import build_heatmap, drift_series, save_heatmap
from .verify import verify as run_verify
from .errors import (
    CalibrationError,
    EmptyRecording,
    InvalidArgument,
    ParseError,
    TooFewReports,
    ValidationError,
)
from .solver import SolverOptions

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_NO_CONVERGENCE = 2
EXIT_INPUT_ERROR = 3

CONFIG_ENV_VAR = "MOCAPCAL_CONFIG"


def _solver_options(args) -> SolverOptions:
    kwargs = dict(
        seed=args.seed,
        epsilon=args.epsilon,
        candidate_count=args.candidates,
        pool_size=args.pool,
        skip_stage1=args.skip_stage1,
        skip_stage2=args.skip_stage2,
        skip_stage3=args.skip_stage3,
        optimize_intrinsics=not args.fix_intrinsics,
    )
    if getattr(args, "initial_x", None):
        kwargs["initial_x"] = dataio.load_transform(args.initial_x)
    return SolverOptions(**kwargs)


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--candidates", type=int, default=30)
    p.add_argument("--pool", type=int, default=300)
    p.add_argument("--skip-stage1", action="store_true")
    p.add_argument("--skip-stage2", action="store_true")
    p.add_argument("--skip-stage3", action="store_true")
    p.add_argument("--fix-intrinsics", action="store_true")


def _print_rmse_table(per_cam: dict[str, float], total: float) -> None:
    width = max([len(c) for c in per_cam] + [6])
    print(f"{'Camera':<{width}}  Board RMSE (px)")
    for cam in sorted(per_cam):
        print(f"{cam:<{width}}  {per_cam[cam]:.2f}")
    print(f"{'Mean':<{width}}  {total:.2f}")


def cmd_calibrate(args) -> int:
    dataset = dataio.load_dataset(args.dataset)
    opts = _solver_options(args)
    reg = RegularizationConfig()
    result = solver.calibrate(dataset, opts, reg)
    if args.out:
        dataio.save_calibration_result(args.out, result, opts, reg)
    _print_rmse_table(per_camera_rmse(result.estimate, dataset), result.board_rmse)
    if not result.converged:
        print("warning: solver did not converge", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_verify(args) -> int:
    recording = dataio.load_recording(args.recording)
    result = dataio.load_calibration_result(args.calibration)
    report = run_verify(
        recording,
        result.estimate,
        threshold_2d=args.threshold_2d,
        max_view_angle_deg=args.max_view_angle,
    )
    if args.out:
        dataio.save_verification_report(args.out, report, result.estimate.intrinsics)
    for cam in sorted(report.per_camera):
        v = report.per_camera[cam]
        status = "PASS" if v.passed else "FAIL"
        print(f"{cam}: rmse_2d={v.rmse_2d:.2f} px rmse_3d={v.rmse_3d * 1e3:.2f} mm [{status}]")
    overall = "PASS" if report.passed else "FAIL"
    print(f"overall: rmse_2d={report.rmse_2d:.2f} px [{overall}]")
    return EXIT_OK if report.passed else EXIT_VERIFY_FAIL


def cmd_heatmap(args) -> int:
    report, cameras = dataio.load_verification_report(args.report)
    cam_ids = [args.camera] if args.camera else sorted(cameras)
    for cam_id in cam_ids:
        if cam_id not in cameras:
            raise ValidationError(f"report has no camera {cam_id!r}")
        hm = build_heatmap(report, cameras[cam_id], bin_size=args.bin_size)
        ppm = f"{args.out_prefix}_{cam_id}.ppm"
        txt = f"{args.out_prefix}_{cam_id}.txt"
        save_heatmap(hm, ppm, txt)
        print(f"{cam_id}: wrote {ppm} and {txt}")
    return EXIT_OK


def cmd_drift(args) -> int:
    reports = [dataio.load_verification_report(p)[0] for p in args.reports]
    series = drift_series(reports)
    lines = ["index rmse_2d_px rmse_3d_m"]
    for idx, r2, r3 in series.entries:
        lines.append(f"{idx} {r2!r} {r3!r}")
    lines.append(f"# slope_2d={series.slope_2d!r} slope_3d={series.slope_3d!r} rising={series.rising}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    for idx, r2, r3 in series.entries:
        print(f"{idx}: rmse_2d={r2:.3f} px rmse_3d={r3 * 1e3:.3f} mm")
    print(f"trend: {'rising' if series.rising else 'not rising'} (slope {series.slope_2d:.4g} px/recording)")
    return EXIT_OK


def cmd_synth(args) -> int:
    board = make_grid_board(args.markers_x, args.markers_y)
    spec = synth.make_scene_spec(
        seed=args.seed,
        camera_count=args.cameras,
        frame_count=args.frames,
        pixel_noise_sigma=args.noise_px,
        board=board,
        mocap_rotation_noise=args.mocap_rot_noise,
        mocap_translation_noise=args.mocap_trans_noise,
    )
    scene = synth.generate_scene(spec)
    dataio.save_dataset(args.out, scene.dataset, units=args.units)
    print(f"wrote {args.out} ({len(scene.dataset.observations)} observations)")
    if args.lollypop_out:
        dataio.save_dataset(args.lollypop_out, lollypop=scene.lollypop_recording, units=args.units)
        print(f"wrote {args.lollypop_out} ({len(scene.lollypop_recording)} frames)")
    if args.truth_out:
        truth_result = solver.CalibrationResult(
            estimate=scene.ground_truth,
            board_rmse=board_rmse(scene.ground_truth, scene.dataset),
            stage_diagnostics={},
            converged=True,
        )
        dataio.save_calibration_result(args.truth_out, truth_result)
        print(f"wrote {args.truth_out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    dataset = dataio.load_dataset(args.dataset)
    known_x = dataio.load_transform(args.x_file)
    opts = SolverOptions(seed=args.seed, epsilon=args.epsilon)
    result = solver.calibrate_fixed_x(dataset, known_x, opts)
    if args.out:
        dataio.save_calibration_result(args.out, result, opts)
    _print_rmse_table(per_camera_rmse(result.estimate, dataset), result.board_rmse)
    if not result.converged:
        print("warning: solver did not converge", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mocapcal",
        description="Camera-to-mocap extrinsic calibration and independent verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="run the staged calibration pipeline")
    p.add_argument("dataset")
    p.add_argument("--out", help="write the calibration result file here")
    p.add_argument("--initial-x", help="transform file used when stage 1 is skipped")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("verify", help="verify a calibration against a recording")
    p.add_argument("recording")
    p.add_argument("calibration")
    p.add_argument("--threshold-2d", type=float, default=1.0)
    p.add_argument("--max-view-angle", type=float, default=None)
    p.add_argument("--out", help="write the verification report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("heatmap", help="spatial error heatmap from a report")
    p.add_argument("report")
    p.add_argument("--camera", default=None)
    p.add_argument("--bin-size", type=float, default=64.0)
    p.add_argument("--out-prefix", default="heatmap")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("drift", help="RMSE trend over successive reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="write the series table here")
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.add_argument("--mocap-rot-noise", type=float, default=0.0)
    p.add_argument("--mocap-trans-noise", type=float, default=0.0)
    p.add_argument("--markers-x", type=int, default=6)
    p.add_argument("--markers-y", type=int, default=4)
    p.add_argument("--units", default="meters", choices=["meters", "millimeters"])
    p.add_argument("--lollypop-out")
    p.add_argument("--truth-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("baseline", help="fixed board-to-marker baseline solver")
    p.add_argument("dataset")
    p.add_argument("--x-file", required=True, help="known board-to-marker transform (JSON)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    config_path = os.environ.get(CONFIG_ENV_VAR)
    prepend: list[str] = []
    if config_path:
        try:
            with open(config_path) as fh:
                prepend = fh.read().split()
        except OSError as exc:
            print(f"error: cannot read {CONFIG_ENV_VAR}={config_path}: {exc}", file=sys.stderr)
            return EXIT_INPUT_ERROR
    argv = list(argv) if argv is not None else sys.argv[1:]
    if prepend and argv:
        argv = [argv[0]] + prepend + argv[1:]
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ParseError, ValidationError, TooFewReports, EmptyRecording, InvalidArgument) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except CalibrationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
