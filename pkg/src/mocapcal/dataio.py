"""Line-delimited dataset files and full-precision result files.

Dataset files are JSON lines; every record is a self-describing object with
a "kind" field (header, camera, board, mocap_frame, observation,
lollypop_frame). The header declares format_version and the length unit
(meters or millimeters); millimeter positions are converted to meters on
load. Result files are single JSON documents whose floats round-trip
bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .camera import CameraModel, PixelPoint
from .chain import (
    BoardGeometry,
    CalibrationDataset,
    ChainEstimate,
    MocapFrame,
    Observation,
    RegularizationConfig,
)
from .errors import ParseError, ValidationError
from .geometry import RigidTransform
from .solver import CalibrationResult, SolverOptions, StageDiagnostics
from .verify import (
    CameraVerification,
    FrameError,
    LollypopFrame,
    VerificationReport,
)

FORMAT_VERSION = 1
KNOWN_KINDS = {"header", "camera", "board", "mocap_frame", "observation", "lollypop_frame"}
_UNIT_SCALE = {"meters": 1.0, "millimeters": 1e-3}


def _pose_to_json(pose: RigidTransform | None):
    if pose is None:
        return None
    return {
        "rotation": pose.rotation.tolist(),
        "translation": pose.translation.tolist(),
    }


def _pose_from_json(obj, scale: float) -> RigidTransform | None:
    if obj is None:
        return None
    return RigidTransform(
        np.array(obj["rotation"]), np.array(obj["translation"]) * scale
    )


def _camera_to_json(model: CameraModel) -> dict:
    return {
        "kind": "camera",
        "camera_id": model.camera_id,
        "fx": model.fx,
        "fy": model.fy,
        "cx": model.cx,
        "cy": model.cy,
        "width": model.width,
        "height": model.height,
        "k": [model.k1, model.k2, model.k3, model.k4, model.k5, model.k6],
        "p": [model.p1, model.p2],
        "theta_max": model.theta_max,
    }


def _camera_from_json(rec: dict) -> CameraModel:
    k = rec["k"]
    p = rec["p"]
    return CameraModel(
        camera_id=rec["camera_id"],
        fx=rec["fx"],
        fy=rec["fy"],
        cx=rec["cx"],
        cy=rec["cy"],
        width=rec["width"],
        height=rec["height"],
        k1=k[0], k2=k[1], k3=k[2], k4=k[3], k5=k[4], k6=k[5],
        p1=p[0], p2=p[1],
        theta_max=rec.get("theta_max", CameraModel.__dataclass_fields__["theta_max"].default),
    )


def save_dataset(
    path: str | Path,
    dataset: CalibrationDataset | None = None,
    lollypop: list[LollypopFrame] | None = None,
    units: str = "meters",
) -> None:
    """Write a dataset and/or a verification recording as JSON lines."""
    if units not in _UNIT_SCALE:
        raise ValidationError(f"unknown units {units!r}")
    out_scale = 1.0 / _UNIT_SCALE[units]

    def scale_pose(pose):
        if pose is None:
            return None
        return {
            "rotation": pose.rotation.tolist(),
            "translation": (pose.translation * out_scale).tolist(),
        }

    records = [{"kind": "header", "format_version": FORMAT_VERSION, "units": units}]
    if dataset is not None:
        for cam in sorted(dataset.cameras, key=lambda c: c.camera_id):
            records.append(_camera_to_json(cam))
        records.append(
            {
                "kind": "board",
                "board_id": dataset.board.board_id,
                "corners": [
                    {"corner_id": int(cid), "position": (pos * out_scale).tolist()}
                    for cid, pos in zip(dataset.board.corner_ids, dataset.board.corners)
                ],
            }
        )
        for f in dataset.frames:
            records.append(
                {
                    "kind": "mocap_frame",
                    "frame_id": f.frame_id,
                    "time": f.time,
                    "board_pose": scale_pose(f.board_pose),
                    "platform_pose": scale_pose(f.platform_pose),
                }
            )
        for o in dataset.observations:
            records.append(
                {
                    "kind": "observation",
                    "camera_id": o.camera_id,
                    "frame_id": o.frame_id,
                    "corner_id": o.corner_id,
                    "pixel": [o.pixel.u, o.pixel.v],
                }
            )
    for lf in lollypop or []:
        records.append(
            {
                "kind": "lollypop_frame",
                "frame_id": lf.frame_id,
                "camera_id": lf.camera_id,
                "corners": [[p.u, p.v] for p in lf.aruco_corners],
                "mocap_centroid": (lf.mocap_centroid * out_scale).tolist(),
                "platform_pose": scale_pose(lf.platform_pose),
            }
        )
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _read_records(path: str | Path):
    records = []
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or "kind" not in rec:
            raise ParseError(f"{path}:{lineno}: record missing 'kind'")
        if rec["kind"] not in KNOWN_KINDS:
            raise ParseError(f"{path}:{lineno}: unknown kind {rec['kind']!r}")
        records.append((lineno, rec))
    if not records:
        raise ParseError(f"{path}: empty file")
    lineno0, header = records[0]
    if header["kind"] != "header":
        raise ParseError(f"{path}:{lineno0}: first record must be the header")
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(
            f"{path}:{lineno0}: unsupported format_version {header.get('format_version')!r}"
        )
    units = header.get("units", "meters")
    if units not in _UNIT_SCALE:
        raise ParseError(f"{path}:{lineno0}: unknown units {units!r}")
    return records[1:], _UNIT_SCALE[units]


def load_dataset(path: str | Path) -> CalibrationDataset:
    """Parse and validate a calibration dataset file."""
    records, scale = _read_records(path)
    cameras: list[CameraModel] = []
    board: BoardGeometry | None = None
    frames: list[MocapFrame] = []
    observations: list[Observation] = []
    for lineno, rec in records:
        try:
            kind = rec["kind"]
            if kind == "camera":
                cameras.append(_camera_from_json(rec))
            elif kind == "board":
                ids = [c["corner_id"] for c in rec["corners"]]
                pts = np.array([c["position"] for c in rec["corners"]]) * scale
                board = BoardGeometry(np.array(ids), pts, rec["board_id"])
            elif kind == "mocap_frame":
                frames.append(
                    MocapFrame(
                        frame_id=rec["frame_id"],
                        time=rec["time"],
                        board_pose=_pose_from_json(rec["board_pose"], scale),
                        platform_pose=_pose_from_json(rec.get("platform_pose"), scale),
                    )
                )
            elif kind == "observation":
                observations.append(
                    Observation(
                        camera_id=rec["camera_id"],
                        frame_id=rec["frame_id"],
                        corner_id=rec["corner_id"],
                        pixel=PixelPoint(rec["pixel"][0], rec["pixel"][1]),
                    )
                )
        except (KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed {rec.get('kind')} record ({exc})") from exc
    if board is None:
        raise ValidationError(f"{path}: no board record")
    if not cameras:
        raise ValidationError(f"{path}: no camera records")
    return CalibrationDataset(frames, observations, board, cameras)


def load_recording(path: str | Path) -> list[LollypopFrame]:
    """Parse the lollypop_frame records of a dataset file."""
    records, scale = _read_records(path)
    frames: list[LollypopFrame] = []
    for lineno, rec in records:
        if rec["kind"] != "lollypop_frame":
            continue
        try:
            frames.append(
                LollypopFrame(
                    frame_id=rec["frame_id"],
                    camera_id=rec["camera_id"],
                    aruco_corners=tuple(PixelPoint(u, v) for u, v in rec["corners"]),
                    mocap_centroid=np.array(rec["mocap_centroid"]) * scale,
                    platform_pose=_pose_from_json(rec.get("platform_pose"), scale),
                )
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed lollypop_frame record ({exc})") from exc
    return frames


# ---------------------------------------------------------------------------
# Result files.


def _estimate_to_json(estimate: ChainEstimate) -> dict:
    return {
        "board_to_marker": _pose_to_json(estimate.board_to_marker),
        "extrinsics": {
            cam: _pose_to_json(estimate.extrinsics[cam]) for cam in sorted(estimate.extrinsics)
        },
        "intrinsics": {
            cam: _camera_to_json(estimate.intrinsics[cam]) for cam in sorted(estimate.intrinsics)
        },
    }


def _estimate_from_json(obj: dict) -> ChainEstimate:
    return ChainEstimate(
        board_to_marker=_pose_from_json(obj["board_to_marker"], 1.0),
        extrinsics={c: _pose_from_json(p, 1.0) for c, p in obj["extrinsics"].items()},
        intrinsics={c: _camera_from_json(m) for c, m in obj["intrinsics"].items()},
    )


def save_calibration_result(
    path: str | Path,
    result: CalibrationResult,
    opts: SolverOptions | None = None,
    reg: RegularizationConfig | None = None,
) -> None:
    doc = {
        "kind": "calibration_result",
        "format_version": FORMAT_VERSION,
        "estimate": _estimate_to_json(result.estimate),
        "board_rmse": result.board_rmse,
        "converged": result.converged,
        "stage_diagnostics": {
            name: asdict(d) for name, d in result.stage_diagnostics.items()
        },
        "config": {
            "options": _options_to_json(opts) if opts is not None else None,
            "regularization": asdict(reg) if reg is not None else None,
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _options_to_json(opts: SolverOptions) -> dict:
    doc = asdict(opts)
    doc["initial_x"] = _pose_to_json(opts.initial_x)
    return doc


def load_calibration_result(path: str | Path) -> CalibrationResult:
    doc = _load_json(path, "calibration_result")
    diagnostics = {}
    for name, d in doc["stage_diagnostics"].items():
        diagnostics[name] = StageDiagnostics(**d)
    return CalibrationResult(
        estimate=_estimate_from_json(doc["estimate"]),
        board_rmse=doc["board_rmse"],
        stage_diagnostics=diagnostics,
        converged=doc["converged"],
    )


def save_verification_report(
    path: str | Path, report: VerificationReport, cameras: dict[str, CameraModel]
) -> None:
    doc = {
        "kind": "verification_report",
        "format_version": FORMAT_VERSION,
        "threshold_2d": report.threshold_2d,
        "rmse_2d": report.rmse_2d,
        "rmse_3d": report.rmse_3d,
        "passed": report.passed,
        "per_camera": {
            cam: asdict(v) for cam, v in sorted(report.per_camera.items())
        },
        "per_frame": [
            {
                "frame_id": f.frame_id,
                "camera_id": f.camera_id,
                "e2d": f.e2d,
                "e3d": f.e3d,
                "p_aruco": [f.p_aruco.u, f.p_aruco.v],
                "p_mocap": [f.p_mocap.u, f.p_mocap.v],
            }
            for f in report.per_frame
        ],
        "cameras": {cam: _camera_to_json(m) for cam, m in sorted(cameras.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_verification_report(
    path: str | Path,
) -> tuple[VerificationReport, dict[str, CameraModel]]:
    doc = _load_json(path, "verification_report")
    per_frame = [
        FrameError(
            frame_id=f["frame_id"],
            camera_id=f["camera_id"],
            e2d=f["e2d"],
            e3d=f["e3d"],
            p_aruco=PixelPoint(f["p_aruco"][0], f["p_aruco"][1]),
            p_mocap=PixelPoint(f["p_mocap"][0], f["p_mocap"][1]),
        )
        for f in doc["per_frame"]
    ]
    per_camera = {
        cam: CameraVerification(**v) for cam, v in doc["per_camera"].items()
    }
    report = VerificationReport(
        per_frame=per_frame,
        rmse_2d=doc["rmse_2d"],
        rmse_3d=doc["rmse_3d"],
        passed=doc["passed"],
        threshold_2d=doc["threshold_2d"],
        per_camera=per_camera,
    )
    cameras = {cam: _camera_from_json(m) for cam, m in doc["cameras"].items()}
    return report, cameras


def save_transform(path: str | Path, transform: RigidTransform) -> None:
    with open(path, "w") as fh:
        json.dump(_pose_to_json(transform), fh, indent=1)
        fh.write("\n")


def load_transform(path: str | Path) -> RigidTransform:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        return _pose_from_json(obj, 1.0)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed transform ({exc})") from exc


def _load_json(path: str | Path, expected_kind: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if doc.get("kind") != expected_kind:
        raise ParseError(f"{path}: expected kind {expected_kind!r}, got {doc.get('kind')!r}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format_version")
    return doc
