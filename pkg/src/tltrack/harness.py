"""Pipeline runner and evaluator.

``run_pipeline`` wires detection, pose, and map inputs through projection,
association, tracking, and state filtering, at one of three ablation
levels:

* ``od``: every detection is back-projected on its own; raw argmax classes.
* ``fusion``: adds map association; matched detections take the map light's
  3D position, unmatched ones stay back-projected.
* ``tracking``: adds track lifecycle management, HMM class refinement, and
  flashing detection.

``evaluate`` scores a report stream against simulator ground truth:
3D position error over matched light-frames, per-frame classification
accuracy, and a classes-plus-background confusion matrix.

The pose stream defines the frame clock: the runner iterates over pose
timestamps, so tracks age correctly through frames with no detections at
all. Every detection timestamp must appear in the pose stream.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .association import back_project, build_cost_matrix, solve_assignment
from .detection import (
    CLASS_ORDER,
    DEFAULT_TYPE_HEIGHTS_M,
    Detection2D,
    TlClass,
    TlType,
    read_detections,
)
from .geometry import (
    CameraModel,
    PoseBuffer,
    TimedPose,
    camera_from_utm,
    clip_box,
    project_boxes,
)
from .hdmap import HdMap, build_index, query_visible
from .statefilter import FlashingConfig, Hmm, default_hmm, hmm_from_dict
from .tracker import AssociatedFrame, TrackerConfig, TrackStore, track_report_dict

BACKGROUND_LABEL = TlClass.BACKGROUND.value
CONFUSION_LABELS = [c.value for c in CLASS_ORDER] + [BACKGROUND_LABEL]

_T_KEY_DECIMALS = 6


class PoseCoverageError(ValueError):
    """A detection timestamp is not covered by the pose stream."""

    def __init__(self, timestamp: float):
        super().__init__(f"no pose frame covers detection timestamp {timestamp}")
        self.timestamp = timestamp


class PipelineConfigError(ValueError):
    """Inconsistent pipeline inputs or configuration."""


class EmptyGroundTruthError(ValueError):
    """Evaluation requires at least one ground-truth light-frame."""


class AblationMode(str, Enum):
    OD_ONLY = "od"
    OD_FUSION = "fusion"
    OD_FUSION_TRACKING = "tracking"


@dataclass
class PipelineConfig:
    """Tunables for the runner, loadable from a single JSON file."""

    gate_px: float = 100.0
    match_radius_m: float = 3.0
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    flashing: FlashingConfig = field(default_factory=FlashingConfig)
    self_transition: float = 0.98
    type_heights_m: dict = field(default_factory=lambda: dict(DEFAULT_TYPE_HEIGHTS_M))
    hmms: dict = field(default_factory=dict)  # TlType -> Hmm overrides

    def resolved_hmms(self) -> dict[TlType, Hmm]:
        out = {}
        for tl_type in TlType:
            out[tl_type] = self.hmms.get(tl_type) or default_hmm(
                tl_type, self_transition=self.self_transition
            )
        return out


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
        return config_from_dict(raw)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise PipelineConfigError(f"{path}: bad config: {exc}") from exc


def config_from_dict(raw: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    if "gate_px" in raw:
        cfg.gate_px = float(raw["gate_px"])
    if "match_radius_m" in raw:
        cfg.match_radius_m = float(raw["match_radius_m"])
    if "self_transition" in raw:
        cfg.self_transition = float(raw["self_transition"])
    if "tracker" in raw:
        cfg.tracker = TrackerConfig(**raw["tracker"])
    if "flashing" in raw:
        cfg.flashing = FlashingConfig(**raw["flashing"])
    if "type_heights_m" in raw:
        cfg.type_heights_m = {
            TlType(k): float(v) for k, v in raw["type_heights_m"].items()
        }
    for key, spec in raw.get("hmm", {}).items():
        spec = dict(spec)
        spec.setdefault("tl_type", key)
        hmm = hmm_from_dict(spec)
        cfg.hmms[hmm.tl_type] = hmm
    return cfg


@dataclass
class FrameReport:
    t: float
    tracks: list[dict]

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "tracks": self.tracks})


def _t_key(t: float) -> float:
    return round(t, _T_KEY_DECIMALS)


def _group_detections(
    detections: Sequence[Detection2D], cameras: Sequence[CameraModel]
) -> dict[float, dict[str, list[Detection2D]]]:
    known = {c.camera_id for c in cameras}
    grouped: dict[float, dict[str, list[Detection2D]]] = {}
    for det in detections:
        if det.camera_id not in known:
            raise PipelineConfigError(f"detection from unknown camera {det.camera_id}")
        grouped.setdefault(_t_key(det.timestamp), {}).setdefault(
            det.camera_id, []
        ).append(det)
    return grouped


def run_pipeline(
    hd_map: HdMap,
    cameras: Sequence[CameraModel],
    detections: Sequence[Detection2D],
    poses: Sequence[TimedPose],
    mode: AblationMode,
    config: PipelineConfig | None = None,
) -> tuple[list[FrameReport], float]:
    """Run one ablation level over a recorded stream.

    Returns the per-frame reports and the measured processing throughput in
    frames per second (I/O and parsing excluded). Output is deterministic
    for identical inputs and configuration; the throughput figure is not
    part of the reports.
    """
    config = config or PipelineConfig()
    cameras = sorted(cameras, key=lambda c: c.camera_id)
    buffer = PoseBuffer(poses)
    grouped = _group_detections(detections, cameras)
    frame_times = [p.timestamp for p in poses]
    frame_keys = {_t_key(t) for t in frame_times}
    for t in sorted(grouped):
        if t not in frame_keys:
            raise PoseCoverageError(t)

    index = build_index(hd_map)
    heights = {TlType(k): v for k, v in config.type_heights_m.items()}
    store = None
    if mode is AblationMode.OD_FUSION_TRACKING:
        store = TrackStore(
            hmms=config.resolved_hmms(),
            index=index,
            config=config.tracker,
            flashing=config.flashing,
            gate_px=config.gate_px,
            type_heights=heights,
        )

    reports: list[FrameReport] = []
    od_ids = iter(range(1, 10**9))
    start = time.perf_counter()
    for t in frame_times:
        per_camera = grouped.get(_t_key(t), {})
        if mode is AblationMode.OD_ONLY:
            tracks = _od_only_frame(t, per_camera, cameras, buffer, heights, od_ids)
        elif mode is AblationMode.OD_FUSION:
            tracks = _fusion_frame(
                t, per_camera, cameras, buffer, index, heights, config, od_ids
            )
        else:
            frames = _associate_frame(t, per_camera, cameras, buffer, index, config)
            tracks = [track_report_dict(tr) for tr in store.update(frames)]
        reports.append(FrameReport(t=t, tracks=tracks))
    elapsed = time.perf_counter() - start
    fps = len(frame_times) / elapsed if elapsed > 0 else float("inf")
    return reports, fps


def _od_only_frame(t, per_camera, cameras, buffer, heights, od_ids) -> list[dict]:
    tracks = []
    pose = buffer.at(t)
    for cam in cameras:
        dets = per_camera.get(cam.camera_id, [])
        if not dets:
            continue
        t_cam_utm = camera_from_utm(cam.extrinsic, pose)
        for det in dets:
            cls = det.detected_class
            position = back_project(
                det, cam.intrinsics, t_cam_utm, heights[cls.tl_type]
            )
            tracks.append(
                {
                    "track_id": next(od_ids),
                    "light_id": None,
                    "x": float(position[0]),
                    "y": float(position[1]),
                    "z": float(position[2]),
                    "tl_type": cls.tl_type.value,
                    "state": cls.value,
                    "flashing": False,
                    "belief": [],
                }
            )
    return tracks


def _cam_transforms(cameras, pose):
    return {c.camera_id: camera_from_utm(c.extrinsic, pose) for c in cameras}


def _associate_camera(cam, dets, t_cam_utm, visible, config):
    """Project one camera's visible map lights and associate detections."""
    projected = []
    for light, box in zip(
        visible, project_boxes(visible, t_cam_utm, cam.intrinsics)
    ):
        if box is None:
            continue
        box = clip_box(box, cam.intrinsics)
        if box is None:
            continue
        projected.append((light, box))
    costs = build_cost_matrix(
        [(box, light.tl_type) for light, box in projected], dets, config.gate_px
    )
    assignment = solve_assignment(costs)
    matched = [
        (projected[i][0], dets[j]) for i, j in assignment.pairs
    ]
    taken = {j for _, j in assignment.pairs}
    unmatched = [d for j, d in enumerate(dets) if j not in taken]
    return t_cam_utm, matched, unmatched


def _fusion_frame(
    t, per_camera, cameras, buffer, index, heights, config, od_ids
) -> list[dict]:
    pose = buffer.at(t)
    transforms = _cam_transforms(cameras, pose)
    visible = query_visible(index, pose, cameras, transforms)
    by_light: dict[str, dict] = {}
    extra: list[dict] = []
    for cam in cameras:
        dets = per_camera.get(cam.camera_id, [])
        t_cam_utm, matched, unmatched = _associate_camera(
            cam, dets, transforms[cam.camera_id], visible[cam.camera_id], config
        )
        for light, det in matched:
            cls = det.detected_class
            entry = {
                "track_id": None,
                "light_id": light.light_id,
                "x": float(light.position[0]),
                "y": float(light.position[1]),
                "z": float(light.position[2]),
                "tl_type": light.tl_type.value,
                "state": cls.value,
                "flashing": False,
                "belief": [],
                "_score": det.score,
            }
            # One row per light per frame: keep the most confident camera.
            best = by_light.get(light.light_id)
            if best is None or entry["_score"] > best["_score"]:
                by_light[light.light_id] = entry
        for det in unmatched:
            cls = det.detected_class
            position = back_project(
                det, cam.intrinsics, t_cam_utm, heights[cls.tl_type]
            )
            extra.append(
                {
                    "track_id": None,
                    "light_id": None,
                    "x": float(position[0]),
                    "y": float(position[1]),
                    "z": float(position[2]),
                    "tl_type": cls.tl_type.value,
                    "state": cls.value,
                    "flashing": False,
                    "belief": [],
                }
            )
    tracks = []
    for light_id in sorted(by_light):
        entry = by_light[light_id]
        entry.pop("_score")
        entry["track_id"] = next(od_ids)
        tracks.append(entry)
    for entry in extra:
        entry["track_id"] = next(od_ids)
        tracks.append(entry)
    return tracks


def _associate_frame(
    t, per_camera, cameras, buffer, index, config
) -> list[AssociatedFrame]:
    pose = buffer.at(t)
    transforms = _cam_transforms(cameras, pose)
    visible = query_visible(index, pose, cameras, transforms)
    frames = []
    for cam in cameras:
        dets = per_camera.get(cam.camera_id, [])
        t_cam_utm, matched, unmatched = _associate_camera(
            cam, dets, transforms[cam.camera_id], visible[cam.camera_id], config
        )
        frames.append(
            AssociatedFrame(
                camera_id=cam.camera_id,
                timestamp=t,
                matched=tuple((light.light_id, det) for light, det in matched),
                unmatched=tuple(unmatched),
                cam_from_utm=t_cam_utm,
                intrinsics=cam.intrinsics,
            )
        )
    return frames


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    """Aggregate pipeline metrics against ground truth."""

    ape_m: float
    class_accuracy: float
    confusion: np.ndarray  # (14, 14): 13 classes + background, rows = truth
    fps: float | None
    per_light: dict

    def to_dict(self) -> dict:
        return {
            "ape_m": self.ape_m,
            "class_accuracy": self.class_accuracy,
            "confusion_labels": CONFUSION_LABELS,
            "confusion": self.confusion.astype(int).tolist(),
            "fps": self.fps,
            "per_light": self.per_light,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _label_index(label: str) -> int:
    return CONFUSION_LABELS.index(label)


def evaluate(
    reports: Sequence[FrameReport],
    ground_truth: Sequence[dict],
    match_radius_m: float = 3.0,
    fps: float | None = None,
) -> EvalReport:
    """Score reports against ground truth on a shared frame grid.

    Reports are matched to ground-truth lights by nearest 3D position
    within the match radius. A light-frame counts as correct when matched
    with an equal state; flashing ground truth additionally requires the
    flashing flag. Unmatched ground truth lands in the background column of
    its class row; unmatched reports land in the background row.
    """
    if not any(frame["lights"] for frame in ground_truth):
        raise EmptyGroundTruthError("ground truth contains no light-frames")
    reports_by_t = {_t_key(r.t): r.tracks for r in reports}
    n = len(CONFUSION_LABELS)
    confusion = np.zeros((n, n), dtype=int)
    bg = _label_index(BACKGROUND_LABEL)
    distances: list[float] = []
    per_light: dict[str, dict] = {}
    total = 0
    correct_total = 0

    for frame in ground_truth:
        lights = frame["lights"]
        if not lights:
            continue
        tracks = reports_by_t.get(_t_key(frame["t"]), [])
        positions = np.array([[l["x"], l["y"], l["z"]] for l in lights])
        matches: dict[int, list[tuple[float, dict]]] = {}
        for track in tracks:
            p = np.array([track["x"], track["y"], track["z"]])
            d = np.linalg.norm(positions - p, axis=1)
            j = int(np.argmin(d))
            if d[j] <= match_radius_m:
                matches.setdefault(j, []).append((float(d[j]), track))
                distances.append(float(d[j]))
            else:
                confusion[bg, _label_index(track["state"])] += 1
        for j, light in enumerate(lights):
            total += 1
            stats = per_light.setdefault(
                light["light_id"], {"frames": 0, "correct": 0, "distances": []}
            )
            stats["frames"] += 1
            candidates = matches.get(j)
            truth_idx = _label_index(light["true_state"])
            if not candidates:
                confusion[truth_idx, bg] += 1
                continue
            dist, track = min(candidates, key=lambda dt: dt[0])
            stats["distances"].append(dist)
            confusion[truth_idx, _label_index(track["state"])] += 1
            ok = track["state"] == light["true_state"]
            if light["flashing"]:
                ok = ok and bool(track["flashing"])
            if ok:
                correct_total += 1
                stats["correct"] += 1

    per_light_out = {}
    for light_id in sorted(per_light):
        stats = per_light[light_id]
        dists = stats["distances"]
        per_light_out[light_id] = {
            "frames": stats["frames"],
            "correct": stats["correct"],
            "accuracy": stats["correct"] / stats["frames"],
            "ape_m": float(np.mean(dists)) if dists else None,
        }
    return EvalReport(
        ape_m=float(np.mean(distances)) if distances else float("nan"),
        class_accuracy=correct_total / total,
        confusion=confusion,
        fps=fps,
        per_light=per_light_out,
    )


def emit_sequence_csv(
    reports: Sequence[FrameReport],
    ground_truth: Sequence[dict],
    light_id: str,
    od_reports: Sequence[FrameReport] | None = None,
    match_radius_m: float = 3.0,
) -> str:
    """Per-frame CSV for one light: truth, raw detector, and pipeline states.

    The ``od_state`` column is filled from a detector-only report stream
    when one is supplied, otherwise left empty.
    """
    known = {l["light_id"] for frame in ground_truth for l in frame["lights"]}
    if light_id not in known:
        raise ValueError(f"unknown light_id {light_id}")
    reports_by_t = {_t_key(r.t): r.tracks for r in reports}
    od_by_t = {_t_key(r.t): r.tracks for r in od_reports or []}

    lines = ["t,gt_state,od_state,pipeline_state,flashing_flag,occluded"]
    for frame in ground_truth:
        light = next(
            (l for l in frame["lights"] if l["light_id"] == light_id), None
        )
        if light is None:
            continue
        position = np.array([light["x"], light["y"], light["z"]])

        def nearest_state(tracks) -> tuple[str, bool]:
            best = None
            for track in tracks:
                if track.get("light_id") == light_id:
                    best = (0.0, track)
                    break
                d = float(
                    np.linalg.norm(
                        np.array([track["x"], track["y"], track["z"]]) - position
                    )
                )
                if d <= match_radius_m and (best is None or d < best[0]):
                    best = (d, track)
            if best is None:
                return "", False
            return best[1]["state"], bool(best[1]["flashing"])

        pipeline_state, flashing = nearest_state(
            reports_by_t.get(_t_key(frame["t"]), [])
        )
        od_state, _ = nearest_state(od_by_t.get(_t_key(frame["t"]), []))
        occluded = 0 if light["visible_in"] else 1
        lines.append(
            f"{frame['t']},{light['true_state']},{od_state},"
            f"{pipeline_state},{int(flashing)},{occluded}"
        )
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------- I/O


def write_reports(path, reports: Sequence[FrameReport]) -> None:
    with open(path, "w") as fp:
        for report in reports:
            fp.write(report.to_json() + "\n")


def read_reports(path) -> list[FrameReport]:
    out = []
    with open(path) as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(FrameReport(t=float(rec["t"]), tracks=rec["tracks"]))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad report record: {exc}") from exc
    return out


def read_ground_truth(path) -> list[dict]:
    out = []
    with open(path) as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                rec["t"] = float(rec["t"])
                out.append(rec)
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(
                    f"{path}:{lineno}: bad ground-truth record: {exc}"
                ) from exc
    return out
