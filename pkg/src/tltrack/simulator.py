"""Deterministic scenario simulator for end-to-end pipeline evaluation.

A scenario bundles an HD map, a vehicle trajectory, camera models,
regulated per-light state programs (with optional flashing segments),
occlusion intervals, and a detector noise model. Generation replays the
scenario frame by frame and emits three streams:

* detections: what a confusion-noise detector would report per camera;
* poses: the interpolated vehicle pose on the frame grid;
* ground truth: every in-range light per frame with its true state. A
  flashing light is labelled with its single on-state and a flashing flag
  for the whole segment, and occluded lights stay in the ground truth even
  though they produce no detections.

All randomness comes from generators keyed by (seed, frame, camera, kind,
entity), so outputs are byte-identical for a given seed regardless of
iteration-order changes elsewhere.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .detection import (
    CLASS_ORDER,
    LEGAL_SUCCESSORS,
    Detection2D,
    TlClass,
    TlType,
    detection_to_dict,
    one_hot_confidence,
)
from .geometry import (
    CameraModel,
    PixelBox,
    PoseBuffer,
    TimedPose,
    camera_from_dict,
    camera_from_utm,
    camera_to_dict,
    clip_box,
    pose_to_json,
    project_boxes,
)
from .hdmap import HdMap, build_index, map_from_dict, map_to_dict, query_visible

_FALLBACK_SIZE_RANGE = ((8.0, 64.0), (8.0, 64.0))  # (h, w) ranges in px

_KIND_LIGHT = 0
_KIND_FP = 1


class ScenarioError(ValueError):
    """The scenario failed validation."""


@dataclass(frozen=True)
class FlashingSegment:
    """Duty-cycled alternation between an on-state and the dark state.

    Each period starts with its dark phase, so the first illuminated frame
    appears ``(1 - duty) / freq_hz`` seconds after ``start_s``.
    """

    on_class: TlClass
    freq_hz: float
    duty: float
    start_s: float
    end_s: float


@dataclass(frozen=True)
class LightProgram:
    """Phase schedule for one light, on the scenario clock."""

    light_id: str
    phases: tuple  # ((TlClass, duration_s), ...)
    flashing: tuple = ()  # (FlashingSegment, ...)

    def phase_at(self, t: float) -> TlClass:
        bounds = np.cumsum([d for _, d in self.phases])
        i = min(bisect_right(bounds, t), len(self.phases) - 1)
        return self.phases[i][0]

    def segment_at(self, t: float) -> FlashingSegment | None:
        for seg in self.flashing:
            if seg.start_s <= t < seg.end_s:
                return seg
        return None

    def realized_state(self, t: float) -> TlClass:
        """The physically lit state at time t (dark phases show 4-off)."""
        seg = self.segment_at(t)
        if seg is None:
            return self.phase_at(t)
        cycle = ((t - seg.start_s) * seg.freq_hz) % 1.0
        return TlClass.FOUR_OFF if cycle < 1.0 - seg.duty else seg.on_class

    def true_label(self, t: float) -> tuple[TlClass, bool]:
        """Ground-truth label: flashing spans collapse to (on_class, True)."""
        seg = self.segment_at(t)
        if seg is not None:
            return seg.on_class, True
        return self.phase_at(t), False


@dataclass(frozen=True)
class ProgramViolation:
    index: int
    message: str


def validate_program(program: LightProgram, tl_type: TlType) -> list[ProgramViolation]:
    """Check a phase schedule against the type's regulated sequence.

    Returns violations (empty when the program is legal); an empty program
    is vacuously legal.
    """
    violations: list[ProgramViolation] = []
    states = set(tl_type.states)
    for i, (cls, duration) in enumerate(program.phases):
        if cls not in states:
            violations.append(
                ProgramViolation(i, f"{cls.value} is not a {tl_type.value} state")
            )
        if duration <= 0:
            violations.append(ProgramViolation(i, "phase duration must be positive"))
    for i, ((a, _), (b, _)) in enumerate(zip(program.phases, program.phases[1:])):
        if a in states and b in states and a is not b:
            if b not in LEGAL_SUCCESSORS[tl_type][a]:
                violations.append(
                    ProgramViolation(
                        i, f"illegal transition {a.value} -> {b.value}"
                    )
                )
    for i, seg in enumerate(program.flashing):
        if TlClass.FOUR_OFF not in tl_type.states:
            violations.append(
                ProgramViolation(i, f"{tl_type.value} has no dark state to flash with")
            )
            continue
        if seg.on_class not in states or not seg.on_class.is_on:
            violations.append(
                ProgramViolation(i, f"{seg.on_class.value} is not a valid on-state")
            )
        if not (0.5 - 1e-9 <= seg.duty <= 2.0 / 3.0 + 1e-9):
            violations.append(
                ProgramViolation(i, f"duty {seg.duty} outside [1/2, 2/3]")
            )
        if seg.freq_hz <= 0 or seg.end_s <= seg.start_s:
            violations.append(ProgramViolation(i, "malformed flashing span"))
    return violations


@dataclass(frozen=True)
class NoiseModel:
    """Detector noise: per-type sampling confusion plus miss/FP/jitter rates.

    ``confusion[tl_type][i, j]`` is P(observed state j | true state i) in
    the type's canonical state order (rows sum to one). The same seed
    always reproduces the same output bytes.
    """

    confusion: dict  # TlType -> np.ndarray, row-stochastic
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    box_jitter_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.miss_rate <= 1.0 and 0.0 <= self.fp_rate <= 1.0):
            raise ValueError("miss_rate and fp_rate must lie in [0, 1]")
        if self.box_jitter_px < 0:
            raise ValueError("box_jitter_px must be non-negative")
        conf = {}
        for tl_type in TlType:
            n = len(tl_type.states)
            m = np.asarray(self.confusion.get(tl_type, np.eye(n)), dtype=float)
            if m.shape != (n, n) or np.any(m < 0):
                raise ValueError(f"bad confusion shape for {tl_type.value}")
            if np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError(f"confusion rows for {tl_type.value} must sum to 1")
            conf[tl_type] = m
        object.__setattr__(self, "confusion", conf)


@dataclass
class Scenario:
    hd_map: HdMap
    trajectory: list[TimedPose]
    cameras: list[CameraModel]
    programs: dict[str, LightProgram]
    occlusions: list[tuple[str, str, float, float]]  # light, camera, start, end
    frame_rate: float
    noise: NoiseModel

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ScenarioError("frame_rate must be positive")
        if len(self.trajectory) < 2:
            raise ScenarioError("trajectory needs at least 2 waypoints")
        light_ids = {l.light_id for l in self.hd_map.lights}
        camera_ids = {c.camera_id for c in self.cameras}
        for light_id in self.programs:
            if light_id not in light_ids:
                raise ScenarioError(f"program for unknown light {light_id}")
        for light in self.hd_map.lights:
            if light.light_id not in self.programs:
                raise ScenarioError(f"light {light.light_id} has no program")
            violations = validate_program(self.programs[light.light_id], light.tl_type)
            if violations:
                details = "; ".join(f"[{v.index}] {v.message}" for v in violations)
                raise ScenarioError(f"program for {light.light_id}: {details}")
        for light_id, camera_id, start, end in self.occlusions:
            if light_id not in light_ids:
                raise ScenarioError(f"occlusion for unknown light {light_id}")
            if camera_id not in camera_ids:
                raise ScenarioError(f"occlusion for unknown camera {camera_id}")
            if end <= start:
                raise ScenarioError(f"occlusion interval [{start}, {end}) is empty")

    def frame_times(self) -> list[float]:
        t0 = self.trajectory[0].timestamp
        t_end = self.trajectory[-1].timestamp
        n = int((t_end - t0) * self.frame_rate + 1e-9) + 1
        return [t0 + k / self.frame_rate for k in range(n)]

    def occluded(self, light_id: str, camera_id: str, t: float) -> bool:
        return any(
            lid == light_id and cid == camera_id and start <= t < end
            for lid, cid, start, end in self.occlusions
        )


@dataclass
class FrameData:
    """One simulated frame: pose, noisy detections, and ground truth."""

    t: float
    pose: TimedPose
    detections: list[Detection2D]
    ground_truth: list[dict]


def _rng(seed: int, frame: int, camera: int, kind: int, entity: int):
    return np.random.default_rng([seed, frame, camera, kind, entity])


def generate_frames(scenario: Scenario) -> Iterator[FrameData]:
    """Replay the scenario, yielding one FrameData per grid timestamp."""
    index = build_index(scenario.hd_map)
    poses = PoseBuffer(scenario.trajectory)
    cameras = sorted(scenario.cameras, key=lambda c: c.camera_id)
    cam_order = {c.camera_id: i for i, c in enumerate(cameras)}
    light_order = {
        lid: i for i, lid in enumerate(sorted(l.light_id for l in scenario.hd_map.lights))
    }
    noise = scenario.noise
    size_seen = False
    size_lo = np.zeros(2)
    size_hi = np.zeros(2)

    for frame_idx, t in enumerate(scenario.frame_times()):
        pose = poses.at(t)
        visible = query_visible(index, pose, cameras)
        detections: list[Detection2D] = []
        in_range: dict[str, list[str]] = {}

        for cam in cameras:
            lights = sorted(visible[cam.camera_id], key=lambda l: l.light_id)
            t_cam_utm = camera_from_utm(cam.extrinsic, pose)
            boxes = project_boxes(lights, t_cam_utm, cam.intrinsics)
            for light, box in zip(lights, boxes):
                in_range.setdefault(light.light_id, [])
                if box is None:
                    continue
                box = clip_box(box, cam.intrinsics)
                if box is None:
                    continue
                if scenario.occluded(light.light_id, cam.camera_id, t):
                    continue
                in_range[light.light_id].append(cam.camera_id)
                rng = _rng(
                    noise.seed,
                    frame_idx,
                    cam_order[cam.camera_id],
                    _KIND_LIGHT,
                    light_order[light.light_id],
                )
                if noise.miss_rate > 0 and rng.random() < noise.miss_rate:
                    continue
                realized = scenario.programs[light.light_id].realized_state(t)
                states = light.tl_type.states
                row = noise.confusion[light.tl_type][states.index(realized)]
                observed = states[int(rng.choice(len(states), p=row))]
                jitter = rng.normal(0.0, noise.box_jitter_px, size=4) if noise.box_jitter_px > 0 else np.zeros(4)
                jittered = PixelBox(
                    c_x=box.c_x + jitter[0],
                    c_y=box.c_y + jitter[1],
                    h=max(1.0, box.h + jitter[2]),
                    w=max(1.0, box.w + jitter[3]),
                )
                size = np.array([box.h, box.w])
                if not size_seen:
                    size_lo, size_hi, size_seen = size.copy(), size.copy(), True
                else:
                    size_lo = np.minimum(size_lo, size)
                    size_hi = np.maximum(size_hi, size)
                detections.append(
                    Detection2D(
                        camera_id=cam.camera_id,
                        timestamp=t,
                        box=jittered,
                        confidence=one_hot_confidence(observed),
                        score=0.5 + 0.5 * rng.random(),
                    )
                )

            if noise.fp_rate > 0:
                rng_count = _rng(
                    noise.seed, frame_idx, cam_order[cam.camera_id], _KIND_FP, 0
                )
                count = int(noise.fp_rate) + (
                    1 if rng_count.random() < noise.fp_rate % 1.0 else 0
                )
                for k in range(count):
                    rng = _rng(
                        noise.seed, frame_idx, cam_order[cam.camera_id], _KIND_FP, k + 1
                    )
                    (h_lo, h_hi), (w_lo, w_hi) = (
                        ((size_lo[0], size_hi[0]), (size_lo[1], size_hi[1]))
                        if size_seen
                        else _FALLBACK_SIZE_RANGE
                    )
                    kk = cam.intrinsics
                    detections.append(
                        Detection2D(
                            camera_id=cam.camera_id,
                            timestamp=t,
                            box=PixelBox(
                                c_x=rng.uniform(0, kk.width),
                                c_y=rng.uniform(0, kk.height),
                                h=max(1.0, rng.uniform(h_lo, max(h_lo + 1e-9, h_hi))),
                                w=max(1.0, rng.uniform(w_lo, max(w_lo + 1e-9, w_hi))),
                            ),
                            confidence=one_hot_confidence(
                                CLASS_ORDER[int(rng.integers(len(CLASS_ORDER)))]
                            ),
                            score=0.5 + 0.5 * rng.random(),
                        )
                    )

        ground_truth = []
        for light_id in sorted(in_range):
            light = index.get(light_id)
            state, flashing = scenario.programs[light_id].true_label(t)
            ground_truth.append(
                {
                    "light_id": light_id,
                    "x": float(light.position[0]),
                    "y": float(light.position[1]),
                    "z": float(light.position[2]),
                    "true_state": state.value,
                    "flashing": flashing,
                    "visible_in": in_range[light_id],
                }
            )

        yield FrameData(t=t, pose=pose, detections=detections, ground_truth=ground_truth)


@dataclass(frozen=True)
class GeneratedPaths:
    detections: Path
    poses: Path
    ground_truth: Path
    hd_map: Path
    calibration_dir: Path


def generate(scenario: Scenario, out_dir) -> GeneratedPaths:
    """Write the scenario's streams (plus map and calibration) to a directory.

    Output is bytewise deterministic for a given scenario and seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = GeneratedPaths(
        detections=out / "detections.jsonl",
        poses=out / "poses.jsonl",
        ground_truth=out / "ground_truth.jsonl",
        hd_map=out / "map.json",
        calibration_dir=out / "calib",
    )
    paths.calibration_dir.mkdir(exist_ok=True)
    paths.hd_map.write_text(json.dumps(map_to_dict(scenario.hd_map), indent=2) + "\n")
    for cam in scenario.cameras:
        (paths.calibration_dir / f"{cam.camera_id}.json").write_text(
            json.dumps(camera_to_dict(cam), indent=2) + "\n"
        )
    with open(paths.detections, "w") as det_fp, open(
        paths.poses, "w"
    ) as pose_fp, open(paths.ground_truth, "w") as gt_fp:
        for frame in generate_frames(scenario):
            pose_fp.write(pose_to_json(frame.pose) + "\n")
            for det in frame.detections:
                det_fp.write(json.dumps(detection_to_dict(det)) + "\n")
            gt_fp.write(
                json.dumps({"t": frame.t, "lights": frame.ground_truth}) + "\n"
            )
    return paths


# ----------------------------------------------------------------------- I/O


def scenario_from_dict(raw: dict) -> Scenario:
    try:
        hd_map = map_from_dict(raw["map"])
        trajectory = [
            TimedPose(
                timestamp=float(p["t"]),
                rotation=np.asarray(p["q"], dtype=float),
                translation=np.asarray(p["p"], dtype=float),
            )
            for p in raw["trajectory"]
        ]
        cameras = [camera_from_dict(c) for c in raw["cameras"]]
        programs = {}
        for rec in raw["programs"]:
            program = LightProgram(
                light_id=str(rec["light_id"]),
                phases=tuple(
                    (TlClass(cls), float(dur)) for cls, dur in rec["phases"]
                ),
                flashing=tuple(
                    FlashingSegment(
                        on_class=TlClass(seg["on_class"]),
                        freq_hz=float(seg["freq_hz"]),
                        duty=float(seg["duty"]),
                        start_s=float(seg["start_s"]),
                        end_s=float(seg["end_s"]),
                    )
                    for seg in rec.get("flashing", [])
                ),
            )
            programs[program.light_id] = program
        occlusions = [
            (str(o["light_id"]), str(o["camera_id"]), float(o["start_s"]), float(o["end_s"]))
            for o in raw.get("occlusions", [])
        ]
        noise_raw = raw.get("noise", {})
        noise = NoiseModel(
            confusion={
                TlType(k): np.asarray(v, dtype=float)
                for k, v in noise_raw.get("confusion", {}).items()
            },
            miss_rate=float(noise_raw.get("miss_rate", 0.0)),
            fp_rate=float(noise_raw.get("fp_rate", 0.0)),
            box_jitter_px=float(noise_raw.get("box_jitter_px", 0.0)),
            seed=int(noise_raw.get("seed", 0)),
        )
        return Scenario(
            hd_map=hd_map,
            trajectory=trajectory,
            cameras=cameras,
            programs=programs,
            occlusions=occlusions,
            frame_rate=float(raw["frame_rate_hz"]),
            noise=noise,
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return scenario_from_dict(raw)
