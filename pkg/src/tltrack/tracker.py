"""Track lifecycle management across cameras and time.

Tracks exist for map lights with associated detections and for persistent
unmapped lights discovered by the detector. Birth requires consecutive
frames with at least one associated detection (any camera counts for the
frame); a track stops being reported once unobserved for more than the
death threshold, at which point its belief is discarded while the stored
3D position survives in the spatial index.

Per frame, detections of one track from different cameras are fused as
separate observations in ascending camera order, each driving one HMM
forward update; duty-cycle flashing detection runs on the raw detected
classes of the observation history.

The store is a single-writer structure: per-camera association may run
concurrently upstream, but ``update`` must be called serially in frame
order.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .association import back_project, build_cost_matrix, solve_assignment
from .detection import (
    DEFAULT_TYPE_DIMS_M,
    DEFAULT_TYPE_HEIGHTS_M,
    Detection2D,
    TlClass,
    TlType,
)
from .geometry import CameraIntrinsics, PixelBox, RigidTransform
from .hdmap import MapTrafficLight, SpatialIndex
from .statefilter import (
    BeliefState,
    FlashingConfig,
    Hmm,
    ImpossibleObservationError,
    NoEvidenceError,
    build_evidence,
    detect_flashing,
    forward_update,
    map_state,
    restrict_confidence,
)

logger = logging.getLogger(__name__)

MAP_SOURCE = "map"
DETECTION_SOURCE = "detection"

SPAWNED_ID_PREFIX = "spawned-"


@dataclass(frozen=True)
class Observation:
    """One fused per-camera observation of a tracked light."""

    timestamp: float
    camera_id: str
    box: PixelBox
    detected_class: TlClass
    confidence: np.ndarray

    def __post_init__(self):
        conf = np.asarray(self.confidence, dtype=float)
        if abs(float(conf.sum()) - 1.0) > 1e-6:
            raise ValueError("observation confidence must sum to 1")
        object.__setattr__(self, "confidence", conf)


@dataclass(frozen=True)
class TrackerConfig:
    n_birth_map: int = 2
    n_birth_2d: int = 2
    n_death: int = 15
    history_len: int = 30

    def __post_init__(self):
        if min(self.n_birth_map, self.n_birth_2d, self.n_death, self.history_len) < 1:
            raise ValueError("tracker thresholds must all be at least 1")


@dataclass
class Track:
    track_id: int
    source: str  # MAP_SOURCE or DETECTION_SOURCE
    light_id: str
    position: np.ndarray  # UTM metres
    tl_type: TlType
    history: deque  # ring buffer of Observation
    belief: BeliefState
    consecutive_hits: int = 0
    missed_frames: int = 0
    flashing: bool = False
    flashing_class: TlClass | None = None
    reported: bool = False

    @property
    def state(self) -> TlClass:
        """Reported class: the flashing state when detected, else the
        filtered argmax."""
        if self.flashing and self.flashing_class is not None:
            return self.flashing_class
        return map_state(self.belief)


@dataclass(frozen=True)
class AssociatedFrame:
    """Association output for one camera at one pipeline frame."""

    camera_id: str
    timestamp: float
    matched: tuple  # ((light_id, Detection2D), ...)
    unmatched: tuple  # (Detection2D, ...)
    cam_from_utm: RigidTransform
    intrinsics: CameraIntrinsics


@dataclass
class _Provisional:
    """Pre-birth chain of unmatched detections in one camera."""

    detection: Detection2D
    tl_type: TlType
    hits: int = 1

    @property
    def box(self) -> PixelBox:
        return self.detection.box


def fuse_frame_observations(
    track: Track,
    detections: Sequence[tuple[str, Detection2D]],
    hmm: Hmm,
    flashing_cfg: FlashingConfig,
) -> list[Observation]:
    """Fuse one frame's per-camera detections of a track.

    One observation is appended per camera detection, in ascending camera
    order, each triggering one forward filter update. The flashing flag is
    refreshed from the updated history. Returns the appended observations.
    """
    appended: list[Observation] = []
    for camera_id, det in sorted(detections, key=lambda cd: cd[0]):
        obs = Observation(
            timestamp=det.timestamp,
            camera_id=camera_id,
            box=det.box,
            detected_class=det.detected_class,
            confidence=det.confidence,
        )
        track.history.append(obs)
        appended.append(obs)
        try:
            restricted = restrict_confidence(track.tl_type, det.confidence)
        except NoEvidenceError:
            logger.warning(
                "track %d: observation at t=%.3f carries no evidence; skipped",
                track.track_id,
                det.timestamp,
            )
            continue
        evidence = build_evidence(hmm.confusion, restricted)
        try:
            track.belief = forward_update(
                track.belief, hmm.transition, evidence, timestamp=det.timestamp
            )
        except ImpossibleObservationError:
            logger.warning(
                "track %d: impossible observation at t=%.3f; belief reset to prior",
                track.track_id,
                det.timestamp,
            )
            track.belief = hmm.initial_belief(det.timestamp)
    flashing_class = detect_flashing(track.history, flashing_cfg)
    track.flashing = flashing_class is not None
    track.flashing_class = flashing_class
    return appended


class TrackStore:
    """Single-writer store of per-light tracks fed by association results."""

    def __init__(
        self,
        hmms: Mapping[TlType, Hmm],
        index: SpatialIndex,
        config: TrackerConfig | None = None,
        flashing: FlashingConfig | None = None,
        gate_px: float = 100.0,
        type_heights: Mapping[TlType, float] | None = None,
        type_dims: Mapping[TlType, tuple[float, float, float]] | None = None,
    ):
        missing = [t for t in TlType if t not in hmms]
        if missing:
            raise ValueError(f"missing HMMs for types {[t.value for t in missing]}")
        self._hmms = dict(hmms)
        self._index = index
        self.config = config or TrackerConfig()
        self.flashing_cfg = flashing or FlashingConfig()
        self.gate_px = gate_px
        self._type_heights = dict(type_heights or DEFAULT_TYPE_HEIGHTS_M)
        self._type_dims = dict(type_dims or DEFAULT_TYPE_DIMS_M)
        self._tracks: dict[str, Track] = {}
        self._provisional: dict[str, list[_Provisional]] = {}
        self._ids = itertools.count(1)
        self._spawned = itertools.count(1)

    @property
    def tracks(self) -> list[Track]:
        return sorted(self._tracks.values(), key=lambda t: t.track_id)

    @property
    def reported_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.reported]

    def update(self, frames: Sequence[AssociatedFrame]) -> list[Track]:
        """Advance one pipeline frame; returns the current report set.

        Cameras are processed in ascending (timestamp, camera_id) order.
        Every track not associated this frame counts one missed frame.
        """
        frames = sorted(frames, key=lambda f: (f.timestamp, f.camera_id))
        hits: dict[str, list[tuple[str, Detection2D]]] = {}
        for fr in frames:
            for light_id, det in fr.matched:
                hits.setdefault(light_id, []).append((fr.camera_id, det))

        for light_id in sorted(hits):
            track = self._tracks.get(light_id)
            if track is None:
                track = self._new_map_backed(light_id, frames[0].timestamp)
                self._tracks[light_id] = track
            track.consecutive_hits += 1
            track.missed_frames = 0
            if not track.reported and track.consecutive_hits >= self.config.n_birth_map:
                track.reported = True
            fuse_frame_observations(
                track, hits[light_id], self._hmms[track.tl_type], self.flashing_cfg
            )

        for light_id in sorted(set(self._tracks) - set(hits)):
            track = self._tracks[light_id]
            track.consecutive_hits = 0
            if not track.reported:
                # A broken pre-birth candidacy starts over from scratch.
                del self._tracks[light_id]
                continue
            track.missed_frames += 1
            if track.missed_frames > self.config.n_death:
                # Belief is discarded with the track; stored positions
                # (map or spawned index entries) survive.
                del self._tracks[light_id]

        for fr in frames:
            self._update_provisional(fr)

        return self.reported_tracks

    # ------------------------------------------------------------- internals

    def _new_map_backed(self, light_id: str, timestamp: float) -> Track:
        light = self._index.get(light_id)
        source = (
            DETECTION_SOURCE if light_id.startswith(SPAWNED_ID_PREFIX) else MAP_SOURCE
        )
        return Track(
            track_id=next(self._ids),
            source=source,
            light_id=light_id,
            position=light.position.copy(),
            tl_type=light.tl_type,
            history=deque(maxlen=self.config.history_len),
            belief=self._hmms[light.tl_type].initial_belief(timestamp),
        )

    def _update_provisional(self, frame: AssociatedFrame) -> None:
        candidates = self._provisional.get(frame.camera_id, [])
        dets = list(frame.unmatched)
        costs = build_cost_matrix(
            [(c.box, c.tl_type) for c in candidates], dets, self.gate_px
        )
        assignment = solve_assignment(costs)
        matched_dets = {j for _, j in assignment.pairs}

        survivors: list[_Provisional] = []
        for i, j in assignment.pairs:
            cand = candidates[i]
            cand.hits += 1
            cand.detection = dets[j]
            survivors.append(cand)
        for j, det in enumerate(dets):
            if j not in matched_dets:
                survivors.append(
                    _Provisional(detection=det, tl_type=det.detected_class.tl_type)
                )

        remaining: list[_Provisional] = []
        for cand in survivors:
            if cand.hits >= self.config.n_birth_2d:
                self._spawn_track(cand, frame)
            else:
                remaining.append(cand)
        self._provisional[frame.camera_id] = remaining

    def _spawn_track(self, cand: _Provisional, frame: AssociatedFrame) -> None:
        tl_type = cand.tl_type
        position = back_project(
            cand.detection,
            frame.intrinsics,
            frame.cam_from_utm,
            self._type_heights[tl_type],
        )
        light_id = f"{SPAWNED_ID_PREFIX}{next(self._spawned)}"
        cam_pos = frame.cam_from_utm.invert().translation
        to_camera = cam_pos - position
        heading = float(np.degrees(np.arctan2(to_camera[1], to_camera[0])))
        self._index.insert(
            MapTrafficLight(
                light_id=light_id,
                position=position,
                heading_deg=heading,
                dims=np.array(self._type_dims[tl_type]),
                tl_type=tl_type,
            )
        )
        track = Track(
            track_id=next(self._ids),
            source=DETECTION_SOURCE,
            light_id=light_id,
            position=position,
            tl_type=tl_type,
            history=deque(maxlen=self.config.history_len),
            belief=self._hmms[tl_type].initial_belief(frame.timestamp),
            consecutive_hits=cand.hits,
            reported=True,
        )
        self._tracks[light_id] = track
        fuse_frame_observations(
            track,
            [(frame.camera_id, cand.detection)],
            self._hmms[tl_type],
            self.flashing_cfg,
        )
        logger.info(
            "spawned track %d (%s) at %s from camera %s",
            track.track_id,
            tl_type.value,
            np.round(position, 2).tolist(),
            frame.camera_id,
        )


def track_report_dict(track: Track) -> dict:
    """Report-stream entry for one track."""
    return {
        "track_id": track.track_id,
        "light_id": track.light_id,
        "x": float(track.position[0]),
        "y": float(track.position[1]),
        "z": float(track.position[2]),
        "tl_type": track.tl_type.value,
        "state": track.state.value,
        "flashing": track.flashing,
        "belief": [float(p) for p in track.belief.probs],
    }
