"""HD-map traffic light model, spatial index, and per-camera visibility.

The map stores surveyed light housings in a UTM frame. Visibility queries
run in two stages: a coarse radius query against a KD-tree over light
positions, then an exact per-camera test against each camera's range and
horizontal field of view. The index supports single-writer insertion so
the tracker can persist positions of lights discovered by the detector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .detection import TlType
from .geometry import CameraModel, TimedPose, camera_from_utm


class DuplicateLightIdError(ValueError):
    """Two map lights share the same light_id."""


class MapParseError(ValueError):
    """The map file failed to parse or validate."""


@dataclass(frozen=True)
class MapTrafficLight:
    """One surveyed light housing: position, facing, dims, and housing type."""

    light_id: str
    position: np.ndarray  # UTM metres (x, y, z)
    heading_deg: float  # facing direction, degrees from UTM +x
    dims: np.ndarray  # metres (width, height, depth)
    tl_type: TlType

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        dims = np.asarray(self.dims, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise ValueError(f"light {self.light_id}: dims must be 3 positive values")
        object.__setattr__(self, "dims", dims)


@dataclass
class HdMap:
    utm_zone: str
    lights: list[MapTrafficLight] = field(default_factory=list)

    def __post_init__(self):
        ids = [l.light_id for l in self.lights]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise DuplicateLightIdError(f"duplicate light_id(s): {sorted(dupes)}")


class SpatialIndex:
    """Range-queryable index over light positions, keyed by light_id.

    Reads are lock-free against an immutable KD-tree snapshot; insertions
    (rare: one per detector-discovered light) rebuild the snapshot, so a
    single writer with concurrent readers always observes consistent state.
    """

    def __init__(self, lights: Sequence[MapTrafficLight] = ()):
        self._lights: dict[str, MapTrafficLight] = {}
        for light in lights:
            if light.light_id in self._lights:
                raise DuplicateLightIdError(f"duplicate light_id {light.light_id}")
            self._lights[light.light_id] = light
        self._rebuild()

    def _rebuild(self) -> None:
        self._order = sorted(self._lights)
        if self._order:
            pts = np.array([self._lights[i].position for i in self._order])
            self._tree = cKDTree(pts)
        else:
            self._tree = None

    def __len__(self) -> int:
        return len(self._lights)

    def __contains__(self, light_id: str) -> bool:
        return light_id in self._lights

    def get(self, light_id: str) -> MapTrafficLight:
        return self._lights[light_id]

    def insert(self, light: MapTrafficLight) -> None:
        if light.light_id in self._lights:
            raise DuplicateLightIdError(f"duplicate light_id {light.light_id}")
        self._lights[light.light_id] = light
        self._rebuild()

    def query_radius(self, centre, radius: float) -> list[MapTrafficLight]:
        """All lights within ``radius`` metres of ``centre``, id-sorted."""
        if self._tree is None:
            return []
        idx = self._tree.query_ball_point(np.asarray(centre, dtype=float), radius)
        return [self._lights[self._order[i]] for i in sorted(idx)]


def build_index(hd_map: HdMap) -> SpatialIndex:
    """Index all map lights for sublinear range queries."""
    return SpatialIndex(hd_map.lights)


def query_visible(
    index: SpatialIndex,
    vehicle_pose: TimedPose,
    cameras: Sequence[CameraModel],
    cam_transforms: dict | None = None,
) -> dict[str, list[MapTrafficLight]]:
    """Lights potentially visible per camera at the given vehicle pose.

    Stage 1 gathers the candidate set with one radius query around the
    vehicle (largest camera range, inflated by the camera lever arms so no
    in-range light can be missed). Stage 2 keeps, per camera, the lights
    whose direction lies within half the horizontal FOV of the optical axis
    and whose distance does not exceed that camera's range.

    ``cam_transforms`` may carry precomputed UTM-to-camera transforms keyed
    by camera id (one less pose inversion per camera on hot paths).
    """
    if not cameras:
        return {}
    lever = max(float(np.linalg.norm(c.position_in_ins())) for c in cameras)
    radius = max(c.max_range for c in cameras) + lever
    candidates = index.query_radius(vehicle_pose.translation, radius)
    out: dict[str, list[MapTrafficLight]] = {}
    for cam in sorted(cameras, key=lambda c: c.camera_id):
        if cam_transforms and cam.camera_id in cam_transforms:
            t_cam_utm = cam_transforms[cam.camera_id]
        else:
            t_cam_utm = camera_from_utm(cam.extrinsic, vehicle_pose)
        kept = []
        if candidates:
            pts = np.array([l.position for l in candidates])
            p_cam = t_cam_utm.apply(pts)
            dist = np.linalg.norm(p_cam, axis=1)
            # Horizontal angle off the optical axis (z forward, x right).
            angle = np.degrees(np.arctan2(np.abs(p_cam[:, 0]), p_cam[:, 2]))
            ok = (dist <= cam.max_range) & (angle <= cam.horizontal_fov / 2.0)
            kept = [l for l, keep in zip(candidates, ok) if keep]
        out[cam.camera_id] = kept
    return out


# ----------------------------------------------------------------------- I/O


def light_to_dict(light: MapTrafficLight) -> dict:
    return {
        "light_id": light.light_id,
        "x": float(light.position[0]),
        "y": float(light.position[1]),
        "z": float(light.position[2]),
        "heading_deg": light.heading_deg,
        "width_m": float(light.dims[0]),
        "height_m": float(light.dims[1]),
        "depth_m": float(light.dims[2]),
        "tl_type": light.tl_type.value,
    }


def light_from_dict(rec: dict) -> MapTrafficLight:
    return MapTrafficLight(
        light_id=str(rec["light_id"]),
        position=np.array([rec["x"], rec["y"], rec["z"]], dtype=float),
        heading_deg=float(rec["heading_deg"]),
        dims=np.array([rec["width_m"], rec["height_m"], rec["depth_m"]], dtype=float),
        tl_type=TlType(rec["tl_type"]),
    )


def map_to_dict(hd_map: HdMap) -> dict:
    return {
        "utm_zone": hd_map.utm_zone,
        "lights": [light_to_dict(l) for l in hd_map.lights],
    }


def map_from_dict(raw: dict) -> HdMap:
    try:
        lights = []
        for i, rec in enumerate(raw["lights"]):
            try:
                lights.append(light_from_dict(rec))
            except (KeyError, TypeError, ValueError) as exc:
                raise MapParseError(f"lights[{i}]: {exc}") from exc
        return HdMap(utm_zone=str(raw["utm_zone"]), lights=lights)
    except KeyError as exc:
        raise MapParseError(f"missing field {exc}") from exc


def load_map(path) -> HdMap:
    """Load and validate a JSON map file; duplicate light ids are rejected."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MapParseError(f"{path}: {exc}") from exc
    try:
        return map_from_dict(raw)
    except DuplicateLightIdError:
        raise
    except MapParseError as exc:
        raise MapParseError(f"{path}: {exc}") from exc


def save_map(path, hd_map: HdMap) -> None:
    Path(path).write_text(json.dumps(map_to_dict(hd_map), indent=2) + "\n")
