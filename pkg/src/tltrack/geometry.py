"""SE(3) poses, timestamped pose interpolation, and pinhole camera projection.

Conventions used throughout:

* Quaternions are stored ``(w, x, y, z)`` and kept unit-norm.
* ``RigidTransform(frame_from=A, frame_to=B)`` maps points expressed in
  frame ``A`` into frame ``B``: ``x_B = R x_A + t``.
* The vehicle pose is the INS-to-UTM transform; camera extrinsics are
  INS-to-camera. Chaining both yields the time-varying UTM-to-camera
  transform used for map-light projection.
* Camera frames follow the usual computer-vision convention: z forward
  along the optical axis, x right, y down. Pixel origin is top-left.

All functions here are pure and operate on immutable inputs, so they are
safe to call from concurrent workers.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

INS_FRAME = "ins"
UTM_FRAME = "utm"

_QUAT_TOL = 1e-6


class ExtrapolationError(ValueError):
    """Pose query outside the buffered time span."""

    def __init__(self, t: float, span: tuple[float, float]):
        super().__init__(
            f"pose query at t={t} outside buffer span [{span[0]}, {span[1]}]"
        )
        self.t = t
        self.span = span


class FrameChainError(ValueError):
    """Transforms were chained across mismatched frames."""


class BehindCameraError(ValueError):
    """Attempted to project a point with non-positive camera-frame depth."""


# ---------------------------------------------------------------- quaternions


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > _QUAT_TOL:
        raise ValueError(f"quaternion norm {n} is not unit")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) for a 3x3 rotation matrix (Shepperd's method)."""
    rot = np.asarray(rot, dtype=float)
    m00, m01, m02 = rot[0]
    m10, m11, m12 = rot[1]
    m20, m21, m22 = rot[2]
    trace = m00 + m11 + m22
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 >= m11 and m00 >= m22:
        s = math.sqrt(1.0 + m00 - m11 - m22) * 2.0
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 >= m22:
        s = math.sqrt(1.0 + m11 - m00 - m22) * 2.0
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = math.sqrt(1.0 + m22 - m00 - m11) * 2.0
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_from_yaw(yaw_deg: float) -> np.ndarray:
    """Rotation about +z by ``yaw_deg`` degrees."""
    half = math.radians(yaw_deg) / 2.0
    return np.array([math.cos(half), 0.0, 0.0, math.sin(half)])


def quat_slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical linear interpolation along the shorter arc, u in [0, 1]."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        out = q0 + u * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = math.acos(min(dot, 1.0))
    sin_theta = math.sin(theta)
    a = math.sin((1.0 - u) * theta) / sin_theta
    b = math.sin(u * theta) / sin_theta
    out = a * q0 + b * q1
    return out / np.linalg.norm(out)


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rotate one (3,) point or a stack (N,3) of points by quaternion q."""
    return np.asarray(points, dtype=float) @ quat_to_matrix(q).T


# --------------------------------------------------------------------- types


@dataclass(frozen=True)
class TimedPose:
    """A timestamped INS-to-UTM pose sample."""

    timestamp: float
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # metres, UTM frame

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=float)
        )

    def as_transform(self) -> "RigidTransform":
        return RigidTransform(INS_FRAME, UTM_FRAME, self.rotation, self.translation)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid map from ``frame_from`` into ``frame_to``: x_to = R x_from + t."""

    frame_from: str
    frame_to: str
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=float)
        )
        object.__setattr__(self, "_matrix", None)

    @classmethod
    def identity(cls, frame_from: str, frame_to: str) -> "RigidTransform":
        return cls(frame_from, frame_to, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        """Rotation as a 3x3 matrix (computed once per transform)."""
        if self._matrix is None:
            object.__setattr__(self, "_matrix", quat_to_matrix(self.rotation))
        return self._matrix

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix.T + self.translation

    def invert(self) -> "RigidTransform":
        q_inv = quat_conj(self.rotation)
        t_inv = -quat_rotate(q_inv, self.translation)
        return RigidTransform(self.frame_to, self.frame_from, q_inv, t_inv)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Compose so that ``(self @ other)`` applies ``other`` first."""
        if other.frame_to != self.frame_from:
            raise FrameChainError(
                f"cannot chain {other.frame_from}->{other.frame_to} "
                f"into {self.frame_from}->{self.frame_to}"
            )
        q = quat_mul(self.rotation, other.rotation)
        t = quat_rotate(self.rotation, other.translation) + self.translation
        return RigidTransform(other.frame_from, self.frame_to, q, t)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned pixel box given by centre and size."""

    c_x: float
    c_y: float
    h: float
    w: float

    def __post_init__(self):
        if self.h < 0 or self.w < 0:
            raise ValueError("box size must be non-negative")

    def as_vector(self) -> np.ndarray:
        return np.array([self.c_x, self.c_y, self.h, self.w])

    def extent(self) -> tuple[float, float, float, float]:
        """(u_min, u_max, v_min, v_max)."""
        return (
            self.c_x - self.w / 2.0,
            self.c_x + self.w / 2.0,
            self.c_y - self.h / 2.0,
            self.c_y + self.h / 2.0,
        )

    @classmethod
    def from_extent(cls, u_min, u_max, v_min, v_max) -> "PixelBox":
        return cls(
            c_x=(u_min + u_max) / 2.0,
            c_y=(v_min + v_max) / 2.0,
            h=v_max - v_min,
            w=u_max - u_min,
        )


@dataclass(frozen=True)
class CameraModel:
    camera_id: str
    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform  # INS -> camera
    max_range: float  # metres
    horizontal_fov: float  # degrees

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not (0 < self.horizontal_fov < 180):
            raise ValueError("horizontal_fov must lie in (0, 180) degrees")

    def position_in_ins(self) -> np.ndarray:
        """Camera optical centre expressed in the INS frame."""
        return self.extrinsic.invert().translation


# ------------------------------------------------------------- interpolation


class PoseBuffer:
    """Time-ordered pose samples with interpolated lookup.

    Timestamps must be strictly increasing. Lookups inside the span return
    the linear/spherical interpolation of the two bracketing samples;
    lookups at a stored timestamp return that sample verbatim.
    """

    def __init__(self, poses: Sequence[TimedPose]):
        if len(poses) < 2:
            raise ValueError("pose buffer needs at least 2 poses")
        times = [p.timestamp for p in poses]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("pose timestamps must be strictly increasing")
        self._poses = list(poses)
        self._times = times

    @property
    def span(self) -> tuple[float, float]:
        return (self._times[0], self._times[-1])

    def at(self, t: float) -> TimedPose:
        lo, hi = self.span
        if t < lo or t > hi:
            raise ExtrapolationError(t, (lo, hi))
        i = bisect.bisect_left(self._times, t)
        if i < len(self._times) and self._times[i] == t:
            return self._poses[i]
        p0 = self._poses[i - 1]
        p1 = self._poses[i]
        u = (t - p0.timestamp) / (p1.timestamp - p0.timestamp)
        return TimedPose(
            timestamp=t,
            rotation=quat_slerp(p0.rotation, p1.rotation, u),
            translation=(1.0 - u) * p0.translation + u * p1.translation,
        )


def interpolate_pose(buffer: Sequence[TimedPose], t: float) -> TimedPose:
    """Interpolated pose at time ``t`` from an ordered pose buffer.

    Translation is interpolated linearly, rotation spherically between the
    two bracketing samples. Queries outside the buffered span raise
    :class:`ExtrapolationError` (never extrapolated).
    """
    return PoseBuffer(buffer).at(t)


def camera_from_utm(
    extrinsic: RigidTransform, vehicle_pose: TimedPose
) -> RigidTransform:
    """Time-varying UTM-to-camera transform from extrinsics and vehicle pose.

    ``extrinsic`` must map INS to the camera frame; ``vehicle_pose`` maps INS
    to UTM. The result chains the inverted vehicle pose into the extrinsics.
    """
    if extrinsic.frame_from != INS_FRAME:
        raise FrameChainError(
            f"extrinsic must map '{INS_FRAME}' to camera, got "
            f"{extrinsic.frame_from}->{extrinsic.frame_to}"
        )
    return extrinsic @ vehicle_pose.as_transform().invert()


# ---------------------------------------------------------------- projection


def project_point(K: CameraIntrinsics, p_cam: np.ndarray) -> tuple[float, float]:
    """Pinhole projection of a camera-frame point to pixel coordinates.

    Raises :class:`BehindCameraError` for non-positive depth; callers must
    cull such points rather than clamp them.
    """
    x, y, z = np.asarray(p_cam, dtype=float)
    if z <= 0.0:
        raise BehindCameraError(f"point depth z={z} is not in front of the camera")
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy)


# Corner sign pattern in (depth, width, height) half-extents, shared by
# every projection call.
_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)]
)


def _box_corners(
    centres: np.ndarray, dims: np.ndarray, headings_deg: np.ndarray
) -> np.ndarray:
    """All 8 corners of oriented housing boxes, shape (L, 8, 3) in UTM.

    Local axes: height spans z, width spans the cross-facing horizontal
    direction, depth spans the facing direction given by heading.
    """
    L = centres.shape[0]
    signs = _CORNER_SIGNS
    rad = np.radians(headings_deg)
    cos, sin = np.cos(rad), np.sin(rad)
    facing = np.stack([cos, sin, np.zeros(L)], axis=1)  # (L, 3)
    lateral = np.stack([-sin, cos, np.zeros(L)], axis=1)
    up = np.tile(np.array([0.0, 0.0, 1.0]), (L, 1))
    # dims = (width, height, depth); corner offset = d*facing + w*lateral + h*up
    offsets = (
        signs[None, :, 0, None] * dims[:, None, 2, None] * facing[:, None, :]
        + signs[None, :, 1, None] * dims[:, None, 0, None] * lateral[:, None, :]
        + signs[None, :, 2, None] * dims[:, None, 1, None] * up[:, None, :]
    )
    return centres[:, None, :] + offsets


def project_boxes(
    lights: Sequence, T_cam_utm: RigidTransform, K: CameraIntrinsics
) -> list[PixelBox | None]:
    """Project the 3D housing boxes of map lights into the image plane.

    For each light the 8 box corners are transformed into the camera frame
    and projected; the result is the axis-aligned extent of the projected
    corners. A light is culled (``None``) when any corner falls behind the
    camera or the extent lies fully outside the image. Partially visible
    extents are returned unclipped; see :func:`clip_box`.
    """
    if not lights:
        return []
    centres = np.array([l.position for l in lights], dtype=float)
    dims = np.array([l.dims for l in lights], dtype=float)
    headings = np.array([l.heading_deg for l in lights], dtype=float)
    corners = _box_corners(centres, dims, headings)  # (L, 8, 3)
    flat = corners.reshape(-1, 3)
    cam = T_cam_utm.apply(flat).reshape(corners.shape)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[..., 0] / z + K.cx
        v = K.fy * cam[..., 1] / z + K.cy
    in_front = ~np.any(z <= 0.0, axis=1)
    u_min, u_max = u.min(axis=1), u.max(axis=1)
    v_min, v_max = v.min(axis=1), v.max(axis=1)
    on_image = (u_max >= 0) & (u_min <= K.width) & (v_max >= 0) & (v_min <= K.height)
    keep = in_front & on_image
    out: list[PixelBox | None] = []
    for i in range(len(lights)):
        if not keep[i]:
            out.append(None)
            continue
        out.append(
            PixelBox.from_extent(
                float(u_min[i]), float(u_max[i]), float(v_min[i]), float(v_max[i])
            )
        )
    return out


def project_box(light, T_cam_utm: RigidTransform, K: CameraIntrinsics) -> PixelBox | None:
    """Single-light convenience wrapper around :func:`project_boxes`."""
    return project_boxes([light], T_cam_utm, K)[0]


def clip_box(box: PixelBox, K: CameraIntrinsics) -> PixelBox | None:
    """Intersect a pixel box with the image bounds; None if disjoint."""
    u_min, u_max, v_min, v_max = box.extent()
    u_min, u_max = max(u_min, 0.0), min(u_max, float(K.width))
    v_min, v_max = max(v_min, 0.0), min(v_max, float(K.height))
    if u_min >= u_max or v_min >= v_max:
        return None
    return PixelBox.from_extent(u_min, u_max, v_min, v_max)


# ----------------------------------------------------------------------- I/O


def camera_from_dict(raw: dict) -> CameraModel:
    """Build a CameraModel from the calibration-file schema.

    Expected fields: camera_id, fx, fy, cx, cy, width, height,
    extrinsic {quaternion wxyz, translation xyz}, max_range_m, hfov_deg.
    """
    ext = raw["extrinsic"]
    return CameraModel(
        camera_id=raw["camera_id"],
        intrinsics=CameraIntrinsics(
            fx=float(raw["fx"]),
            fy=float(raw["fy"]),
            cx=float(raw["cx"]),
            cy=float(raw["cy"]),
            width=int(raw["width"]),
            height=int(raw["height"]),
        ),
        extrinsic=RigidTransform(
            INS_FRAME,
            raw["camera_id"],
            np.asarray(ext["quaternion"], dtype=float),
            np.asarray(ext["translation"], dtype=float),
        ),
        max_range=float(raw["max_range_m"]),
        horizontal_fov=float(raw["hfov_deg"]),
    )


def load_camera(path) -> CameraModel:
    """Load one per-camera calibration JSON file."""
    path = Path(path)
    try:
        return camera_from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: invalid calibration file: {exc}") from exc


def load_calibration_dir(path) -> list[CameraModel]:
    """Load every ``*.json`` calibration in a directory, sorted by camera id."""
    cameras = [load_camera(p) for p in sorted(Path(path).glob("*.json"))]
    if not cameras:
        raise ValueError(f"no calibration files found under {path}")
    ids = [c.camera_id for c in cameras]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate camera_id among calibrations under {path}")
    return sorted(cameras, key=lambda c: c.camera_id)


def camera_to_dict(camera: CameraModel) -> dict:
    k = camera.intrinsics
    return {
        "camera_id": camera.camera_id,
        "fx": k.fx,
        "fy": k.fy,
        "cx": k.cx,
        "cy": k.cy,
        "width": k.width,
        "height": k.height,
        "extrinsic": {
            "quaternion": list(map(float, camera.extrinsic.rotation)),
            "translation": list(map(float, camera.extrinsic.translation)),
        },
        "max_range_m": camera.max_range,
        "hfov_deg": camera.horizontal_fov,
    }


def read_poses(path) -> list[TimedPose]:
    """Read a pose stream (JSONL, one {t, q, p} object per line)."""
    poses = []
    with open(path) as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                poses.append(
                    TimedPose(
                        timestamp=float(rec["t"]),
                        rotation=np.asarray(rec["q"], dtype=float),
                        translation=np.asarray(rec["p"], dtype=float),
                    )
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad pose record: {exc}") from exc
    return poses


def write_poses(path, poses: Sequence[TimedPose]) -> None:
    with open(path, "w") as fp:
        for p in poses:
            fp.write(pose_to_json(p) + "\n")


def pose_to_json(pose: TimedPose) -> str:
    return json.dumps(
        {
            "t": pose.timestamp,
            "q": list(map(float, pose.rotation)),
            "p": list(map(float, pose.translation)),
        }
    )
