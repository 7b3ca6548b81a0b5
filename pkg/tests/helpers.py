"""Shared builders for test scenarios."""

from __future__ import annotations

import numpy as np

from tltrack.detection import TlType, one_hot_confidence
from tltrack.detection import Detection2D
from tltrack.geometry import (
    CameraIntrinsics,
    CameraModel,
    PixelBox,
    RigidTransform,
    TimedPose,
)

# Rotation mapping the vehicle INS frame (x forward, y left, z up) into the
# camera frame (z forward, x right, y down). Derived from the matrix
# [[0,-1,0],[0,0,-1],[1,0,0]].
FORWARD_CAM_QUAT = np.array([0.5, 0.5, -0.5, 0.5])


def make_intrinsics(fx=1000.0, fy=1000.0, cx=960.0, cy=600.0, width=1920, height=1200):
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def forward_camera(
    camera_id="cam",
    position_ins=(0.0, 0.0, 0.0),
    max_range=64.0,
    hfov=47.3,
    intrinsics=None,
) -> CameraModel:
    """Forward-facing camera mounted at ``position_ins`` on the vehicle."""
    rot = np.array(
        [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]
    )
    translation = -rot @ np.asarray(position_ins, dtype=float)
    return CameraModel(
        camera_id=camera_id,
        intrinsics=intrinsics or make_intrinsics(),
        extrinsic=RigidTransform("ins", camera_id, FORWARD_CAM_QUAT, translation),
        max_range=max_range,
        horizontal_fov=hfov,
    )


def identity_pose(t=0.0, translation=(0.0, 0.0, 0.0)) -> TimedPose:
    return TimedPose(
        timestamp=t,
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        translation=np.asarray(translation, dtype=float),
    )


def make_detection(
    camera_id="cam",
    t=0.0,
    box=(960.0, 600.0, 40.0, 20.0),
    cls=None,
    score=0.9,
) -> Detection2D:
    from tltrack.detection import TlClass

    cls = cls or TlClass.THREE_RED
    return Detection2D(
        camera_id=camera_id,
        timestamp=t,
        box=PixelBox(c_x=box[0], c_y=box[1], h=box[2], w=box[3]),
        confidence=one_hot_confidence(cls),
        score=score,
    )
