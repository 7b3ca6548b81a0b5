"""Gated association of projected map lights with 2D detections.

Costs pair each projected light box with each detected box via the L2 norm
over the (centre_x, centre_y, height, width) difference. A pair is marked
infeasible (infinite cost) when the distance exceeds the gate or the
detection's class does not belong to the light type's valid states. The
optimal one-to-one pairing maximizes the number of feasible matches and,
among those, minimizes total cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detection import Detection2D, TlType
from .geometry import CameraIntrinsics, PixelBox, RigidTransform

DEFAULT_GATE_PX = 100.0


class DegenerateBoxError(ValueError):
    """A detected box with zero height cannot be back-projected."""


@dataclass(frozen=True)
class Assignment:
    """One-to-one pairing of row (light) and column (detection) indices."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def __post_init__(self):
        rows = [i for i, _ in self.pairs]
        cols = [j for _, j in self.pairs]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ValueError("assignment repeats a row or column")

    def column_for_row(self, i: int) -> int | None:
        for r, c in self.pairs:
            if r == i:
                return c
        return None


def build_cost_matrix(
    projected: Sequence[tuple[PixelBox, TlType]],
    detections: Sequence[Detection2D],
    gate: float = DEFAULT_GATE_PX,
) -> np.ndarray:
    """M x N cost matrix of projected lights against detections.

    Entries are the 4-vector L2 distance, or ``inf`` when gated out or when
    the detection class is incompatible with the light's housing type.
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    M, N = len(projected), len(detections)
    if M == 0 or N == 0:
        return np.full((M, N), np.inf)
    boxes_m = np.array([box.as_vector() for box, _ in projected])
    boxes_d = np.array([d.box.as_vector() for d in detections])
    diff = boxes_m[:, None, :] - boxes_d[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    # A detection is type-compatible when its argmax class belongs to the
    # light's housing type (the state subsets partition the classes).
    types = list(TlType)
    row_types = np.array([types.index(t) for _, t in projected])
    col_types = np.array([types.index(d.detected_class.tl_type) for d in detections])
    feasible = (dist <= gate) & (row_types[:, None] == col_types[None, :])
    return np.where(feasible, dist, np.inf)


def solve_assignment(costs: np.ndarray) -> Assignment:
    """Optimal gated assignment via the Hungarian algorithm.

    Infinite entries are never assigned; rows and columns with no feasible
    entry stay unassigned. Among pairings that avoid infinite entries, the
    result has maximum cardinality and, within that, minimum total cost.
    Costs must be non-negative.

    Rectangular and partially infeasible matrices are handled by padding to
    a square matrix with a finite-but-dominant sentinel and stripping the
    padded pairs from the result.
    """
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        return Assignment(pairs=(), total_cost=0.0)
    M, N = costs.shape
    feasible = np.isfinite(costs)
    if not feasible.any():
        return Assignment(pairs=(), total_cost=0.0)
    big = float(costs[feasible].sum()) + 1.0
    size = max(M, N)
    padded = np.full((size, size), big)
    padded[:M, :N] = np.where(feasible, costs, big)
    rows, cols = linear_sum_assignment(padded)
    pairs = tuple(
        sorted(
            (int(i), int(j))
            for i, j in zip(rows, cols)
            if i < M and j < N and feasible[i, j]
        )
    )
    total = float(sum(costs[i, j] for i, j in pairs))
    return Assignment(pairs=pairs, total_cost=total)


def back_project(
    d: Detection2D,
    K: CameraIntrinsics,
    T_cam_utm: RigidTransform,
    type_height_m: float,
) -> np.ndarray:
    """UTM position of a detection from its box height and a housing height.

    Depth follows from similar triangles (``z = fy * H / h_px``); the box
    centre ray is then scaled to that depth and mapped back to UTM.
    """
    if type_height_m <= 0:
        raise ValueError("type_height_m must be positive")
    if d.box.h <= 0:
        raise DegenerateBoxError("cannot back-project a box with zero height")
    z = K.fy * type_height_m / d.box.h
    p_cam = np.array(
        [(d.box.c_x - K.cx) / K.fx * z, (d.box.c_y - K.cy) / K.fy * z, z]
    )
    return T_cam_utm.invert().apply(p_cam)
