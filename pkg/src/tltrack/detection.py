"""Traffic light class taxonomy, detection records, and confusion models.

The taxonomy covers 13 light states across three housing types (three-bulb
circular, four-section arrow, five-bulb doghouse) plus a background class.
Class labels follow the ``<type-prefix>-<state>`` naming used by the
detector; the fixed label order below also defines the layout of the
13-entry confidence vectors carried by detections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import PixelBox


class TlType(str, Enum):
    THREE_BULB = "three_bulb"
    FOUR_ARROW = "four_arrow"
    FIVE_DOGHOUSE = "five_doghouse"

    @property
    def states(self) -> tuple["TlClass", ...]:
        return STATE_ORDER[self]

    @property
    def state_index(self) -> dict["TlClass", int]:
        return {c: i for i, c in enumerate(STATE_ORDER[self])}


class TlClass(str, Enum):
    THREE_GREEN = "3-green"
    THREE_RED = "3-red"
    THREE_YELLOW = "3-yellow"
    FOUR_GLEFT = "4-gleft"
    FOUR_OFF = "4-off"
    FOUR_RLEFT = "4-rleft"
    FOUR_YLEFT1 = "4-yleft1"
    FOUR_YLEFT2 = "4-yleft2"
    FIVE_GREEN = "5dh-green"
    FIVE_RED = "5dh-red"
    FIVE_RED_GLEFT = "5dh-red-gleft"
    FIVE_RED_YLEFT = "5dh-red-yleft"
    FIVE_YELLOW = "5dh-yellow"
    BACKGROUND = "background"

    @property
    def tl_type(self) -> TlType:
        return class_to_type(self)

    @property
    def is_on(self) -> bool:
        """Whether the class shows an illuminated bulb (everything but 4-off)."""
        if self is TlClass.BACKGROUND:
            raise ValueError("background has no on/off designation")
        return self is not TlClass.FOUR_OFF


# Layout of detector confidence vectors: the 13 real classes, in label order.
CLASS_ORDER: tuple[TlClass, ...] = (
    TlClass.THREE_GREEN,
    TlClass.THREE_RED,
    TlClass.THREE_YELLOW,
    TlClass.FOUR_GLEFT,
    TlClass.FOUR_OFF,
    TlClass.FOUR_RLEFT,
    TlClass.FOUR_YLEFT1,
    TlClass.FOUR_YLEFT2,
    TlClass.FIVE_GREEN,
    TlClass.FIVE_RED,
    TlClass.FIVE_RED_GLEFT,
    TlClass.FIVE_RED_YLEFT,
    TlClass.FIVE_YELLOW,
)
CLASS_INDEX: dict[TlClass, int] = {c: i for i, c in enumerate(CLASS_ORDER)}

# Per-type state order. Within a type, red-bearing states precede
# yellow-bearing states precede green states; this order breaks exact
# belief ties deterministically and indexes HMM matrices.
STATE_ORDER: dict[TlType, tuple[TlClass, ...]] = {
    TlType.THREE_BULB: (
        TlClass.THREE_RED,
        TlClass.THREE_YELLOW,
        TlClass.THREE_GREEN,
    ),
    TlType.FOUR_ARROW: (
        TlClass.FOUR_RLEFT,
        TlClass.FOUR_YLEFT1,
        TlClass.FOUR_YLEFT2,
        TlClass.FOUR_GLEFT,
        TlClass.FOUR_OFF,
    ),
    TlType.FIVE_DOGHOUSE: (
        TlClass.FIVE_RED,
        TlClass.FIVE_RED_YLEFT,
        TlClass.FIVE_RED_GLEFT,
        TlClass.FIVE_YELLOW,
        TlClass.FIVE_GREEN,
    ),
}

# Regulated signal sequences: legal next states, self-transitions implied.
# Encoded as exact zeros elsewhere in default transition matrices, and used
# by the simulator to validate phase schedules.
LEGAL_SUCCESSORS: dict[TlType, dict[TlClass, tuple[TlClass, ...]]] = {
    TlType.THREE_BULB: {
        TlClass.THREE_RED: (TlClass.THREE_GREEN,),
        TlClass.THREE_GREEN: (TlClass.THREE_YELLOW,),
        TlClass.THREE_YELLOW: (TlClass.THREE_RED,),
    },
    TlType.FOUR_ARROW: {
        TlClass.FOUR_RLEFT: (TlClass.FOUR_GLEFT,),
        TlClass.FOUR_GLEFT: (TlClass.FOUR_YLEFT1,),
        TlClass.FOUR_YLEFT1: (TlClass.FOUR_YLEFT2, TlClass.FOUR_OFF),
        TlClass.FOUR_YLEFT2: (TlClass.FOUR_OFF, TlClass.FOUR_RLEFT),
        TlClass.FOUR_OFF: (TlClass.FOUR_YLEFT2, TlClass.FOUR_RLEFT),
    },
    TlType.FIVE_DOGHOUSE: {
        TlClass.FIVE_RED: (TlClass.FIVE_RED_GLEFT, TlClass.FIVE_GREEN),
        TlClass.FIVE_RED_GLEFT: (TlClass.FIVE_RED_YLEFT,),
        TlClass.FIVE_RED_YLEFT: (TlClass.FIVE_RED,),
        TlClass.FIVE_GREEN: (TlClass.FIVE_YELLOW,),
        TlClass.FIVE_YELLOW: (TlClass.FIVE_RED,),
    },
}

# Housing heights drive monocular depth back-projection. These are shipped
# defaults; deployments override them through pipeline/scenario config.
DEFAULT_TYPE_HEIGHTS_M: dict[TlType, float] = {
    TlType.THREE_BULB: 0.76,
    TlType.FOUR_ARROW: 1.07,
    TlType.FIVE_DOGHOUSE: 0.76,
}

# Full housing dims (width, height, depth) used when synthesizing a map
# entry for a light first seen by the detector.
DEFAULT_TYPE_DIMS_M: dict[TlType, tuple[float, float, float]] = {
    TlType.THREE_BULB: (0.25, 0.76, 0.15),
    TlType.FOUR_ARROW: (0.30, 1.07, 0.15),
    TlType.FIVE_DOGHOUSE: (0.50, 0.76, 0.15),
}

_PREFIX_TO_TYPE = {
    "3-": TlType.THREE_BULB,
    "4-": TlType.FOUR_ARROW,
    "5dh-": TlType.FIVE_DOGHOUSE,
}


def class_to_type(c: TlClass) -> TlType:
    """Housing type for a light class; background carries no type."""
    if c is TlClass.BACKGROUND:
        raise ValueError("background class has no housing type")
    for prefix, tl_type in _PREFIX_TO_TYPE.items():
        if c.value.startswith(prefix):
            return tl_type
    raise ValueError(f"unmapped class {c}")


class DegenerateColumnError(ValueError):
    """A confusion-count column has zero total and cannot be normalized."""


@dataclass(frozen=True)
class ConfusionModel:
    """Column-stochastic P(true state | observed state) for one housing type.

    ``matrix[j, k]`` is the probability that the true state is the type's
    j-th state given the detector reported its k-th state; each column sums
    to one. Indices follow ``STATE_ORDER[tl_type]``.
    """

    tl_type: TlType
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        n = len(self.tl_type.states)
        if m.shape != (n, n):
            raise ValueError(f"confusion matrix must be {n}x{n} for {self.tl_type}")
        if np.any(m < 0):
            raise ValueError("confusion entries must be non-negative")
        if np.any(np.abs(m.sum(axis=0) - 1.0) > 1e-9):
            raise ValueError("confusion columns must sum to 1")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, tl_type: TlType) -> "ConfusionModel":
        return cls(tl_type, np.eye(len(tl_type.states)))


def confusion_from_counts(tl_type: TlType, counts) -> ConfusionModel:
    """Column-normalize a (true x observed) count matrix into a ConfusionModel.

    Raises :class:`DegenerateColumnError` when any observed-state column has
    no counts at all.
    """
    counts = np.asarray(counts, dtype=float)
    n = len(tl_type.states)
    if counts.shape != (n, n):
        raise ValueError(f"count matrix must be {n}x{n} for {tl_type}")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    totals = counts.sum(axis=0)
    zero = np.nonzero(totals == 0)[0]
    if zero.size:
        raise DegenerateColumnError(
            f"observed column(s) {zero.tolist()} of {tl_type.value} have zero counts"
        )
    return ConfusionModel(tl_type, counts / totals)


@dataclass(frozen=True)
class Detection2D:
    """One 2D detector output: box plus the full class-confidence vector."""

    camera_id: str
    timestamp: float
    box: PixelBox
    confidence: np.ndarray  # length-13, CLASS_ORDER layout, sums to 1
    score: float

    def __post_init__(self):
        conf = np.asarray(self.confidence, dtype=float)
        if conf.shape != (len(CLASS_ORDER),):
            raise ValueError(f"confidence must have {len(CLASS_ORDER)} entries")
        if np.any(conf < 0):
            raise ValueError("confidence entries must be non-negative")
        if abs(float(conf.sum()) - 1.0) > 1e-6:
            raise ValueError("confidence must sum to 1")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("score must lie in [0, 1]")
        object.__setattr__(self, "confidence", conf)

    @property
    def detected_class(self) -> TlClass:
        return CLASS_ORDER[int(np.argmax(self.confidence))]


def one_hot_confidence(c: TlClass) -> np.ndarray:
    conf = np.zeros(len(CLASS_ORDER))
    conf[CLASS_INDEX[c]] = 1.0
    return conf


# ----------------------------------------------------------------------- I/O


def detection_to_dict(d: Detection2D) -> dict:
    return {
        "camera_id": d.camera_id,
        "t": d.timestamp,
        "cx": d.box.c_x,
        "cy": d.box.c_y,
        "h": d.box.h,
        "w": d.box.w,
        "conf": list(map(float, d.confidence)),
        "score": d.score,
    }


def detection_from_dict(rec: dict) -> Detection2D:
    return Detection2D(
        camera_id=rec["camera_id"],
        timestamp=float(rec["t"]),
        box=PixelBox(
            c_x=float(rec["cx"]),
            c_y=float(rec["cy"]),
            h=float(rec["h"]),
            w=float(rec["w"]),
        ),
        confidence=np.asarray(rec["conf"], dtype=float),
        score=float(rec["score"]),
    )


def read_detections(path) -> list[Detection2D]:
    """Read a detection stream (JSONL, one detection per line).

    Timestamps must be monotonically non-decreasing within each camera.
    """
    path = Path(path)
    out: list[Detection2D] = []
    last_t: dict[str, float] = {}
    with open(path) as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                det = detection_from_dict(json.loads(line))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from exc
            prev = last_t.get(det.camera_id)
            if prev is not None and det.timestamp < prev:
                raise ValueError(
                    f"{path}:{lineno}: timestamps regress for camera "
                    f"{det.camera_id} ({det.timestamp} < {prev})"
                )
            last_t[det.camera_id] = det.timestamp
            out.append(det)
    return out


def write_detections(path, detections: Sequence[Detection2D]) -> None:
    with open(path, "w") as fp:
        for d in detections:
            fp.write(json.dumps(detection_to_dict(d)) + "\n")
