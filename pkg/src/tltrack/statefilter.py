"""Per-type HMM forward filtering of light states and flashing detection.

Each housing type gets its own hidden Markov model over the type's valid
states. The transition matrix encodes the regulated signal sequence
(forbidden transitions are exact zeros), evidence comes from flipping the
detector confidence vector through a column-stochastic confusion model, and
the belief is the filtered posterior maintained by the forward algorithm.

Flashing lights are detected separately with duty-cycle threshold logic on
the raw (unfiltered) detected classes of the recent observation window; a
detected flashing state overrides the filtered argmax in reports.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .detection import (
    CLASS_INDEX,
    LEGAL_SUCCESSORS,
    ConfusionModel,
    TlClass,
    TlType,
    confusion_from_counts,
)

DEFAULT_SELF_TRANSITION = 0.98


class NoEvidenceError(ValueError):
    """Confidence vector carries no mass on the type's valid states."""


class ImpossibleObservationError(ValueError):
    """Evidence is incompatible with every state the belief allows."""


@dataclass(frozen=True)
class Hmm:
    """HMM parameters for one housing type: transition, confusion, prior."""

    tl_type: TlType
    transition: np.ndarray  # row-stochastic, states x states
    confusion: ConfusionModel
    prior: np.ndarray

    def __post_init__(self):
        n = len(self.tl_type.states)
        a = np.asarray(self.transition, dtype=float)
        p = np.asarray(self.prior, dtype=float)
        if a.shape != (n, n):
            raise ValueError(f"transition matrix must be {n}x{n}")
        if np.any(a < 0) or np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("transition rows must be non-negative and sum to 1")
        if p.shape != (n,) or np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("prior must be a distribution over the type's states")
        if self.confusion.tl_type is not self.tl_type:
            raise ValueError("confusion model belongs to a different type")
        object.__setattr__(self, "transition", a)
        object.__setattr__(self, "prior", p)

    def initial_belief(self, timestamp: float = 0.0) -> "BeliefState":
        return BeliefState(self.tl_type, self.prior.copy(), timestamp)


@dataclass
class BeliefState:
    """Filtered posterior over a type's valid states."""

    tl_type: TlType
    probs: np.ndarray
    last_update: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        n = len(self.tl_type.states)
        if p.shape != (n,) or np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("belief must be a distribution over the type's states")
        self.probs = p


@dataclass(frozen=True)
class FlashingConfig:
    """Duty-cycle window for flashing detection.

    US regulation bounds the illuminated fraction of a flashing period to
    [1/2, 2/3]; both ends are treated as inclusive.
    """

    window: int = 10
    duty_min: float = 0.5
    duty_max: float = 2.0 / 3.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1 observation")
        if not (0.0 < self.duty_min < self.duty_max < 1.0):
            raise ValueError("need 0 < duty_min < duty_max < 1")


_STATE_INDICES = {
    tl_type: np.array([CLASS_INDEX[c] for c in tl_type.states]) for tl_type in TlType
}


def restrict_confidence(tl_type: TlType, confidence: np.ndarray) -> np.ndarray:
    """Project a 13-class confidence vector onto a type's states, renormalized.

    Raises :class:`NoEvidenceError` when no mass lands on the valid states
    (the observation should then be skipped).
    """
    restricted = np.asarray(confidence, dtype=float)[_STATE_INDICES[tl_type]]
    total = float(restricted.sum())
    if total <= 0.0:
        raise NoEvidenceError(f"no confidence mass on {tl_type.value} states")
    return restricted / total


def build_evidence(confusion: ConfusionModel, x: np.ndarray) -> np.ndarray:
    """Local evidence vector from a restricted confidence vector.

    ``x`` must already be restricted to the type's valid states and
    renormalized (see :func:`restrict_confidence`). The product with the
    column-stochastic confusion matrix flips the detector's class posterior
    into a true-state likelihood up to a constant; normalization is deferred
    to the belief update, keeping this map exactly linear in ``x``.
    """
    x = np.asarray(x, dtype=float)
    n = confusion.matrix.shape[0]
    if x.shape != (n,):
        raise ValueError(f"restricted confidence must have {n} entries")
    return confusion.matrix @ x


def forward_update(
    belief: BeliefState,
    transition: np.ndarray,
    evidence: np.ndarray,
    timestamp: float | None = None,
) -> BeliefState:
    """One forward-algorithm step: predict through the transition model,
    reweight by the evidence, renormalize.

    Raises :class:`ImpossibleObservationError` when the posterior mass
    vanishes; callers typically reset the belief to the prior and log the
    event.
    """
    transition = np.asarray(transition, dtype=float)
    evidence = np.asarray(evidence, dtype=float)
    predicted = transition.T @ belief.probs
    posterior = evidence * predicted
    total = float(posterior.sum())
    if total <= 0.0 or not np.isfinite(total):
        raise ImpossibleObservationError(
            f"evidence {evidence.tolist()} has zero overlap with the "
            f"predicted belief for {belief.tl_type.value}"
        )
    return BeliefState(
        tl_type=belief.tl_type,
        probs=posterior / total,
        last_update=belief.last_update if timestamp is None else timestamp,
    )


def map_state(belief: BeliefState) -> TlClass:
    """Most probable state; exact ties go to the earlier state in the
    type's canonical order (red before yellow before green)."""
    return belief.tl_type.states[int(np.argmax(belief.probs))]


def detect_flashing(history: Sequence, cfg: FlashingConfig) -> TlClass | None:
    """Flashing class from duty-cycle logic over recent raw observations.

    ``history`` holds objects exposing ``detected_class`` (newest last);
    the most recent ``cfg.window`` entries are examined. A light is flashing
    when the fraction of illuminated ("on") classes lies within the duty
    band and the on-observations agree on a single dominant class (strict
    majority). Returns that class, or None (including when the history is
    shorter than the window).
    """
    if len(history) < cfg.window:
        return None
    recent = list(history)[-cfg.window :]
    on_classes = [o.detected_class for o in recent if o.detected_class.is_on]
    on_fraction = len(on_classes) / cfg.window
    if not (cfg.duty_min <= on_fraction <= cfg.duty_max):
        return None
    counts = Counter(on_classes)
    dominant, dominant_count = counts.most_common(1)[0]
    if dominant_count * 2 <= len(on_classes):
        return None
    return dominant


# ------------------------------------------------------------------ defaults


def default_transition_matrix(
    tl_type: TlType, self_transition: float = DEFAULT_SELF_TRANSITION
) -> np.ndarray:
    """Regulated-sequence transition matrix with tunable inertia.

    Each state keeps ``self_transition`` mass and splits the remainder
    uniformly over its legal successors; forbidden transitions are exact
    zeros.
    """
    if not (0.0 < self_transition < 1.0):
        raise ValueError("self_transition must lie in (0, 1)")
    states = tl_type.states
    index = tl_type.state_index
    n = len(states)
    a = np.zeros((n, n))
    for i, state in enumerate(states):
        successors = LEGAL_SUCCESSORS[tl_type][state]
        a[i, i] = self_transition
        share = (1.0 - self_transition) / len(successors)
        for nxt in successors:
            a[i, index[nxt]] = share
    return a


def default_hmm(
    tl_type: TlType,
    confusion: ConfusionModel | None = None,
    self_transition: float = DEFAULT_SELF_TRANSITION,
) -> Hmm:
    """HMM with regulated-sequence transitions, uniform prior, and the given
    (or identity) confusion model."""
    n = len(tl_type.states)
    return Hmm(
        tl_type=tl_type,
        transition=default_transition_matrix(tl_type, self_transition),
        confusion=confusion or ConfusionModel.identity(tl_type),
        prior=np.full(n, 1.0 / n),
    )


# ----------------------------------------------------------------------- I/O


def hmm_from_dict(raw: dict) -> Hmm:
    """Build an Hmm from a config mapping.

    Expected fields: tl_type, states (must match the canonical order),
    A (row-major floats), pi, confusion_counts (integer matrix).
    """
    tl_type = TlType(raw["tl_type"])
    states = [TlClass(s) for s in raw["states"]]
    if tuple(states) != tl_type.states:
        raise ValueError(
            f"states for {tl_type.value} must be listed in canonical order "
            f"{[c.value for c in tl_type.states]}"
        )
    n = len(states)
    a = np.asarray(raw["A"], dtype=float).reshape(n, n)
    pi = np.asarray(raw["pi"], dtype=float)
    confusion = confusion_from_counts(
        tl_type, np.asarray(raw["confusion_counts"], dtype=float)
    )
    return Hmm(tl_type=tl_type, transition=a, confusion=confusion, prior=pi)


def load_hmm_config(path) -> Hmm:
    """Load one per-type HMM config JSON file."""
    path = Path(path)
    try:
        return hmm_from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: invalid HMM config: {exc}") from exc
