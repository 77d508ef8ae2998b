"""Navigation scorecard: insertion time, perforation events, normalized
path length, average lumen distance, jerk index, and outcome classification.
All metrics are pure functions of an episode log."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .logs import EpisodeLog, MissingTerminalError

PERFORATION_THRESHOLD_MM = 30.0

OUTCOME_BY_TERMINAL = {
    "reached_caecum": "success",
    "returned_to_start": "returned",
    "destabilized": "destabilized",
    "step_limit": "timeout",
}


@dataclass
class Scorecard:
    outcome: str
    toi_s: Optional[float]
    perforation_count: int
    normalized_distance: float
    average_ld: float
    jerk_index_cm_s3: float

    def as_dict(self) -> dict:
        return {"outcome": self.outcome, "toi_s": self.toi_s,
                "perforations": self.perforation_count,
                "normalized_distance": self.normalized_distance,
                "average_ld": self.average_ld,
                "jerk_index_cm_s3": self.jerk_index_cm_s3}


class UndefinedOnFailure(ValueError):
    """Metric defined only for successful insertions."""


def classify_outcome(log: EpisodeLog) -> str:
    if log.terminal is None:
        raise MissingTerminalError("log has no terminal record")
    try:
        return OUTCOME_BY_TERMINAL[log.terminal]
    except KeyError:
        raise ValueError(f"unknown terminal kind {log.terminal!r}") from None


def time_of_insertion(log: EpisodeLog) -> float:
    """Seconds from the start of the first moving step to reaching the caecum."""
    if classify_outcome(log) != "success":
        raise UndefinedOnFailure("time of insertion requires a successful run")
    pos = log.positions()
    moved = np.linalg.norm(np.diff(pos, axis=0), axis=1) > 0.0
    if not moved.any():
        raise UndefinedOnFailure("endoscope never moved")
    first_moving = int(np.argmax(moved)) + 1   # record index of first displacement
    return log.steps[-1].time_s - log.steps[first_moving - 1].time_s


def count_perforations(log: EpisodeLog,
                       threshold_mm: float = PERFORATION_THRESHOLD_MM) -> int:
    """Rising edges of deformation above the threshold; sustained contact
    counts once until it drops back below."""
    count = 0
    above = False
    for s in log.steps:
        now = s.max_deformation_mm > threshold_mm
        if now and not above:
            count += 1
        above = now
    return count


def normalized_distance(log: EpisodeLog, centerline_length_mm: float = None) -> float:
    length = centerline_length_mm or float(log.header["centerline_length_mm"])
    pos = log.positions()
    if len(pos) < 2:
        raise ValueError("need at least two positions")
    travelled = float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())
    return travelled / length


def average_ld(log: EpisodeLog) -> float:
    """Mean normalized lumen distance; undetected steps count as 1.0
    (farthest-point convention)."""
    if not log.steps:
        return 0.0
    vals = [s.ld_norm if s.lumen and s.ld_norm is not None else 1.0
            for s in log.steps]
    return float(np.mean(vals))


def jerk_index(log: EpisodeLog) -> float:
    """Mean magnitude of the third central-difference derivative of tip
    position, cm/s^3; edge samples are trimmed after each differentiation."""
    pos = log.positions()
    if len(pos) < 10:
        raise ValueError("trace too short for a third derivative")
    dt = 1.0 / log.control_rate_hz
    d = pos
    for _ in range(3):
        d = np.gradient(d, dt, axis=0)
    interior = d[3:-3]
    mags = np.linalg.norm(interior, axis=1)
    return float(mags.mean()) / 10.0   # mm -> cm


def compute_scorecard(log: EpisodeLog) -> Scorecard:
    outcome = classify_outcome(log)
    return Scorecard(
        outcome=outcome,
        toi_s=time_of_insertion(log) if outcome == "success" else None,
        perforation_count=count_perforations(log),
        normalized_distance=normalized_distance(log),
        average_ld=average_ld(log),
        jerk_index_cm_s3=jerk_index(log),
    )


def scorecard_table(cards: list, labels: list = None) -> str:
    """Delimited text table (one row per episode) for console output."""
    lines = ["label\toutcome\ttoi_s\tperforations\tnorm_distance\tavg_ld\tjerk_cm_s3"]
    for i, c in enumerate(cards):
        label = labels[i] if labels else str(i)
        toi = f"{c.toi_s:.1f}" if c.toi_s is not None else "-"
        lines.append(f"{label}\t{c.outcome}\t{toi}\t{c.perforation_count}"
                     f"\t{c.normalized_distance:.3f}\t{c.average_ld:.3f}"
                     f"\t{c.jerk_index_cm_s3:.2f}")
    return "\n".join(lines)
