"""Line-delimited episode logs: one header record, one record per step,
one terminal record. Everything downstream (scorecards, replay) is a pure
function of these files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


class MissingTerminalError(ValueError):
    """The log has no terminal record (truncated or still running)."""


@dataclass
class StepRecord:
    t_index: int
    time_s: float
    position: np.ndarray
    orientation: np.ndarray
    action: tuple
    reward: float
    lumen: bool
    ld_norm: Optional[float]
    max_deformation_mm: float
    controller_id: str
    intervention: str = "none"   # none | demanded | override | manual
    recv_step: Optional[int] = None   # manual command arrival tick (latency audit)


@dataclass
class EpisodeLog:
    header: dict
    steps: List[StepRecord] = field(default_factory=list)
    terminal: Optional[str] = None

    @property
    def control_rate_hz(self) -> float:
        return float(self.header.get("control_rate_hz", 30.0))

    def append(self, **kw) -> StepRecord:
        t = len(self.steps)
        rec = StepRecord(t_index=t, time_s=t / self.control_rate_hz, **kw)
        self.steps.append(rec)
        return rec

    def finish(self, terminal: str):
        self.terminal = terminal

    def positions(self) -> np.ndarray:
        return np.stack([s.position for s in self.steps])

    def save(self, path):
        with open(path, "w") as f:
            f.write(json.dumps({"kind": "header", **self.header}) + "\n")
            for s in self.steps:
                rec = {
                    "kind": "step", "t": s.t_index, "time_s": round(s.time_s, 6),
                    "pos": [float(v) for v in s.position],
                    "quat": [float(v) for v in s.orientation],
                    "action": list(s.action), "reward": s.reward,
                    "lumen": int(s.lumen),
                    "ld_norm": s.ld_norm,
                    "deform": s.max_deformation_mm,
                    "controller": s.controller_id,
                    "intervention": s.intervention,
                }
                if s.recv_step is not None:
                    rec["recv_step"] = s.recv_step
                f.write(json.dumps(rec) + "\n")
            if self.terminal is not None:
                f.write(json.dumps({"kind": "terminal", "terminal": self.terminal,
                                    "steps": len(self.steps)}) + "\n")

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        log = None
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                kind = rec.pop("kind", None)
                if kind == "header":
                    log = cls(header=rec)
                elif kind == "step":
                    if log is None:
                        raise ValueError("step record before header")
                    # time_s is stored rounded for readability; recompute it
                    # from the index so replays are bit-identical
                    log.steps.append(StepRecord(
                        t_index=rec["t"],
                        time_s=rec["t"] / log.control_rate_hz,
                        position=np.array(rec["pos"]),
                        orientation=np.array(rec["quat"]),
                        action=tuple(rec["action"]), reward=rec["reward"],
                        lumen=bool(rec["lumen"]), ld_norm=rec["ld_norm"],
                        max_deformation_mm=rec["deform"],
                        controller_id=rec["controller"],
                        intervention=rec.get("intervention", "none"),
                        recv_step=rec.get("recv_step")))
                elif kind == "terminal":
                    log.terminal = rec["terminal"]
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
        if log is None:
            raise ValueError("no header record found")
        expected = list(range(len(log.steps)))
        if [s.t_index for s in log.steps] != expected:
            raise ValueError("t_index not contiguous from 0 (corrupt log)")
        return log
