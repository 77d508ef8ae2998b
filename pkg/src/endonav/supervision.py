"""Human-supervision protocol around a live episode.

Mode machine: autonomous -> supervision_demanded (lumen lost past the
search window for the learned agent, immediately for the baseline),
autonomous/supervision_demanded -> manual_override (client override),
manual_override/supervision_demanded -> autonomous (client release).
Manual control is message-driven: one sim step per manual_action, so a
scripted client produces exactly reproducible episodes.
"""

from __future__ import annotations

import collections
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .baseline import ControlDecision
from .env import EndoscopyEnv
from .episodes import decide
from .logs import EpisodeLog
from .metrics import OUTCOME_BY_TERMINAL
from .render import downscale, Frame
from .sim import ActionTriple
from . import wire

AUTONOMOUS = "autonomous"
SUPERVISION_DEMANDED = "supervision_demanded"
MANUAL_OVERRIDE = "manual_override"


@dataclass
class Intervention:
    step: int
    kind: str                 # "override" | "demanded"
    duration_steps: int = 0
    closed: bool = False


@dataclass
class SupervisionConfig:
    delta_t: int = 50             # lumen-search window before demanding help
    rate_hz: float = 0.0          # autonomous pacing; 0 = free-run (headless)
    max_steps: int = 10000
    frame_size: int = 128
    queue_depth: int = 2          # droppable outbound backlog (drop-oldest)
    manual_timeout_s: float = 30.0


@dataclass
class SessionOutput:
    """Outbound messages; frames/statuses are droppable, events are not."""
    depth: int = 2
    _items: collections.deque = field(default_factory=collections.deque)
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _ready: threading.Event = field(default_factory=threading.Event)

    def push(self, data: bytes, droppable: bool):
        with self._lock:
            if droppable:
                backlog = sum(1 for _, d in self._items if d)
                while backlog >= self.depth:
                    for i, (item, d) in enumerate(self._items):
                        if d:
                            del self._items[i]
                            backlog -= 1
                            break
            self._items.append((data, droppable))
            self._ready.set()

    def pop(self, timeout: float = 0.1) -> Optional[bytes]:
        if not self._ready.wait(timeout):
            return None
        with self._lock:
            if not self._items:
                self._ready.clear()
                return None
            data, _ = self._items.popleft()
            if not self._items:
                self._ready.clear()
            return data


class SupervisionSession:
    """One supervised episode; commands arrive via submit(), outbound bytes
    leave via .output. Runs headless when no client attaches."""

    def __init__(self, env: EndoscopyEnv, controller, kind: str,
                 config: SupervisionConfig = SupervisionConfig(),
                 seed: int = 0, scripted_supervisor=None):
        if kind not in ("dvc", "baseline", "script"):
            raise ValueError("controller kind must be dvc, baseline or script")
        self.env = env
        self.controller = controller
        self.kind = kind
        self.config = config
        self.seed = seed
        self.script = scripted_supervisor
        self.mode = AUTONOMOUS
        self.lumen_lost_steps = 0
        self.interventions: List[Intervention] = []
        self._open: Optional[Intervention] = None
        self.step_count = 0
        self._commands = collections.deque()
        self._cmd_lock = threading.Lock()
        self.output = SessionOutput(depth=config.queue_depth)
        self.client_attached = False
        self.paused = False
        self.resolution = config.frame_size
        self.log: Optional[EpisodeLog] = None
        self._pending_manual = None
        self._rejected_actions = 0

    # -- client side -------------------------------------------------------

    def submit(self, command: dict):
        """Thread-safe command ingestion (reader thread or in-process script).
        Manual actions are stamped with the current step for latency audit."""
        if command.get("tag") == "manual_action":
            command = dict(command, recv_step=self.step_count)
        with self._cmd_lock:
            self._commands.append(command)
        self.paused = False   # any client activity resumes a safety stop

    def client_lost(self):
        """Disconnect during manual override pauses the session (safety stop);
        it resumes when a reconnected client submits anything."""
        self.client_attached = False
        if self.mode == MANUAL_OVERRIDE:
            self.paused = True

    # -- mode machine ------------------------------------------------------

    def _enter_demanded(self):
        if self.mode != AUTONOMOUS:
            return
        self.mode = SUPERVISION_DEMANDED
        self._open = Intervention(step=self.step_count, kind="demanded")
        self.interventions.append(self._open)
        self.output.push(wire.encode_supervision_required(), droppable=False)

    def _apply_command(self, cmd: dict) -> Optional[dict]:
        """Returns a manual action dict when one should drive the next step."""
        tag = cmd["tag"]
        if tag == "override":
            if self.mode == AUTONOMOUS:
                self._open = Intervention(step=self.step_count, kind="override")
                self.interventions.append(self._open)
                self.mode = MANUAL_OVERRIDE
            elif self.mode == SUPERVISION_DEMANDED:
                # the system asked first: stays one "demanded" intervention
                self.mode = MANUAL_OVERRIDE
        elif tag == "release":
            if self.mode in (MANUAL_OVERRIDE, SUPERVISION_DEMANDED):
                if self._open is not None:
                    self._open.duration_steps = self.step_count - self._open.step
                    self._open.closed = True
                    self._open = None
                self.mode = AUTONOMOUS
                self.lumen_lost_steps = 0   # fresh search window after handback
        elif tag == "manual_action":
            if self.mode == MANUAL_OVERRIDE:
                return cmd
            self._rejected_actions += 1   # rejected and logged: wrong mode
        elif tag == "set_resolution":
            self.resolution = cmd["size"]
        return None

    def _drain_commands(self) -> Optional[dict]:
        """Process queued commands; stop at the first applicable manual action
        (it drives exactly one step)."""
        while True:
            with self._cmd_lock:
                if not self._commands:
                    return None
                cmd = self._commands.popleft()
            manual = self._apply_command(cmd)
            if manual is not None:
                return manual

    # -- main loop ---------------------------------------------------------

    def run(self) -> EpisodeLog:
        env = self.env
        cfg = self.config
        obs, info = env.reset(seed=self.seed)
        self.controller.reset()
        controller_id = self.kind
        self.log = EpisodeLog(header={
            "model": env.model.name,
            "centerline_length_mm": env.model.centerline.length_mm,
            "seed": self.seed, "controller": controller_id,
            "control_rate_hz": env.sim.config.control_rate_hz,
            "delta_t": cfg.delta_t, "supervised": True,
        })
        self.log.append(position=info["position"],
                        orientation=info["orientation"], action=(0, 0, 0),
                        reward=0.0, lumen=info["lumen"],
                        ld_norm=info["ld_norm"], max_deformation_mm=0.0,
                        controller_id=controller_id)
        self._emit(obs, info)

        dt = 1.0 / cfg.rate_hz if cfg.rate_hz > 0 else 0.0
        deadline = time.monotonic()
        while env.terminal == "none" and self.step_count < cfg.max_steps:
            if self.script is not None:
                self.script.on_tick(self)
            manual = self._drain_commands()

            if self.mode == MANUAL_OVERRIDE and manual is None:
                # message-driven manual stepping: wait for the next command
                manual = self._wait_for_manual()
                if manual is None:
                    continue   # paused (disconnect) or still waiting

            if manual is not None:
                action = ActionTriple(manual["alpha_x"], manual["alpha_y"],
                                      manual["alpha_z"])
                obs, r, done, info = env.step(
                    action, translate_override=manual["translate"])
                self._record(action, r, info, intervention="manual",
                             controller_id="manual",
                             recv_step=manual.get("recv_step"))
            else:
                acted_on = env.detection       # the frame this action answers
                decision = decide(self.controller, obs, acted_on, env)
                self._update_demand_state(acted_on, decision)
                translate = None
                if self.mode == SUPERVISION_DEMANDED:
                    translate = False   # hold insertion while awaiting a human
                obs, r, done, info = env.step(decision.action,
                                              translate_override=translate)
                self._record(decision.action, r, info,
                             intervention=self.mode if self.mode != AUTONOMOUS
                             else "none",
                             controller_id=controller_id)

            self._emit(obs, info)
            if dt > 0:
                deadline += dt
                pause = deadline - time.monotonic()
                if pause > 0:
                    time.sleep(pause)

        terminal = env.terminal if env.terminal != "none" else "step_limit"
        if self._open is not None:   # episode ended mid-intervention
            self._open.duration_steps = self.step_count - self._open.step
            self._open.closed = True
            self._open = None
        self.log.finish(terminal)
        stats = intervention_stats([self.interventions])
        self.output.push(wire.encode_episode_end(
            OUTCOME_BY_TERMINAL[terminal], stats["n_override"],
            stats["n_demanded"]), droppable=False)
        return self.log

    def _wait_for_manual(self) -> Optional[dict]:
        start = time.monotonic()
        while True:
            if self.script is not None:
                self.script.on_tick(self)
            manual = self._drain_commands()
            if manual is not None:
                return manual
            if self.mode != MANUAL_OVERRIDE:
                return None    # released while waiting
            if self.paused:    # safety stop: hold until the client is back
                time.sleep(0.02)
                continue
            if time.monotonic() - start > self.config.manual_timeout_s:
                self.paused = True
                continue
            time.sleep(0.0005)

    def _update_demand_state(self, detection, decision: ControlDecision):
        """Runs on the frame the controller just acted on, so a demand is
        stamped at the step that saw the lumen-less frame."""
        if self.mode != AUTONOMOUS:
            return
        if detection.detected:
            self.lumen_lost_steps = 0
            return
        self.lumen_lost_steps += 1
        if self.kind == "baseline":
            if decision.demand_supervision:
                self._enter_demanded()
        elif self.lumen_lost_steps >= self.config.delta_t:
            self._enter_demanded()

    def _record(self, action, reward, info, intervention, controller_id,
                recv_step=None):
        self.step_count += 1
        self.log.append(position=info["position"],
                        orientation=info["orientation"],
                        action=action.as_tuple(), reward=reward,
                        lumen=info["lumen"], ld_norm=info["ld_norm"],
                        max_deformation_mm=info["max_deformation_mm"],
                        controller_id=controller_id,
                        intervention=intervention, recv_step=recv_step)

    def _emit(self, obs, info):
        pixels = obs
        if self.resolution != obs.shape[0]:
            frame = self.env.renderer.render(
                self.env.state.position, self.env.state.rotation,
                size=self.resolution, deform=self.env.sim.deform,
                station_hint=self.env.state.station)
            pixels = frame.pixels
        det = self.env.detection
        self.output.push(wire.encode_frame(self.step_count,
                                           pixels.shape[0], pixels),
                         droppable=True)
        self.output.push(wire.encode_status(
            self.mode, det.detected, det.centroid,
            det.ld_norm if det.detected else None,
            info.get("max_deformation_mm", 0.0), self.step_count),
            droppable=True)


def intervention_stats(sessions) -> dict:
    """Counts split by kind plus per-session total mean/sd.

    Accepts a single ledger (list of Intervention) or a list of ledgers.
    """
    if sessions and isinstance(sessions[0], Intervention):
        sessions = [sessions]
    n_override = sum(1 for s in sessions for i in s if i.kind == "override")
    n_demanded = sum(1 for s in sessions for i in s if i.kind == "demanded")
    totals = [len(s) for s in sessions] or [0]
    return {"n_override": n_override, "n_demanded": n_demanded,
            "mean": float(np.mean(totals)), "sd": float(np.std(totals))}


class ScriptedSupervisor:
    """Deterministic in-process stand-in for a human operator.

    Overrides at a given step (or whenever the session demands help), drives
    a fixed or generated manual action sequence, then releases.
    """

    def __init__(self, override_at_step: Optional[int] = None,
                 manual_actions: Optional[list] = None,
                 respond_to_demands: bool = False,
                 rescue_fn=None, rescue_steps: int = 40):
        self.override_at_step = override_at_step
        self.manual_actions = list(manual_actions or [])
        self.respond_to_demands = respond_to_demands
        self.rescue_fn = rescue_fn
        self.rescue_steps = rescue_steps
        self._manual_left = 0
        self._did_override = False

    def on_tick(self, session: SupervisionSession):
        if session.mode == AUTONOMOUS and self.override_at_step is not None \
                and not self._did_override \
                and session.step_count >= self.override_at_step:
            session.submit({"tag": "override"})
            self._did_override = True
            self._manual_left = len(self.manual_actions) or self.rescue_steps
            return
        if session.mode == SUPERVISION_DEMANDED and self.respond_to_demands:
            session.submit({"tag": "override"})
            self._manual_left = self.rescue_steps
            return
        if session.mode == MANUAL_OVERRIDE:
            if self._manual_left > 0:
                self._manual_left -= 1
                if self.manual_actions:
                    i = len(self.manual_actions) - self._manual_left - 1
                    ax, ay, az, tr = self.manual_actions[
                        min(i, len(self.manual_actions) - 1)]
                elif self.rescue_fn is not None:
                    ax, ay, az, tr = self.rescue_fn(session)
                else:
                    ax, ay, az, tr = 0, 0, 0, False
                session.submit({"tag": "manual_action", "alpha_x": ax,
                                "alpha_y": ay, "alpha_z": az,
                                "translate": tr})
            else:
                session.submit({"tag": "release"})
