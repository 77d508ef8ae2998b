"""Episode runner and the scripted centerline-following controller.

Controllers expose reset() and act(obs, detection, env) returning either an
ActionTriple or a baseline-style ControlDecision; the runner normalizes both.
"""

from __future__ import annotations

import numpy as np

from .baseline import ControlDecision
from .env import EndoscopyEnv
from .logs import EpisodeLog
from .sim import ActionTriple


class CenterlineFollower:
    """Oracle controller that steers toward a point ahead on the centerline.

    Cheats with model access; used as a sanity row in evaluations and as the
    scripted rescue policy in headless supervision sessions.
    """

    name = "script"

    def __init__(self, lookahead_mm: float = 25.0, deadband_deg: float = 0.5,
                 recenter_gain: float = 1.5):
        self.lookahead_mm = lookahead_mm
        self.deadband = np.radians(deadband_deg)
        self.recenter_gain = recenter_gain

    def reset(self):
        pass

    def act(self, obs, detection, env: EndoscopyEnv) -> ActionTriple:
        state = env.state
        cl = env.model.centerline
        s_now = env.sim.arclength_of(state)
        target = cl.point_at(min(cl.length_mm, s_now + self.lookahead_mm))
        # shift the aim by the lateral offset so bends are not chorded
        target = target + self.recenter_gain * (cl.point_at(s_now)
                                                - state.position)
        to_target = target - state.position
        norm = np.linalg.norm(to_target)
        if norm < 1e-9:
            return ActionTriple(0, 0, 0)
        d_cam = state.rotation.T @ (to_target / norm)
        yaw_err = np.arctan2(d_cam[0], max(d_cam[2], 1e-9))
        pitch_err = np.arctan2(d_cam[1], max(d_cam[2], 1e-9))
        if d_cam[2] <= 0:   # target behind the view plane: full-rate turn
            yaw_err = np.sign(d_cam[0]) if d_cam[0] != 0 else 1.0
            pitch_err = np.sign(d_cam[1])
        ax = 0 if abs(yaw_err) < self.deadband else int(np.sign(yaw_err))
        ay = 0 if abs(pitch_err) < self.deadband else int(np.sign(pitch_err))
        return ActionTriple(ax, ay, 0)


def decide(controller, obs, detection, env) -> ControlDecision:
    out = controller.act(obs, detection, env)
    if isinstance(out, ControlDecision):
        return out
    return ControlDecision(out)


def run_episode(env: EndoscopyEnv, controller, seed: int = 0,
                max_steps: int = None, controller_id: str = None) -> EpisodeLog:
    """Roll one full episode under a controller and return its log."""
    controller_id = controller_id or getattr(controller, "name", "unknown")
    obs, info = env.reset(seed=seed)
    controller.reset()
    log = EpisodeLog(header={
        "model": env.model.name,
        "centerline_length_mm": env.model.centerline.length_mm,
        "seed": seed,
        "controller": controller_id,
        "control_rate_hz": env.sim.config.control_rate_hz,
    })
    log.append(position=info["position"], orientation=info["orientation"],
               action=(0, 0, 0), reward=0.0, lumen=info["lumen"],
               ld_norm=info["ld_norm"], max_deformation_mm=0.0,
               controller_id=controller_id)

    limit = max_steps or env.sim.config.max_steps
    for _ in range(limit):
        decision = decide(controller, obs, env.detection, env)
        obs, r, done, info = env.step(decision.action)
        log.append(position=info["position"], orientation=info["orientation"],
                   action=decision.action.as_tuple(), reward=r,
                   lumen=info["lumen"], ld_norm=info["ld_norm"],
                   max_deformation_mm=info["max_deformation_mm"],
                   controller_id=controller_id,
                   intervention="demanded" if decision.demand_supervision
                   else "none")
        if done:
            break
    log.finish(env.terminal if env.terminal != "none" else "step_limit")
    return log
