"""Episode loop tying simulator, renderer, lumen detector and reward.

Observations are rendered endoscopic frames; the translation gate and the
dense reward both come from the detector run on the freshly rendered frame.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .colon import ColonModel
from .lumen import LumenDetection, SegmentationConfig, detect
from .render import CameraSpec, Renderer
from .reward import RewardConfig, dense_reward, terminal_reward
from .sim import ActionTriple, CapsuleSpec, ColonSim, EndoscopeState, EpisodeConfig


class EndoscopyEnv:
    """Single-instance environment; create one per parallel rollout worker."""

    def __init__(self, model: ColonModel,
                 capsule: CapsuleSpec = CapsuleSpec(),
                 episode: EpisodeConfig = EpisodeConfig(),
                 camera: CameraSpec = CameraSpec(),
                 segmentation: SegmentationConfig = SegmentationConfig(),
                 reward: RewardConfig = RewardConfig(),
                 obs_size: int = 128):
        self.model = model
        self.sim = ColonSim(model, capsule=capsule, config=episode)
        self.renderer = Renderer(model, camera=camera)
        self.segmentation = segmentation
        self.reward_config = reward
        self.obs_size = obs_size
        self.state: Optional[EndoscopeState] = None
        self.detection: Optional[LumenDetection] = None
        self.terminal: str = "none"
        self.episode_steps = 0

    def _observe(self) -> np.ndarray:
        frame = self.renderer.render(self.state.position, self.state.rotation,
                                     size=self.obs_size, deform=self.sim.deform,
                                     station_hint=self.state.station)
        self.detection = detect(frame.pixels, self.segmentation)
        return frame.pixels

    def reset(self, seed: int = 0) -> Tuple[np.ndarray, dict]:
        self.state = self.sim.reset(seed=seed)
        self.terminal = "none"
        self.episode_steps = 0
        obs = self._observe()
        return obs, self._info(max_deformation=0.0, perforation=False)

    def step(self, action,
             translate_override: Optional[bool] = None
             ) -> Tuple[np.ndarray, float, bool, dict]:
        """Advance one control step. translate_override forces the
        translation gate (manual control paths); None keeps the lumen gate."""
        if self.terminal != "none":
            raise RuntimeError("episode is over; call reset()")
        if not isinstance(action, ActionTriple):
            action = ActionTriple(*action)
        gate = bool(self.detection.detected) if translate_override is None \
            else bool(translate_override)
        result = self.sim.step(self.state, action, lumen_detected=gate)
        self.state = result.next_state
        self.terminal = result.terminal
        self.episode_steps += 1

        obs = self._observe()
        dense = dense_reward(self.detection, self.reward_config)
        bonus = terminal_reward(self.terminal, self.reward_config) \
            if self.terminal != "none" else 0.0
        done = self.terminal != "none"
        info = self._info(max_deformation=result.max_deformation_mm,
                          perforation=result.perforation_event)
        info["dense_reward"] = float(dense)
        info["terminal_bonus"] = float(bonus)
        return obs, float(dense + bonus), done, info

    def _info(self, max_deformation: float, perforation: bool) -> dict:
        det = self.detection
        return {
            "detection": det,
            "lumen": bool(det.detected),
            "ld_norm": float(det.ld_norm) if det.detected else None,
            "terminal": self.terminal,
            "position": self.state.position.copy(),
            "orientation": self.state.orientation.copy(),
            "arclength_mm": self.sim.arclength_of(self.state),
            "station": self.state.station,
            "max_deformation_mm": float(max_deformation),
            "perforation": bool(perforation),
            "translating": bool(self.state.translating),
        }
