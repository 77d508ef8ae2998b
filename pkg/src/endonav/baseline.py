"""Rule-based proportional controller: steer the image center onto the
detected lumen, demand human supervision the moment detection drops."""

from __future__ import annotations

from dataclasses import dataclass

from .lumen import LumenDetection
from .sim import ActionTriple


@dataclass(frozen=True)
class PControllerConfig:
    beta: float = 0.05        # steering quanta per pixel of image error
    deadband_px: float = 2.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class ControlDecision:
    action: ActionTriple
    demand_supervision: bool = False


def control(det: LumenDetection,
            config: PControllerConfig = PControllerConfig()) -> ControlDecision:
    """Proportional command toward the lumen centroid, quantized to the
    discrete actuation; no lumen means an immediate supervision demand."""
    if not det.detected:
        return ControlDecision(ActionTriple(0, 0, 0), demand_supervision=True)
    ex = det.centroid[0] - det.center[0]
    ey = det.centroid[1] - det.center[1]
    return ControlDecision(ActionTriple(_quantize(config.beta * ex, config, ex),
                                        _quantize(config.beta * ey, config, ey),
                                        0))


def _quantize(command: float, config: PControllerConfig, err_px: float) -> int:
    if abs(err_px) <= config.deadband_px:
        return 0
    return 1 if command > 0 else -1


class BaselineController:
    """Controller-interface adapter used by eval and supervision harnesses."""

    name = "baseline"

    def __init__(self, config: PControllerConfig = PControllerConfig()):
        self.config = config

    def reset(self):
        pass

    def act(self, obs, detection, env) -> ControlDecision:
        return control(detection, self.config)
