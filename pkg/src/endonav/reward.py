"""Dense lumen-centering reward, terminal bonuses, and curve normalization."""

from __future__ import annotations

from dataclasses import dataclass

from .lumen import LumenDetection

TERMINAL_NONE = "none"
TERMINAL_REACHED_CAECUM = "reached_caecum"
TERMINAL_RETURNED_TO_START = "returned_to_start"
TERMINAL_STEP_LIMIT = "step_limit"
TERMINAL_DESTABILIZED = "destabilized"

TERMINAL_KINDS = (
    TERMINAL_REACHED_CAECUM,
    TERMINAL_RETURNED_TO_START,
    TERMINAL_STEP_LIMIT,
    TERMINAL_DESTABILIZED,
)


@dataclass(frozen=True)
class RewardConfig:
    c: float = 1.0
    d_max: float = 64.0          # half the observation width
    bonus_caecum: float = 10.0
    penalty_return: float = -10.0
    penalty_no_lumen: float = -1.0


def dense_reward(det: LumenDetection, config: RewardConfig = RewardConfig()) -> float:
    """Per-step reward: C*(1 - LD/D_max) when the lumen is seen, -1 otherwise.

    LD is clamped to D_max so the detected branch stays in [0, C].
    """
    if not det.detected:
        return config.penalty_no_lumen
    ld = min(det.ld_px, config.d_max)
    return config.c * (1.0 - ld / config.d_max)


def terminal_reward(kind: str, config: RewardConfig = RewardConfig()) -> float:
    """Bonus added on top of the dense reward at episode end."""
    if kind == TERMINAL_REACHED_CAECUM:
        return config.bonus_caecum
    if kind == TERMINAL_RETURNED_TO_START:
        return config.penalty_return
    if kind in (TERMINAL_STEP_LIMIT, TERMINAL_DESTABILIZED, TERMINAL_NONE):
        return 0.0
    raise ValueError(f"unknown terminal kind: {kind!r}")


def normalize_return(episode_return: float, episode_len: int) -> float:
    """Episode return divided by its length, clamped to [-1, 1].

    Terminal bonuses are excluded by the caller (they would break the range);
    raw returns are logged separately.
    """
    if episode_len < 1:
        raise ValueError("episode_len must be >= 1")
    return max(-1.0, min(1.0, episode_return / episode_len))
