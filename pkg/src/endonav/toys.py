"""Tiny diagnostic environments for trainer sanity checks.

Both speak the same interface as the endoscopy env (uint8 image
observations, ActionTriple actions) but run orders of magnitude faster.
"""

from __future__ import annotations

import numpy as np

from .sim import ActionTriple


def _pattern(seed: int, size: int = 8) -> np.ndarray:
    return np.random.default_rng(seed).integers(
        0, 256, size=(size, size, 3), dtype=np.uint8)


class BanditEnv:
    """One-step bandit on the x head: +1 reward for alpha_x=+1, -1 for -1."""

    optimal_head = 0
    optimal_index = 2   # alpha_x = +1

    def __init__(self, obs_seed: int = 17):
        self._obs = _pattern(obs_seed)
        self.terminal = "none"

    def reset(self, seed: int = 0):
        self.terminal = "none"
        return self._obs.copy(), {"lumen": True}

    def step(self, action):
        if not isinstance(action, ActionTriple):
            action = ActionTriple(*action)
        r = float(action.alpha_x)
        self.terminal = "done"
        return self._obs.copy(), r, True, {"dense_reward": r,
                                           "terminal_bonus": 0.0}


class CorridorEnv:
    """1-D corridor of 8 cells; walk right to the goal.

    Observation encodes the cell as a bright column. Small per-step cost,
    +1 on arrival; needs credit assignment over a handful of steps.
    """

    n_cells = 8
    max_steps = 32
    optimal_head = 0
    optimal_index = 2

    def __init__(self, obs_seed: int = 23):
        base = np.full((8, 8, 3), 20, dtype=np.uint8)
        self._frames = []
        for pos in range(self.n_cells):
            f = base.copy()
            f[:, pos, :] = 255
            self._frames.append(f)
        self.pos = 0
        self.steps = 0
        self.terminal = "none"

    def observe(self, pos: int) -> np.ndarray:
        return self._frames[pos].copy()

    def reset(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.pos = int(rng.integers(0, self.n_cells - 1))
        self.steps = 0
        self.terminal = "none"
        return self.observe(self.pos), {"lumen": True}

    def step(self, action):
        if not isinstance(action, ActionTriple):
            action = ActionTriple(*action)
        self.pos = int(np.clip(self.pos + action.alpha_x, 0, self.n_cells - 1))
        self.steps += 1
        at_goal = self.pos == self.n_cells - 1
        r = 1.0 if at_goal else -0.02
        done = at_goal or self.steps >= self.max_steps
        if done:
            self.terminal = "done"
        return self.observe(self.pos), r, done, {"dense_reward": r,
                                                 "terminal_bonus": 0.0}
