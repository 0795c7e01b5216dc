"""Sticky actions and frame skipping applied around a one-frame environment."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .base import StepResult


class ProtocolWrapper:
    """Executes each agent decision for ``frame_skip`` frames.

    With probability ``sticky_prob`` the decision is replaced by the action
    executed on the previous decision (noop after a reset).  Rewards are
    summed over the repeated frames; a terminal frame cuts the repeat short.
    """

    def __init__(self, env, frame_skip: int = 1, sticky_prob: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        if frame_skip < 1:
            raise ValueError(f"frame_skip must be >= 1, got {frame_skip}")
        if not 0.0 <= sticky_prob <= 1.0:
            raise ValueError(f"sticky_prob must lie in [0, 1], got {sticky_prob}")
        self.env = env
        self.frame_skip = frame_skip
        self.sticky_prob = sticky_prob
        self.rng = np.random.default_rng() if rng is None else rng
        self.previous_action = 0
        self.decisions = 0
        self.sticky_events = 0

    @property
    def spec(self):
        return self.env.spec

    @property
    def action_count(self) -> int:
        return self.env.action_count

    @property
    def observation_shape(self):
        return self.env.observation_shape

    def reset(self) -> np.ndarray:
        self.previous_action = 0
        return self.env.reset()

    def step(self, action: int) -> StepResult:
        executed = action
        if self.sticky_prob > 0 and self.rng.random() < self.sticky_prob:
            executed = self.previous_action
            self.sticky_events += 1
        self.decisions += 1
        self.previous_action = executed
        total = 0.0
        for _ in range(self.frame_skip):
            result = self.env.step(executed)
            total += result.reward
            if result.terminal:
                break
        return StepResult(result.observation, total, result.terminal)


def wrap_protocol(env, frame_skip: int = 1, sticky_prob: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> ProtocolWrapper:
    return ProtocolWrapper(env, frame_skip, sticky_prob, rng)
