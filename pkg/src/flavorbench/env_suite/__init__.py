"""Flavoured mini-games, the sticky-action/frame-skip wrapper and tabular oracles."""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .base import EpisodeOverError, StepResult
from .crossing import CrossingSpec, MiniCrossing, crossing_spec
from .flavours import (FLAVOUR_TABLE, GAMES, Flavour, UnknownFlavourError, default_flavour,
                       enumerate_flavours)
from .invaders import InvadersSpec, MiniInvaders, invaders_spec
from .mdp import (NotTabularError, TabularMDP, backward_induction, export_tabular_mdp,
                  optimal_return_oracle, vehicle_period)
from .wrappers import ProtocolWrapper, wrap_protocol

Env = Union[MiniCrossing, MiniInvaders]


def env_spec(flavour: Flavour) -> Union[CrossingSpec, InvadersSpec]:
    if flavour.game == "mini_crossing":
        return crossing_spec(flavour)
    return invaders_spec(flavour)


def make_env(flavour: Union[Flavour, str], seed: Optional[int] = 0) -> Env:
    """Fresh environment for ``flavour``; ``seed`` fixes the crossing layout and alien fire."""
    if isinstance(flavour, str):
        flavour = Flavour.parse(flavour)
    spec = env_spec(flavour)
    if flavour.game == "mini_crossing":
        return MiniCrossing(spec, seed)
    return MiniInvaders(spec, seed)


def run_episode(env, policy, max_steps: Optional[int] = None) -> float:
    """Undiscounted return of one episode; ``policy`` maps an observation to an action."""
    obs = env.reset()
    total, steps = 0.0, 0
    while True:
        result = env.step(policy(obs))
        total += result.reward
        steps += 1
        obs = result.observation
        if result.terminal or (max_steps is not None and steps >= max_steps):
            return total


def best_action_baseline(env, episodes: int = 1) -> tuple[float, int, list[float]]:
    """Best mean return over constant policies ``always a``.

    Returns ``(best mean, best action, mean per action)``; ties go to the
    lowest action index.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    means = []
    for a in range(env.action_count):
        means.append(float(np.mean([run_episode(env, lambda _obs: a) for _ in range(episodes)])))
    best = int(np.argmax(means))
    return means[best], best, means


__all__ = [
    "CrossingSpec", "Env", "EpisodeOverError", "FLAVOUR_TABLE", "Flavour", "GAMES", "InvadersSpec",
    "MiniCrossing", "MiniInvaders", "NotTabularError", "ProtocolWrapper", "StepResult", "TabularMDP",
    "UnknownFlavourError", "backward_induction", "best_action_baseline", "crossing_spec",
    "default_flavour", "enumerate_flavours", "env_spec", "export_tabular_mdp", "invaders_spec",
    "make_env", "optimal_return_oracle", "run_episode", "vehicle_period", "wrap_protocol",
]
