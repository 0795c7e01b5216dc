"""Shoot-the-descending-grid game.

Frame order in :meth:`MiniInvaders.step`: the alien block moves (sideways
every ``alien_move_interval`` frames, bouncing at the walls, and one row down
every ``descend_interval`` frames); bullets already in flight advance one
cell; the player moves or fires; hits are resolved; aliens may fire; the
frame counter increments.  A player bullet fired from directly below an alien
``d`` rows up therefore scores on the ``d``-th frame.

Observation channels: 0 player, 1 aliens, 2 shields and bullets.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .base import EpisodeOverError, StepResult
from .flavours import Flavour

NOOP, LEFT, RIGHT, FIRE = 0, 1, 2, 3
ACTIONS = ("noop", "left", "right", "fire")


@dataclass(frozen=True)
class InvadersSpec:
    mode: int = 0
    difficulty: int = 0
    width: int = 9
    height: int = 7
    alien_rows: int = 3
    alien_cols: int = 5
    alien_move_interval: int = 2
    descend_interval: int = 20
    alien_fire_prob: float = 0.02
    shield_cols: tuple[int, ...] = (1, 4, 7)
    shield_period: int = 0  # 0 keeps shields still
    player_width: int = 1
    hidden_aliens: bool = False
    flash_frames: int = 3
    frame_limit: int = 500
    action_count: int = 4
    channels: int = 3
    game: str = "mini_invaders"

    def __post_init__(self):
        if self.alien_cols > self.width or self.alien_rows > self.height - 3:
            raise ValueError("alien block does not fit the grid")
        if not 0 <= self.alien_fire_prob <= 1:
            raise ValueError("alien_fire_prob must lie in [0, 1]")
        if self.player_width < 1 or self.player_width > self.width:
            raise ValueError("bad player width")

    @property
    def observation_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def shield_row(self) -> int:
        return self.height - 2

    @property
    def player_row(self) -> int:
        return self.height - 1

    def shield_shift(self, t: int) -> int:
        if not self.shield_period:
            return 0
        half = self.shield_period // 2
        return 0 if (t // half) % 2 == 0 else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def invaders_spec(flavour: Flavour) -> InvadersSpec:
    return InvadersSpec(
        mode=flavour.mode,
        difficulty=flavour.difficulty,
        shield_period=6 if flavour.mode == 1 else 0,
        player_width=2 if flavour.difficulty == 1 else 1,
        hidden_aliens=flavour.mode == 9,
    )


@dataclass
class InvadersState:
    player_col: int
    t: int
    alive: np.ndarray  # (alien_rows, alien_cols) bool
    origin: list  # [row, col] of the block's top-left cell
    heading: int
    shields: np.ndarray  # bool per entry of spec.shield_cols
    player_bullet: Optional[tuple[int, int]] = None
    alien_bullets: list = field(default_factory=list)
    flash: int = 0
    terminal: bool = False

    def copy(self) -> "InvadersState":
        return dataclasses.replace(self, alive=self.alive.copy(), origin=list(self.origin),
                                   shields=self.shields.copy(), alien_bullets=list(self.alien_bullets))


class MiniInvaders:
    actions = ACTIONS

    def __init__(self, spec: InvadersSpec, seed: Optional[int] = 0):
        self.spec = spec
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.state: InvadersState
        self.reset()

    @property
    def action_count(self) -> int:
        return self.spec.action_count

    @property
    def observation_shape(self) -> tuple[int, int, int]:
        return self.spec.observation_shape

    def reset(self) -> np.ndarray:
        spec = self.spec
        self.state = InvadersState(
            player_col=(spec.width - spec.player_width) // 2,
            t=0,
            alive=np.ones((spec.alien_rows, spec.alien_cols), dtype=bool),
            origin=[0, (spec.width - spec.alien_cols) // 2],
            heading=1,
            shields=np.ones(len(spec.shield_cols), dtype=bool),
        )
        return self.observation()

    def player_cells(self) -> list[tuple[int, int]]:
        s = self.state
        return [(self.spec.player_row, s.player_col + k) for k in range(self.spec.player_width)]

    def shield_cells(self) -> dict[tuple[int, int], int]:
        shift = self.spec.shield_shift(self.state.t)
        return {(self.spec.shield_row, (c + shift) % self.spec.width): i
                for i, c in enumerate(self.spec.shield_cols) if self.state.shields[i]}

    def alien_at(self, row: int, col: int) -> Optional[tuple[int, int]]:
        s = self.state
        i, j = row - s.origin[0], col - s.origin[1]
        if 0 <= i < self.spec.alien_rows and 0 <= j < self.spec.alien_cols and s.alive[i, j]:
            return i, j
        return None

    def _move_aliens(self) -> None:
        s, spec = self.state, self.spec
        frame = s.t + 1
        if spec.alien_move_interval and frame % spec.alien_move_interval == 0:
            cols = np.flatnonzero(s.alive.any(axis=0))
            lo, hi = s.origin[1] + cols.min(), s.origin[1] + cols.max()
            if (s.heading > 0 and hi + 1 >= spec.width) or (s.heading < 0 and lo - 1 < 0):
                s.heading = -s.heading
            s.origin[1] += s.heading
        if spec.descend_interval and frame % spec.descend_interval == 0:
            s.origin[0] += 1

    def step(self, action: int) -> StepResult:
        s, spec = self.state, self.spec
        if s.terminal:
            raise EpisodeOverError("episode is over; call reset()")
        if not 0 <= action < spec.action_count:
            raise ValueError(f"action {action} outside 0..{spec.action_count - 1}")
        reward = 0.0
        hit_player = False
        self._move_aliens()

        if s.player_bullet is not None:
            r, c = s.player_bullet
            s.player_bullet = (r - 1, c) if r - 1 >= 0 else None
        s.alien_bullets = [(r + 1, c) for r, c in s.alien_bullets if r + 1 < spec.height]

        if action == LEFT:
            s.player_col = max(0, s.player_col - 1)
        elif action == RIGHT:
            s.player_col = min(spec.width - spec.player_width, s.player_col + 1)
        elif action == FIRE and s.player_bullet is None:
            s.player_bullet = (spec.player_row - 1, s.player_col)

        shields = self.shield_cells()
        if s.player_bullet is not None:
            if s.player_bullet in shields:
                s.shields[shields.pop(s.player_bullet)] = False
                s.player_bullet = None
            else:
                hit = self.alien_at(*s.player_bullet)
                if hit is not None:
                    s.alive[hit] = False
                    s.player_bullet = None
                    s.flash = spec.flash_frames
                    reward += 1.0
        player = set(self.player_cells())
        remaining = []
        for b in s.alien_bullets:
            if b in shields:
                s.shields[shields.pop(b)] = False
            elif b in player:
                hit_player = True
            else:
                remaining.append(b)
        s.alien_bullets = remaining
        # aliens sweeping through the shield row destroy shields
        for cell, idx in shields.items():
            if self.alien_at(*cell) is not None:
                s.shields[idx] = False

        if s.alive.any():
            for j in range(spec.alien_cols):
                rows = np.flatnonzero(s.alive[:, j])
                if rows.size and self.rng.random() < spec.alien_fire_prob:
                    s.alien_bullets.append((s.origin[0] + rows.max() + 1, s.origin[1] + j))

        s.t += 1
        if s.flash and reward == 0:
            s.flash -= 1
        landed = s.alive.any() and s.origin[0] + np.flatnonzero(s.alive.any(axis=1)).max() >= spec.player_row
        s.terminal = bool(hit_player or landed or not s.alive.any() or s.t >= spec.frame_limit)
        return StepResult(self.observation(), reward, s.terminal)

    def observation(self) -> np.ndarray:
        s, spec = self.state, self.spec
        obs = np.zeros(spec.observation_shape, dtype=np.uint8)
        for r, c in self.player_cells():
            obs[0, r, c] = 1
        if not spec.hidden_aliens or s.flash > 0:
            rows, cols = np.nonzero(s.alive)
            rows, cols = rows + s.origin[0], cols + s.origin[1]
            keep = (rows >= 0) & (rows < spec.height)
            obs[1, rows[keep], cols[keep]] = 1
        for r, c in self.shield_cells():
            obs[2, r, c] = 1
        if s.player_bullet is not None:
            obs[2][s.player_bullet] = 1
        for r, c in s.alien_bullets:
            if 0 <= r < spec.height:
                obs[2, r, c] = 1
        return obs
