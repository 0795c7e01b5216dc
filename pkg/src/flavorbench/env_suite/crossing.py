"""Road-crossing grid game.

The agent stands in a fixed column and moves between rows.  Row 0 is the
goal, rows ``1..lanes`` carry traffic and the bottom row is the start.  One
call to :meth:`MiniCrossing.step` is one frame, processed in this order:

1. every vehicle advances by its lane velocity (mod width);
2. the agent moves (``noop``, ``up``, ``down``);
3. a collision either bumps the agent one row down or sends it to the start;
4. reaching row 0 pays +1 and returns the agent to the start row;
5. the frame counter increments; the episode ends at the frame limit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .base import EpisodeOverError, StepResult
from .flavours import Flavour

NOOP, UP, DOWN = 0, 1, 2
ACTIONS = ("noop", "up", "down")


@dataclass(frozen=True)
class CrossingSpec:
    mode: int = 0
    difficulty: int = 0
    width: int = 9
    height: int = 7
    lane_speeds: tuple[int, ...] = (1, 2, 1, 2, 1)
    lane_lengths: tuple[int, ...] = (1, 1, 1, 1, 1)
    vehicles_per_lane: int = 1
    speed_toggle_period: int = 0  # 0 disables; otherwise slow phase lasts this many frames
    collision: str = "bump"  # or "reset"
    frame_limit: int = 500
    action_count: int = 3
    channels: int = 3
    game: str = "mini_crossing"

    def __post_init__(self):
        lanes = self.height - 2
        if len(self.lane_speeds) != lanes or len(self.lane_lengths) != lanes:
            raise ValueError(f"need one speed and one length per lane ({lanes} lanes)")
        if min(self.lane_speeds) < 1 or min(self.lane_lengths) < 1 or self.vehicles_per_lane < 1:
            raise ValueError("lane speeds, vehicle lengths and counts must be positive")
        if self.collision not in ("bump", "reset"):
            raise ValueError(f"unknown collision rule {self.collision!r}")
        if self.width < 3 or self.height < 3 or self.frame_limit < 1:
            raise ValueError("grid and frame limit too small")

    @property
    def lanes(self) -> int:
        return self.height - 2

    @property
    def vehicle_gap(self) -> int:
        return self.width // 2

    @property
    def directions(self) -> tuple[int, ...]:
        return tuple(1 if i % 2 == 0 else -1 for i in range(self.lanes))

    @property
    def observation_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def lane_speed(self, lane: int, t: int) -> int:
        v = self.lane_speeds[lane]
        if self.speed_toggle_period and (t // self.speed_toggle_period) % 2 == 1:
            return max(1, v - 1)
        return v

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def crossing_spec(flavour: Flavour) -> CrossingSpec:
    base = CrossingSpec()
    if flavour.mode == 0:
        spec = base
    else:
        spec = dataclasses.replace(
            base,
            lane_speeds=tuple(v + 1 for v in base.lane_speeds),
            lane_lengths=(1, 2, 1, 2, 1),
            vehicles_per_lane=2,
            speed_toggle_period=8 if flavour.mode == 4 else 0,
        )
    return dataclasses.replace(spec, mode=flavour.mode, difficulty=flavour.difficulty,
                               collision="reset" if flavour.difficulty == 1 else "bump")


@dataclass
class CrossingState:
    agent_row: int
    agent_col: int
    t: int
    lead: np.ndarray  # (lanes,) column of each lane's first vehicle
    terminal: bool = False

    def copy(self) -> "CrossingState":
        return dataclasses.replace(self, lead=self.lead.copy())


class MiniCrossing:
    actions = ACTIONS

    def __init__(self, spec: CrossingSpec, seed: Optional[int] = 0,
                 initial_offsets: Optional[tuple[int, ...]] = None):
        self.spec = spec
        if initial_offsets is None:
            rng = np.random.default_rng(seed)
            initial_offsets = tuple(int(v) for v in rng.integers(0, spec.width, size=spec.lanes))
        if len(initial_offsets) != spec.lanes:
            raise ValueError(f"need {spec.lanes} initial offsets")
        self.initial_offsets = tuple(int(v) % spec.width for v in initial_offsets)
        self.state: CrossingState
        self.reset()

    @property
    def action_count(self) -> int:
        return self.spec.action_count

    @property
    def observation_shape(self) -> tuple[int, int, int]:
        return self.spec.observation_shape

    @property
    def start(self) -> tuple[int, int]:
        return self.spec.height - 1, self.spec.width // 2

    def reset(self) -> np.ndarray:
        row, col = self.start
        self.state = CrossingState(row, col, 0, np.array(self.initial_offsets, dtype=np.int64))
        return self.observation()

    def vehicle_cells(self, lead: Optional[np.ndarray] = None) -> np.ndarray:
        """Boolean ``(lanes, width)`` occupancy grid."""
        spec = self.spec
        lead = self.state.lead if lead is None else lead
        occ = np.zeros((spec.lanes, spec.width), dtype=bool)
        for lane in range(spec.lanes):
            for j in range(spec.vehicles_per_lane):
                x = lead[lane] + j * spec.vehicle_gap
                for k in range(spec.lane_lengths[lane]):
                    occ[lane, (x + k) % spec.width] = True
        return occ

    def vehicle_count(self) -> int:
        return self.spec.lanes * self.spec.vehicles_per_lane

    def _advance_vehicles(self, t: int) -> None:
        spec = self.spec
        for lane, d in enumerate(spec.directions):
            self.state.lead[lane] = (self.state.lead[lane] + d * spec.lane_speed(lane, t)) % spec.width

    def step(self, action: int) -> StepResult:
        s = self.state
        spec = self.spec
        if s.terminal:
            raise EpisodeOverError("episode is over; call reset()")
        if not 0 <= action < spec.action_count:
            raise ValueError(f"action {action} outside 0..{spec.action_count - 1}")
        self._advance_vehicles(s.t)
        if action == UP:
            s.agent_row = max(0, s.agent_row - 1)
        elif action == DOWN:
            s.agent_row = min(spec.height - 1, s.agent_row + 1)
        if 1 <= s.agent_row <= spec.lanes and self.vehicle_cells()[s.agent_row - 1, s.agent_col]:
            if spec.collision == "bump":
                s.agent_row += 1
            else:
                s.agent_row = self.start[0]
        reward = 0.0
        if s.agent_row == 0:
            reward = 1.0
            s.agent_row = self.start[0]
        s.t += 1
        s.terminal = s.t >= spec.frame_limit
        return StepResult(self.observation(), reward, s.terminal)

    def observation(self) -> np.ndarray:
        spec = self.spec
        obs = np.zeros(spec.observation_shape, dtype=np.uint8)
        obs[0, self.state.agent_row, self.state.agent_col] = 1
        obs[1, 1:1 + spec.lanes] = self.vehicle_cells()
        return obs
