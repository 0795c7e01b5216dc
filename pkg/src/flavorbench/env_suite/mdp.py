"""Tabular export of periodic crossing flavours and exact finite-horizon values.

Vehicle positions in the crossing game depend only on the frame index, and
repeat with a period computable from the lane speeds.  The agent's row, the
frame index modulo that period, and the previously executed action (needed
for sticky actions) therefore form an exact Markov state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .crossing import DOWN, UP, MiniCrossing


@dataclass
class TabularMDP:
    states: list[tuple[int, int, int]]  # (agent_row, phase, previous_action)
    transitions: list[sparse.csr_matrix]  # one (S, S) row-stochastic matrix per action
    rewards: np.ndarray  # (S, A) expected immediate reward
    start: int
    period: int

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.transitions)


class NotTabularError(ValueError):
    pass


def vehicle_period(env: MiniCrossing, limit: int = 10_000) -> int:
    """Smallest P > 0 with identical vehicle layout and speed schedule at t and t + P."""
    spec = env.spec
    cycle = 2 * spec.speed_toggle_period if spec.speed_toggle_period else 1
    lead = np.array(env.initial_offsets, dtype=np.int64)
    start = lead.copy()
    for t in range(limit):
        for lane, d in enumerate(spec.directions):
            lead[lane] = (lead[lane] + d * spec.lane_speed(lane, t)) % spec.width
        if (t + 1) % cycle == 0 and np.array_equal(lead, start):
            return t + 1
    raise NotTabularError(f"no vehicle period found within {limit} frames")


def export_tabular_mdp(env, sticky_prob: float = 0.0) -> TabularMDP:
    """Build the exact MDP of a crossing environment under sticky actions (frame skip 1)."""
    if not isinstance(env, MiniCrossing):
        raise NotTabularError(f"{type(env).__name__} has stochastic spawns (alien fire) "
                              "and no finite periodic state; only mini_crossing exports")
    if not 0 <= sticky_prob <= 1:
        raise ValueError("sticky_prob must lie in [0, 1]")
    spec = env.spec
    period = vehicle_period(env)

    # occupancy[phase] is the layout right after the advance made during a frame
    # whose index is congruent to ``phase``
    occupancy = []
    lead = np.array(env.initial_offsets, dtype=np.int64)
    for t in range(period):
        for lane, d in enumerate(spec.directions):
            lead[lane] = (lead[lane] + d * spec.lane_speed(lane, t)) % spec.width
        occupancy.append(env.vehicle_cells(lead)[:, env.start[1]])

    n_actions = spec.action_count
    states = [(row, phase, prev) for row in range(spec.height)
              for phase in range(period) for prev in range(n_actions)]
    index = {s: i for i, s in enumerate(states)}
    bottom = spec.height - 1

    def frame(row, phase, executed):
        if executed == UP:
            row = max(0, row - 1)
        elif executed == DOWN:
            row = min(bottom, row + 1)
        if 1 <= row <= spec.lanes and occupancy[phase][row - 1]:
            row = row + 1 if spec.collision == "bump" else bottom
        reward = 0.0
        if row == 0:
            reward, row = 1.0, bottom
        return row, reward

    rows, cols, vals = [[] for _ in range(n_actions)], [[] for _ in range(n_actions)], [[] for _ in range(n_actions)]
    rewards = np.zeros((len(states), n_actions))
    for i, (row, phase, prev) in enumerate(states):
        nxt_phase = (phase + 1) % period
        for a in range(n_actions):
            outcomes = [(a, 1.0 - sticky_prob), (prev, sticky_prob)] if a != prev else [(a, 1.0)]
            for executed, p in outcomes:
                if p == 0:
                    continue
                new_row, r = frame(row, phase, executed)
                rows[a].append(i)
                cols[a].append(index[(new_row, nxt_phase, executed)])
                vals[a].append(p)
                rewards[i, a] += p * r
    n = len(states)
    transitions = [sparse.csr_matrix((vals[a], (rows[a], cols[a])), shape=(n, n)) for a in range(n_actions)]
    return TabularMDP(states, transitions, rewards, index[(bottom, 0, 0)], period)


def backward_induction(mdp: TabularMDP, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Optimal values ``(S,)`` with ``horizon`` steps to go and the first-step greedy policy."""
    v = np.zeros(mdp.n_states)
    policy = np.zeros(mdp.n_states, dtype=np.int64)
    for _ in range(horizon):
        q = mdp.rewards + np.column_stack([p @ v for p in mdp.transitions])
        policy = q.argmax(axis=1)
        v = q.max(axis=1)
    return v, policy


def optimal_return_oracle(mdp: TabularMDP, horizon: int) -> float:
    """Maximal expected undiscounted return over ``horizon`` frames from the start state."""
    v, _ = backward_induction(mdp, horizon)
    return float(v[mdp.start])
