"""DQN: replay buffer, epsilon-greedy acting, target network and the training loop.

Accounting follows the frame/step/update convention: each agent step
consumes ``frame_skip`` frames and one gradient-update slot falls every
``learn_frequency`` steps.  Slots that fall before the buffer holds
``learn_start`` transitions are counted but do nothing.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from . import nn_core as nn
from .env_suite import Flavour, make_env, wrap_protocol

log = logging.getLogger(__name__)

SEED_OFFSETS = {"init": 0, "env": 1000, "agent": 2000, "eval": 3000}

TRAIN_COLUMNS = ("frame", "steps", "updates", "epsilon", "loss_mean",
                 "episode_return_mean", "episodes_completed")


def derive_seeds(master: int) -> dict[str, int]:
    """Independent stream seeds for one run, at fixed offsets from the master seed."""
    return {name: master + offset for name, offset in SEED_OFFSETS.items()}


@dataclass(frozen=True)
class EpsilonSchedule:
    initial: float = 1.0
    final: float = 0.01
    decay_frames: int = 1_000_000

    def __post_init__(self):
        if not (1.0 >= self.initial >= self.final >= 0.0):
            raise ValueError("need 1 >= eps_initial >= eps_final >= 0")
        if self.decay_frames < 1:
            raise ValueError("decay_frames must be >= 1")


def epsilon_at(schedule: EpsilonSchedule, frame: int) -> float:
    if frame < 0:
        raise ValueError("frame must be >= 0")
    if frame >= schedule.decay_frames:
        return schedule.final
    frac = frame / schedule.decay_frames
    return schedule.initial - (schedule.initial - schedule.final) * frac


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    step_size: float = 0.00025
    batch_size: int = 32
    learn_frequency: int = 4
    target_sync_interval: int = 1000
    frame_stack: int = 2
    buffer_capacity: int = 50_000
    learn_start: Optional[int] = None  # defaults to 10 * batch_size
    eps_initial: float = 1.0
    eps_final: float = 0.01
    eps_decay_frames: int = 1_000_000
    rms_decay: float = 0.95
    rms_eps: float = 1e-8
    grad_clip: Optional[float] = None
    frame_skip: int = 1
    sticky_prob: float = 0.25
    network: str = "default"
    precision: str = "float64"
    reg: nn.RegularizationConfig = field(default_factory=nn.RegularizationConfig)

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        for name in ("batch_size", "learn_frequency", "target_sync_interval", "frame_stack",
                     "buffer_capacity", "frame_skip"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learn_start is not None and self.learn_start < 1:
            raise ValueError("learn_start must be >= 1")
        if not 0 <= self.sticky_prob <= 1:
            raise ValueError("sticky_prob must lie in [0, 1]")
        if not 0 <= self.rms_decay < 1 or not self.rms_eps > 0:
            raise ValueError("bad RMSProp constants")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")
        if self.network not in nn.PROFILES:
            raise ValueError(f"unknown network profile {self.network!r}")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")
        self.schedule  # validates the epsilon fields

    @property
    def schedule(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps_initial, self.eps_final, self.eps_decay_frames)

    @property
    def warmup(self) -> int:
        return self.learn_start if self.learn_start is not None else 10 * self.batch_size

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


def select_action(q_values, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice; ties in the greedy branch go to the lowest index."""
    q = np.asarray(q_values)
    if q.size == 0:
        raise ValueError("empty q_values")
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


class Transition(NamedTuple):
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return len(self.a)


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, obs_shape: tuple[int, ...], dtype=np.uint8):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.s = np.zeros((capacity, *obs_shape), dtype=dtype)
        self.s_next = np.zeros((capacity, *obs_shape), dtype=dtype)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity, dtype=np.float64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        if np.shape(t.s) != self.obs_shape or np.shape(t.s_next) != self.obs_shape:
            raise ValueError(f"observation shape must be {self.obs_shape}")
        i = self.cursor
        self.s[i] = t.s
        self.s_next[i] = t.s_next
        self.a[i] = t.a
        self.r[i] = t.r
        self.terminal[i] = t.terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, k: int) -> Transition:
        """``k``-th stored transition, oldest first."""
        if not 0 <= k < self.size:
            raise IndexError(k)
        i = (self.cursor - self.size + k) % self.capacity
        return Transition(self.s[i].copy(), int(self.a[i]), float(self.r[i]),
                          self.s_next[i].copy(), bool(self.terminal[i]))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Optional[Batch]:
        """Uniform draws with replacement, or ``None`` while too few transitions are stored."""
        if self.size < max(1, batch_size):
            return None
        idx = (self.cursor - self.size + rng.integers(0, self.size, size=batch_size)) % self.capacity
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.terminal[idx])


def push(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.push(transition)


def sample_minibatch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Optional[Batch]:
    return buffer.sample(batch_size, rng)


def td_targets(batch: Batch, target_params: nn.Params, arch: nn.NetworkArchitecture,
               gamma: float) -> np.ndarray:
    """``r + gamma * max_a' Q(s', a'; target)``, with no bootstrap after a terminal."""
    q_next, _ = nn.forward(target_params, arch, batch.s_next)
    bootstrap = np.where(batch.terminal, 0.0, q_next.max(axis=1))
    return batch.r + gamma * bootstrap


def loss_and_grads(batch: Batch, params: nn.Params, target_params: nn.Params,
                   arch: nn.NetworkArchitecture, gamma: float, reg: nn.RegularizationConfig,
                   rng: Optional[np.random.Generator] = None,
                   masks: Optional[nn.MaskSet] = None) -> tuple[float, nn.Grads]:
    """Mean squared TD error on the taken actions plus ``lambda * ||w||^2``.

    Fresh dropout masks are drawn from ``rng`` for the online pass unless
    ``masks`` is given.  Targets are constants for differentiation.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    target = td_targets(batch, target_params, arch, gamma)
    if masks is None and reg.uses_dropout:
        if rng is None:
            raise ValueError("dropout needs an rng for fresh masks")
        masks = nn.make_dropout_masks(arch, reg, rng, batch_size=n)
    q, cache = nn.forward(params, arch, batch.s, masks)
    rows = np.arange(n)
    diff = q[rows, batch.a] - target
    penalty, l2_grads = nn.l2_term(params, reg.lambda_l2)
    loss = float(np.mean(diff * diff) + penalty)
    if not math.isfinite(loss):
        raise nn.NonFiniteError(f"non-finite loss {loss}")
    dq = np.zeros_like(q)
    dq[rows, batch.a] = 2.0 * diff / n
    grads = nn.backward(cache, arch, params, dq)
    if reg.lambda_l2 > 0:
        grads = nn.add_grads(grads, l2_grads)
    return loss, grads


def sync_target(params: nn.Params) -> nn.Params:
    return nn.copy_params(params)


def clip_grads(grads: nn.Grads, max_norm: float) -> nn.Grads:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class LogRow:
    frame: int
    steps: int
    updates: int
    epsilon: float
    loss_mean: float  # nan when no update ran in the interval
    episode_return_mean: float  # nan when no episode completed
    episodes_completed: int

    def csv_fields(self) -> list[str]:
        def fmt(x):
            return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))
        return [str(self.frame), str(self.steps), str(self.updates), repr(float(self.epsilon)),
                fmt(self.loss_mean), fmt(self.episode_return_mean), str(self.episodes_completed)]


def write_train_csv(rows: list[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_COLUMNS)
        for row in rows:
            w.writerow(row.csv_fields())


@dataclass
class TrainResult:
    arch: nn.NetworkArchitecture
    log: list[LogRow]
    checkpoints: list[tuple[int, nn.Params]]  # (frame, parameters); frame 0 is the initial network
    params: nn.Params
    counters: dict[str, int]


def build_architecture(config: AgentConfig, obs_shape, action_count: int) -> nn.NetworkArchitecture:
    c, h, w = obs_shape
    return nn.PROFILES[config.network]((c * config.frame_stack, h, w), action_count)


def checkpoint_frames(total_frames: int, interval: int) -> list[int]:
    """Frames at which periodic checkpoints fall (the initial network is not counted)."""
    return list(range(interval, total_frames + 1, interval))


class FrameStack:
    def __init__(self, depth: int, obs_shape):
        self.c = obs_shape[0]
        self.data = np.zeros((depth * obs_shape[0], *obs_shape[1:]), dtype=np.uint8)

    def reset(self, obs) -> np.ndarray:
        for k in range(0, self.data.shape[0], self.c):
            self.data[k:k + self.c] = obs
        return self.data.copy()

    def push(self, obs) -> np.ndarray:
        self.data[:-self.c] = self.data[self.c:]
        self.data[-self.c:] = obs
        return self.data.copy()


def train(config: AgentConfig, flavour: Union[Flavour, str], total_frames: int, seed: int,
          checkpoint_interval: int, initial_params: Optional[nn.Params] = None,
          log_interval: Optional[int] = None,
          on_checkpoint: Optional[Callable[[int, nn.Params], Optional[bool]]] = None) -> TrainResult:
    """Train DQN on one flavour.

    Checkpoints fall at frame 0 and every ``checkpoint_interval`` frames.
    ``on_checkpoint(frame, params)`` may return True to stop early.
    """
    if isinstance(flavour, str):
        flavour = Flavour.parse(flavour)
    if total_frames < 0:
        raise ValueError("total_frames must be >= 0")
    if checkpoint_interval < 1 or checkpoint_interval % config.frame_skip:
        raise ValueError("checkpoint_interval must be a positive multiple of frame_skip")
    if total_frames % checkpoint_interval:
        raise ValueError("checkpoint_interval must divide total_frames")
    log_interval = checkpoint_interval if log_interval is None else log_interval
    if log_interval < 1 or log_interval % config.frame_skip:
        raise ValueError("log_interval must be a positive multiple of frame_skip")

    seeds = derive_seeds(seed)
    env = make_env(flavour, seeds["env"])
    wrapped = wrap_protocol(env, config.frame_skip, config.sticky_prob,
                            np.random.default_rng([seeds["env"], 1]))
    arch = build_architecture(config, env.observation_shape, env.action_count)
    if initial_params is None:
        params = nn.xavier_init(arch, np.random.default_rng(seeds["init"]), dtype=config.dtype)
    else:
        nn.check_params(initial_params, arch)
        params = {k: v.astype(config.dtype, copy=True) for k, v in initial_params.items()}
    target = sync_target(params)
    opt = nn.init_optimizer(params, config.step_size, config.rms_decay, config.rms_eps)
    rng = np.random.default_rng(seeds["agent"])
    stack = FrameStack(config.frame_stack, env.observation_shape)
    buffer = ReplayBuffer(config.buffer_capacity, arch.input_shape)
    schedule = config.schedule

    frames = steps = updates = grad_steps = 0
    checkpoints = [(0, nn.copy_params(params))]
    rows: list[LogRow] = []
    losses: list[float] = []
    returns: list[float] = []
    episode_return = 0.0
    state = stack.reset(wrapped.reset())
    stop = on_checkpoint is not None and bool(on_checkpoint(0, checkpoints[0][1]))

    while frames < total_frames and not stop:
        eps = epsilon_at(schedule, frames)
        if rng.random() < eps:
            action = int(rng.integers(arch.action_count))
        else:
            q, _ = nn.forward(params, arch, state)
            action = int(np.argmax(q))
        result = wrapped.step(action)
        next_state = stack.push(result.observation)
        buffer.push(Transition(state, action, result.reward, next_state, result.terminal))
        episode_return += result.reward
        state = next_state
        frames += config.frame_skip
        steps += 1
        if result.terminal:
            returns.append(episode_return)
            episode_return = 0.0
            state = stack.reset(wrapped.reset())

        if steps % config.learn_frequency == 0:
            updates += 1
            if len(buffer) >= config.warmup:
                batch = buffer.sample(config.batch_size, rng)
                loss, grads = loss_and_grads(batch, params, target, arch, config.gamma, config.reg, rng)
                if config.grad_clip is not None:
                    grads = clip_grads(grads, config.grad_clip)
                nn.optimizer_step(params, grads, opt)
                losses.append(loss)
                grad_steps += 1
                if grad_steps % config.target_sync_interval == 0:
                    target = sync_target(params)

        if frames % log_interval == 0:
            rows.append(LogRow(frames, steps, updates, epsilon_at(schedule, frames),
                               float(np.mean(losses)) if losses else math.nan,
                               float(np.mean(returns)) if returns else math.nan, len(returns)))
            losses, returns = [], []
        if frames % checkpoint_interval == 0:
            snapshot = nn.copy_params(params)
            checkpoints.append((frames, snapshot))
            if on_checkpoint is not None and on_checkpoint(frames, snapshot):
                stop = True

    counters = {"frames": frames, "steps": steps, "updates": updates, "gradient_steps": grad_steps,
                "target_syncs": grad_steps // config.target_sync_interval}
    return TrainResult(arch, rows, checkpoints, params, counters)
