"""Cross-flavour policy evaluation, learning curves, aggregation and sweep bookkeeping."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import nn_core as nn
from .dqn_agent import FrameStack, derive_seeds
from .env_suite import Flavour, make_env, wrap_protocol

EVAL_COLUMNS = ("checkpoint_frame", "source_game", "source_flavour", "target_game", "target_flavour",
                "seed", "episodes", "eval_epsilon", "return_mean", "return_std")

PAPER_LAMBDAS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
PAPER_DROPOUTS = ((0.05, 0.1), (0.1, 0.2), (0.15, 0.3), (0.2, 0.4), (0.25, 0.5))


@dataclass(frozen=True)
class EvalSettings:
    """How evaluation episodes are run; sticky actions stay on by default."""

    episodes: int = 30
    epsilon: float = 0.01
    frame_skip: int = 1
    sticky_prob: float = 0.25
    frame_stack: int = 2

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("eval epsilon must lie in [0, 1]")


@dataclass
class EvalResult:
    mean: float
    std: float
    episodes: int
    epsilon: float
    flavour: Flavour
    checkpoint_frame: int
    seed: int
    returns: list[float] = field(default_factory=list, repr=False)
    sticky_actions: bool = True


def evaluate_policy(params: nn.Params, arch: nn.NetworkArchitecture, flavour: Union[Flavour, str],
                    episodes: int, eval_epsilon: float, seed: int,
                    settings: Optional[EvalSettings] = None, checkpoint_frame: int = 0) -> EvalResult:
    """Mean and population std of undiscounted returns of the epsilon-greedy policy.

    Dropout is off.  The environment layout comes from ``seed``'s env stream,
    i.e. the same layout a training run with master seed ``seed`` sees; the
    sticky-action and exploration draws come from its eval stream.
    """
    if isinstance(flavour, str):
        flavour = Flavour.parse(flavour)
    settings = settings or EvalSettings()
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = derive_seeds(seed)
    env = make_env(flavour, seeds["env"])
    rng = np.random.default_rng(seeds["eval"])
    wrapped = wrap_protocol(env, settings.frame_skip, settings.sticky_prob, np.random.default_rng([seeds["eval"], 1]))
    stack = FrameStack(settings.frame_stack, env.observation_shape)
    returns = []
    for _ in range(episodes):
        state = stack.reset(wrapped.reset())
        total = 0.0
        while True:
            if rng.random() < eval_epsilon:
                action = int(rng.integers(arch.action_count))
            else:
                q, _ = nn.forward(params, arch, state)
                action = int(np.argmax(q))
            result = wrapped.step(action)
            total += result.reward
            if result.terminal:
                break
            state = stack.push(result.observation)
        returns.append(total)
    r = np.asarray(returns)
    return EvalResult(float(r.mean()), float(r.std()), episodes, eval_epsilon, flavour,
                      checkpoint_frame, seed, returns, settings.sticky_prob > 0)


class Cell(NamedTuple):
    mean: float
    std: float
    n: int

    @property
    def missing(self) -> bool:
        return self.n == 0

    def format(self, digits: int = 1) -> str:
        if self.missing:
            return "missing"
        return f"{self.mean:.{digits}f} ({self.std:.{digits}f})"


def aggregate_runs(values: Iterable[Optional[float]]) -> Cell:
    """Across-seed mean and population std; ``None`` entries are dropped, no entries gives a missing cell."""
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return Cell(math.nan, math.nan, 0)
    return Cell(float(v.mean()), float(v.std()), int(v.size))


def direct_policy_evaluation(final_params: Mapping[int, Optional[nn.Params]], arch: nn.NetworkArchitecture,
                             target_flavours: Sequence[Union[Flavour, str]],
                             settings: Optional[EvalSettings] = None,
                             checkpoint_frame: int = 0) -> tuple[dict[str, Cell], list[EvalResult]]:
    """Evaluate each seed's final network on every target flavour.

    ``final_params`` maps seed to parameters (``None`` when that seed's
    checkpoint is missing).  Returns one aggregated cell per target flavour
    and the per-seed results.
    """
    settings = settings or EvalSettings()
    table, results = {}, []
    for target in target_flavours:
        target = Flavour.parse(target) if isinstance(target, str) else target
        per_seed = []
        for seed, params in sorted(final_params.items()):
            if params is None:
                per_seed.append(None)
                continue
            res = evaluate_policy(params, arch, target, settings.episodes, settings.epsilon, seed,
                                  settings, checkpoint_frame)
            results.append(res)
            per_seed.append(res.mean)
        table[str(target)] = aggregate_runs(per_seed)
    return table, results


@dataclass
class EvalCurve:
    seed: int
    flavour: Flavour
    results: list[EvalResult]

    @property
    def frames(self) -> np.ndarray:
        return np.array([r.checkpoint_frame for r in self.results])

    @property
    def means(self) -> np.ndarray:
        return np.array([r.mean for r in self.results])


def _check_spacing(frames: Sequence[int]) -> None:
    if len(frames) < 2:
        return
    gaps = np.diff(frames)
    if np.any(gaps <= 0) or np.any(gaps != gaps[0]):
        raise ValueError(f"checkpoints must be evenly spaced and increasing, got frames {list(frames)}")


def cross_flavour_curve(checkpoints: Mapping[int, Sequence[tuple[int, nn.Params]]],
                        arch: nn.NetworkArchitecture, target_flavour: Union[Flavour, str],
                        settings: Optional[EvalSettings] = None) -> list[EvalCurve]:
    """One evaluation per checkpoint per seed on ``target_flavour``."""
    settings = settings or EvalSettings()
    target = Flavour.parse(target_flavour) if isinstance(target_flavour, str) else target_flavour
    curves = []
    for seed, ckpts in sorted(checkpoints.items()):
        frames = [f for f, _ in ckpts]
        _check_spacing(frames)
        results = [evaluate_policy(p, arch, target, settings.episodes, settings.epsilon, seed, settings, f)
                   for f, p in ckpts]
        curves.append(EvalCurve(seed, target, results))
    return curves


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what is available."""
    if window < 1:
        raise ValueError("window must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    if window == 1 or v.size == 0:
        return v.copy()
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(v.size)
    lo = np.maximum(0, idx - window + 1)
    return (c[idx + 1] - c[lo]) / (idx + 1 - lo)


@dataclass(frozen=True)
class SweepSpec:
    lambdas: tuple[float, ...] = PAPER_LAMBDAS
    dropouts: tuple[tuple[float, float], ...] = PAPER_DROPOUTS
    mode: str = "all"

    def __post_init__(self):
        if self.mode not in ("lambda_only", "dropout_only", "cartesian", "all"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        if not self.lambdas or not self.dropouts:
            raise ValueError("sweep sets must be nonempty")


def sweep_regularizers(spec: SweepSpec) -> list[nn.RegularizationConfig]:
    configs = set()
    if spec.mode in ("lambda_only", "all"):
        configs.update((lam, 0.0, 0.0) for lam in spec.lambdas)
    if spec.mode in ("dropout_only", "all"):
        configs.update((0.0, pc, pf) for pc, pf in spec.dropouts)
    if spec.mode in ("cartesian", "all"):
        configs.update((lam, pc, pf) for lam in spec.lambdas for pc, pf in spec.dropouts)
    return [nn.RegularizationConfig(*c) for c in sorted(configs)]


def generate_sweep(spec: SweepSpec, base_config):
    """Copies of ``base_config`` (any dataclass with a ``reg`` field), one per regularizer."""
    return [dataclasses.replace(base_config, reg=reg) for reg in sweep_regularizers(spec)]


@dataclass(frozen=True)
class FrameAccounting:
    frames: int
    steps: int
    updates: int
    frame_skip: int
    learn_frequency: int


def frame_accounting(frames: int, frame_skip: int, learn_frequency: int) -> FrameAccounting:
    if frame_skip < 1 or learn_frequency < 1 or frames < 0:
        raise ValueError("need frames >= 0 and frame_skip, learn_frequency >= 1")
    steps = frames // frame_skip
    return FrameAccounting(frames, steps, steps // learn_frequency, frame_skip, learn_frequency)


@dataclass(frozen=True)
class ExperienceBudget:
    scratch_total: int
    finetune_total: int


def experience_budget(source_frames: int, finetune_frames: Sequence[int],
                      scratch_frames: Sequence[int]) -> ExperienceBudget:
    """Total frames consumed by scratch runs versus one shared source plus fine-tunes."""
    return ExperienceBudget(int(sum(scratch_frames)), int(source_frames + sum(finetune_frames)))


def write_eval_csv(results: Iterable[EvalResult], source: Flavour, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in results:
            w.writerow([r.checkpoint_frame, source.game, source.tag, r.flavour.game, r.flavour.tag,
                        r.seed, r.episodes, repr(float(r.epsilon)), repr(r.mean), repr(r.std)])


def read_eval_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
