"""Run directories, experiment plans and the work queue that executes them.

Every unit of work is a single training run on one flavour with one master
seed, described completely by a one-seed :class:`ExperimentConfig`.  A run
lives in ``<root>/runs/<run_id>/``::

    config.resolved        the one-seed config; ``train`` mode on it redoes the run
    train.csv
    eval/<flavour>.csv     every checkpoint evaluated on that flavour
    ckpt/<frame>.fbckpt
    DONE                   written last

A directory without ``DONE`` is incomplete; it is wiped and redone when
the run is scheduled again, and skipped when ``DONE`` is present.
"""

from __future__ import annotations

import os
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .. import nn_core as nn
from ..dqn_agent import train, write_train_csv
from ..env_suite import Flavour
from ..protocol import cross_flavour_curve, sweep_regularizers, write_eval_csv
from ..transfer import TransferScheme, finetune, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_config, serialize_config

DEFAULT_ROOT = "flavorbench-out"
DONE = "DONE"
FAILED = "FAILED"


def output_root(cli_out: Optional[str] = None) -> Path:
    """``--out`` wins, then ``FLAVORBENCH_OUT``, then ``./flavorbench-out``."""
    return Path(cli_out or os.environ.get("FLAVORBENCH_OUT") or DEFAULT_ROOT)


def flavour_file(flavour: Flavour) -> str:
    return f"{flavour.game}-{flavour.tag}.csv"


def ckpt_file(frame: int) -> str:
    return f"{frame}.fbckpt"


@dataclass(frozen=True)
class RunSpec:
    """One planned run: the group it reports under plus its one-seed config."""

    group: str
    config: ExperimentConfig

    @property
    def seed(self) -> int:
        return self.config.seeds[0]

    @property
    def run_id(self) -> str:
        return f"{self.config.run_id}-s{self.seed}"

    @property
    def frames(self) -> int:
        return self.config.total_frames


@dataclass
class RunOutcome:
    run_id: str
    status: str  # "done", "skipped" or "failed"
    error: str = ""


def run_dir(root: Path, run_id: str) -> Path:
    return Path(root) / "runs" / run_id


def is_complete(root: Path, run_id: str) -> bool:
    return (run_dir(root, run_id) / DONE).exists()


def final_checkpoint(root: Path, spec: RunSpec) -> Path:
    return run_dir(root, spec.run_id) / "ckpt" / ckpt_file(spec.frames)


def eval_flavours(config: ExperimentConfig) -> list[Flavour]:
    out = [config.flavour]
    out += [f for f in config.eval.target_flavours if f != config.flavour]
    return out


def execute_run(config: ExperimentConfig, root: Path) -> RunOutcome:
    """Train, checkpoint and evaluate one single-seed config under ``root``."""
    if len(config.seeds) != 1:
        raise ValueError("execute_run needs a single-seed config")
    spec = RunSpec("", config)
    out = run_dir(root, spec.run_id)
    if (out / DONE).exists():
        return RunOutcome(spec.run_id, "skipped")
    if out.exists():
        shutil.rmtree(out)
    (out / "ckpt").mkdir(parents=True)
    (out / "eval").mkdir()
    (out / "config.resolved").write_text(serialize_config(config))

    seed = spec.seed
    interval = config.eval.checkpoint_interval
    ckpt_meta = {"run_id": spec.run_id, "seed": seed, "flavour": str(config.flavour)}
    if config.transfer.source is None:
        result = train(config.agent, config.flavour, config.total_frames, seed, interval)
    else:
        result, meta = finetune(load_checkpoint(config.transfer.source), config.transfer.scheme,
                                config.flavour, config.agent, config.total_frames, seed, interval,
                                regularize=config.reg_enabled)
        meta["source"] = config.transfer.source
        ckpt_meta["transfer"] = meta
    for frame, params in result.checkpoints:
        save_checkpoint(params, result.arch, {**ckpt_meta, "frame": frame}, out / "ckpt" / ckpt_file(frame))
    write_train_csv(result.log, out / "train.csv")

    settings = config.eval_settings()
    for target in eval_flavours(config):
        curves = cross_flavour_curve({seed: result.checkpoints}, result.arch, target, settings)
        write_eval_csv(curves[0].results, config.flavour, out / "eval" / flavour_file(target))
    (out / DONE).write_text("")
    return RunOutcome(spec.run_id, "done")


def _execute_text(config_text: str, profile: str, root: str) -> RunOutcome:
    config = parse_config(config_text, profile)
    run_id = f"{config.run_id}-s{config.seeds[0]}"
    try:
        return execute_run(config, Path(root))
    except Exception:
        err = traceback.format_exc()
        out = run_dir(Path(root), run_id)
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED).write_text(err)
        return RunOutcome(run_id, "failed", err.strip().splitlines()[-1])


def execute_all(specs: list[RunSpec], root: Path, parallel: int = 1, log=print) -> list[RunOutcome]:
    """Run specs in order (or over ``parallel`` worker processes); failures do not stop the rest."""
    jobs = [(serialize_config(s.config), s.config.profile, str(root)) for s in specs]
    if parallel <= 1 or len(jobs) <= 1:
        outcomes = []
        for job in jobs:
            outcomes.append(_execute_text(*job))
            _log_outcome(outcomes[-1], log)
        return outcomes
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        outcomes = list(pool.map(_execute_text, *zip(*jobs)))
    for o in outcomes:
        _log_outcome(o, log)
    return outcomes


def _log_outcome(o: RunOutcome, log) -> None:
    if log is not None:
        log(f"{o.status:8s} {o.run_id}" + (f"  ({o.error})" if o.error else ""))


# plans ----------------------------------------------------------------------

def _one_seed(config: ExperimentConfig, seed: int, run_id: str, **flat) -> ExperimentConfig:
    return config.replace(**{"run.id": run_id, "run.seeds": (seed,), **flat})


def _reg_tag(reg: nn.RegularizationConfig) -> str:
    return f"l{reg.lambda_l2:g}-p{reg.p_conv:g}-{reg.p_fc:g}"


def _frames_tag(frames: int) -> str:
    return f"f{frames}"


def train_plan(config: ExperimentConfig) -> list[RunSpec]:
    """Baseline runs: the configured flavour, one run per seed."""
    return [RunSpec("train", _one_seed(config, s, config.run_id)) for s in config.seeds]


def source_specs(config: ExperimentConfig, regularized: bool) -> list[RunSpec]:
    arm = "source-reg" if regularized else "source"
    run_id = f"{config.run_id}-{arm}-{config.flavour.game}-{config.flavour.tag}-{_frames_tag(config.total_frames)}"
    return [RunSpec(arm, _one_seed(config, s, run_id, **{"reg.enabled": regularized, "transfer.source": None}))
            for s in config.seeds]


def scratch_specs(config: ExperimentConfig, target: Flavour, frames: int) -> list[RunSpec]:
    run_id = f"{config.run_id}-scratch-{target.game}-{target.tag}-{_frames_tag(frames)}"
    flat = {"env.flavour": target, "run.total_frames": frames, "reg.enabled": False,
            "transfer.source": None, "eval.target_flavours": (target,)}
    return [RunSpec(f"scratch:{target}", _one_seed(config, s, run_id, **flat)) for s in config.seeds]


def eval_plan(config: ExperimentConfig) -> list[RunSpec]:
    """Zero-shot and scratch runs behind the evaluation tables.

    Sources are trained with and without regularization on the configured
    flavour and evaluated on every target; each target also gets a scratch
    run of the same length.
    """
    plan = source_specs(config, False) + source_specs(config, True)
    for target in config.eval.target_flavours:
        plan += scratch_specs(config, target, config.total_frames)
    return plan


FINETUNE_ARMS = ("finetune", "finetune-reg", "conv3", "conv3fc1")


def finetune_arms(config: ExperimentConfig) -> dict[str, tuple[bool, TransferScheme, bool]]:
    """arm -> (source regularized, scheme, fine-tune regularized)."""
    reg_ft = config.transfer.finetune_regularized
    return {
        "finetune": (False, TransferScheme.FULL, False),
        "finetune-reg": (True, TransferScheme.FULL, reg_ft),
        "conv3": (True, TransferScheme.CONV3, reg_ft),
        "conv3fc1": (True, TransferScheme.CONV3FC1, reg_ft),
    }


def scratch_budgets(config: ExperimentConfig) -> tuple[int, int]:
    """Scratch is read at the largest fine-tune budget and at source plus that budget."""
    b = max(config.transfer.budgets)
    return b, config.total_frames + b


def finetune_plan(config: ExperimentConfig) -> tuple[list[RunSpec], list[RunSpec]]:
    """(sources, dependents).  Dependents read the sources' final checkpoints.

    With ``transfer.source`` set, the single given checkpoint is fine-tuned
    with ``transfer.scheme`` on each target; otherwise the four standard arms
    are run.  Fine-tunes run for the largest budget and are read off at each
    budget's checkpoint.  Every target also gets a scratch run, read off at
    :func:`scratch_budgets`.
    """
    frames = max(config.transfer.budgets)
    targets = config.eval.target_flavours
    dependents: list[RunSpec] = []
    sources: list[RunSpec] = []
    for target in targets:
        dependents += scratch_specs(config, target, scratch_budgets(config)[-1])
    base = {"run.total_frames": frames, "eval.target_flavours": ()}
    if config.transfer.source is not None:
        for target in targets:
            run_id = f"{config.run_id}-given-{config.transfer.scheme.value}-{target.game}-{target.tag}"
            flat = {**base, "env.flavour": target, "eval.target_flavours": (target,)}
            dependents += [RunSpec(f"given:{target}", _one_seed(config, s, run_id, **flat)) for s in config.seeds]
        return sources, dependents
    plain, reg = source_specs(config, False), source_specs(config, True)
    sources = plain + reg
    for arm, (src_reg, scheme, ft_reg) in finetune_arms(config).items():
        for target in targets:
            run_id = f"{config.run_id}-{arm}-{target.game}-{target.tag}-{_frames_tag(frames)}"
            for src in (reg if src_reg else plain):
                flat = {**base, "env.flavour": target, "eval.target_flavours": (target,),
                        "transfer.scheme": scheme, "reg.enabled": ft_reg}
                dependents.append(RunSpec(f"{arm}:{target}", _one_seed(config, src.seed, run_id, **flat)))
    return sources, dependents


def bind_sources(dependents: list[RunSpec], sources: list[RunSpec], root: Path) -> list[RunSpec]:
    """Point fine-tune runs at their source's final checkpoint (absolute path)."""
    by_seed = {}
    for s in sources:
        by_seed.setdefault((s.group, s.seed), s)
    out = []
    for d in dependents:
        arm = d.group.split(":")[0]
        if arm.startswith("scratch") or arm == "given":
            out.append(d)
            continue
        src_reg = finetune_arms(d.config)[arm][0]
        src = by_seed[("source-reg" if src_reg else "source", d.seed)]
        path = str(final_checkpoint(root, src).resolve())
        out.append(RunSpec(d.group, d.config.replace(**{"transfer.source": path})))
    return out


def sweep_plan(config: ExperimentConfig) -> list[RunSpec]:
    """One run per regularizer per seed on the configured flavour."""
    plan = []
    for reg in sweep_regularizers(config.sweep):
        run_id = f"{config.run_id}-sweep-{_reg_tag(reg)}"
        flat = {"reg.enabled": True, "reg.lambda_l2": reg.lambda_l2, "reg.p_conv": reg.p_conv,
                "reg.p_fc": reg.p_fc, "transfer.source": None}
        plan += [RunSpec(f"sweep:{_reg_tag(reg)}", _one_seed(config, s, run_id, **flat)) for s in config.seeds]
    return plan
