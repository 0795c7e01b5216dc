"""Tables and curve files built from completed run directories.

Every table is written twice, as aligned plain text and as CSV.  Cells are
``mean (std)`` over seeds of each seed's mean evaluation return; runs
without ``DONE`` count as absent and a cell with no runs reads ``missing``.
Rows where every cell is missing are dropped, so an empty artifact set
gives header-only files.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

from ..env_suite import Flavour
from ..protocol import Cell, aggregate_runs, experience_budget, read_eval_csv, smooth, sweep_regularizers
from .config import ExperimentConfig
from .runner import (RunSpec, eval_flavours, eval_plan, finetune_plan, flavour_file, is_complete,
                     run_dir, scratch_budgets, sweep_plan, train_plan, _reg_tag)

LAYER_COLUMNS = {"conv3": "3Conv", "conv3fc1": "3Conv+1FC", "finetune-reg": "Entire"}


def seed_returns(root: Path, specs: Sequence[RunSpec], target: Flavour, frame: int) -> list[Optional[float]]:
    """Per-seed mean return at ``frame`` on ``target``; ``None`` where absent."""
    out = []
    for spec in specs:
        path = run_dir(root, spec.run_id) / "eval" / flavour_file(target)
        value = None
        if is_complete(root, spec.run_id) and path.exists():
            for row in read_eval_csv(path):
                if int(row["checkpoint_frame"]) == frame:
                    value = float(row["return_mean"])
        out.append(value)
    return out


def cell(root: Path, specs: Sequence[RunSpec], target: Flavour, frame: int) -> Cell:
    return aggregate_runs(seed_returns(root, specs, target, frame))


def _groups(specs: Sequence[RunSpec]) -> dict[str, list[RunSpec]]:
    out: dict[str, list[RunSpec]] = defaultdict(list)
    for s in specs:
        out[s.group].append(s)
    return out


def write_table(path_stem: Path, header: Sequence[str], rows: Sequence[tuple[str, Sequence[Cell]]]) -> list[Path]:
    """``<stem>.csv`` plus aligned ``<stem>.txt``; all-missing rows are dropped."""
    kept = [(label, cells) for label, cells in rows if any(not c.missing for c in cells)]
    path_stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = path_stem.with_suffix(".csv"), path_stem.with_suffix(".txt")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for label, cells in kept:
            w.writerow([label] + [c.format() for c in cells])
    grid = [list(header)] + [[label] + [c.format() for c in cells] for label, cells in kept]
    widths = [max(len(r[i]) for r in grid) for i in range(len(header))]
    lines = ["  ".join(v.ljust(wd) for v, wd in zip(r, widths)).rstrip() for r in grid]
    txt_path.write_text("\n".join(lines) + "\n")
    return [csv_path, txt_path]


def write_curves(root: Path, out_dir: Path, group: str, specs: Sequence[RunSpec], target: Flavour,
                 window: int) -> Path:
    """Seed-averaged learning curve: raw mean and std plus the trailing-smoothed mean."""
    per_frame: dict[int, list[float]] = defaultdict(list)
    for spec in specs:
        path = run_dir(root, spec.run_id) / "eval" / flavour_file(target)
        if is_complete(root, spec.run_id) and path.exists():
            for row in read_eval_csv(path):
                per_frame[int(row["checkpoint_frame"])].append(float(row["return_mean"]))
    frames = sorted(per_frame)
    cells = [aggregate_runs(per_frame[f]) for f in frames]
    smoothed = smooth([c.mean for c in cells], window)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{group.replace(':', '_')}__{target.game}-{target.tag}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("frame", "return_mean", "return_std", "seeds", f"return_mean_smoothed_w{window}"))
        for f, c, s in zip(frames, cells, smoothed):
            w.writerow((f, repr(c.mean), repr(c.std), c.n, repr(float(s))))
    return path


def report_dir(root: Path, config: ExperimentConfig) -> Path:
    return Path(root) / "reports" / config.run_id


def _all_curves(root: Path, out: Path, specs: Sequence[RunSpec], window: int) -> list[Path]:
    files = []
    for group, members in _groups(specs).items():
        for target in eval_flavours(members[0].config):
            files.append(write_curves(root, out / "curves", group, members, target, window))
    return files


def train_report(root: Path, config: ExperimentConfig) -> list[Path]:
    specs = train_plan(config)
    out = report_dir(root, config)
    rows = [(str(t), [cell(root, specs, t, config.total_frames)]) for t in eval_flavours(config)]
    files = write_table(out / "baseline", ("flavour", "Return"), rows)
    return files + _all_curves(root, out, specs, config.eval.smoothing_window)


def eval_report(root: Path, config: ExperimentConfig) -> list[Path]:
    """Zero-shot against scratch, and zero-shot with against without regularization."""
    specs = eval_plan(config)
    groups = _groups(specs)
    out = report_dir(root, config)
    frames = config.total_frames
    t2, t3 = [], []
    for target in config.eval.target_flavours:
        zero = cell(root, groups["source"], target, frames)
        t2.append((str(target), [zero, cell(root, groups[f"scratch:{target}"], target, frames)]))
        t3.append((str(target), [zero, cell(root, groups["source-reg"], target, frames)]))
    files = write_table(out / "table2", ("flavour", "Evaluation", "Learn Scratch"), t2)
    files += write_table(out / "table3", ("flavour", "Evaluation", "Eval. with Regularization"), t3)
    return files + _all_curves(root, out, specs, config.eval.smoothing_window)


def finetune_report(root: Path, config: ExperimentConfig) -> list[Path]:
    """Fine-tuning arms at every budget, the layer comparison and the frame budget."""
    sources, dependents = finetune_plan(config)
    groups = _groups(dependents)
    out = report_dir(root, config)
    budgets = config.transfer.budgets
    files = []
    targets = config.eval.target_flavours
    if config.transfer.source is None:
        arms = (("finetune", "Fine-tuning"), ("finetune-reg", "Regularized Fine-tuning"), ("scratch", "Scratch"))
    else:
        arms = (("given", f"Fine-tuning ({config.transfer.scheme.value})"), ("scratch", "Scratch"))
    columns = [(arm, name, b) for arm, name in arms for b in (scratch_budgets(config) if arm == "scratch" else budgets)]
    header = ["flavour"] + [f"{name} @{b}" for _, name, b in columns]
    rows = [(str(t), [cell(root, groups[f"{arm}:{t}"], t, b) for arm, _, b in columns]) for t in targets]
    files += write_table(out / "table4", header, rows)
    if config.transfer.source is None:
        last = max(budgets)
        rows = [(str(t), [cell(root, groups[f"{arm}:{t}"], t, last) for arm in LAYER_COLUMNS]) for t in targets]
        files += write_table(out / "layers", ["flavour"] + list(LAYER_COLUMNS.values()), rows)
    budget = experience_budget(config.total_frames if config.transfer.source is None else 0,
                               [max(budgets)] * len(targets), [scratch_budgets(config)[-1]] * len(targets))
    path = out / "budget.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"scratch_total_frames {budget.scratch_total}\n"
                    f"finetune_total_frames {budget.finetune_total}\n")
    files.append(path)
    return files + _all_curves(root, out, sources + dependents, config.eval.smoothing_window)


def sweep_report(root: Path, config: ExperimentConfig) -> list[Path]:
    specs = sweep_plan(config)
    groups = _groups(specs)
    out = report_dir(root, config)
    flavours = eval_flavours(config)
    rows = []
    for reg in sweep_regularizers(config.sweep):
        members = groups[f"sweep:{_reg_tag(reg)}"]
        rows.append((f"lambda={reg.lambda_l2:g} p=({reg.p_conv:g},{reg.p_fc:g})",
                     [cell(root, members, t, config.total_frames) for t in flavours]))
    files = write_table(out / "sweep", ["regularizer"] + [str(t) for t in flavours], rows)
    return files + _all_curves(root, out, specs, config.eval.smoothing_window)


REPORTS = {"train": train_report, "eval": eval_report, "finetune": finetune_report, "sweep": sweep_report}


def emit_report(root: Path, config: ExperimentConfig, layouts: Sequence[str] = tuple(REPORTS)) -> list[Path]:
    """Write the named report layouts from whatever complete runs exist under ``root``."""
    files = []
    for name in layouts:
        files += REPORTS[name](Path(root), config)
    return files

