"""``flavorbench <mode> --config <path> [--profile paper-parity|desk] [--seed N] [--out DIR] [--parallel K]``

Exit status: 0 when every run succeeded, 1 when any run or check failed,
2 for configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import nn_core as nn
from ..dqn_agent import derive_seeds
from ..env_suite import (GAMES, Flavour, UnknownFlavourError, best_action_baseline, enumerate_flavours,
                         export_tabular_mdp, make_env, optimal_return_oracle, wrap_protocol)
from ..transfer import TransferScheme
from .config import PROFILE_NAMES, ConfigError, ExperimentConfig, load_config, parse_config
from .report import emit_report
from .runner import (bind_sources, eval_plan, execute_all, finetune_plan, output_root, sweep_plan,
                     train_plan)

MODES = ("train", "eval", "finetune", "sweep", "report", "oracle", "gradcheck", "flavours")
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flavorbench", description="Flavour-generalization experiments with DQN.")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="config file; defaults to the profile's values")
    p.add_argument("--profile", choices=PROFILE_NAMES, default="desk")
    p.add_argument("--seed", type=int, help="run only this master seed")
    p.add_argument("--out", help="output root (default: $FLAVORBENCH_OUT or ./flavorbench-out)")
    p.add_argument("--parallel", type=int, help="worker processes for independent runs")
    p.add_argument("--source", help="finetune: checkpoint to start from")
    p.add_argument("--scheme", choices=[s.value for s in TransferScheme], help="finetune: layers to transfer")
    p.add_argument("--flavour", help="train: flavour to train on; finetune: the one target flavour")
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config, args.profile) if args.config else parse_config("", args.profile)
    flat = {}
    if args.seed is not None:
        flat["run.seeds"] = (args.seed,)
    if args.parallel is not None:
        flat["run.parallel"] = args.parallel
    if args.source is not None:
        if not Path(args.source).is_file():
            raise ConfigError(f"no such checkpoint {args.source!r}", "transfer.source")
        flat["transfer.source"] = str(Path(args.source).resolve())
    if args.scheme is not None:
        flat["transfer.scheme"] = TransferScheme(args.scheme)
    if args.flavour is not None:
        try:
            flavour = Flavour.parse(args.flavour)
        except UnknownFlavourError as e:
            raise ConfigError(str(e), "env.flavour") from None
        if args.mode == "finetune":
            flat["eval.target_flavours"] = (flavour,)
        else:
            flat["env.flavour"] = flavour
    return config.replace(**flat) if flat else config


def _failed(outcomes) -> bool:
    return any(o.status == "failed" for o in outcomes)


def run_mode(mode: str, config: ExperimentConfig, root: Path, log=print) -> int:
    """Execute one mode; returns the exit status."""
    parallel = config.parallel
    if mode == "train":
        failed = _failed(execute_all(train_plan(config), root, parallel, log))
        layouts = ["train"]
    elif mode == "eval":
        failed = _failed(execute_all(eval_plan(config), root, parallel, log))
        layouts = ["eval"]
    elif mode == "finetune":
        sources, dependents = finetune_plan(config)
        failed = _failed(execute_all(sources, root, parallel, log))
        failed |= _failed(execute_all(bind_sources(dependents, sources, root), root, parallel, log))
        layouts = ["finetune"]
    elif mode == "sweep":
        failed = _failed(execute_all(sweep_plan(config), root, parallel, log))
        layouts = ["sweep"]
    elif mode == "report":
        failed, layouts = False, ["train", "eval", "finetune", "sweep"]
    elif mode == "oracle":
        return oracle_mode(config, root, log)
    elif mode == "gradcheck":
        return gradcheck_mode(config, log)
    elif mode == "flavours":
        for game in GAMES:
            for f in enumerate_flavours(game):
                log(str(f))
        return EXIT_OK
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for path in emit_report(root, config, layouts):
        log(f"wrote    {path}")
    return EXIT_FAILED if failed else EXIT_OK


def oracle_mode(config: ExperimentConfig, root: Path, log=print) -> int:
    """Optimal expected return (tabular flavours only) and best constant action, per flavour and seed.

    Both use sticky actions at the configured rate and no frame skip; the
    constant-action score is a mean over 10 episodes.
    """
    sticky = config.agent.sticky_prob
    rows = []
    for f in enumerate_flavours(config.flavour.game):
        for seed in config.seeds:
            env = make_env(f, derive_seeds(seed)["env"])
            wrapped = wrap_protocol(env, 1, sticky, np.random.default_rng(derive_seeds(seed)["eval"]))
            best, action, _ = best_action_baseline(wrapped, episodes=10)
            if f.game == "mini_crossing":
                opt = optimal_return_oracle(export_tabular_mdp(env, sticky), env.spec.frame_limit)
            else:
                opt = float("nan")
            rows.append((str(f), seed, opt, best, action))
            log(f"{f}  seed {seed}  optimal {opt:.3f}  best-constant {best:.1f} (action {action})")
    out = root / "reports" / config.run_id
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "oracle.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("flavour", "seed", "optimal_return", "best_constant_return", "best_constant_action"))
        for r in rows:
            w.writerow((r[0], r[1], "" if np.isnan(r[2]) else repr(r[2]), repr(r[3]), r[4]))
    log(f"wrote    {out / 'oracle.csv'}")
    return EXIT_OK


def gradcheck_mode(config: ExperimentConfig, log=print) -> int:
    """Finite-difference check of every network profile, with and without L2 and dropout."""
    ok = True
    seed = config.seeds[0]
    cases = [("micro_fc", nn.micro_fc_architecture()), ("micro_conv", nn.micro_conv_architecture()),
             ("default", nn.default_architecture((6, 7, 9), 3))]
    for name, arch in cases:
        for lam in (0.0, 1e-3):
            for reg in (nn.RegularizationConfig(lam), nn.RegularizationConfig(lam, 0.2, 0.4)):
                rng = np.random.default_rng(seed)
                params = nn.xavier_init(arch, rng)
                x = rng.random((4, *arch.input_shape))
                target = rng.normal(size=(4, arch.action_count))
                masks = nn.make_dropout_masks(arch, reg, rng, batch_size=4) if reg.uses_dropout else None
                report = nn.gradient_check(arch, params, x, target, reg, masks=masks, rng=rng)
                ok &= report.passed
                log(f"{name:10s} lambda={lam:g} dropout={'on' if masks else 'off'}  {report}")
    return EXIT_OK if ok else EXIT_FAILED


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
    except (ConfigError, OSError) as e:
        print(f"flavorbench: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return run_mode(args.mode, config, output_root(args.out))


if __name__ == "__main__":
    sys.exit(main())
