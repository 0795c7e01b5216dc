"""Experiment configuration: a small sectioned ``key = value`` format.

Example::

    # comments run to end of line
    [run]
    id = freeway-like
    seeds = 0, 1, 2

    [agent]
    gamma = 0.99

    # a dotted key may also appear outside its section
    eval.episodes = 30

Lists are comma separated; dropout pairs are written ``p_conv/p_fc``; ``none``
clears an optional value.  Unknown keys, malformed values and constraint
violations raise :class:`ConfigError` carrying the key path and line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from ..dqn_agent import AgentConfig
from ..env_suite import Flavour, UnknownFlavourError
from ..nn_core import RegularizationConfig
from ..protocol import PAPER_DROPOUTS, PAPER_LAMBDAS, EvalSettings, SweepSpec
from ..transfer import TransferScheme

SECTIONS = ("run", "env", "agent", "reg", "eval", "transfer", "sweep")
PROFILE_NAMES = ("desk", "paper-parity")


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if key:
            where.append(f"key {key}")
        if line:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


# value codecs -------------------------------------------------------------

def _split(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional(conv):
    def parse(text: str):
        return None if text.lower() == "none" else conv(text)
    return parse


def _pairs(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for item in _split(text):
        a, _, b = item.partition("/")
        if not b:
            raise ValueError(f"dropout pair {item!r} must look like p_conv/p_fc")
        out.append((float(a), float(b)))
    return tuple(out)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, TransferScheme):
        return value.value
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{a!r}/{b!r}" for a, b in value)
        return ", ".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    check: Optional[Callable[[Any], bool]] = None
    rule: str = ""


def _ge(n):
    return lambda v: v >= n


def _unit(v):
    return 0.0 <= v <= 1.0


def _rate(v):
    return 0.0 <= v < 1.0


FIELDS: dict[str, Field] = {
    "run.id": Field(str, lambda v: bool(v) and "/" not in v, "nonempty, no '/'"),
    "run.seeds": Field(lambda t: tuple(int(x) for x in _split(t)), lambda v: len(v) > 0, "at least one seed"),
    "run.total_frames": Field(int, _ge(0), ">= 0"),
    "run.precision": Field(str, lambda v: v in ("float64", "float32"), "float64 or float32"),
    "run.parallel": Field(int, _ge(1), ">= 1"),
    "env.flavour": Field(Flavour.parse),
    "env.frame_skip": Field(int, _ge(1), ">= 1"),
    "env.sticky_prob": Field(float, _unit, "in [0, 1]"),
    "env.frame_stack": Field(int, _ge(1), ">= 1"),
    "agent.gamma": Field(float, lambda v: 0.0 <= v < 1.0, "0 <= gamma < 1"),
    "agent.step_size": Field(float, lambda v: v > 0, "> 0"),
    "agent.batch_size": Field(int, _ge(1), ">= 1"),
    "agent.learn_frequency": Field(int, _ge(1), ">= 1"),
    "agent.target_sync_interval": Field(int, _ge(1), ">= 1"),
    "agent.buffer_capacity": Field(int, _ge(1), ">= 1"),
    "agent.learn_start": Field(_optional(int), lambda v: v is None or v >= 1, ">= 1 or none"),
    "agent.eps_initial": Field(float, _unit, "in [0, 1]"),
    "agent.eps_final": Field(float, _unit, "in [0, 1]"),
    "agent.eps_decay_frames": Field(int, _ge(1), ">= 1"),
    "agent.rms_decay": Field(float, _rate, "in [0, 1)"),
    "agent.rms_eps": Field(float, lambda v: v > 0, "> 0"),
    "agent.grad_clip": Field(_optional(float), lambda v: v is None or v > 0, "> 0 or none"),
    "agent.network": Field(str, lambda v: v in ("default", "micro_fc", "micro_conv"), "a known profile"),
    "reg.enabled": Field(_bool),
    "reg.lambda_l2": Field(float, _ge(0.0), ">= 0"),
    "reg.p_conv": Field(float, _rate, "in [0, 1)"),
    "reg.p_fc": Field(float, _rate, "in [0, 1)"),
    "reg.finetune_active": Field(_bool),
    "eval.episodes": Field(int, _ge(1), ">= 1"),
    "eval.epsilon": Field(float, _unit, "in [0, 1]"),
    "eval.checkpoint_interval": Field(int, _ge(1), ">= 1"),
    "eval.target_flavours": Field(lambda t: tuple(Flavour.parse(x) for x in _split(t))),
    "eval.smoothing_window": Field(int, _ge(1), ">= 1"),
    "transfer.source": Field(_optional(str)),
    "transfer.scheme": Field(TransferScheme),
    "transfer.budgets": Field(lambda t: tuple(int(x) for x in _split(t)),
                              lambda v: len(v) >= 1 and min(v) >= 1, "positive frame counts"),
    "sweep.lambdas": Field(lambda t: tuple(float(x) for x in _split(t)),
                           lambda v: len(v) > 0 and min(v) >= 0, "nonempty, >= 0"),
    "sweep.dropouts": Field(_pairs, lambda v: len(v) > 0 and all(_rate(a) and _rate(b) for a, b in v),
                            "nonempty pairs in [0, 1)"),
    "sweep.mode": Field(str, lambda v: v in ("lambda_only", "dropout_only", "cartesian", "all"),
                        "lambda_only, dropout_only, cartesian or all"),
}

_COMMON = {
    "run.id": "experiment",
    "run.precision": "float64",
    "run.parallel": 1,
    "env.flavour": Flavour("mini_crossing", 0, 0),
    "env.sticky_prob": 0.25,
    "env.frame_stack": 2,
    "agent.gamma": 0.99,
    "agent.step_size": 0.00025,
    "agent.batch_size": 32,
    "agent.learn_frequency": 4,
    "agent.learn_start": None,
    "agent.eps_initial": 1.0,
    "agent.eps_final": 0.01,
    "agent.rms_decay": 0.95,
    "agent.rms_eps": 1e-8,
    "agent.grad_clip": None,
    "agent.network": "default",
    "reg.enabled": False,
    "reg.lambda_l2": 1e-4,
    "reg.p_conv": 0.05,
    "reg.p_fc": 0.1,
    "reg.finetune_active": True,
    "eval.epsilon": 0.01,
    "eval.target_flavours": (Flavour("mini_crossing", 1, 0), Flavour("mini_crossing", 1, 1),
                             Flavour("mini_crossing", 4, 0)),
    "eval.smoothing_window": 2,
    "transfer.source": None,
    "transfer.scheme": TransferScheme.FULL,
    "sweep.lambdas": PAPER_LAMBDAS,
    "sweep.dropouts": PAPER_DROPOUTS,
    "sweep.mode": "all",
}

PROFILES: dict[str, dict[str, Any]] = {
    "paper-parity": {
        **_COMMON,
        "run.seeds": (0, 1, 2, 3, 4),
        "run.total_frames": 50_000_000,
        "env.frame_skip": 5,
        "agent.target_sync_interval": 10_000,
        "agent.buffer_capacity": 1_000_000,
        "agent.eps_decay_frames": 1_000_000,
        "eval.episodes": 100,
        "eval.checkpoint_interval": 500_000,
        "transfer.budgets": (10_000_000, 50_000_000),
    },
    "desk": {
        **_COMMON,
        "run.seeds": (0, 1, 2),
        "run.total_frames": 100_000,
        "env.frame_skip": 1,
        "agent.target_sync_interval": 1000,
        "agent.buffer_capacity": 50_000,
        "agent.eps_decay_frames": 50_000,
        "eval.episodes": 30,
        "eval.checkpoint_interval": 10_000,
        "transfer.budgets": (20_000, 50_000),
    },
}

assert all(set(p) == set(FIELDS) for p in PROFILES.values())


@dataclass(frozen=True)
class EvalConfig:
    episodes: int
    epsilon: float
    checkpoint_interval: int
    target_flavours: tuple[Flavour, ...]
    smoothing_window: int


@dataclass(frozen=True)
class TransferConfig:
    source: Optional[str]
    scheme: TransferScheme
    budgets: tuple[int, ...]
    finetune_regularized: bool


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str
    profile: str
    seeds: tuple[int, ...]
    total_frames: int
    flavour: Flavour
    agent: AgentConfig
    reg: RegularizationConfig
    reg_enabled: bool
    eval: EvalConfig
    transfer: TransferConfig
    sweep: SweepSpec
    parallel: int = 1
    values: dict = field(default_factory=dict, compare=False, repr=False)

    def eval_settings(self) -> EvalSettings:
        return EvalSettings(self.eval.episodes, self.eval.epsilon, self.agent.frame_skip,
                            self.agent.sticky_prob, self.agent.frame_stack)

    def agent_with(self, regularized: bool) -> AgentConfig:
        return dataclasses.replace(self.agent, reg=self.reg if regularized else RegularizationConfig())

    def replace(self, **flat) -> "ExperimentConfig":
        """Copy with some flat ``section.key`` values changed, revalidated."""
        values = dict(self.values)
        for key, value in flat.items():
            key = key.replace("__", ".")
            if key not in FIELDS:
                raise ConfigError("unknown key", key)
            values[key] = value
        return build_config(values, self.profile)


def _check(key: str, value, line: Optional[int] = None) -> None:
    spec = FIELDS[key]
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"value {_fmt(value)!r} violates constraint ({spec.rule})", key, line)


def build_config(values: dict[str, Any], profile: str, lines: Optional[dict[str, int]] = None) -> ExperimentConfig:
    lines = lines or {}
    for key, value in values.items():
        _check(key, value, lines.get(key))
    v = values
    if v["agent.eps_final"] > v["agent.eps_initial"]:
        raise ConfigError("eps_final must not exceed eps_initial", "agent.eps_final", lines.get("agent.eps_final"))
    if v["run.total_frames"] % v["eval.checkpoint_interval"]:
        raise ConfigError("checkpoint_interval must divide run.total_frames", "eval.checkpoint_interval",
                          lines.get("eval.checkpoint_interval"))
    if v["eval.checkpoint_interval"] % v["env.frame_skip"]:
        raise ConfigError("checkpoint_interval must be a multiple of env.frame_skip", "eval.checkpoint_interval",
                          lines.get("eval.checkpoint_interval"))
    for target in v["eval.target_flavours"]:
        if target.game != v["env.flavour"].game:
            raise ConfigError(f"target {target} is not a flavour of {v['env.flavour'].game}",
                              "eval.target_flavours", lines.get("eval.target_flavours"))
    for b in v["transfer.budgets"]:
        if b % v["eval.checkpoint_interval"]:
            raise ConfigError("budgets must be multiples of eval.checkpoint_interval", "transfer.budgets",
                              lines.get("transfer.budgets"))
    reg = RegularizationConfig(v["reg.lambda_l2"], v["reg.p_conv"], v["reg.p_fc"])
    agent = AgentConfig(
        gamma=v["agent.gamma"], step_size=v["agent.step_size"], batch_size=v["agent.batch_size"],
        learn_frequency=v["agent.learn_frequency"], target_sync_interval=v["agent.target_sync_interval"],
        frame_stack=v["env.frame_stack"], buffer_capacity=v["agent.buffer_capacity"],
        learn_start=v["agent.learn_start"], eps_initial=v["agent.eps_initial"], eps_final=v["agent.eps_final"],
        eps_decay_frames=v["agent.eps_decay_frames"], rms_decay=v["agent.rms_decay"], rms_eps=v["agent.rms_eps"],
        grad_clip=v["agent.grad_clip"], frame_skip=v["env.frame_skip"], sticky_prob=v["env.sticky_prob"],
        network=v["agent.network"], precision=v["run.precision"],
        reg=reg if v["reg.enabled"] else RegularizationConfig(),
    )
    return ExperimentConfig(
        run_id=v["run.id"], profile=profile, seeds=v["run.seeds"], total_frames=v["run.total_frames"],
        flavour=v["env.flavour"], agent=agent, reg=reg, reg_enabled=v["reg.enabled"],
        eval=EvalConfig(v["eval.episodes"], v["eval.epsilon"], v["eval.checkpoint_interval"],
                        v["eval.target_flavours"], v["eval.smoothing_window"]),
        transfer=TransferConfig(v["transfer.source"], v["transfer.scheme"], v["transfer.budgets"],
                                v["reg.finetune_active"]),
        sweep=SweepSpec(v["sweep.lambdas"], v["sweep.dropouts"], v["sweep.mode"]),
        parallel=v["run.parallel"], values=dict(values),
    )


def parse_config(text: str, profile: str = "desk") -> ExperimentConfig:
    """Parse config text on top of a built-in profile's defaults."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose one of {', '.join(PROFILE_NAMES)}")
    values = dict(PROFILES[profile])
    lines: dict[str, int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", line=lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = key.strip(), value.strip()
        if "." not in key:
            if section is None:
                raise ConfigError("key outside any section; use [section] or section.key", key, lineno)
            key = f"{section}.{key}"
        if key not in FIELDS:
            raise ConfigError("unknown key", key, lineno)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key, lineno)
        try:
            values[key] = FIELDS[key].parse(value)
        except (ValueError, UnknownFlavourError) as e:
            raise ConfigError(f"cannot parse {value!r}: {e}", key, lineno) from None
        lines[key] = lineno
    return build_config(values, profile, lines)


def serialize_config(config: ExperimentConfig) -> str:
    """Every key, grouped by section; parsing the result gives an equal config."""
    out = [f"# resolved from profile {config.profile}"]
    current = None
    for key in FIELDS:
        section, name = key.split(".", 1)
        if section != current:
            out.append(f"\n[{section}]")
            current = section
        out.append(f"{name} = {_fmt(config.values[key])}")
    return "\n".join(out) + "\n"


def load_config(path, profile: str = "desk") -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), profile)


def default_config(profile: str = "desk") -> ExperimentConfig:
    return parse_config("", profile)
