"""Run configuration and its on-disk text form.

Config files are INI-style: ``[section]`` headers followed by ``key = value``
lines; ``#`` and ``;`` start comments. Sections and keys::

    [schedule]  alpha, T, weighting_mode
    [policy]    hidden_dims (comma separated), time_embed_dim
    [train]     beta, K, updates_per_checkpoint, batch_size, lr, pretrain_lr,
                pretrain_steps, pretrain_batch_size, pretrain_loss_threshold,
                optimizer, momentum, beta2, weight_decay, eps, erd_strategy,
                ssr_mode, replay_per, eval_every, eval_samples, seed
    [task]      n_cond, radius, base_std, base_spread, target_std,
                target_shift, target_offset
    [study]     seeds (comma separated)

Unknown sections or keys are rejected. Missing keys keep their defaults.
Values resolve as: built-in default < config file < command-line flag.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .alignment import SsrMode
from .errors import ConfigError
from .policy import PolicySpec
from .replay import ErdStrategy
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class TaskParams:
    n_cond: int = 3
    radius: float = 2.0
    base_std: float = 0.8
    base_spread: float = 1.0
    target_std: float = 0.25
    target_shift: float = 0.5
    target_offset: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    # schedule
    alpha: float = 0.9
    T: int = 50
    weighting_mode: str = "constant"
    # policy
    hidden_dims: tuple = (64, 64)
    time_embed_dim: int = 16
    # alignment
    beta: float = 10.0
    K: int = 7
    updates_per_checkpoint: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adamw"
    momentum: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    erd_strategy: ErdStrategy = ErdStrategy.UNIFORM
    ssr_mode: SsrMode = SsrMode.SIGN
    replay_per: str = "update"
    eval_every: int = 0          # 0 means "same as updates_per_checkpoint"
    eval_samples: int = 512
    seed: int = 0
    # pretraining
    pretrain_steps: int = 2000
    pretrain_batch_size: int = 128
    pretrain_lr: float = 1e-3
    pretrain_loss_threshold: float = 0.5
    # task
    task: TaskParams = field(default_factory=TaskParams)
    # study
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("erd_strategy", ErdStrategy.parse(self.erd_strategy))
        set_("ssr_mode", SsrMode.parse(self.ssr_mode))
        set_("hidden_dims", tuple(int(h) for h in self.hidden_dims))
        set_("seeds", tuple(int(s) for s in self.seeds))
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.batch_size < 1 or self.pretrain_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.updates_per_checkpoint < 1:
            raise ConfigError("updates_per_checkpoint must be >= 1")
        if not self.lr >= 0 or not self.pretrain_lr >= 0:
            raise ConfigError("learning rates must be non-negative")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be adamw or sgd, got {self.optimizer!r}")
        if self.replay_per not in ("update", "iteration"):
            raise ConfigError("replay_per must be 'update' or 'iteration'")
        if self.pretrain_steps < 0 or self.eval_every < 0:
            raise ConfigError("step counts must be non-negative")
        try:
            self.schedule
            self.policy_spec
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.alpha, self.T, self.weighting_mode)

    @property
    def policy_spec(self) -> PolicySpec:
        return PolicySpec(2, self.task.n_cond, self.hidden_dims, self.time_embed_dim)

    @property
    def total_updates(self) -> int:
        return self.K * self.updates_per_checkpoint

    @property
    def eval_cadence(self) -> int:
        return self.eval_every or self.updates_per_checkpoint

    def replace(self, **changes) -> "TrainConfig":
        task_keys = {f.name for f in fields(TaskParams)}
        task_changes = {k: changes.pop(k) for k in list(changes) if k in task_keys}
        if task_changes:
            changes["task"] = dataclasses.replace(self.task, **task_changes)
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "schedule": ("alpha", "T", "weighting_mode"),
    "policy": ("hidden_dims", "time_embed_dim"),
    "train": ("beta", "K", "updates_per_checkpoint", "batch_size", "lr", "pretrain_lr",
              "pretrain_steps", "pretrain_batch_size", "pretrain_loss_threshold", "optimizer",
              "momentum", "beta2", "weight_decay", "eps", "erd_strategy", "ssr_mode",
              "replay_per", "eval_every", "eval_samples", "seed"),
    "task": tuple(f.name for f in fields(TaskParams)),
    "study": ("seeds",),
}


def _defaults():
    out = {f.name: f.default for f in fields(TrainConfig) if f.default is not dataclasses.MISSING}
    out.update({f.name: f.default for f in fields(TaskParams)})
    return out


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def _format_value(value) -> str:
    if isinstance(value, enum_types()):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def enum_types():
    return (ErdStrategy, SsrMode)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    defaults = _defaults()
    changes = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            changes[key] = _parse_value(key, raw, defaults[key])
    return (base or TrainConfig()).replace(**changes)


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return parse_config_text(text)


def dump_config(cfg: TrainConfig) -> str:
    """Render the full effective config; parses back to an equal TrainConfig."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg.task, key) if section == "task" else getattr(cfg, key)
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)
