"""Run configuration: one YAML tree covering model, sampler, trainer and tasks.

Dotted overrides (``trainer.mode=grpo_discrete``) are applied to the raw tree
before validation, and values are parsed as YAML scalars so ``0.5`` is a float
and ``true`` a bool. Every validation failure is a :class:`ConfigError` that
names the offending field.
"""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import ConfigError, ContractError
from .model import ModelConfig
from .sampler import SamplerConfig
from .tasks import (DEFAULT_MIXTURE, DEFAULT_VOCAB, TASK_KINDS, MixtureComponent, TaskInstance,
                    make_dataset, mixture_from_dicts)
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "LATENTRL_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
SECTIONS = ("model", "sampler", "trainer", "tasks", "eval")
TOP_LEVEL = ("name", "seed", "output_dir", "checkpoint_every") + SECTIONS


@dataclass(frozen=True)
class TaskSpec:
    mixture: tuple[MixtureComponent, ...] = DEFAULT_MIXTURE
    train_size: int = 256
    eval_size: int = 64


@dataclass(frozen=True)
class EvalSpec:
    k: int = 32
    temperature: float = 0.6
    n_problems: int = 64


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    tasks: TaskSpec = field(default_factory=TaskSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seed: int = 0
    name: str = "run"
    output_dir: str | None = None
    checkpoint_every: int = 50

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
            "model": asdict(self.model),
            "sampler": asdict(self.sampler),
            "trainer": {k: v for k, v in asdict(self.trainer).items() if k != "seed"},
            "tasks": {"train_size": self.tasks.train_size, "eval_size": self.tasks.eval_size,
                      "mixture": [{"kind": c.kind, "weight": c.weight,
                                   "difficulties": list(c.difficulties), "digits": list(c.digits)}
                                  for c in self.tasks.mixture]},
            "eval": asdict(self.eval),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def train_dataset(self) -> list[TaskInstance]:
        return make_dataset(self.tasks.mixture, self.tasks.train_size, self.seed)

    def eval_dataset(self) -> list[TaskInstance]:
        # Disjoint stream from the training set.
        return make_dataset(self.tasks.mixture, self.tasks.eval_size, self.seed + 1_000_003)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(text, "empty override key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return path, value


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    tree = copy.deepcopy(tree)
    for text in overrides:
        path, value = parse_override(text)
        node = tree
        for part in path[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(".".join(path), f"{part!r} is not a section")
            node = nxt
        node[path[-1]] = value
    return tree


def _build(cls, section: str, data: Any, drop: Sequence[str] = ()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(section, "expected a mapping")
    names = {f.name for f in fields(cls)} - set(drop)
    for key in data:
        if key not in names:
            raise ConfigError(f"{section}.{key}", "unknown field")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        default = getattr(cls(), f.name)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{f.name}", f"expected true/false, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{f.name}", f"expected an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{f.name}", f"expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{section}.{f.name}", f"expected a string, got {value!r}")
        kwargs[f.name] = value
    return kwargs


def _construct(cls, section: str, kwargs: dict):
    try:
        return cls(**kwargs)
    except ContractError as exc:
        msg = str(exc)
        name = next((k for k in sorted(kwargs, key=len, reverse=True) if msg.startswith(k)), None)
        raise ConfigError(f"{section}.{name}" if name else section, msg) from None


def _tasks(data: Any) -> TaskSpec:
    if data is not None and not isinstance(data, dict):
        raise ConfigError("tasks", "expected a mapping")
    rest = {k: v for k, v in (data or {}).items() if k != "mixture"}
    kwargs = _build(TaskSpec, "tasks", rest, drop=("mixture",))
    mixture = DEFAULT_MIXTURE
    if data and "mixture" in data:
        raw = data["mixture"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError("tasks.mixture", "expected a nonempty list of components")
        for i, comp in enumerate(raw):
            if not isinstance(comp, dict) or comp.get("kind") not in TASK_KINDS:
                raise ConfigError(f"tasks.mixture[{i}].kind", f"must be one of {TASK_KINDS}")
        try:
            mixture = mixture_from_dicts(raw)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("tasks.mixture", str(exc)) from None
    for key in ("train_size", "eval_size"):
        if kwargs.get(key, 1) < 1:
            raise ConfigError(f"tasks.{key}", "must be >= 1")
    return TaskSpec(mixture, **kwargs)


def from_dict(tree: dict | None) -> RunConfig:
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for key in tree:
        if key not in TOP_LEVEL:
            raise ConfigError(str(key), "unknown field")
    seed = tree.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"expected a nonnegative integer, got {seed!r}")
    trainer_raw = tree.get("trainer") or {}
    if isinstance(trainer_raw, dict) and "seed" in trainer_raw:
        raise ConfigError("trainer.seed", "set the seed at top level")
    model = _construct(ModelConfig, "model", _build(ModelConfig, "model", tree.get("model")))
    sampler = _construct(SamplerConfig, "sampler", _build(SamplerConfig, "sampler", tree.get("sampler")))
    tkw = _build(TrainConfig, "trainer", trainer_raw, drop=("seed",))
    trainer = _construct(TrainConfig, "trainer", {**tkw, "seed": seed})
    ev_kw = _build(EvalSpec, "eval", tree.get("eval"))
    ev = EvalSpec(**ev_kw)
    if ev.k < 1:
        raise ConfigError("eval.k", "must be >= 1")
    if not ev.temperature > 0:
        raise ConfigError("eval.temperature", "must be positive")
    every = tree.get("checkpoint_every", 50)
    if isinstance(every, bool) or not isinstance(every, int) or every < 0:
        raise ConfigError("checkpoint_every", "expected a nonnegative integer")
    out = tree.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir", "expected a path string")
    cfg = RunConfig(model, sampler, trainer, _tasks(tree.get("tasks")), ev, seed,
                    str(tree.get("name", "run")), out, every)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-field checks that no single section can make on its own."""
    if cfg.model.vocab_size != len(DEFAULT_VOCAB):
        raise ConfigError("model.vocab_size",
                          f"{cfg.model.vocab_size} does not match the task vocabulary ({len(DEFAULT_VOCAB)})")
    longest = max(len(i.query_ids) for i in cfg.train_dataset() + cfg.eval_dataset())
    need = longest + cfg.trainer.effective_latent + cfg.trainer.max_answer_len
    if need > cfg.model.max_seq_len:
        raise ConfigError("model.max_seq_len",
                          f"longest query ({longest}) + latent steps ({cfg.trainer.effective_latent}) + "
                          f"answer budget ({cfg.trainer.max_answer_len}) = {need} exceeds {cfg.model.max_seq_len}")


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    try:
        tree = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML ({exc})") from None
    return from_dict(apply_overrides(tree, overrides))


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def run_directory(cfg: RunConfig, override: str | None = None) -> Path:
    """Explicit directory if given, else a timestamped one under the output root."""
    if override:
        return Path(override)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = output_root() / f"{stamp}-{cfg.name}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    return path
