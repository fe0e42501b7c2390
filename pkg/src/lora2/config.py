"""Experiment configuration files.

A config is a TOML document with the sections ``[model]``, ``[task]``,
``[adapter]``, ``[orth]``, ``[allocator]`` and ``[train]``.  Every key is
optional (defaults below); unknown sections or keys are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .models import ModelSpec, PlantedTask, build_model, gen_planted_model_task
from .orthogonality import OrthConfig, OrthMode
from .training import AdapterConfig, AllocatorConfig, OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    n_layers: int = 1
    dim: int = 768
    ffn_dim: int = 0  # 0 means same as dim
    kinds: list[str] = field(default_factory=lambda: ["Wq"])
    nonlinearity: str = "relu"
    attach: list[str] = field(default_factory=lambda: ["all"])
    seed: int = 0


@dataclass
class TaskSection:
    loss: str = "mse"
    planted_sites: list[str] = field(default_factory=lambda: ["L0.Wq"])
    rho: int = 2
    noise_std: float = 0.0
    n_train: int = 256
    n_eval: int = 128
    seed: int = 0


@dataclass
class AdapterSection:
    kind: str = "lora2"
    k: int = 8
    r_init: int = 8
    init_std: float = 0.02


@dataclass
class OrthSection:
    mode: str = "all"
    gamma: float = 0.1


@dataclass
class AllocatorSection:
    beta1: float = 0.85
    beta2: float = 0.85
    prune_every: int = 10
    b_target: int = 4  # 0 disables pruning
    t_warmup: int = 10
    t_final: int = 80
    scoring: str = "simplified"


@dataclass
class TrainSection:
    total_steps: int = 100
    batch_size: int = 16
    seed: int = 0
    log_every: int = 10
    eval_every: int = 50
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


SECTIONS = {
    "model": ModelSection,
    "task": TaskSection,
    "adapter": AdapterSection,
    "orth": OrthSection,
    "allocator": AllocatorSection,
    "train": TrainSection,
}


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    task: TaskSection = field(default_factory=TaskSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    orth: OrthSection = field(default_factory=OrthSection)
    allocator: AllocatorSection = field(default_factory=AllocatorSection)
    train: TrainSection = field(default_factory=TrainSection)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, section_cls in SECTIONS.items():
            values = data.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a table")
            allowed = {f.name: f for f in fields(section_cls)}
            bad = set(values) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs = {}
            for key, value in values.items():
                kwargs[key] = _coerce(name, key, value, allowed[key])
            parts[name] = section_cls(**kwargs)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def validate(self):
        try:
            OrthMode.parse(self.orth.mode)
            self.train_config()
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.task.loss not in ("mse", "cross-entropy"):
            raise ConfigError(f"task.loss must be 'mse' or 'cross-entropy', got {self.task.loss!r}")
        a = self.allocator
        if a.b_target:
            if a.t_final > self.train.total_steps:
                raise ConfigError(f"allocator.t_final={a.t_final} exceeds train.total_steps={self.train.total_steps}")
            if not 0 <= a.t_warmup < a.t_final:
                raise ConfigError(f"need 0 <= allocator.t_warmup < allocator.t_final, got {a.t_warmup}, {a.t_final}")

    def build_spec(self) -> ModelSpec:
        m = self.model
        return build_model(m.n_layers, m.dim, m.ffn_dim or None, m.kinds, m.nonlinearity, m.attach, m.seed)

    def build_task(self, spec: ModelSpec | None = None) -> PlantedTask:
        spec = spec or self.build_spec()
        t = self.task
        ranks = {s: t.rho for s in t.planted_sites}
        return gen_planted_model_task(spec, ranks, t.noise_std, t.seed, t.n_train, t.n_eval, t.loss)

    def train_config(self) -> TrainConfig:
        a, tr = self.allocator, self.train
        return TrainConfig(
            total_steps=tr.total_steps,
            batch_size=tr.batch_size,
            seed=tr.seed,
            log_every=tr.log_every,
            eval_every=tr.eval_every,
            adapter=AdapterConfig(self.adapter.kind, self.adapter.k, self.adapter.r_init, self.adapter.init_std),
            orth=OrthConfig(self.orth.mode, self.orth.gamma),
            allocator=AllocatorConfig(
                a.beta1, a.beta2, a.prune_every, a.b_target or None, a.t_warmup, a.t_final, a.scoring
            ),
            optimizer=OptimizerConfig(tr.learning_rate, tr.adam_beta1, tr.adam_beta2, tr.eps, tr.weight_decay),
        )


def _coerce(section, key, value, f):
    default = f.default if f.default_factory is MISSING else f.default_factory()
    if isinstance(default, (bool, str, list)):
        if not isinstance(value, type(default)):
            raise ConfigError(f"[{section}] {key} must be {type(default).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] {key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key} must be a number")
        return float(value)
    return value


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(cfg.dumps())
