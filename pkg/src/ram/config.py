"""INI experiment configs.

Sections ``[task]``, ``[model]``, ``[train]``, ``[search]``, ``[paths]`` and an
optional ``[meta]`` (written into run manifests). Unknown sections or keys are
rejected so that a typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .datasets import TASKS, TaskSpec
from .diffcore import ConfigError
from .glimpse import RetinaConfig
from .learning import SearchSpace, TrainConfig
from .model import RamConfig

MODEL_KINDS = ("ram", "fc2-64", "fc2-256", "conv2")


@dataclass
class TaskSection:
    name: str = "mnist28"
    epoch_size: int = 0          # 0 means one pass over the base digits
    train_limit: int = 0         # 0 means all
    test_limit: int = 0
    clutter_count: int = -1      # -1 keeps the preset
    frames: int = 500000         # Catch training budget


@dataclass
class ModelSection:
    kind: str = "ram"
    patch_width: int = 8
    num_scales: int = 1
    glimpse_feature_dim: int = 128
    glimpse_output_dim: int = 256
    core_dim: int = 256
    core_kind: str = "rnn"
    num_glimpses: int = 6
    location_sigma: float = 0.1
    dtype: str = "float32"


@dataclass
class TrainSection:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 20
    epochs: int = 30
    lr_decay: float = 1.0
    location_weight: float = 0.01
    baseline_weight: float = 1.0
    grad_clip: float = 5.0
    episodes_per_epoch: int = 10000


@dataclass
class SearchSection:
    learning_rate_min: float = 1e-3
    learning_rate_max: float = 1e-1
    sigma_min: float = 0.03
    sigma_max: float = 0.3
    trials: int = 8
    epochs: int = 5


@dataclass
class PathsSection:
    data_dir: str = ""
    out_dir: str = "runs/default"


@dataclass
class MetaSection:
    seed: int = 0
    version: str = __version__


SECTIONS = {"task": TaskSection, "model": ModelSection, "train": TrainSection,
            "search": SearchSection, "paths": PathsSection, "meta": MetaSection}


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    search: SearchSection = field(default_factory=SearchSection)
    paths: PathsSection = field(default_factory=PathsSection)
    meta: MetaSection = field(default_factory=MetaSection)

    def __post_init__(self):
        if self.task.name != "catch" and self.task.name not in TASKS:
            raise ConfigError(f"unknown task {self.task.name!r}; expected catch or one of {sorted(TASKS)}")
        if self.model.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model.kind!r}")
        if self.task.name == "catch" and self.model.kind != "ram":
            raise ConfigError("catch is played by the ram model only")

    @property
    def seed(self):
        return self.meta.seed

    @property
    def is_catch(self):
        return self.task.name == "catch"

    def task_spec(self) -> TaskSpec:
        spec = TASKS[self.task.name]
        if self.task.clutter_count >= 0 and spec.kind == "cluttered":
            spec = TaskSpec(spec.kind, spec.canvas, self.task.clutter_count, spec.clutter_patch)
        return spec

    def ram_config(self) -> RamConfig:
        m = self.model
        return RamConfig(
            retina=RetinaConfig(m.patch_width, m.num_scales),
            glimpse_feature_dim=m.glimpse_feature_dim,
            glimpse_output_dim=m.glimpse_output_dim,
            core_dim=m.core_dim,
            core_kind=m.core_kind,
            num_glimpses=23 if self.is_catch else m.num_glimpses,
            location_sigma=m.location_sigma,
            num_action_outputs=3 if self.is_catch else 10,
            dtype=m.dtype,
        )

    def train_config(self, **overrides) -> TrainConfig:
        t = self.train
        kw = dict(learning_rate=t.learning_rate, momentum=t.momentum, batch_size=t.batch_size,
                  epochs=t.epochs, seed=self.seed, lr_decay=t.lr_decay,
                  location_weight=t.location_weight, baseline_weight=t.baseline_weight,
                  grad_clip=t.grad_clip or None,
                  episodes_per_epoch=t.episodes_per_epoch)
        kw.update(overrides)
        return TrainConfig(**kw)

    def search_space(self) -> SearchSpace:
        s = self.search
        return SearchSpace((s.learning_rate_min, s.learning_rate_max), (s.sigma_min, s.sigma_max), s.trials)

    def to_ini(self):
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _coerce(cls, section, key, raw):
    types = {f.name: f.type for f in fields(cls)}
    t = types[key]
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {t}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = SECTIONS[section]
        names = {f.name for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(cls, section, key, raw)
        parts[section] = cls(**values)
    return ExperimentConfig(**parts)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
