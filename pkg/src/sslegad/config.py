"""Experiment configuration: flat JSON with six sections, strict parsing.

Unknown keys are rejected, as are missing required keys (``al.strategy``,
``seeds.master``); everything else has defaults. The resolved config is
echoed into every run directory so results are self-describing.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1

STRATEGIES = ("random", "entropy", "egad", "supervised")

# purpose tags for the independent RNG streams derived from seeds.master
STREAM_DATA = 0
STREAM_SPLIT = 1
STREAM_STUDENT_INIT = 2
STREAM_TEACHER_INIT = 3
STREAM_TRAIN = 4
STREAM_NOISE = 5
STREAM_SELECTION = 6


@dataclass
class DataConfig:
    n_total: int = 350
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    image_size: int = 64
    init_labeled_fraction: float = 0.05
    dataset_dir: Optional[str] = None


@dataclass
class ModelConfig:
    student_channels: List[int] = field(default_factory=lambda: [8, 16, 32])
    teacher_channels: List[int] = field(default_factory=lambda: [12, 24, 48, 96])
    sampler_source: str = "student"


@dataclass
class LossConfig:
    noise_sigma: float = 0.2
    ds_out: int = 8
    eps: float = 1e-8
    dice_smooth: float = 1e-5
    stop_teacher_grad: bool = False


@dataclass
class ALConfig:
    strategy: str = "egad"
    rounds: int = 5
    budget_fraction: float = 0.01
    stage1_fraction: float = 1.0 / 3.0
    histogram_bins: int = 32
    aggregation: str = "mean"


@dataclass
class TrainConfig:
    epochs_per_round: int = 40
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    labeled_batch: int = 1
    unlabeled_batch: int = 4
    warm_start: bool = True
    threads: int = 1


@dataclass
class SeedConfig:
    master: int = 0


@dataclass
class RunConfig:
    data: DataConfig
    model: ModelConfig
    loss: LossConfig
    al: ALConfig
    train: TrainConfig
    seeds: SeedConfig

    # ------------------------------------------------------------------
    # derived values

    @property
    def budget_per_round(self) -> int:
        return max(1, round(self.al.budget_fraction * self.data.n_train))

    @property
    def initial_labeled(self) -> int:
        return max(1, round(self.data.init_labeled_fraction * self.data.n_train))

    def stream_seed(self, purpose: int, *extra: int) -> int:
        """Stable 64-bit seed for one named RNG purpose."""
        ss = np.random.SeedSequence(self.seeds.master, spawn_key=(purpose,) + extra)
        return int(ss.generate_state(1, np.uint64)[0])

    def stream_rng(self, purpose: int, *extra: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(self.seeds.master, spawn_key=(purpose,) + extra))

    # ------------------------------------------------------------------

    def validate(self) -> None:
        d, a, t = self.data, self.al, self.train
        if d.n_total < d.n_train + d.n_val + d.n_test:
            raise ConfigError(
                f"data.n_total {d.n_total} < train+val+test {d.n_train + d.n_val + d.n_test}")
        if not 0 < d.init_labeled_fraction <= 1:
            raise ConfigError("data.init_labeled_fraction must be in (0, 1]")
        if a.strategy not in STRATEGIES:
            raise ConfigError(
                f"al.strategy must be one of {STRATEGIES}, got {a.strategy!r}")
        if a.rounds < 1:
            raise ConfigError("al.rounds must be >= 1")
        if not 0 < a.budget_fraction <= 1:
            raise ConfigError("al.budget_fraction must be in (0, 1]")
        if a.aggregation not in ("mean", "max"):
            raise ConfigError("al.aggregation must be mean or max")
        if t.epochs_per_round < 1 or t.labeled_batch < 1 or t.unlabeled_batch < 1:
            raise ConfigError("train sizes must all be >= 1")
        if t.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if t.threads < 1:
            raise ConfigError("train.threads must be >= 1")
        if self.model.sampler_source not in ("student", "teacher"):
            raise ConfigError("model.sampler_source must be student or teacher")
        if self.loss.ds_out > d.image_size:
            raise ConfigError(
                f"loss.ds_out {self.loss.ds_out} exceeds image_size {d.image_size}")
        unlabeled0 = d.n_train - self.initial_labeled
        need = self.budget_per_round * a.rounds
        if need > unlabeled0:
            raise ConfigError(
                f"annotation budget {need} exceeds initial unlabeled pool {unlabeled0}")

    # ------------------------------------------------------------------
    # (de)serialization

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "loss": dataclasses.asdict(self.loss),
            "al": dataclasses.asdict(self.al),
            "train": dataclasses.asdict(self.train),
            "seeds": dataclasses.asdict(self.seeds),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())


_SECTIONS = {
    "data": (DataConfig, frozenset()),
    "model": (ModelConfig, frozenset()),
    "loss": (LossConfig, frozenset()),
    "al": (ALConfig, frozenset({"strategy"})),
    "train": (TrainConfig, frozenset()),
    "seeds": (SeedConfig, frozenset({"master"})),
}


def _parse_section(name: str, cls, required: frozenset, raw: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key {name}.{unknown[0]}")
    missing = sorted(required - set(raw))
    if missing:
        raise ConfigError(f"missing config key {name}.{missing[0]}")
    return cls(**raw)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"version"})
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]}")
    missing = sorted(k for k, (_, req) in _SECTIONS.items()
                     if req and k not in doc)
    if missing:
        raise ConfigError(f"missing config key {missing[0]}")
    parts = {}
    for name, (cls, required) in _SECTIONS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"config section {name} must be an object")
        parts[name] = _parse_section(name, cls, required, raw)
    cfg = RunConfig(**parts)
    cfg.model.student_channels = list(cfg.model.student_channels)
    cfg.model.teacher_channels = list(cfg.model.teacher_channels)
    cfg.validate()
    return cfg


def load_config(path: Union[str, Path]) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    return config_from_dict(doc)


def default_config(strategy: str = "egad", master_seed: int = 0) -> RunConfig:
    return config_from_dict({
        "al": {"strategy": strategy},
        "seeds": {"master": master_seed},
    })
