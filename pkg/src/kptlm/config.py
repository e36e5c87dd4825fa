"""Run configuration: one JSON file, dotted overrides, and a seed from the environment."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .decoding import strategy_from_dict
from .errors import ConfigError
from .evaluation import EVAL_MODES
from .metrics import PCK_NORMS
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "CAPE_SEED"


def _from_dict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class DecodeSection:
    strategy: dict = field(default_factory=lambda: {"kind": "greedy"})
    constrained: bool = True
    inference_mode: str = "single"
    teacher_forced: bool = False

    def __post_init__(self):
        strategy_from_dict(self.strategy)
        if self.inference_mode not in ("single", "cumulative"):
            raise ConfigError(f"inference_mode must be single or cumulative, got {self.inference_mode!r}")


@dataclass
class DensitySection:
    samples: int = 256
    resolution: int = 128
    sigma: float = 0.05
    bandwidth: Any = "scott"
    strategy: dict = field(default_factory=lambda: {"kind": "temperature", "t": 0.6})

    def __post_init__(self):
        strategy_from_dict(self.strategy)
        if self.samples < 0 or self.resolution < 1 or not self.sigma > 0:
            raise ConfigError("density needs samples >= 0, resolution >= 1 and sigma > 0")


@dataclass
class DataSection:
    path: str | None = None  # existing dataset directory; None means <output_dir>/data
    n_categories: int = 10
    images_per_category: int = 200
    n_test: int | None = None
    n_val: int = 0
    image_size: int = 64
    seed: int | None = None  # falls back to the global seed
    drop_invalid: bool = False


@dataclass
class EvalSection:
    split: str = "test"
    mode: str = "only_query"
    pairs: str | None = None
    pck_norm: str = "bbox_long_side"
    max_images: int | None = None

    def __post_init__(self):
        if self.mode not in EVAL_MODES:
            raise ConfigError(f"eval mode must be one of {EVAL_MODES}, got {self.mode!r}")
        if self.pck_norm not in PCK_NORMS:
            raise ConfigError(f"pck_norm must be one of {PCK_NORMS}, got {self.pck_norm!r}")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "decode": DecodeSection, "density": DensitySection,
            "data": DataSection, "eval": EvalSection}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeSection = field(default_factory=DecodeSection)
    density: DensitySection = field(default_factory=DensitySection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS) - {"seed", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        kwargs = {name: _from_dict(kind, d.get(name, {}), name) for name, kind in SECTIONS.items()}
        return cls(**kwargs, seed=int(d.get("seed", 0)), output_dir=str(d.get("output_dir", "runs/default")))

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).to_dict() if hasattr(getattr(self, name), "to_dict")
               else asdict(getattr(self, name)) for name in SECTIONS}
        return {**out, "seed": self.seed, "output_dir": self.output_dir}

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are read as JSON when they parse."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return d


def load_config(path: str | Path | None = None, overrides: list[str] = (), env=None) -> RunConfig:
    env = os.environ if env is None else env
    d = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from None
    d = apply_overrides(d, list(overrides))
    if env.get(SEED_ENV):
        try:
            d["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    try:
        return RunConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def write_snapshot(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
