"""Run configuration: YAML file + ``--set section.key=value`` overrides.

Precedence, lowest to highest: built-in defaults, ``DEPTHGROW_SEED``, the
config file, ``--set`` overrides, dedicated command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import yaml

from .decoding import RerankConfig
from .transformer import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    task: Optional[str] = "noisy-copy"  # synthetic task, or None for corpus files
    min_len: int = 4
    max_len: int = 10
    p_noise: float = 0.1
    n_train: int = 20000
    n_valid: int = 500
    n_test: int = 1000
    seed: int = 0
    train_src: Optional[str] = None
    train_tgt: Optional[str] = None
    valid_src: Optional[str] = None
    valid_tgt: Optional[str] = None
    tokenizer: str = "whitespace"
    min_freq: int = 1


@dataclass
class DecodeConfig:
    beam: int = 5
    max_len: Optional[int] = None  # None -> 2 * source length + 8
    length_penalty: float = 0.0
    weight_s: float = 0.5
    weight_d: float = 0.5
    normalize: bool = True

    def rerank(self) -> RerankConfig:
        return RerankConfig(self.weight_s, self.weight_d, self.normalize)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "decode": DecodeConfig, "data": DataConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: Optional[int] = None
    deterministic: bool = True

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "decode": asdict(self.decode),
            "data": asdict(self.data),
            "seed": self.seed,
            "deterministic": self.deterministic,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw) if raw else None
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def build(data: dict) -> RunConfig:
    try:
        sections = {name: cls(**data[name]) for name, cls in SECTIONS.items()}
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig(**sections, seed=data["seed"], deterministic=bool(data["deterministic"]))
    if cfg.seed is not None:
        cfg.train.seed = int(cfg.seed)
        cfg.data.seed = int(cfg.seed)
    return cfg


def load_config(
    path: Optional[str] = None,
    overrides: List[str] = (),
    seed: Optional[int] = None,
    deterministic: Optional[bool] = None,
) -> RunConfig:
    merged = RunConfig().to_dict()
    env_seed = os.environ.get("DEPTHGROW_SEED")
    if env_seed not in (None, ""):
        try:
            merged["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"DEPTHGROW_SEED={env_seed!r} is not an integer") from exc
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        merged = _merge(merged, loaded)
    for item in overrides:
        merged = _merge(merged, parse_override(item))
    if seed is not None:
        merged["seed"] = seed
    if deterministic is not None:
        merged["deterministic"] = deterministic
    return build(merged)
