"""Run configuration: YAML file + flag overrides, resolved into one snapshot."""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .classifier import ClassifierConfig, ClassifierTrainConfig
from .data import SynthConfig
from .extractor import ExtractorConfig, ExtractorTrainConfig


@dataclass
class DataConfig:
    root: str | None = None
    size: int = 256
    split_ratio: float = 0.8
    synth_n: int = 200
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    classifier_train: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    pseudo_threshold: float = 0.5
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    extractor_train: ExtractorTrainConfig = field(default_factory=ExtractorTrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yaml.safe_dump(_plain(self.to_dict()), fh, sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict):
    """Instantiate a (nested) dataclass from a partial dict, keeping defaults for missing keys."""
    base = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            kwargs[f.name] = getattr(base, f.name)
            continue
        v = values[f.name]
        current = getattr(base, f.name)
        if dataclasses.is_dataclass(current) and isinstance(v, dict):
            kwargs[f.name] = _build(type(current), v)
        else:
            kwargs[f.name] = v
    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**kwargs)


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values first, then ``overrides`` (dotted keys) on top."""
    values: dict = {}
    if path:
        with open(path) as fh:
            values = yaml.safe_load(fh) or {}
    for dotted, v in (overrides or {}).items():
        if v is not None:
            _set_path(values, dotted, v)
    return resolve(_build(RunConfig, values))


def stage_seed(root_seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([root_seed, zlib.crc32(stage.encode())]).generate_state(1)[0] % (2 ** 31))


def resolve(cfg: RunConfig) -> RunConfig:
    """Fan the root seed out to every stage and tie model input sizes to the data size."""
    cfg.classifier.input_size = cfg.data.size
    cfg.extractor.input_size = cfg.data.size
    cfg.classifier.seed = stage_seed(cfg.seed, "classifier-init")
    cfg.classifier_train.seed = stage_seed(cfg.seed, "classifier-train")
    cfg.extractor.seed = stage_seed(cfg.seed, "extractor-init")
    cfg.extractor_train.seed = stage_seed(cfg.seed, "extractor-train")
    return cfg


def parse_value(text: str):
    """YAML scalar parsing for ``--set key=value`` overrides."""
    return yaml.safe_load(text)
