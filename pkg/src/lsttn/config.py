"""Run configuration: an INI file with [data], [layout], [mst], [extractors], [train]."""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DataLayout
from .errors import ConfigError, LayoutError, ValidationError
from .fusion import VARIANTS


@dataclass
class DataConfig:
    series: str = ""
    graph: str = ""
    synth: str = ""
    format: str = ""
    ratios: tuple[float, ...] = (0.7, 0.2, 0.1)


@dataclass
class LayoutConfig:
    L: int = 4032
    S: int = 12
    F: int = 12
    steps_per_day: int = 288
    pretrain_stride: int = 1
    train_stride: int = 1
    eval_stride: int = 1

    def layout(self) -> DataLayout:
        return DataLayout(self.L, self.S, self.F, self.steps_per_day)


@dataclass
class MSTConfig:
    d_repr: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_repr
    dropout: float = 0.1
    mask_ratio: float = 0.75


@dataclass
class ExtractorConfig:
    hidden: int = 4
    kernel_size: int = 2
    K: int = 2
    d_emb: int = 10
    stgnn: str = "ref_gwnet"
    stgnn_channels: int = 16
    stgnn_skip: int = 64
    d_short: int = 64
    stgnn_blocks: int = 4
    stgnn_dropout: float = 0.3
    fusion_h1: int = 32
    fusion_h2: int = 32
    fusion_h3: int = 128
    variant: str = "full"
    finetune_strl: bool = False

    def stgnn_config(self) -> dict:
        return {
            "channels": self.stgnn_channels,
            "skip_channels": self.stgnn_skip,
            "d_short": self.d_short,
            "blocks": self.stgnn_blocks,
            "K": self.K,
            "d_emb": self.d_emb,
            "dropout": self.stgnn_dropout,
        }


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    pretrain_epochs: int = 100
    lr: float = 1e-3
    pretrain_lr: float = 1e-3
    milestones: tuple[int, ...] = (50, 80)
    pretrain_milestones: tuple[int, ...] = (50, 80)
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 5.0  # <= 0 disables clipping
    seed: int = 0
    eval_batch_size: int = 64
    cache_limit_mb: int = 1500


SECTIONS = {
    "data": DataConfig,
    "layout": LayoutConfig,
    "mst": MSTConfig,
    "extractors": ExtractorConfig,
    "train": TrainConfig,
}


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    mst: MSTConfig = field(default_factory=MSTConfig)
    extractors: ExtractorConfig = field(default_factory=ExtractorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    base_dir: str = field(default=".", compare=False)

    def validate(self) -> "Config":
        try:
            self.layout.layout()
        except LayoutError as exc:
            raise ValidationError(f"[layout] {exc}") from None
        t = self.train
        if t.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        for name, ms, epochs in (("milestones", t.milestones, t.epochs),
                                 ("pretrain_milestones", t.pretrain_milestones, t.pretrain_epochs)):
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ValidationError(f"{name} must be strictly increasing")
            if ms and ms[-1] >= epochs:
                raise ValidationError(f"{name} must be < epochs ({epochs})")
        if self.extractors.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.extractors.variant!r}")
        if not 0 < self.mst.mask_ratio < 1:
            raise ValidationError("mask_ratio must be in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "Config":
        kwargs = {}
        for name, klass in SECTIONS.items():
            section = dict(d.get(name, {}))
            for f in fields(klass):
                if f.name in section and isinstance(section[f.name], list):
                    section[f.name] = tuple(section[f.name])
            kwargs[name] = klass(**section)
        return cls(**kwargs, base_dir=base_dir).validate()

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in asdict(getattr(self, name)).items():
                if isinstance(value, (tuple, list)):
                    value = ", ".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _convert(raw: str, annotation, key: str):
    try:
        if annotation in ("bool", bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation in ("int", int):
            return int(raw)
        if annotation in ("float", float):
            return float(raw)
        if annotation in ("str", str):
            return raw.strip()
        if "tuple[int" in str(annotation):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if "tuple[float" in str(annotation):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    raise ConfigError(f"unsupported option type for {key!r}")


def parse_config(text: str, base_dir: str = ".") -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep L/S/F/K case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}".replace("\n", " ")) from None
    kwargs = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    for name, klass in SECTIONS.items():
        known = {f.name: f for f in fields(klass)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                values[key] = _convert(raw, known[key].type, f"{name}.{key}")
        kwargs[name] = klass(**values)
    cfg = Config(**kwargs, base_dir=base_dir)
    seed = os.environ.get("LSTTN_SEED")
    if seed is not None:
        try:
            cfg.train.seed = int(seed)
        except ValueError:
            raise ConfigError(f"LSTTN_SEED must be an integer, got {seed!r}") from None
    return cfg.validate()


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse_config(path.read_text(), base_dir=str(path.parent))
