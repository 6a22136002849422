"""Run configuration: sectioned ``key = value`` files plus ``section.key=value`` overrides.

Defaults reproduce the full-scale training recipe (ResNet/SGD); :func:`toy_preset`
gives the desk-scale settings used on the synthetic data.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datapipe import ToyConfig
from .errors import ConfigError
from .losses import LossWeights


@dataclass
class DataSection:
    kind: str = "folder"  # folder | toy
    source: str = ""
    wild: str = ""
    eval: tuple[str, ...] = ()  # name=path entries
    mapping: str = ""
    num_classes: int = 19
    ignore_id: int = 255
    crop_size: int = 768
    scale_min: float = 0.5
    scale_max: float = 2.0


@dataclass
class ModelSection:
    widths: tuple[int, ...] = (16, 24, 32, 48, 48)
    norm: bool = False  # batch norm after every conv
    proj_dim: int = 256
    proj_hidden: int = 0  # 0: same as the backbone width
    fs_hooks: tuple[str, ...] = ("stem", "enc1")
    fs_depth: int = 3
    fs_mode: str = "wild"  # wild | random
    fs_eps: float = 1e-5


@dataclass
class TrainerSection:
    optimizer: str = "sgd"  # sgd | adam
    base_lr: float = 2.5e-3
    power: float = 0.9
    total_iters: int = 60000
    batch_size: int = 8
    weight_decay: float = 5e-4
    momentum: float = 0.9
    adam_betas: tuple[float, ...] = (0.9, 0.99)
    tau: float = 0.07
    store_capacity: int = 393216
    anchor_grid: int = 64
    store_grid: int = 16
    sampling: str = "uniform"  # uniform | random
    seed: int = 0
    checkpoint_every: int = 5000


@dataclass
class ToySection(ToyConfig):
    seed: int = 0

    def toy_config(self) -> ToyConfig:
        return ToyConfig(**{f.name: getattr(self, f.name) for f in fields(ToyConfig)})


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    losses: LossWeights = field(default_factory=LossWeights)
    toy: ToySection = field(default_factory=ToySection)

    def validate(self) -> "RunConfig":
        t = self.trainer
        if t.total_iters < 0:
            raise ConfigError("trainer.total_iters must be >= 0")
        if t.tau <= 0:
            raise ConfigError("trainer.tau must be positive")
        if t.anchor_grid < t.store_grid:
            raise ConfigError("trainer.anchor_grid must be >= trainer.store_grid")
        if t.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"trainer.optimizer must be sgd or adam, not {t.optimizer!r}")
        if t.sampling not in ("uniform", "random"):
            raise ConfigError(f"trainer.sampling must be uniform or random, not {t.sampling!r}")
        if self.data.kind not in ("folder", "toy"):
            raise ConfigError(f"data.kind must be folder or toy, not {self.data.kind!r}")
        if self.data.kind == "toy" and self.data.num_classes != self.toy.num_classes:
            raise ConfigError("data.num_classes must equal toy.num_classes for toy data")
        if self.data.scale_min > self.data.scale_max:
            raise ConfigError("data.scale_min exceeds data.scale_max")
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def toy_preset() -> RunConfig:
    """Desk-scale settings for the synthetic four-class problem."""
    cfg = RunConfig()
    cfg.data = DataSection(kind="toy", num_classes=4, crop_size=64, scale_min=0.75, scale_max=1.25)
    cfg.model = ModelSection(widths=(16, 24, 32, 32, 32), proj_dim=32, fs_hooks=("stem", "enc1"), fs_depth=3)
    cfg.trainer = TrainerSection(
        optimizer="adam", base_lr=2e-3, total_iters=2000, batch_size=4, store_capacity=8192,
        anchor_grid=16, store_grid=8, checkpoint_every=500,
    )
    cfg.toy = ToySection()
    return cfg


# ---------------------------------------------------------------------------
# text form


def _field_types(section_cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(section_cls)


def _parse_value(raw: str, tp, where: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            item_tp = typing.get_args(tp)[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_parse_value(p, item_tp, where) for p in parts)
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _set(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section not in _field_types(RunConfig):
        raise ConfigError(f"unknown config section {section!r}")
    sec = getattr(cfg, section)
    types = _field_types(type(sec))
    if key not in types:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(sec, key, _parse_value(raw, types[key], f"{section}.{key}"))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = key.strip().split(".", 1)
        _set(cfg, section, name, raw)
    return cfg


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    # a [preset] section picks the starting point
    cfg = base or RunConfig()
    if parser.has_section("preset"):
        name = parser.get("preset", "name", fallback="default")
        if name == "toy":
            cfg = toy_preset()
        elif name != "default":
            raise ConfigError(f"unknown preset {name!r}")
    for section in parser.sections():
        if section == "preset":
            continue
        for key, raw in parser.items(section):
            _set(cfg, section, key, raw)
    return cfg


def load(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cfg = loads(path.read_text())
    return apply_overrides(cfg, overrides).validate()


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        parser[f.name] = {sf.name: _format_value(getattr(sec, sf.name)) for sf in fields(sec)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_dict(payload: dict) -> RunConfig:
    cfg = RunConfig()
    for section, values in payload.items():
        sec = getattr(cfg, section)
        types = _field_types(type(sec))
        for k, v in values.items():
            setattr(sec, k, tuple(v) if typing.get_origin(types[k]) is tuple else v)
    return cfg
