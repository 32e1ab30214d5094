"""Configuration dataclasses, presets and the flat ``key = value`` file format.

Config files look like::

    # comments are allowed
    model.backbone.stage_depths = 2,2,6,2
    model.use_ocr = true
    train.lr = 0.001

Keys are dotted paths into :class:`RunConfig`. Precedence when building a
run is command line > file > preset defaults.
"""
from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class BackboneConfig:
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    stage_widths: list[int] = field(default_factory=lambda: [16, 48, 128, 128])
    growth: int = 48
    stem_width: int = 16
    bottleneck_expansion: int = 3

    def __post_init__(self):
        if len(self.stage_depths) != 4:
            raise ConfigError(
                f"stage_depths must have 4 entries, got {len(self.stage_depths)}")
        if len(self.stage_widths) != 4:
            raise ConfigError(
                f"stage_widths must have 4 entries, got {len(self.stage_widths)}")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must be >= 1, got {self.stage_depths}")
        if any(w < 1 for w in self.stage_widths):
            raise ConfigError(f"stage_widths must be > 0, got {self.stage_widths}")
        if self.growth < 1 or self.stem_width < 1:
            raise ConfigError("growth and stem_width must be > 0")
        if self.bottleneck_expansion < 1:
            raise ConfigError("bottleneck_expansion must be >= 1")

    def stage_out_channels(self) -> list[int]:
        """Channels of each emitted feature map (before the transition)."""
        return [w + d * self.growth
                for w, d in zip(self.stage_widths, self.stage_depths)]


@dataclass
class ASPPConfig:
    dilation_rates: list[int] = field(default_factory=lambda: [6, 12, 18])
    out_channels: int = 16
    include_global_pool_branch: bool = True

    def __post_init__(self):
        if not self.dilation_rates:
            raise ConfigError("dilation_rates must not be empty")
        if any(r < 1 for r in self.dilation_rates):
            raise ConfigError(f"dilation rates must be >= 1, got {self.dilation_rates}")
        if any(b <= a for a, b in zip(self.dilation_rates, self.dilation_rates[1:])):
            raise ConfigError(
                f"dilation rates must be strictly increasing, got {self.dilation_rates}")
        if self.out_channels < 1:
            raise ConfigError("ASPP out_channels must be > 0")


@dataclass
class OCRConfig:
    num_regions: int = 3
    key_dim: int = 64
    mid_channels: int = 128

    def __post_init__(self):
        if self.num_regions < 1 or self.key_dim < 1 or self.mid_channels < 1:
            raise ConfigError("OCR num_regions, key_dim and mid_channels must be > 0")


@dataclass
class ModelConfig:
    num_classes: int = 3
    in_channels: int = 3
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aspp: ASPPConfig = field(default_factory=ASPPConfig)
    ocr: OCRConfig = field(default_factory=OCRConfig)
    fpn_width: int = 16
    use_aspp: bool = True
    use_ocr: bool = True

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be > 0")
        if self.fpn_width < 1:
            raise ConfigError("fpn_width must be > 0")
        if self.ocr.num_regions != self.num_classes:
            raise ConfigError(
                f"ocr.num_regions ({self.ocr.num_regions}) must equal "
                f"num_classes ({self.num_classes})")


@dataclass
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if not 0 < self.alpha <= 1:
            # alpha = 1 is admitted so the loss can reduce to plain cross-entropy
            raise ConfigError(f"focal alpha must be in (0, 1], got {self.alpha}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 8
    weight_decay: float = 1e-4
    monitor: str = "val_mIoU"
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6
    mixed_precision: bool = False
    seed: int = 0
    aux_weight: float = 0.4
    ignore_index: int = 255
    num_workers: int = 0
    focal: FocalParams = field(default_factory=FocalParams)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.factor < 1:
            raise ConfigError(f"factor must be in (0, 1), got {self.factor}")
        if self.weight_decay < 0 or self.aux_weight < 0:
            raise ConfigError("weight_decay and aux_weight must be >= 0")
        if self.monitor not in ("val_mIoU", "val_OA", "val_meanF1"):
            raise ConfigError(f"unknown monitor metric {self.monitor!r}")


@dataclass
class DataConfig:
    tile_size: int = 512
    overlap: int = 0
    pad_value: int = 0
    predict_overlap: int = 64
    blend: str = "average"
    mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    augment: bool = False

    def __post_init__(self):
        if self.tile_size < 1 or self.tile_size % 32:
            raise ConfigError(f"tile_size must be a positive multiple of 32, got {self.tile_size}")
        for name in ("overlap", "predict_overlap"):
            v = getattr(self, name)
            if not 0 <= v < self.tile_size:
                raise ConfigError(f"{name} must be in [0, tile_size), got {v}")
        if self.blend not in ("average", "crop-center"):
            raise ConfigError(f"unknown blend rule {self.blend!r}")
        if len(self.mean) != 3 or len(self.std) != 3 or any(s <= 0 for s in self.std):
            raise ConfigError("mean/std need 3 entries with std > 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def base_preset() -> RunConfig:
    return RunConfig()


def large_preset() -> RunConfig:
    # Only the backbone depth differs from the base variant.
    cfg = RunConfig()
    cfg.model.backbone.stage_depths = [6, 6, 18, 6]
    return cfg


def toy_preset() -> RunConfig:
    """Narrow model on 64px tiles, used by the probe set and gradient checks."""
    cfg = RunConfig()
    cfg.model = ModelConfig(
        backbone=BackboneConfig(stage_depths=[1, 1, 2, 1], stage_widths=[8, 12, 16, 16],
                                growth=4, stem_width=8, bottleneck_expansion=2),
        aspp=ASPPConfig(dilation_rates=[1, 2, 3], out_channels=8),
        ocr=OCRConfig(num_regions=3, key_dim=8, mid_channels=16),
        fpn_width=8,
    )
    cfg.data.tile_size = 64
    cfg.data.predict_overlap = 16
    cfg.train.batch_size = 8
    cfg.train.epochs = 200
    cfg.train.lr = 5e-3
    cfg.train.patience = 20
    return cfg


PRESETS = {"base": base_preset, "large": large_preset, "toy": toy_preset}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- flat key = value serialization ------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_scalar(text: str, typ, key: str):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} is not a {typ.__name__}") from None
    raise ConfigError(f"unsupported field type for {key}: {typ}")


def _parse_value(text: str, typ, key: str):
    if typing.get_origin(typ) in (list, tuple):
        (inner,) = set(typing.get_args(typ))
        items = [t for t in text.split(",") if t.strip()]
        return [_parse_scalar(t, inner, key) for t in items]
    return _parse_scalar(text, typ, key)


def flatten(cfg, prefix: str = "") -> dict[str, str]:
    """Dotted key -> formatted value for every leaf field of a config tree."""
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = _format_value(value)
    return out


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return a copy of ``cfg`` with dotted-key string values applied.

    Sub-configs are rebuilt after assignment so their validation runs on the
    final combination of values, not on each intermediate.
    """
    tree = _to_tree(cfg)
    for key, text in pairs.items():
        parts = key.strip().split(".")
        node, typ_owner = tree, type(cfg)
        for part in parts[:-1]:
            hints = typing.get_type_hints(typ_owner)
            if part not in hints or not dataclasses.is_dataclass(hints[part]):
                raise ConfigError(f"unknown config key {key!r}")
            node, typ_owner = node[part], hints[part]
        hints = typing.get_type_hints(typ_owner)
        leaf = parts[-1]
        if leaf not in hints or dataclasses.is_dataclass(hints[leaf]):
            raise ConfigError(f"unknown config key {key!r}")
        node[leaf] = _parse_value(text, hints[leaf], key)
    return _from_tree(type(cfg), tree)


def _to_tree(cfg) -> dict:
    return {f.name: (_to_tree(v) if dataclasses.is_dataclass(v) else copy.deepcopy(v))
            for f in dataclasses.fields(cfg) for v in [getattr(cfg, f.name)]}


def _from_tree(cls, tree: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in tree.items():
        if name not in hints:
            raise ConfigError(f"unknown config key {name!r} for {cls.__name__}")
        if dataclasses.is_dataclass(hints[name]):
            kwargs[name] = _from_tree(hints[name], value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    return _to_tree(cfg)


def from_dict(cls, data: dict):
    """Rebuild a config dataclass from :func:`to_dict` output.

    Missing keys fall back to the dataclass defaults.
    """
    base = _to_tree(cls())
    def merge(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                merge(dst[k], v)
            else:
                dst[k] = v
    merge(base, data)
    return _from_tree(cls, base)


def parse_pairs(lines) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = parse_pairs(path.read_text().splitlines())
    return apply_overrides(base or RunConfig(), pairs)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(cfg).items())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()

