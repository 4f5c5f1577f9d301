"""Experiment configuration: a sectioned INI file, strictly validated.

Every key has a default mirroring the reference protocol, so a file that
only names the manifest reproduces the reference run::

    [dataset]
    manifest = data/manifest.csv

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentationConfig
from .backbones import BACKBONES, CUT_RANGE
from .dataset import DEFAULT_AGE_BOUNDS, REFERENCE_COUNTS, ChannelPolicy
from .errors import ConfigError, MissingFile, UnknownConfigKey
from .trainer import TrainingConfig


@dataclass(frozen=True)
class DatasetSection:
    manifest: Path | None = None
    train_count: int = REFERENCE_COUNTS[0]
    val_count: int = REFERENCE_COUNTS[1]
    test_count: int = REFERENCE_COUNTS[2]
    seed: int = 42
    image_height: int = 256
    image_width: int = 256
    channel_policy: str = ChannelPolicy.REPLICATE_GRAY_TO_3.value
    age_min: float = DEFAULT_AGE_BOUNDS[0]
    age_max: float = DEFAULT_AGE_BOUNDS[1]

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.train_count, self.val_count, self.test_count


@dataclass(frozen=True)
class ModelSection:
    backbone: str = "InceptionV3"
    cut_block_index: int | None = None
    pretrained: bool = True
    weights_dir: Path | None = None


@dataclass(frozen=True)
class SweepSection:
    backbones: tuple[str, ...] | None = None
    cuts: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepSection = field(default_factory=SweepSection)
    output_dir: Path = Path("runs/experiment")
    source: Path | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, Path):
                return str(v)
            if isinstance(v, tuple):
                return [conv(x) for x in v]
            if hasattr(v, "value"):
                return v.value
            return v

        out = {}
        for name in ("dataset", "augmentation", "model", "training", "sweep"):
            section = getattr(self, name)
            out[name] = {f.name: conv(getattr(section, f.name)) for f in dataclasses.fields(section)}
        out["output"] = {"dir": str(self.output_dir)}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, seed=None, deterministic=None, output_dir=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, seed=int(seed)),
                                      training=dataclasses.replace(cfg.training, seed=int(seed)))
        if deterministic:
            cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, deterministic=True))
        if output_dir is not None:
            cfg = dataclasses.replace(cfg, output_dir=Path(output_dir))
        return cfg


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in raw.replace(";", ",").split(",") if p.strip())


def _optional_int(raw: str):
    v = raw.strip().lower()
    return None if v in ("", "none", "full") else int(v)


def _path(base: Path):
    def parse(raw: str):
        raw = raw.strip()
        if not raw:
            return None
        p = Path(raw).expanduser()
        return p if p.is_absolute() else base / p

    return parse


def _names(raw: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in raw.replace(";", ",").split(",") if p.strip())


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(p) for p in _names(raw))


def _parse_section(parser, section, cls, converters, base_kwargs=None):
    kwargs = dict(base_kwargs or {})
    if not parser.has_section(section):
        return cls(**kwargs)
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key, raw in parser.items(section):
        if key not in allowed:
            raise UnknownConfigKey(f"[{section}] unknown key {key!r}; allowed: {sorted(allowed)}")
        conv = converters.get(key)
        if conv is None:
            default = next(f for f in dataclasses.fields(cls) if f.name == key).default
            conv = _bool if isinstance(default, bool) else type(default) if default is not None else str
        try:
            kwargs[key] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def load_config(path, require_manifest: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(parser, path.parent, path, require_manifest)


def parse_config(parser: configparser.ConfigParser, base: Path, source=None,
                 require_manifest: bool = True) -> ExperimentConfig:
    known = {"dataset", "augmentation", "model", "training", "sweep", "output"}
    for section in parser.sections():
        if section not in known:
            raise UnknownConfigKey(f"unknown section [{section}]; allowed: {sorted(known)}")

    dataset = _parse_section(parser, "dataset", DatasetSection, {"manifest": _path(base)})
    if require_manifest:
        if dataset.manifest is None:
            raise ConfigError("[dataset] manifest is required")
        if not dataset.manifest.is_file():
            raise MissingFile(f"manifest not found: {dataset.manifest}")
    try:
        ChannelPolicy(dataset.channel_policy)
    except ValueError:
        raise ConfigError(f"[dataset] unknown channel_policy {dataset.channel_policy!r}") from None

    augmentation = _parse_section(parser, "augmentation", AugmentationConfig,
                                  {"rotation_degrees": _floats, "brightness_range": _floats})
    model = _parse_section(parser, "model", ModelSection,
                           {"cut_block_index": _optional_int, "weights_dir": _path(base)})
    if model.backbone not in BACKBONES:
        raise ConfigError(f"[model] unknown backbone {model.backbone!r}; choose from {BACKBONES}")
    if model.cut_block_index is not None:
        if model.backbone != "InceptionV3":
            raise ConfigError("[model] cut_block_index is only valid for InceptionV3")
        if model.cut_block_index not in CUT_RANGE:
            raise ConfigError(f"[model] cut_block_index must be in 3..9, got {model.cut_block_index}")
    training = _parse_section(parser, "training", TrainingConfig, {})
    sweep = _parse_section(parser, "sweep", SweepSection, {"backbones": _names, "cuts": _ints})

    output_dir = Path("runs/experiment")
    if parser.has_section("output"):
        for key, raw in parser.items("output"):
            if key != "dir":
                raise UnknownConfigKey(f"[output] unknown key {key!r}; allowed: ['dir']")
            output_dir = _path(base)(raw) or output_dir
    if not output_dir.is_absolute():
        output_dir = base / output_dir
    return ExperimentConfig(dataset, augmentation, model, training, sweep, output_dir, source)


def write_config(cfg: ExperimentConfig, path) -> Path:
    """Serialize to INI (paths written as given; lists comma-separated)."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.to_dict().items():
        parser[section] = {}
        for k, v in values.items():
            if v is None:
                continue
            parser[section][k] = ", ".join(str(x) for x in v) if isinstance(v, list) else str(v)
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)
    return path
