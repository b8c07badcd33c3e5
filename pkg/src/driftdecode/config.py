"""Run configuration files.

Format: INI-style sections of ``key = value`` lines (``#`` comments)::

    [train]
    lambda_drift = 0.15
    temps = 0.05, 0.2

    [model]
    base_width = 32

    [data]
    dataset = mnist_idx
    data_path = /data/mnist

    [extractor]
    extractor_kind = fixed_random

Keys in ``[train]`` and ``[model]`` are the field names of ``TrainConfig``
and ``ModelConfig``. Every key is unique across sections, so overrides may
name a bare key (``epochs=0``) or a qualified one (``train.epochs=0``).
Tuples are comma-separated, ``none`` clears optional values and booleans
accept true/false/1/0/yes/no.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .features import ExtractorSpec
from .models import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def inner(text):
        return None if text.strip().lower() in ("none", "") else parse(text)

    return inner


def _tuple(item):
    def inner(text):
        return tuple(item(v.strip()) for v in text.split(",") if v.strip())

    return inner


def _parser_for(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        return _tuple(int if kind is int else float if kind is float else str)
    return str


def _dataclass_keys(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = _parser_for(default)
    return out


DATA_KEYS = {
    "dataset": str,
    "data_path": str,
    "val_path": _optional(str),
    "val_split": str,
    "crop": _optional(_tuple(int)),
    "hflip": _bool,
    "train_limit": _optional(int),
    "val_limit": _optional(int),
}

EXTRACTOR_KEYS = {
    "extractor_kind": str,
    "extractor_layers": _tuple(str),
    "extractor_seed": _optional(int),
    "extractor_archive": _optional(str),
    "extractor_widths": _tuple(int),
}

SCHEMA = {
    "train": _dataclass_keys(TrainConfig),
    "model": {**_dataclass_keys(ModelConfig), "image_shape": _optional(_tuple(int))},
    "data": DATA_KEYS,
    "extractor": EXTRACTOR_KEYS,
}
KEY_SECTION = {key: section for section, keys in SCHEMA.items() for key in keys}
assert len(KEY_SECTION) == sum(len(k) for k in SCHEMA.values()), "config keys must be unique across sections"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)  # ModelConfig kwargs; image_shape may come from the dataset
    data: dict = field(default_factory=lambda: {
        "dataset": "mnist_idx", "data_path": ".", "val_path": None, "val_split": "test", "crop": None,
        "hflip": False, "train_limit": None, "val_limit": None,
    })
    extractor: dict = field(default_factory=lambda: {
        "extractor_kind": "fixed_random", "extractor_layers": ("L1", "L2", "L3"), "extractor_seed": None,
        "extractor_archive": None, "extractor_widths": (16, 32, 64),
    })

    def model_config(self, image_shape=None) -> ModelConfig:
        kwargs = dict(self.model)
        if kwargs.get("image_shape") is None:
            if image_shape is None:
                raise ConfigError("image_shape is not set and no dataset shape is available", "image_shape")
            kwargs["image_shape"] = tuple(image_shape)
        return ModelConfig(**kwargs)

    def extractor_spec(self, in_channels: int = 3) -> ExtractorSpec:
        e = self.extractor
        seed = self.train.seed if e["extractor_seed"] is None else e["extractor_seed"]
        return ExtractorSpec(kind=e["extractor_kind"], layers=e["extractor_layers"], seed=seed,
                             archive_path=e["extractor_archive"], in_channels=in_channels,
                             widths=e["extractor_widths"])

    def to_dict(self) -> dict:
        def plain(d):
            return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

        return {"train": self.train.to_dict(), "model": plain(self.model), "data": plain(self.data),
                "extractor": plain(self.extractor)}


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value", item)
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def _resolve(key: str, section: str | None = None) -> tuple[str, str]:
    if "." in key and section is None:
        section, key = key.split(".", 1)
    if section is not None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]", section)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]", key)
        return section, key
    if key not in KEY_SECTION:
        raise ConfigError(f"unknown config key {key!r}", key)
    return KEY_SECTION[key], key


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides in order."""
    raw = {section: {} for section in SCHEMA}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in cp.sections():
            for key, value in cp.items(section):
                sec, k = _resolve(key, section)
                raw[sec][k] = value
    for item in overrides:
        key, value = parse_override(item)
        sec, k = _resolve(key)
        raw[sec][k] = value
    parsed = {}
    for section, items in raw.items():
        parsed[section] = {}
        for key, text in items.items():
            try:
                parsed[section][key] = SCHEMA[section][key](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}", key) from exc
    cfg = RunConfig()
    try:
        cfg.train = TrainConfig(**parsed["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [train] settings: {exc}", _first_key(parsed["train"], exc)) from exc
    cfg.model = parsed["model"]
    if cfg.model.get("image_shape") is not None:
        try:
            ModelConfig(**cfg.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [model] settings: {exc}", _first_key(parsed["model"], exc)) from exc
    cfg.data.update(parsed["data"])
    if cfg.data["dataset"] not in ("mnist_idx", "image_folder"):
        raise ConfigError(f"unknown dataset kind {cfg.data['dataset']!r}", "dataset")
    cfg.extractor.update(parsed["extractor"])
    if cfg.extractor["extractor_kind"] not in ("fixed_random", "pretrained_archive"):
        raise ConfigError(f"unknown extractor kind {cfg.extractor['extractor_kind']!r}", "extractor_kind")
    return cfg


def _first_key(items: dict, exc: Exception) -> str | None:
    text = str(exc)
    for key in items:
        if key in text:
            return key
    return None


def snapshot(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
