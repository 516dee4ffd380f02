#!/usr/bin/env python3
"""
Experiment configuration.

Config files are line oriented::

    # comment
    arch = resnet20
    train.epochs = 200
    train.distill.eps_d = 0.07
    eval.eps_grid = 0.01, 0.02, 0.03

Dotted keys address fields of ``ExperimentConfig`` and its nested
dataclasses; values are coerced to the field's declared type. ``none``
clears optional fields.
"""

import re
import typing
import hashlib
import logging
import dataclasses
from pathlib import Path
from typing import Optional
from dataclasses import dataclass, field

import torch

from eio import EIO_ROOT
from eio.archspec import read_arch, make_scope
from eio.attacks import BlackboxConfig, WhiteboxConfig, ENSEMBLE_RULES
from eio.data import DatasetDescriptor
from eio.trainer import SGDConfig, TrainConfig, FinetuneConfig


logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
PROTOCOLS = ("blackbox", "whitebox", "transfer")


class ConfigError(RuntimeError):
    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        locus = []
        if line is not None:
            locus.append(f"line {line}")
        if key is not None:
            locus.append(f"key '{key}'")
        if locus:
            message = f"{message} ({', '.join(locus)})"
        super().__init__(message)


@dataclass
class EvalConfig:
    eps_grid: tuple = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07)
    n_samples: int = 1000
    protocols: tuple = ("blackbox", "whitebox")
    transfer_eps: float = 0.03
    ensemble_rule: str = "mean-prob"
    cache: bool = True
    plots: bool = True


@dataclass
class DeriveConfig:
    count: int = 1
    finetune: bool = True


@dataclass
class SurrogateConfig(SGDConfig):
    count: int = 3
    arch: Optional[str] = None
    nproc: int = 1


@dataclass
class ExperimentConfig:
    name: str = "eio"
    arch: str = "resnet20"
    scope: str = "all"
    n: int = 2
    seed: int = 0
    output_dir: str = "default"
    dtype: str = "float32"
    data: DatasetDescriptor = field(default_factory=DatasetDescriptor)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    derive: DeriveConfig = field(default_factory=DeriveConfig)
    surrogates: SurrogateConfig = field(default_factory=SurrogateConfig)
    blackbox: BlackboxConfig = field(default_factory=BlackboxConfig)
    whitebox: WhiteboxConfig = field(default_factory=WhiteboxConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def output_path(self):
        path = Path(self.output_dir)
        return path if path.is_absolute() else EIO_ROOT / path

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def validate(self):
        """Check value ranges and that every referenced path exists."""
        try:
            arch = read_arch(self.arch)
            if self.surrogates.arch is not None:
                read_arch(self.surrogates.arch)
        except FileNotFoundError as err:
            raise ConfigError(str(err), key="arch") from err
        checks = [
                ("scope", lambda: make_scope(arch, self.scope)),
                ("data", lambda: self.data.validate()),
                ("train", lambda: self.train.validate()),
                ("finetune", lambda: self.finetune.validate()),
                ("surrogates", lambda: self.surrogates.validate()),
        ]
        for key, check in checks:
            try:
                check()
            except (ValueError, FileNotFoundError) as err:
                raise ConfigError(str(err), key=key) from err
        if self.n < 1:
            raise ConfigError(f"n must be >= 1: {self.n}", key="n")
        if self.dtype not in DTYPES:
            raise ConfigError(f"Unknown dtype: {self.dtype}", key="dtype")
        if not self.eval.eps_grid or any(e < 0 for e in self.eval.eps_grid):
            raise ConfigError("eps grid must be non-empty and >= 0", key="eval.eps_grid")
        unknown = [p for p in self.eval.protocols if p not in PROTOCOLS]
        if unknown:
            raise ConfigError(f"Unknown protocols: {unknown}", key="eval.protocols")
        if self.eval.ensemble_rule not in ENSEMBLE_RULES:
            raise ConfigError(f"Unknown ensemble rule: {self.eval.ensemble_rule}",
                    key="eval.ensemble_rule")
        if self.derive.count < 1:
            raise ConfigError(f"derive.count must be >= 1: {self.derive.count}",
                    key="derive.count")
        if self.surrogates.count < 0:
            raise ConfigError("surrogates.count must be >= 0", key="surrogates.count")
        return self


def _unwrap_optional(hint):
    if typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        return args[0], True
    return hint, False


def _auto(text):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


class ConfigParser:
    p_comment = re.compile(R"^\s*(#.*)?$")
    p_entry = re.compile(R"^\s*(?P<key>[A-Za-z_][\w\.]*)\s*=\s*(?P<value>.*?)\s*(#.*)?$")
    p_override = re.compile(R"^(?P<key>[A-Za-z_][\w\.]*)=(?P<value>.*)$")
    true_words = ("true", "yes", "on", "1")
    false_words = ("false", "no", "off", "0")

    def __init__(self, cfg=None):
        self.cfg = cfg if cfg is not None else ExperimentConfig()

    def parse_text(self, text):
        for lineno, line in enumerate(text.splitlines(), start=1):
            if self.p_comment.match(line):
                continue
            m = self.p_entry.match(line)
            if m is None:
                raise ConfigError(f"Malformed config line: {line.strip()!r}", line=lineno)
            self.set(m["key"], m["value"], line=lineno)
        return self.cfg

    def parse_override(self, text):
        m = self.p_override.match(text.strip())
        if m is None:
            raise ConfigError(f"Override must be key=value: {text!r}")
        self.set(m["key"], m["value"])
        return self.cfg

    def _resolve(self, key, line=None):
        *parents, name = key.split(".")
        obj = self.cfg
        for part in parents:
            if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
                raise ConfigError("Unknown config key", line=line, key=key)
            obj = getattr(obj, part)
        names = {f.name for f in dataclasses.fields(obj)} if dataclasses.is_dataclass(obj) else ()
        if name not in names:
            raise ConfigError("Unknown config key", line=line, key=key)
        if dataclasses.is_dataclass(getattr(obj, name)):
            raise ConfigError("Key names a section, not a value", line=line, key=key)
        return obj, name

    def set(self, key, text, line=None):
        obj, name = self._resolve(key, line)
        hint = typing.get_type_hints(type(obj))[name]
        try:
            value = self.coerce(text, hint, getattr(obj, name))
        except ValueError as err:
            raise ConfigError(f"Invalid value {text!r}: {err}", line=line, key=key) from err
        setattr(obj, name, value)

    def coerce(self, text, hint, current):
        text = text.strip()
        hint, optional = _unwrap_optional(hint)
        if optional and text.lower() == "none":
            return None
        if hint is bool:
            if text.lower() in self.true_words:
                return True
            if text.lower() in self.false_words:
                return False
            raise ValueError("expected a boolean")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple:
            items = [s.strip() for s in text.split(",") if s.strip()]
            if current:
                kind = type(current[0])
                return tuple(kind(s) for s in items)
            return tuple(_auto(s) for s in items)
        return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def iter_items(cfg, prefix=""):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            yield from iter_items(value, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", value


def dump_config(cfg):
    """Canonical text form; parsing it gives back an equal config."""
    return "".join(f"{key} = {_format(value)}\n" for key, value in iter_items(cfg))


def config_hash(cfg):
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def load_config(path=None, overrides=()):
    """Defaults, then the config file, then ``key=value`` overrides."""
    parser = ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        parser.parse_text(path.read_text(encoding="ascii"))
    for override in overrides:
        parser.parse_override(override)
    return parser.cfg


def parse_config(text, overrides=()):
    parser = ConfigParser()
    parser.parse_text(text)
    for override in overrides:
        parser.parse_override(override)
    return parser.cfg
