"""Flat ``key = value`` run configuration with dotted section keys."""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attack import AttackConfig
from .data import Dataset, load_cifar_binary, load_raw, synthetic_blobs
from .exceptions import ConfigError, ContractError
from .model import ArchConfig
from .train import TrainConfig

DATASET_FORMATS = ("cifar10", "cifar100", "raw", "synthetic")


@dataclass
class DatasetConfig:
    format: str = "synthetic"
    path: str | None = None
    test_path: str | None = None
    n_per_class: int = 128
    n_test_per_class: int = 64
    classes: int = 2
    separation: float = 1.0
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> "DatasetConfig":
        if self.format not in DATASET_FORMATS:
            raise ConfigError(f"dataset.format: expected one of {DATASET_FORMATS}, got {self.format!r}")
        if self.format != "synthetic":
            if not self.path:
                raise ConfigError("dataset.path: required for file-based datasets")
            if not Path(self.path).is_file():
                raise ConfigError(f"dataset.path: file not found: {self.path}")
            if self.test_path and not Path(self.test_path).is_file():
                raise ConfigError(f"dataset.test_path: file not found: {self.test_path}")
        elif self.separation <= 0:
            raise ConfigError(f"dataset.separation: must be > 0, got {self.separation}")
        return self

    def _load(self, path: str, num_classes: int | None) -> Dataset:
        if self.format == "cifar10":
            return load_cifar_binary(path, "c10")
        if self.format == "cifar100":
            return load_cifar_binary(path, "c100")
        return load_raw(path, num_classes)

    def load(self, shape, num_classes: int) -> tuple[Dataset, Dataset]:
        """``(train, test)``; the test split falls back to the training file."""
        if self.format == "synthetic":
            kw = dict(classes=self.classes, shape=tuple(shape), separation=self.separation, noise=self.noise)
            train = synthetic_blobs(self.n_per_class, seed=self.seed, center_seed=self.seed, **kw)
            test = synthetic_blobs(self.n_test_per_class, seed=self.seed + 1, center_seed=self.seed, **kw)
            return train, test
        train = self._load(self.path, num_classes)
        test = self._load(self.test_path, num_classes) if self.test_path else train
        return train, test

    def load_eval(self, num_classes: int, shape) -> Dataset:
        if self.format == "synthetic":
            return self.load(shape, num_classes)[1]
        return self._load(self.test_path or self.path, num_classes)


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> "RunConfig":
        self.arch.validate()
        self.train.validate()
        try:
            self.attack.validate()
        except ContractError as exc:
            raise ConfigError(f"attack.{exc}") from None
        self.dataset.validate()
        if self.dataset.format == "synthetic" and self.dataset.classes != self.arch.num_classes:
            raise ConfigError(
                f"dataset.classes: {self.dataset.classes} does not match arch.num_classes {self.arch.num_classes}"
            )
        return self


SECTIONS = {"arch": ArchConfig, "train": TrainConfig, "attack": AttackConfig, "dataset": DatasetConfig}
TOP_LEVEL = {"seed", "out"}


def parse_value(raw: str):
    """Numbers, booleans, comma lists and bare strings."""
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in raw:
        return [parse_value(p) for p in raw.split(",") if p.strip()]
    try:
        v = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw
    if isinstance(v, (list, tuple)):
        return list(v)
    return v if isinstance(v, (int, float)) else raw


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse config text into a flat ``{dotted_key: value}`` mapping."""
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def parse_file(path) -> dict[str, object]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config: {path} is not UTF-8 ({exc})") from None
    return parse_text(text, str(path))


def _coerce(cls, name: str, value):
    typ = {f.name: f.type for f in fields(cls)}[name]
    typ = str(typ)
    if value is None:
        return None
    if "tuple" in typ:
        return tuple(value) if isinstance(value, list) else (value,)
    if typ.startswith("bool"):
        if not isinstance(value, bool):
            raise ValueError(f"expected true/false, got {value!r}")
        return value
    if typ.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ValueError(f"expected an integer, got {value!r}")
        return value
    if typ.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    if typ.startswith("str"):
        return str(value)
    return value


def build_run_config(flat: dict[str, object]) -> RunConfig:
    """Turn a flat mapping into a validated :class:`RunConfig`; unknown keys are rejected."""
    per_section: dict[str, dict] = {k: {} for k in SECTIONS}
    top: dict[str, object] = {}
    for key, value in flat.items():
        if key in TOP_LEVEL:
            top[key] = value
            continue
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section)
        if cls is None or name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"{key}: unknown config key")
        try:
            per_section[section][name] = _coerce(cls, name, value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    try:
        seed = int(top.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError(f"seed: expected an integer, got {top.get('seed')!r}") from None
    per_section["train"].setdefault("seed", seed)
    per_section["attack"].setdefault("seed", seed)
    try:
        attack = AttackConfig(**per_section["attack"])
    except ContractError as exc:
        raise ConfigError(f"attack.{exc}") from None
    cfg = RunConfig(
        arch=ArchConfig(**per_section["arch"]),
        train=TrainConfig(**per_section["train"]),
        attack=attack,
        dataset=DatasetConfig(**per_section["dataset"]),
        seed=seed,
        out=str(top.get("out", "runs/default")),
    )
    return cfg.validate()


def to_text(cfg: RunConfig) -> str:
    """Serialize back to the flat format (used for sweep subdirectories)."""
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    for section, obj in (("arch", cfg.arch), ("train", cfg.train), ("attack", cfg.attack), ("dataset", cfg.dataset)):
        for f in fields(obj):
            if section in ("train", "attack") and f.name == "seed":
                continue
            v = getattr(obj, f.name)
            if v is None:
                continue
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v) + ("," if len(v) == 1 else "")
            lines.append(f"{section}.{f.name} = {v!r}" if isinstance(v, float) else f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
