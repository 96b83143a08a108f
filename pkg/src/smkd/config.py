"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import AugmentParams
from .head import HeadConfig
from .trainer import TrainConfig
from .vit import VitConfig

REQUIRED_KEYS = ("dataset", "epochs")


class ConfigError(ValueError):
    """A configuration line is malformed or names an invalid value."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = "" if line is None else f"line {line}: "
        super().__init__(f"{where}{message}")
        self.key = key
        self.line = line


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "synthetic"
    n_classes: int = 12
    per_class: int = 200
    image_size: int = 32
    data_seed: int = 0
    base_classes: int = 6
    val_classes: int = 1
    novel_classes: int = 5
    variant: str = "cifar100"
    split_file: str = ""


@dataclass(frozen=True)
class EvalConfig:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    episodes: int = 600
    mode: str = "cls"
    method: str = "prototype"


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def arch_dict(self) -> dict:
        return {"vit": self.train.vit.to_dict(), "head": self.train.head.to_dict()}

    def arch_hash(self) -> str:
        return arch_hash(self.train.vit, self.train.head)


def arch_hash(vit: VitConfig, head: HeadConfig) -> str:
    text = json.dumps({"vit": vit.to_dict(), "head": head.to_dict()}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _field_types(cls) -> dict[str, type]:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


# key prefix -> (dataclass, attribute path in RunConfig)
_SECTIONS = {
    "vit.": (VitConfig, ("train", "vit")),
    "head.": (HeadConfig, ("train", "head")),
    "augment.": (AugmentParams, ("train", "augment")),
    "eval.": (EvalConfig, ("eval",)),
}


def _convert(raw: str, kind: type, key: str, line: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}", key=key, line=line) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment.

    Plain keys address the data or training settings; ``vit.``, ``head.``,
    ``augment.`` and ``eval.`` prefixes address the nested sections.

    Raises:
        ConfigError: naming the offending key and line.
    """
    groups: dict[tuple[str, ...], dict] = {("data",): {}, ("train",): {}, ("eval",): {}}
    for sec in _SECTIONS.values():
        groups.setdefault(sec[1], {})
    data_types = _field_types(DataConfig)
    train_types = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig) if f.name not in ("vit", "head", "augment")}
    train_types["lambda"] = float
    seen: dict[str, int] = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", line=lineno)
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", key=key, line=lineno)
        seen[key] = lineno
        for prefix, (cls, path) in _SECTIONS.items():
            if key.startswith(prefix):
                name = key[len(prefix) :]
                types = _field_types(cls)
                if name not in types:
                    raise ConfigError(f"unknown key {key!r}", key=key, line=lineno)
                groups[path][name] = (_convert(value, types[name], key, lineno), lineno)
                break
        else:
            if key in data_types:
                groups[("data",)][key] = (_convert(value, data_types[key], key, lineno), lineno)
            elif key in train_types:
                name = "lam" if key == "lambda" else key
                groups[("train",)][name] = (_convert(value, train_types[key], key, lineno), lineno)
            else:
                raise ConfigError(f"unknown key {key!r}", key=key, line=lineno)

    for key in REQUIRED_KEYS:
        if key not in seen:
            raise ConfigError(f"missing required key {key!r} in {source}", key=key)

    def build(cls, path, **extra):
        values = {k: v for k, (v, _) in groups[path].items()}
        try:
            return cls(**values, **extra)
        except (TypeError, ValueError) as exc:
            first = min((ln for _, ln in groups[path].values() if ln is not None), default=None)
            raise ConfigError(f"invalid {'.'.join(path)} settings: {exc}", line=first) from None

    vit = build(VitConfig, ("train", "vit"))
    head_values = dict(groups[("train", "head")])
    head_values.setdefault("in_dim", (vit.embed_dim, None))
    groups[("train", "head")] = head_values
    head = build(HeadConfig, ("train", "head"))
    aug = build(AugmentParams, ("train", "augment"))
    if "output_size" not in groups[("train", "augment")]:
        aug = replace(aug, output_size=vit.image_size)
    train_values = groups[("train",)]
    if "warmup_epochs" not in train_values and "epochs" in train_values:
        # short runs keep the default warmup only while it fits
        epochs = train_values["epochs"][0]
        train_values["warmup_epochs"] = (max(0, min(TrainConfig.warmup_epochs, epochs - 1)), None)
    train = build(TrainConfig, ("train",), vit=vit, head=head, augment=aug)
    return RunConfig(data=build(DataConfig, ("data",)), train=train, eval=build(EvalConfig, ("eval",)))


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def format_config(cfg: RunConfig) -> str:
    """Render ``cfg`` back to the flat text format (parses to an equal config)."""
    lines = []
    for f in fields(DataConfig):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.data, f.name))}")
    for f in fields(TrainConfig):
        if f.name in ("vit", "head", "augment"):
            continue
        lines.append(f"{'lambda' if f.name == 'lam' else f.name} = {_fmt(getattr(cfg.train, f.name))}")
    for prefix, obj in (("vit.", cfg.train.vit), ("head.", cfg.train.head), ("augment.", cfg.train.augment), ("eval.", cfg.eval)):
        for f in fields(obj):
            lines.append(f"{prefix}{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    return str(v)

