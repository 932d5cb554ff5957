"""Run configuration and category vocabulary."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

CONFIG_VERSION = 1

BASE = "base"
NOVEL = "novel"


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    split: str

    def __post_init__(self):
        if self.split not in (BASE, NOVEL):
            raise ConfigError(f"category {self.name}: split must be base|novel, got {self.split!r}")


@dataclass(frozen=True)
class CategoryTable:
    """Vocabulary with base/novel split; ids must be unique."""

    entries: tuple[Category, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [c.id for c in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("category ids must be unique")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def by_id(self, cid: int) -> Category:
        for c in self.entries:
            if c.id == cid:
                return c
        raise KeyError(f"no category with id {cid}")

    def ids(self, split: str | None = None) -> list[int]:
        return [c.id for c in self.entries if split is None or c.split == split]

    def base_ids(self) -> list[int]:
        return self.ids(BASE)

    def novel_ids(self) -> list[int]:
        return self.ids(NOVEL)

    def to_json(self) -> list[dict]:
        return [{"id": c.id, "name": c.name, "split": c.split} for c in self.entries]

    @staticmethod
    def from_json(rows: list[dict]) -> "CategoryTable":
        return CategoryTable(tuple(Category(int(r["id"]), str(r["name"]), str(r["split"])) for r in rows))


@dataclass(frozen=True)
class TrainSchedule:
    iters: int
    lr: float
    weight_decay: float = 0.0

    def validate(self, label: str) -> None:
        if self.iters < 0:
            raise ConfigError(f"{label}_iters must be >= 0, got {self.iters}")
        if self.lr < 0:
            raise ConfigError(f"{label}_lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"{label}_weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline knobs with their published defaults.

    m is the cross-attention layer inspected for activation maps, G the
    number of masking iterations, K the proposal candidate budget, Z the
    points sampled per polarity for patch segmentation. Trainer schedules
    default to desk-scale iteration counts; lr/weight-decay follow the
    published values.
    """

    m: int = 8
    G: int = 3
    K: int = 50
    Z: int = 10
    threshold: float = 0.5
    bg_weight: float = 0.2
    seed: int = 0
    upsample_mode: str = "nearest"
    soft_box_guidance: bool = False
    bg_weight_mode: str = "logit"
    wspn: TrainSchedule = field(default_factory=lambda: TrainSchedule(4000, 0.003, 0.0001))
    wss: TrainSchedule = field(default_factory=lambda: TrainSchedule(120, 0.25, 0.0))
    embed: TrainSchedule = field(default_factory=lambda: TrainSchedule(500, 0.1, 0.0))

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.G < 0:
            raise ConfigError(f"G must be >= 0, got {self.G}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.Z < 1:
            raise ConfigError(f"Z must be >= 1, got {self.Z}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if not (0.0 < self.bg_weight):
            raise ConfigError(f"bg_weight must be > 0, got {self.bg_weight}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ConfigError(f"upsample_mode must be nearest|bilinear, got {self.upsample_mode!r}")
        if self.bg_weight_mode not in ("logit", "loss"):
            raise ConfigError(f"bg_weight_mode must be logit|loss, got {self.bg_weight_mode!r}")
        self.wspn.validate("wspn")
        self.wss.validate("wss")
        self.embed.validate("embed")


_FLAT_SCHEDULES = ("wspn", "wss", "embed")


def config_to_flat_json(cfg: PipelineConfig) -> dict:
    """Flat dict form used by the on-disk config file."""
    out: dict = {"version": CONFIG_VERSION}
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if f.name in _FLAT_SCHEDULES:
            out[f"{f.name}_iters"] = v.iters
            out[f"{f.name}_lr"] = v.lr
            out[f"{f.name}_weight_decay"] = v.weight_decay
        else:
            out[f.name] = v
    return out


def config_from_flat_json(doc: dict) -> PipelineConfig:
    """Parse the flat config form, rejecting unknown keys and bad versions."""
    if "version" not in doc:
        raise ConfigError("config file missing 'version' field")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError(f"config version {doc['version']} not supported (expected {CONFIG_VERSION})")
    known = {"version"}
    kwargs: dict = {}
    for f in fields(PipelineConfig):
        if f.name in _FLAT_SCHEDULES:
            keys = [f"{f.name}_iters", f"{f.name}_lr", f"{f.name}_weight_decay"]
            known.update(keys)
            if any(k in doc for k in keys):
                default = PipelineConfig.__dataclass_fields__[f.name].default_factory()  # type: ignore[misc]
                kwargs[f.name] = TrainSchedule(
                    int(doc.get(keys[0], default.iters)),
                    float(doc.get(keys[1], default.lr)),
                    float(doc.get(keys[2], default.weight_decay)),
                )
        else:
            known.add(f.name)
            if f.name in doc:
                kwargs[f.name] = doc[f.name]
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_flat_json(doc)


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_flat_json(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def override(cfg: PipelineConfig, **updates) -> PipelineConfig:
    """Apply non-None flag overrides on top of a config."""
    updates = {k: v for k, v in updates.items() if v is not None}
    return replace(cfg, **updates) if updates else cfg
