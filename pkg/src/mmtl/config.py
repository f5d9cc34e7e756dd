"""Run configuration: JSON file, typed sections, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldSection:
    n_entities: int = 50
    n_relations: int = 4
    n_years: int = 2
    longtail_fraction: float = 0.1
    eval_fraction: float = 0.2
    patch_grid: int = 4
    patch_dim: int = 16
    image_mode: str = "localized"
    sigma_img: float = 0.05


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 64
    d_mlp: int = 256
    d_vision: int = 64


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 40
    weight_decay: float = 0.0
    target_accuracy: float = 0.95
    eval_every: int = 5


@dataclass(frozen=True)
class TraceSection:
    site: str = "mlp"
    window: int = 3
    corruption: str = "replace"
    noise_scale: float = 3.0
    n_facts: int = 40


@dataclass(frozen=True)
class DetectSection:
    sigma_levels: tuple[float, ...] = (0.05, 0.5, 1.0)
    validation_fraction: float = 0.5


@dataclass(frozen=True)
class EditSection:
    layer: int = 1
    lam: float = 0.01
    lr: float = 0.1
    max_steps: int = 100
    stop_loss: float = 0.05
    n_fix: int = 50
    n_unrelated: int = 40
    sweep_layers: tuple[int, ...] = ()
    sweep_requests: int = 10


SECTIONS = {"world": WorldSection, "model": ModelSection, "train": TrainSection,
            "trace": TraceSection, "detect": DetectSection, "edit": EditSection}
CHOICES = {("trace", "site"): ("mlp", "attn", "hidden"),
           ("trace", "corruption"): ("replace", "gaussian"),
           ("world", "image_mode"): ("localized", "distributed")}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    world: WorldSection = field(default_factory=WorldSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    trace: TraceSection = field(default_factory=TraceSection)
    detect: DetectSection = field(default_factory=DetectSection)
    edit: EditSection = field(default_factory=EditSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def override(self, section: str, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        if not changes:
            return self
        return replace(self, **{section: _section(section, {**asdict(getattr(self, section)), **changes})})


def _coerce(section: str, name: str, typ, value):
    where = f"{section}.{name}"
    if typ in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if typ in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if typ in ("str", str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        allowed = CHOICES.get((section, name))
        if allowed and value not in allowed:
            raise ConfigError(f"{where} must be one of {allowed}")
        return value
    if str(typ).startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        inner = "int" if "int" in str(typ) else "float"
        return tuple(_coerce(section, name, inner, v) for v in value)
    raise ConfigError(f"unsupported field type for {where}")


def _section(name: str, data) -> object:
    cls = SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    values = {k: _coerce(name, k, known[k].type, v) for k, v in data.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def config_from_dict(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    top = {"seed", "out"} | set(SECTIONS)
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {name: _section(name, data[name]) for name in SECTIONS if name in data}
    if "seed" in data:
        kw["seed"] = _coerce("run", "seed", int, data["seed"])
    if "out" in data:
        kw["out"] = _coerce("run", "out", str, data["out"])
    return RunConfig(**kw)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return config_from_dict(data)
