"""Run configuration: YAML files, shipped presets, strict key checking.

A run config has four sections -- ``kind`` (classifier or generator),
``model``, ``train`` and ``data`` -- that map onto the dataclasses they
configure. Unknown keys anywhere are rejected with their dotted path, and a
config survives a save/load round trip unchanged, which is what lets every
run write its resolved config next to its outputs for exact replay.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources

import yaml

from .generator import GenConfig
from .model import NestConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed run configuration (unknown key, wrong type, bad value)."""


@dataclass
class DataConfig:
    # "synth", "cifar10" (directory supplied at run time), or a literal path
    source: str = "synth"
    n_train: int = 64
    n_test: int = 256
    seed: int = 0
    # per-channel normalization, resolved from the training split on first
    # use and persisted so eval/interpret runs reuse identical stats
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None


@dataclass
class RunConfig:
    kind: str
    model: NestConfig | GenConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


# published parameter counts the `params --expect-paper` mode compares against
PAPER_PARAM_TARGETS = {
    "nest-t-cifar": 6_200_000,
    "nest-s-cifar": 23_400_000,
    "nest-b-cifar": 90_100_000,
    "nest-t-imagenet": 17_000_000,
    "gen-64": 74_400_000,
}
PARAM_TOLERANCE = 0.02


# ---------------------------------------------------------------------------
# dict <-> dataclass plumbing
# ---------------------------------------------------------------------------


def _coerce(value, type_str: str, path: str):
    optional = "None" in type_str
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: may not be null")
    if type_str.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if type_str == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if type_str == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if type_str == "str" and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _section_to_dataclass(cls, raw: dict, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {raw!r}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key {path}.{key}")
        kwargs[key] = _coerce(value, str(fields[key].type), f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    known = {"kind", "model", "train", "data"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {key}")
    kind = raw.get("kind", "classifier")
    if kind == "classifier":
        model_cls = NestConfig
    elif kind == "generator":
        model_cls = GenConfig
    else:
        raise ConfigError(f"kind: expected 'classifier' or 'generator', got {kind!r}")
    return RunConfig(
        kind=kind,
        model=_section_to_dataclass(model_cls, raw.get("model"), "model"),
        train=_section_to_dataclass(TrainConfig, raw.get("train"), "train"),
        data=_section_to_dataclass(DataConfig, raw.get("data"), "data"),
    )


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def run_config_to_dict(rc: RunConfig) -> dict:
    out = {"kind": rc.kind}
    for section in ("model", "train", "data"):
        obj = getattr(rc, section)
        out[section] = {f.name: _plain(getattr(obj, f.name))
                        for f in dataclasses.fields(obj)
                        if getattr(obj, f.name) is not None}
    return out


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    try:
        return run_config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_run_config(path, rc: RunConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(run_config_to_dict(rc), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def preset_names() -> list[str]:
    root = resources.files("nestvit") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> RunConfig:
    path = resources.files("nestvit") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    try:
        return run_config_from_dict(yaml.safe_load(path.read_text()))
    except ConfigError as exc:
        raise ConfigError(f"preset {name}: {exc}") from exc
