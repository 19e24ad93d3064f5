"""Run configuration: one JSON document covering every component.

Unknown keys and wrongly typed values are rejected before any work starts.
Missing keys take the selected profile's defaults, so an empty document is
a valid config.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional

from .ekf import EkfConfig
from .evaluation import EvalConfig
from .process import ClassPrior, NoiseSpec, ProcessParams
from .trainer import TrainConfig
from .transformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenerateConfig:
    n_traj: int = 2
    N: int = 500

    def __post_init__(self):
        if self.n_traj < 0 or self.N < 1:
            raise ValueError("n_traj must be >= 0 and N >= 1")


DESK_MODEL = ModelConfig(n_layers=4, n_heads=4, n_ctx=128, d_filter=64)
PAPER_MODEL = ModelConfig(n_layers=12, n_heads=4, n_ctx=500, d_filter=128)
PROFILES = {
    "desk": {"model": DESK_MODEL, "n_itr": 2000, "batch_size": 16},
    "paper": {"model": PAPER_MODEL, "n_itr": 50_000, "batch_size": 32},
}

# sections whose fields come from elsewhere in the document
_TRAIN_EXCLUDE = ("model", "prior", "noise", "seed")
_EVAL_EXCLUDE = ("seed",)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    profile: str = "desk"
    out: str = "runs"
    prior: ClassPrior = field(default_factory=ClassPrior)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    model: ModelConfig = DESK_MODEL
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ekf_oracle: EkfConfig = field(default_factory=EkfConfig.oracle)
    ekf_enlarged: EkfConfig = field(default_factory=EkfConfig.enlarged)
    generate: GenerateConfig = field(default_factory=GenerateConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.train, model=self.model, prior=self.prior, noise=self.noise, seed=self.seed)

    def eval_config(self) -> EvalConfig:
        return replace(self.eval, seed=self.seed)


# --- (de)serialisation ------------------------------------------------------------

def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, where)
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if args else None
        return tuple(_convert(inner, v, f"{where}[{i}]") if inner not in (None, Ellipsis) else v
                     for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _build(cls, data: Dict[str, Any], where: str = "", base=None, exclude=()):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _plain(obj, exclude=()):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if f.name not in exclude}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def profile_defaults(profile: str, seed: int = 0) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    p = PROFILES[profile]
    train = TrainConfig(n_itr=p["n_itr"], batch_size=p["batch_size"], model=p["model"])
    return RunConfig(seed=seed, profile=profile, model=p["model"], train=train)


def from_dict(data: Dict[str, Any], profile: Optional[str] = None) -> RunConfig:
    """Validate ``data`` and fill gaps from the profile (``data["profile"]`` or ``profile``)."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    data = dict(data)
    prof = profile or data.get("profile", "desk")
    if not isinstance(prof, str):
        raise ConfigError("profile: expected a string")
    base = profile_defaults(prof)
    sections = {}
    for key, cls, excl in (("prior", ClassPrior, ()), ("noise", NoiseSpec, ()),
                           ("model", ModelConfig, ()), ("train", TrainConfig, _TRAIN_EXCLUDE),
                           ("eval", EvalConfig, _EVAL_EXCLUDE), ("ekf_oracle", EkfConfig, ()),
                           ("ekf_enlarged", EkfConfig, ()), ("generate", GenerateConfig, ())):
        if key in data:
            sec = data.pop(key)
            if not isinstance(sec, dict):
                raise ConfigError(f"{key}: expected an object")
            sections[key] = _build(cls, sec, key, base=getattr(base, key), exclude=excl)
    data["profile"] = prof
    top = _build(RunConfig, data, "", base=base,
                 exclude=[f.name for f in dataclasses.fields(RunConfig)
                          if f.name not in ("seed", "profile", "out")])
    cfg = replace(top, **sections)
    if "model" in sections:
        cfg = replace(cfg, train=replace(cfg.train, model=cfg.model))
    return cfg


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    d = _plain(cfg)
    d["train"] = _plain(cfg.train, exclude=_TRAIN_EXCLUDE)
    d["eval"] = _plain(cfg.eval, exclude=_EVAL_EXCLUDE)
    return d


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load(path, profile: Optional[str] = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return from_dict(data, profile)


__all__ = ["ConfigError", "GenerateConfig", "RunConfig", "PROFILES", "DESK_MODEL", "PAPER_MODEL",
           "profile_defaults", "from_dict", "to_dict", "dumps", "load", "ProcessParams"]
