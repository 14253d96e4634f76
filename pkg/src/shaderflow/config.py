"""Run configuration: documented keys, ``key = value`` files and flag overrides.

Precedence, lowest first: built-in defaults, a config file, command-line
flags.  Every key is listed in ``KEYS`` with its default and a one-line
description; ``describe_keys`` renders that table for ``--help``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .flow import FlowConfig
from .lora import CONDITIONS, DEFAULT_STRENGTHS
from .model import ModelConfig, parse_key_values


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: Any
    doc: str


_MODEL = ModelConfig()

KEYS: tuple[Key, ...] = (
    Key("d_model", int, _MODEL.d_model, "token width"),
    Key("n_blocks", int, _MODEL.n_blocks, "transformer blocks"),
    Key("n_heads", int, _MODEL.n_heads, "attention heads"),
    Key("lora_rank", int, _MODEL.lora_rank, "adapter rank r, 1 <= r <= d_model/2"),
    Key("patch_size", int, _MODEL.patch_size, "latent patch edge length"),
    Key("grid", int, _MODEL.grid, "latent grid edge length"),
    Key("learning_rate", float, _MODEL.learning_rate, "SGD step size"),
    Key("mlp_mult", int, _MODEL.mlp_mult, "MLP hidden width multiplier"),
    Key("rope_base", float, _MODEL.rope_base, "rotary frequency base"),
    Key("ln_eps", float, _MODEL.ln_eps, "layer-norm epsilon"),
    Key("steps", int, 25, "Euler sampling steps"),
    Key("seed", int, 0, "64-bit seed for every random draw"),
    Key("cache", bool, True, "reuse condition K/V across sampling steps"),
    Key("cache_material", bool, False, "also cache the first block's material K/V"),
    Key("strength_depth", float, DEFAULT_STRENGTHS["depth"], "depth adapter strength"),
    Key("strength_normal", float, DEFAULT_STRENGTHS["normal"], "normal adapter strength"),
    Key("strength_lighting", float, DEFAULT_STRENGTHS["lighting"], "lighting adapter strength"),
    Key("train_steps", int, 2000, "SGD steps for train"),
    Key("dataset_size", int, 16, "synthetic training samples"),
    Key("frozen_base", bool, False, "train adapters only"),
    Key("lambda_reg", float, 0.1, "depth-ensemble range regulariser weight"),
    Key("depth_iters", int, 2000, "Nelder-Mead iteration budget for depth alignment"),
    Key("ensemble_size", int, 5, "predictions in synthetic ensemble demos"),
    Key("bench_runs", int, 5, "timed runs per sampler in bench-kv"),
    Key("checkpoint", str, "checkpoint", "checkpoint directory"),
)

KEY_INDEX = {k.name: k for k in KEYS}
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def parse_value(key: Key, text: str) -> Any:
    try:
        if key.type is bool:
            low = text.strip().lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ValueError(text)
        return key.type(text)
    except ValueError:
        raise ConfigError(f"{key.name}: cannot read {text!r} as {key.type.__name__}") from None


@dataclass(frozen=True)
class RunConfig:
    values: tuple[tuple[str, Any], ...] = tuple((k.name, k.default) for k in KEYS)

    def __getitem__(self, name: str) -> Any:
        return dict(self.values)[name]

    def __getattr__(self, name: str) -> Any:
        if name in KEY_INDEX:
            return self[name]
        raise AttributeError(name)

    def as_dict(self) -> dict[str, Any]:
        return dict(self.values)

    def updated(self, overrides: dict[str, Any]) -> "RunConfig":
        """Copy with ``overrides`` applied; ``None`` values are ignored."""
        current = self.as_dict()
        for name, value in overrides.items():
            if value is None:
                continue
            if name not in KEY_INDEX:
                raise ConfigError(f"unknown config key {name!r}")
            key = KEY_INDEX[name]
            current[name] = parse_value(key, value) if isinstance(value, str) and key.type is not str else value
        cfg = replace(self, values=tuple(current.items()))
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().updated(parse_key_values(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values)

    def validate(self) -> None:
        self.model_config()
        self.flow_config()
        for c in CONDITIONS:
            if self[f"strength_{c}"] < 0:
                raise ConfigError(f"strength_{c} must be non-negative")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be non-negative")
        for name in ("train_steps", "depth_iters"):
            if self[name] < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("dataset_size", "ensemble_size", "bench_runs"):
            if self[name] < 1:
                raise ConfigError(f"{name} must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: self[k] for k in MODEL_KEYS})

    def flow_config(self) -> FlowConfig:
        return FlowConfig(num_steps=self.steps, seed=self.seed)

    def strengths(self) -> dict[str, float]:
        return {c: self[f"strength_{c}"] for c in CONDITIONS}


def describe_keys() -> str:
    width = max(len(k.name) for k in KEYS)
    lines = ["config keys (key = value; '#' starts a comment):"]
    lines += [f"  {k.name:<{width}}  default {_fmt(k.default):<12} {k.doc}" for k in KEYS]
    return "\n".join(lines)
