"""YAML run configuration with environment-variable overrides.

A config file is a key/value tree with two sections::

    paper_defaults:   # hyperparameters taken from the published setup
      gamma: 0.99
      ...
    desk_scale:       # choices made for a single-CPU budget
      total_frames: 5_000_000
      ...

Both sections flatten into one :class:`TrainConfig`. Any field can be
overridden by ``EGOMAP_<FIELD>`` in the environment and then by explicit
``key=value`` overrides, in that order.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .training import TrainConfig

SECTIONS = ("paper_defaults", "desk_scale")
PAPER_FIELDS = ("gamma", "entropy_coef", "lr", "n_envs", "rollout", "blend_alpha", "n_train_configs",
                "n_test_configs")
ENV_PREFIX = "EGOMAP_"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _field_types() -> dict[str, type]:
    return {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


def _coerce(name: str, value, kind: type):
    if isinstance(value, str) and kind is not str:
        value = yaml.safe_load(value)
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            # accept 5e6 style budgets when they are whole numbers
            f = float(value)
            if f != int(f) or isinstance(value, bool):
                raise TypeError
            return int(f)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is list:
            if isinstance(value, str):
                return [v for v in value.split(",") if v]
            if not isinstance(value, list):
                raise TypeError
            return list(value)
        if kind is str:
            return str(value)
    except (TypeError, ValueError):
        pass
    else:
        return value
    raise ConfigError(f"field {name!r}: expected {kind.__name__}, got {value!r}")


def _flatten(tree: dict) -> dict:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    flat = {}
    for key, value in tree.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            flat.update(value)
        else:
            flat[key] = value
    return flat


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                environ: dict | None = None) -> TrainConfig:
    """File, then ``EGOMAP_*`` environment variables, then explicit overrides."""
    types = _field_types()
    values: dict = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        values.update(_flatten(tree))
    environ = os.environ if environ is None else environ
    for name in types:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            values[name] = environ[key]
    values.update(overrides or {})
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown field(s) {unknown}")
    coerced = {k: _coerce(k, v, types[k]) for k, v in values.items()}
    try:
        return TrainConfig(**coerced)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_tree(config: TrainConfig) -> dict:
    d = asdict(config)
    paper = {k: d.pop(k) for k in PAPER_FIELDS}
    return {"paper_defaults": paper, "desk_scale": d}


def dump_config(config: TrainConfig) -> str:
    return yaml.safe_dump(config_tree(config), sort_keys=False)


def content_hash(config: TrainConfig) -> str:
    """Git-style blob hash of the canonical JSON form."""
    body = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def parse_overrides(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip().replace("-", "_")] = value
    return out
