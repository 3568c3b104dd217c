"""Runtime configuration: defaults, config file, CLI flags, environment.

Precedence, lowest to highest: built-in defaults, config file, CLI flags,
environment variables. Unknown config file keys are rejected so a typo never
silently falls back to a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .core import ProcmemError
from .embedding import DEFAULT_DIM, Embedder, LocalEmbedder, RemoteEmbedder

__all__ = [
    "ConfigError",
    "Config",
    "ENV_VARS",
    "load_config_file",
    "resolve_config",
    "embedder_from_config",
]


class ConfigError(ProcmemError):
    """Unknown keys, bad values, or an unreadable config file."""


ENV_VARS = {
    "PROCMEM_STORE": "store_path",
    "PROCMEM_EMBED_URL": "embed_url",
}

_KEY_POLICIES = ("query", "avefact")
_UPDATE_POLICIES = ("vanilla", "validated", "adjust")
_BUILD_KINDS = ("verbatim", "script", "proceduralized")


@dataclass(frozen=True)
class Config:
    store_path: str | None = None
    world_path: str | None = None
    embed_url: str | None = None
    embed_dim: int = DEFAULT_DIM
    capacity: int = 512
    key_policy: str = "query"
    max_keywords: int = 5
    avefact_hard_match: bool = False
    retrieve_k: int = 1
    update_policy: str = "validated"
    group_size: int = 20
    build_kind: str = "script"
    gold_threshold: float = 1.0
    p_err: float = 0.0
    context_budget: int | None = 120
    seed: int = 0

    def __post_init__(self) -> None:
        if self.key_policy not in _KEY_POLICIES:
            raise ConfigError(f"key_policy must be one of {_KEY_POLICIES}, got {self.key_policy!r}")
        if self.update_policy not in _UPDATE_POLICIES:
            raise ConfigError(
                f"update_policy must be one of {_UPDATE_POLICIES}, got {self.update_policy!r}"
            )
        if self.build_kind not in _BUILD_KINDS:
            raise ConfigError(f"build_kind must be one of {_BUILD_KINDS}, got {self.build_kind!r}")
        if self.embed_dim < 1 or self.capacity < 1 or self.retrieve_k < 1 or self.group_size < 1:
            raise ConfigError("embed_dim, capacity, retrieve_k, and group_size must be >= 1")
        if self.max_keywords < 1:
            raise ConfigError(f"max_keywords must be >= 1, got {self.max_keywords}")
        if not 0.0 <= self.p_err < 1.0:
            raise ConfigError(f"p_err must be in [0, 1), got {self.p_err}")
        if self.context_budget is not None and self.context_budget < 0:
            raise ConfigError(f"context_budget must be >= 0, got {self.context_budget}")


_CONFIG_KEYS = tuple(f.name for f in fields(Config))


def load_config_file(path: str | Path) -> dict:
    """Parse a JSON config file, rejecting keys Config does not define."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no config file at {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(data) - set(_CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return data


def resolve_config(
    file_values: Mapping | None = None,
    flag_values: Mapping | None = None,
    env: Mapping[str, str] | None = None,
) -> Config:
    """Merge the three sources onto the defaults. ``flag_values`` entries that
    are None mean "flag not given" and are skipped; environment wins last."""
    merged: dict = {}
    if file_values:
        unknown = sorted(set(file_values) - set(_CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(file_values)
    if flag_values:
        for key, value in flag_values.items():
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"unknown config key from flags: {key}")
            if value is not None:
                merged[key] = value
    if env:
        for var, key in ENV_VARS.items():
            if var in env and env[var] != "":
                merged[key] = env[var]
    try:
        return Config(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def embedder_from_config(config: Config) -> Embedder:
    """Remote backend when an embed URL is configured, local otherwise."""
    if config.embed_url:
        return RemoteEmbedder(config.embed_url, dim=config.embed_dim)
    return LocalEmbedder(dim=config.embed_dim)
