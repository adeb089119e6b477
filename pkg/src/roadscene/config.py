"""Global configuration shared by every CLI subcommand.

Loaded from a TOML or JSON file named by ``--config`` or ``ROADSCENE_CONFIG``.
Credentials are never stored here; backends name the environment variable
holding the key.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .frames import SamplerConfig
from .gateway import BackendConfig

CONFIG_ENV = "ROADSCENE_CONFIG"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _read(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class GlobalConfig:
    agent1: BackendConfig = field(default_factory=lambda: BackendConfig(name="agent1", model_id="gpt-4o"))
    agent2: BackendConfig = field(default_factory=lambda: BackendConfig(name="agent2"))
    prompt_store: Path | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    parallelism: int = 4
    log_level: str = "WARNING"
    log_file: Path | None = None

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {', '.join(LOG_LEVELS)}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: Path | None = None) -> GlobalConfig:
        data = dict(data)
        known = {"agent1", "agent2", "prompt_store", "sampler", "parallelism", "log_level", "log_file"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        try:
            for name in ("agent1", "agent2"):
                if name in data:
                    kwargs[name] = BackendConfig.from_dict({"name": name, **data[name]})
            if "sampler" in data:
                sampler = dict(data["sampler"])
                for key in ("decoder_command", "probe_command"):
                    if key in sampler:
                        sampler[key] = tuple(sampler[key])
                kwargs["sampler"] = SamplerConfig(**sampler)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config: {exc}") from None
        for name in ("prompt_store", "log_file"):
            if data.get(name):
                p = Path(data[name])
                kwargs[name] = p if p.is_absolute() or base is None else base / p
        if "parallelism" in data:
            kwargs["parallelism"] = int(data["parallelism"])
        if "log_level" in data:
            kwargs["log_level"] = str(data["log_level"]).upper()
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None = None) -> GlobalConfig:
        """Explicit path, else ``$ROADSCENE_CONFIG``, else defaults."""
        chosen = path or os.environ.get(CONFIG_ENV)
        if not chosen:
            return cls()
        p = Path(chosen)
        return cls.from_dict(_read(p), base=p.parent)

    def with_parallelism(self, n: int) -> GlobalConfig:
        return replace(self, parallelism=n, agent2=replace(self.agent2, parallelism=n))
