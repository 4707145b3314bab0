"""Tool configuration: flat key=value file, environment, and flag precedence.

Resolution order is flags > environment (``BRICKS_LIBRARY``,
``BRICKS_REGISTRY``, ``BRICKS_TOKEN``, ``BRICKS_PARALLEL``,
``BRICKS_DEFAULT_ORG``) > config file. The file lives at
``$BRICKS_CONFIG``, else ``$XDG_CONFIG_HOME/bricks/config``, else
``~/.config/bricks/config``. Tokens are persisted but always redacted when
displayed or logged.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

REDACTED = "****"

_KEYS = ("library", "registry", "token", "parallel", "default_org")

_ENV_VARS = {
    "library": "BRICKS_LIBRARY",
    "registry": "BRICKS_REGISTRY",
    "token": "BRICKS_TOKEN",
    "parallel": "BRICKS_PARALLEL",
    "default_org": "BRICKS_DEFAULT_ORG",
}

DEFAULT_PARALLEL = 4
DEFAULT_ORG = "biobricks-ai"


def config_path() -> Path:
    override = os.environ.get("BRICKS_CONFIG")
    if override:
        return Path(override)
    base = os.environ.get("XDG_CONFIG_HOME")
    root = Path(base) if base else Path.home() / ".config"
    return root / "bricks" / "config"


@dataclass(frozen=True)
class Config:
    """Resolved settings plus where each one came from."""

    library: Path | None = None
    registry: str | None = None
    token: str | None = None
    parallel: int = DEFAULT_PARALLEL
    default_org: str = DEFAULT_ORG
    sources: dict[str, str] = field(default_factory=dict)  # key -> flag|env|file|default

    def describe(self) -> list[str]:
        """Display rows, token redacted."""
        rows = []
        values = {
            "library": self.library,
            "registry": self.registry,
            "token": REDACTED if self.token else None,
            "parallel": self.parallel,
            "default_org": self.default_org,
        }
        for key in _KEYS:
            shown = values[key] if values[key] is not None else "(unset)"
            rows.append(f"{key}={shown}  [{self.sources.get(key, 'default')}]")
        return rows


def _parse_parallel(value: str | int, origin: str) -> int:
    try:
        parsed = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"parallel from {origin} is not an integer: {value!r}") from None
    if parsed < 1:
        raise ConfigError(f"parallel must be >= 1, got {parsed}")
    return parsed


def read_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    if not path.is_file():
        return values
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def write_config_file(path: Path, values: dict[str, str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# bricks configuration"]
    lines.extend(f"{key}={values[key]}" for key in _KEYS if key in values)
    path.write_text("\n".join(lines) + "\n")


def load_config(flags: dict[str, str | None] | None = None) -> Config:
    """Merge flags, environment, and the config file into one Config."""
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    file_values = read_config_file(config_path())

    resolved: dict[str, object] = {}
    sources: dict[str, str] = {}
    for key in _KEYS:
        if key in flags:
            resolved[key], sources[key] = flags[key], "flag"
        elif os.environ.get(_ENV_VARS[key]):
            resolved[key], sources[key] = os.environ[_ENV_VARS[key]], "env"
        elif key in file_values:
            resolved[key], sources[key] = file_values[key], "file"
        else:
            sources[key] = "default"

    parallel = (
        _parse_parallel(resolved["parallel"], sources["parallel"])
        if "parallel" in resolved
        else DEFAULT_PARALLEL
    )
    library = Path(str(resolved["library"])).absolute() if "library" in resolved else None
    registry = str(resolved["registry"]).rstrip("/") if "registry" in resolved else None
    return Config(
        library=library,
        registry=registry,
        token=str(resolved["token"]) if "token" in resolved else None,
        parallel=parallel,
        default_org=str(resolved.get("default_org", DEFAULT_ORG)),
        sources=sources,
    )
