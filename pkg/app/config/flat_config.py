"""
Flat `key = value` configuration files.

Blank lines and `#` comments are ignored. Keys may be dotted (`train.K`) to
address a section of a nested config; `nest()` turns them into dicts that
pydantic models validate.
"""

from pathlib import Path
from typing import Any, Dict

from app.services.errors import ConfigError


def parse_flat_config(text: str, source: str = "<string>") -> Dict[str, str]:
    """Parse flat config text into an ordered key -> raw value mapping."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", source=source, line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key", source=source, line=lineno)
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'", source=source, line=lineno)
        values[key] = value
    return values


def load_flat_config(path: Path) -> Dict[str, str]:
    """Read and parse a flat config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}", source=str(path))
    return parse_flat_config(path.read_text(encoding="utf-8"), source=str(path))


def nest(values: Dict[str, Any]) -> Dict[str, Any]:
    """Turn dotted keys into nested dicts: {'a.b': 1} -> {'a': {'b': 1}}."""
    nested: Dict[str, Any] = {}
    for key, value in values.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Key '{key}' conflicts with scalar '{part}'")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"Key '{key}' conflicts with section '{key}'")
        node[parts[-1]] = value
    return nested


def dump_flat_config(values: Dict[str, Any], prefix: str = "") -> str:
    """Render a (possibly nested) mapping back to flat text."""
    lines = []
    for key, value in values.items():
        full_key = f"{prefix}{key}"
        if isinstance(value, dict):
            lines.append(dump_flat_config(value, prefix=f"{full_key}."))
        elif isinstance(value, (list, tuple)):
            lines.append(f"{full_key} = {','.join(str(v) for v in value)}")
        elif value is None:
            continue
        else:
            lines.append(f"{full_key} = {value}")
    return "\n".join(line for line in lines if line)
