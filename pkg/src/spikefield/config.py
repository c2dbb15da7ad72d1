"""Line-oriented ``key = value`` files with optional repeated ``[section]`` blocks."""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_keyvalue(text: str) -> tuple[dict[str, str], list[tuple[str, dict[str, str]]]]:
    """Return (top-level keys, [(section name, keys), ...]) in file order.

    ``#`` starts a comment. Sections may repeat.
    """
    top: dict[str, str] = {}
    sections: list[tuple[str, dict[str, str]]] = []
    current = top
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"line {lineno}: empty section name")
            current = {}
            sections.append((name, current))
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key in current:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value.strip().strip('"')
    return top, sections


def read_keyvalue(path) -> tuple[dict[str, str], list[tuple[str, dict[str, str]]]]:
    return parse_keyvalue(Path(path).read_text(encoding="utf-8"))


def floats(value: str) -> list[float]:
    try:
        return [float(v) for v in value.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"expected numbers, got {value!r}") from exc


def vec3(value: str) -> tuple[float, float, float]:
    vals = floats(value)
    if len(vals) != 3:
        raise ConfigError(f"expected 3 numbers, got {value!r}")
    return tuple(vals)


def boolean(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")
