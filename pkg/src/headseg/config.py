"""Flat ``key=value`` config files for the pipeline dataclasses."""
from __future__ import annotations

from dataclasses import fields


class ConfigError(ValueError):
    pass


def _convert(kind: str, key: str, raw: str):
    kind = kind.replace(" ", "")
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            inner = "int" if "int" in kind else "float"
            parts = [p for p in raw.replace("(", "").replace(")", "").replace(",", " ").split()]
            return tuple(_convert(inner, key, p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None


def _kind(tp) -> str:
    # string under postponed annotations, a real type otherwise
    if isinstance(tp, str):
        return tp
    return tp.__name__ if isinstance(tp, type) else str(tp)


def parse_kv(text: str, cls, prefix: str = "", ignore=()) -> dict:
    """Parse ``key=value`` lines into keyword arguments for dataclass ``cls``.

    Blank lines and ``#`` comments are ignored. With ``prefix``, only keys
    starting with ``prefix.`` are used (prefix stripped); other keys are
    left for other sections. Keys starting with any string in ``ignore`` are
    skipped. Unknown keys raise :class:`ConfigError`.
    """
    kinds = {f.name: _kind(f.type) for f in fields(cls)}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if any(key.startswith(i) for i in ignore):
            continue
        if prefix:
            if not key.startswith(prefix + "."):
                continue
            key = key[len(prefix) + 1:]
        if key not in kinds:
            raise ConfigError(f"line {n}: unknown key {key!r} for {cls.__name__}")
        out[key] = _convert(kinds[key], key, raw)
    return out


def emit_kv(obj, prefix: str = "") -> str:
    pre = prefix + "." if prefix else ""
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{pre}{f.name}={v}")
    return "\n".join(lines) + "\n"
