"""Line-oriented ``key = value`` config files.

Used for both the generator config and the training config. Lines are
``key = value``; blank lines and ``#`` comments are ignored. Parse errors
raise ConfigError and name the offending line number.
"""

import dataclasses

from duala.errors import ConfigError


def parse_kv_text(text, source="<config>"):
    """Parse config text into an ordered {key: (value_string, line_no)} dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def _coerce(key, value, typ, source, lineno):
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value
        if typ == tuple[int, int] or typ == "tuple[int, int]":
            stripped = value.strip().strip("()[]")
            parts = [p for p in stripped.replace(",", " ").split() if p]
            if len(parts) != 2:
                raise ValueError("expected two integers")
            return (int(parts[0]), int(parts[1]))
    except ValueError as exc:
        raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    raise ConfigError(f"{source}:{lineno}: unsupported field type for {key}")


def dataclass_from_kv(cls, text, source="<config>", overrides=None):
    """Build dataclass ``cls`` from config text; unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, (value, lineno) in parse_kv_text(text, source).items():
        if key not in fields:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        kwargs[key] = _coerce(key, value, fields[key], source, lineno)
    if overrides:
        kwargs.update(overrides)
    return cls(**kwargs)


def dataclass_to_kv(obj):
    """Render a dataclass back to ``key = value`` lines (parse roundtrips)."""
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = f"{value[0]}, {value[1]}"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
