"""Key-value config files shared by the generator and the trainer.

Format: one ``key = value`` per line, ``#`` comments, blank lines
ignored.  Values are coerced by the type of the dataclass field they
land on; unknown keys are rejected by name.
"""

import dataclasses


class ConfigError(ValueError):
    """Bad usage or bad configuration; maps to exit code 2."""


def read_kv_file(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def parse_set_args(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(raw, example):
    if isinstance(example, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(example, int):
        return int(raw)
    if isinstance(example, float):
        return float(raw)
    if isinstance(example, tuple):
        return tuple(int(v) for v in raw.split(","))
    return raw


def apply_keys(kv, *objs):
    """Assign each key to every dataclass that has a field of that name.

    Raises ConfigError on keys no target knows, naming the key.
    """
    known = set()
    for obj in objs:
        known.update(f.name for f in dataclasses.fields(obj))
    for key in kv:
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
    for obj in objs:
        for f in dataclasses.fields(obj):
            if f.name in kv:
                try:
                    setattr(obj, f.name, _coerce(kv[f.name], getattr(obj, f.name)))
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"bad value for {f.name}: {exc}")


def snapshot(obj):
    """Dataclass back to key=value lines (tuples as comma lists)."""
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
