"""Canonical JSON: one byte stream per value, so artifacts diff cleanly.

Keys are emitted sorted, with no whitespace.  Floats use 17 significant
digits, which round-trips every finite float64 exactly; negative zero is
normalized to zero and non-finite values are rejected.  Identical values
therefore always serialize to identical bytes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    if x == 0.0:
        x = 0.0  # drop the sign of -0.0
    return format(x, ".17g")


def _emit(obj, parts: list) -> None:
    if obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif obj is None:
        parts.append("null")
    elif isinstance(obj, int):
        parts.append(str(obj))
    elif isinstance(obj, float):
        parts.append(format_float(obj))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, dict):
        parts.append("{")
        first = True
        for key in sorted(obj):
            if not isinstance(key, str):
                raise TypeError(f"object keys must be strings, got {type(key).__name__}")
            if not first:
                parts.append(",")
            first = False
            parts.append(json.dumps(key, ensure_ascii=True))
            parts.append(":")
            _emit(obj[key], parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, item in enumerate(obj):
            if i:
                parts.append(",")
            _emit(item, parts)
        parts.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """Serialize ``obj`` to a canonical JSON string."""
    parts: list = []
    _emit(obj, parts)
    return "".join(parts)


def dump_path(obj, path) -> None:
    """Write canonical JSON plus a trailing newline to ``path``."""
    Path(path).write_bytes((dumps(obj) + "\n").encode("utf-8"))


def load_path(path):
    """Parse a JSON file (canonical or not)."""
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
