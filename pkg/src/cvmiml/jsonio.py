"""Deterministic JSON serialization.

Every artifact written by this package (datasets, checkpoints, metric
reports, manifests) must be byte-identical across reruns with the same
inputs, so all of them funnel through one canonical writer: fixed key
order (insertion order of the dicts we build), floats rendered with
``repr`` (the shortest decimal string that parses back to the exact
same double), two-space indentation and a trailing newline. A compact
single-line mode backs the JSONL epoch reports.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

__all__ = ["dumps_canonical", "dump_canonical", "sha256_file"]

_SCALAR_NUM = (int, float, np.integer, np.floating)


def _format_number(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        raise TypeError("bool is not a number here")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"non-finite float {value!r} cannot be serialized")
    return repr(value)


def _is_number(value) -> bool:
    return isinstance(value, _SCALAR_NUM) and not isinstance(value, (bool, np.bool_))


def _write(obj, out: list[str], level: int, compact: bool) -> None:
    pad = "" if compact else "  " * (level + 1)
    close_pad = "" if compact else "  " * level
    nl = "" if compact else "\n"
    if isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif obj is None:
        out.append("null")
    elif _is_number(obj):
        out.append(_format_number(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, np.ndarray):
        _write(obj.tolist(), out, level, compact)
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{" + nl)
        for i, (key, val) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be str, got {type(key).__name__}")
            out.append(pad + json.dumps(key, ensure_ascii=False) + ": ")
            _write(val, out, level + 1, compact)
            out.append(("," + (" " if compact else nl)) if i < len(obj) - 1 else nl)
        out.append(close_pad + "}")
    elif isinstance(obj, (list, tuple)):
        if not len(obj):
            out.append("[]")
            return
        if all(_is_number(v) for v in obj):
            # numeric vectors stay on one line; feature arrays dominate dataset files
            out.append("[" + ", ".join(_format_number(v) for v in obj) + "]")
            return
        out.append("[" + nl)
        for i, val in enumerate(obj):
            out.append(pad)
            _write(val, out, level + 1, compact)
            out.append(("," + (" " if compact else nl)) if i < len(obj) - 1 else nl)
        out.append(close_pad + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} canonically")


def dumps_canonical(obj, *, compact: bool = False) -> str:
    """Render `obj` as canonical JSON text (trailing newline included)."""
    out: list[str] = []
    _write(obj, out, 0, compact)
    out.append("\n")
    return "".join(out)


def dump_canonical(obj, path: str | Path, *, compact: bool = False) -> Path:
    path = Path(path)
    path.write_text(dumps_canonical(obj, compact=compact), encoding="utf-8")
    return path


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
