"""Plain-text ``DMDP-CKPT v1`` parameter files and parameter digests."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError

HEADER = "DMDP-CKPT v1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps(arrays: Mapping[str, np.ndarray]) -> str:
    lines = [HEADER]
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValidationError(f"parameter name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        shape = arr.shape or (1,)
        lines.append(f"{name} {','.join(str(n) for n in shape)} :")
        lines.extend(_fmt(v) for v in arr.reshape(-1))
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, np.ndarray]:
    lines = text.split("\n")
    if not lines or lines[0] != HEADER:
        raise ValidationError(f"not a checkpoint: expected header {HEADER!r}")
    if lines[-1] == "":
        lines.pop()
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split(" ")
        if len(parts) != 3 or parts[2] != ":":
            raise ValidationError(f"line {i + 1}: malformed record header {lines[i]!r}")
        name = parts[0]
        try:
            shape = tuple(int(s) for s in parts[1].split(","))
        except ValueError:
            raise ValidationError(f"line {i + 1}: bad shape {parts[1]!r}") from None
        n = int(np.prod(shape))
        body = lines[i + 1 : i + 1 + n]
        if len(body) != n:
            raise ValidationError(f"line {i + 1}: {name} expects {n} values, found {len(body)}")
        try:
            out[name] = np.array([float(v) for v in body], dtype=np.float64).reshape(shape)
        except ValueError as exc:
            raise ValidationError(f"{name}: {exc}") from None
        i += 1 + n
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_text(dumps(arrays), encoding="ascii")


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_text(encoding="ascii"))


def digest(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and the exact float64 bytes, in key order."""
    h = hashlib.sha256()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
