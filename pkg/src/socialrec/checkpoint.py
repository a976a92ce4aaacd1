"""Self-describing text checkpoints.

Layout (UTF-8, one record per line, tab-separated headers):

    format-version: 1
    meta\t<key>\t<value>
    tensor\t<name>\t<dim0>[\t<dim1>]
    <one line of space-separated values per row>

Values are written with 17 significant digits, which round-trips float64
bit-exactly.  Tensor and meta order is preserved.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    lines = [f"format-version: {FORMAT_VERSION}"]
    for key, value in (meta or {}).items():
        key, value = str(key), str(value)
        if any(c in key or c in value for c in "\t\n"):
            raise ValueError(f"meta entry {key!r} contains a tab or newline")
        lines.append(f"meta\t{key}\t{value}")
    for name, tensor in tensors.items():
        arr = np.asarray(tensor, dtype=float)
        if arr.ndim not in (1, 2):
            raise ValueError(f"tensor '{name}' must be 1-D or 2-D, got {arr.ndim}-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor '{name}' has non-finite values")
        dims = "\t".join(str(d) for d in arr.shape)
        lines.append(f"tensor\t{name}\t{dims}")
        rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
        for row in rows:
            lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("format-version:"):
        raise DataError(f"{path}: missing format-version header")
    version = lines[0].split(":", 1)[1].strip()
    if version != str(FORMAT_VERSION):
        raise DataError(f"{path}: unsupported format version {version!r}")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("meta\t"):
            _, key, value = line.split("\t", 2)
            meta[key] = value
            i += 1
        elif line.startswith("tensor\t"):
            parts = line.split("\t")
            name = parts[1]
            shape = tuple(int(d) for d in parts[2:])
            nrows = 1 if len(shape) == 1 else shape[0]
            rows = []
            for r in range(nrows):
                i += 1
                if i >= len(lines):
                    raise DataError(f"{path}: tensor '{name}' truncated")
                rows.append(np.array(lines[i].split(), dtype=float))
            arr = np.vstack(rows)
            if arr.size != int(np.prod(shape)):
                raise DataError(f"{path}: tensor '{name}' has wrong value count")
            arr = arr.reshape(shape)
            tensors[name] = arr
            i += 1
        elif not line.strip():
            i += 1
        else:
            raise DataError(f"{path}: line {i + 1}: unrecognized record")
    return tensors, meta


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
