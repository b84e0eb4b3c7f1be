"""Named-array container used for checkpoints and dataset samples.

Layout::

    spectral-tokens-container
    version 1
    entries <n>
    <name> <dtype> <shape> <offset> <nbytes>     (one line per entry)
    end
    <payload>

``shape`` is ``x``-joined extents (``-`` for a scalar), ``offset`` counts bytes
from the start of the payload, and every payload is little-endian.
"""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "spectral-tokens-container"
FORMAT_VERSION = 1
DTYPES = {"f64": np.dtype("<f8"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f64"
    if arr.dtype.kind in "ui" and arr.size and (arr.min() < 0 or arr.max() > 255):
        raise FormatError("integer arrays must fit in u8")
    if arr.dtype.kind in "uib":
        return "u8"
    raise FormatError(f"unsupported dtype {arr.dtype}")


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialise ``arrays`` in insertion order."""
    header = [MAGIC, f"version {FORMAT_VERSION}", f"entries {len(arrays)}"]
    payload = io.BytesIO()
    for name, value in arrays.items():
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"invalid entry name {name!r}")
        arr = np.asarray(getattr(value, "data", value))
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        shape = "x".join(str(n) for n in arr.shape) or "-"
        header.append(f"{name} {tag} {shape} {payload.tell()} {len(raw)}")
        payload.write(raw)
    header.append("end")
    return ("\n".join(header) + "\n").encode("ascii") + payload.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    lines = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise FormatError("truncated header")
        line = blob[pos:nl].decode("ascii")
        pos = nl + 1
        lines.append(line)
        if line == "end":
            break
    if lines[0] != MAGIC:
        raise FormatError("not a spectral-tokens container")
    version = int(lines[1].split()[1])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    count = int(lines[2].split()[1])
    entries = lines[3:-1]
    if len(entries) != count:
        raise FormatError(f"header lists {len(entries)} entries, expected {count}")
    payload = blob[pos:]
    out: dict[str, np.ndarray] = {}
    for line in entries:
        name, tag, shape, offset, nbytes = line.split()
        dims = () if shape == "-" else tuple(int(n) for n in shape.split("x"))
        start, size = int(offset), int(nbytes)
        if start + size > len(payload):
            raise FormatError(f"entry {name} runs past end of payload")
        arr = np.frombuffer(payload[start : start + size], dtype=DTYPES[tag]).reshape(dims)
        out[name] = arr.copy()
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
