"""Named-array archive: the package's single binary container format.

One file holds any number of named numpy arrays plus a JSON metadata
header. Templates and training checkpoints both use it. Byte layout is
documented in docs/formats.md; writes are canonical (arrays sorted by
name, compact JSON) so identical content yields identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RPARCH01"

# dtypes allowed in an archive; names are numpy's little-endian strings
_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<i4", "|u1"}


def _dtype_tag(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    tag = dt.str
    if tag == "|i1":
        tag = "|u1"
    if tag not in _ALLOWED_DTYPES:
        raise FormatError(f"dtype {arr.dtype} not supported by the archive format")
    return tag


def encode_archive(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize arrays and a JSON meta block in canonical form."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        tag = _dtype_tag(arr)
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    index = {"meta": meta or {}, "arrays": entries}
    index_bytes = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, len(index_bytes).to_bytes(8, "little"), index_bytes, *blobs])


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write arrays and a JSON meta block to ``path`` in canonical form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_archive(arrays, meta))


def decode_archive(data: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    """Parse archive bytes; returns (arrays, meta). Raises FormatError."""
    path = source
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError(f"bad magic in {path}: not a named-array archive")
    n = int.from_bytes(data[8:16], "little")
    if 16 + n > len(data):
        raise FormatError(f"truncated index in {path}")
    try:
        index = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable index in {path}: {e}") from e
    if not isinstance(index, dict) or "arrays" not in index:
        raise FormatError(f"index missing 'arrays' list in {path}")
    base = 16 + n
    arrays: dict[str, np.ndarray] = {}
    for entry in index["arrays"]:
        for key in ("name", "dtype", "shape", "offset"):
            if key not in entry:
                raise FormatError(f"array entry missing '{key}' in {path}")
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise FormatError(f"array {entry['name']}: unknown dtype {entry['dtype']}")
        dt = np.dtype(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + int(entry["offset"])
        end = start + count * dt.itemsize
        if end > len(data):
            raise FormatError(f"array {entry['name']} overruns file in {path}")
        arr = np.frombuffer(data[start:end], dtype=dt).reshape(shape).copy()
        arrays[entry["name"]] = arr
    return arrays, index.get("meta", {})


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive file; returns (arrays, meta)."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"archive not found: {path}")
    return decode_archive(path.read_bytes(), source=str(path))
