"""Deterministic single-file container for named arrays plus JSON metadata.

Layout: magic, 8-byte little-endian header length, UTF-8 JSON header, then
the raw C-order bytes of every array in sorted name order. No timestamps
and sorted keys throughout, so identical content produces identical bytes.
Files are written atomically (temp file then rename).
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import DataError

MAGIC = b"ADVREC1\n"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<i8", "|b1"}


def save_container(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.str
        if dtype not in _ALLOWED_DTYPES:
            raise DataError(f"container does not store dtype {dtype} (array {name!r})")
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header_bytes).to_bytes(8, "little"))
            fh.write(header_bytes)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a recognized container file")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported container version {header.get('format_version')}")
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise DataError(f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return arrays, header["meta"]
