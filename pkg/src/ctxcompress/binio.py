"""Small versioned binary container: JSON header plus raw array payload.

Layout: magic ``CCBN``, u32 header length, UTF-8 JSON header, then the
arrays back to back in C order. The header records kind, format version,
free-form metadata, and a table of (name, dtype, shape, offset). Writes
are atomic (temp file in the target directory, then rename).
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"CCBN"


def write_blob(path, kind: str, version: int, meta: dict, arrays: dict) -> None:
    table = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"kind": kind, "version": int(version), "meta": meta,
                         "arrays": table}, sort_keys=True).encode()
    path = os.fspath(path)
    dirpath = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirpath, prefix=".tmp-blob-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for name, arr in arrays.items():
                f.write(np.ascontiguousarray(arr).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_blob(path, expect_kind: str | None = None):
    """Returns (meta dict, arrays dict, version int)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a recognized container (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode())
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ValueError(f"{path}: kind {header['kind']!r}, expected {expect_kind!r}")
    payload = raw[8 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=n, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays, header["version"]


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    dirpath = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirpath, prefix=".tmp-txt-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rows_to_csv(path, rows: list, fields: list | None = None) -> None:
    """Write dict rows as CSV; floats use repr so reads round-trip."""
    if not rows and not fields:
        raise ValueError("cannot infer CSV header from empty rows")
    fields = fields or list(rows[0].keys())
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join(_csv_cell(r[f]) for f in fields))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv_rows(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
