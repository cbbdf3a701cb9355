"""On-disk formats for chains, field matrices, and run metadata.

Three formats, all deterministic so reruns are byte-identical:

* **Chain CSV** — comma-separated, ``.`` decimal point, one header row, one
  row per step.  Floats are written with ``repr`` precision so reading back
  is lossless.
* **Field matrix** — a small binary container for a dense float64 matrix:
  the 8-byte magic ``HBUM0001``, two little-endian ``uint64`` values for the
  row and column counts, then ``rows * cols`` little-endian ``float64``
  values in row-major order.  Nothing else, no padding.
* **JSON sidecar** — sorted keys, two-space indent, trailing newline.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"HBUM0001"


def write_chain_csv(path, columns: dict[str, np.ndarray]) -> None:
    """Write named, equal-length 1D columns as a CSV table."""
    if not columns:
        raise ValueError("need at least one column")
    arrays = {}
    length = None
    for name, values in columns.items():
        arr = np.asarray(values, dtype=float).ravel()
        if length is None:
            length = arr.size
        elif arr.size != length:
            raise ValueError(
                f"column {name!r} has {arr.size} entries, expected {length}"
            )
        arrays[name] = arr
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(arrays)
        for row in zip(*arrays.values()):
            writer.writerow([repr(float(value)) for value in row])


def read_chain_csv(path) -> dict[str, np.ndarray]:
    """Read a chain CSV back into named float arrays.

    Malformed content raises ``ValueError`` naming the 1-based line number
    and the offending column.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if not header or any(not name for name in header):
            raise ValueError(f"{path}: line 1: malformed header {header!r}")
        columns: list[list[float]] = [[] for _ in header]
        for line_number, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(
                    f"{path}: line {line_number}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            for name, cell, column in zip(header, row, columns):
                try:
                    column.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: line {line_number}: column {name!r}: "
                        f"not a number: {cell!r}"
                    ) from None
    return {name: np.array(column) for name, column in zip(header, columns)}


def write_field_matrix(path, matrix) -> None:
    """Write a dense float64 matrix in the ``HBUM0001`` container."""
    arr = np.ascontiguousarray(np.asarray(matrix, dtype="<f8"))
    if arr.ndim != 2:
        raise ValueError(f"need a 2D matrix, got shape {arr.shape}")
    with open(path, "wb") as handle:
        handle.write(FIELD_MAGIC)
        handle.write(np.array(arr.shape, dtype="<u8").tobytes())
        handle.write(arr.tobytes())


def read_field_matrix(path) -> np.ndarray:
    """Read an ``HBUM0001`` container back into a float64 matrix."""
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:8] != FIELD_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}, expected {FIELD_MAGIC!r}")
    rows, cols = np.frombuffer(raw, dtype="<u8", count=2, offset=8)
    expected = 24 + 8 * int(rows) * int(cols)
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload is {len(raw)} bytes, expected {expected} "
            f"for a {rows} x {cols} matrix"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=24)
    return data.reshape(int(rows), int(cols)).copy()


def write_json_sidecar(path, payload: dict) -> None:
    """Write canonical JSON: sorted keys, two-space indent, trailing newline."""
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def read_json_sidecar(path) -> dict:
    with open(path) as handle:
        return json.load(handle)
