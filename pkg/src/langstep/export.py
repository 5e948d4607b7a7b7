"""CSV and binary export of snapshots and empirical measures.

CSV columns are ``stream, n, Gamma_n, x_1 .. x_d, weight`` with numbers in
shortest round-trip form, so equal data always gives equal bytes.

The binary layout is little-endian: a 20-byte header (magic ``b"LSTP"``,
version ``u32``, ``d`` ``u32``, row count ``u64``) followed by the rows as
``f64`` values in the CSV column order.
"""

from __future__ import annotations

import csv
import io
import struct

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "format_number",
    "rows_from_snapshot",
    "rows_from_measure",
    "write_csv",
    "read_csv",
    "write_binary",
    "read_binary",
]

MAGIC = b"LSTP"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def format_number(v):
    """Shortest round-trip text for ints and floats."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def rows_from_snapshot(x, n, gamma_sum, streams=None, weight=1.0):
    """Rows for a path cloud ``x`` of shape ``(P, d)`` at step ``n``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    P, d = x.shape
    streams = np.arange(P) if streams is None else np.asarray(streams)
    out = np.empty((P, d + 4))
    out[:, 0] = streams
    out[:, 1] = n
    out[:, 2] = gamma_sum
    out[:, 3 : 3 + d] = x
    out[:, 3 + d] = weight
    return out


def rows_from_measure(measure, stream, n, gamma_sum):
    """Rows for a weighted empirical measure of a single stream."""
    pts = measure.points
    out = np.empty((len(pts), measure.d + 4))
    out[:, 0] = stream
    out[:, 1] = n
    out[:, 2] = gamma_sum
    out[:, 3 : 3 + measure.d] = pts
    out[:, 3 + measure.d] = measure.weights
    return out


def _header(d):
    return ["stream", "n", "Gamma_n", *[f"x_{i + 1}" for i in range(d)], "weight"]


def write_csv(path_or_file, rows, d):
    """Write export rows; integer columns (stream, n) are written as ints."""
    rows = np.asarray(rows, dtype=float).reshape(-1, d + 4)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header(d))
    for r in rows.tolist():
        w.writerow([str(int(r[0])), str(int(r[1]))] + [repr(v) for v in r[2:]])
    text = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w", encoding="utf-8", newline="") as f:
            f.write(text)


def read_csv(path):
    """Inverse of :func:`write_csv`: returns ``(rows, d)``."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        head = next(reader)
        d = len(head) - 4
        if d < 1 or head != _header(d):
            raise ValueError(f"not a langstep export: header {head}")
        data = [[float(v) for v in r] for r in reader]
    return np.array(data, dtype=float).reshape(-1, d + 4), d


def write_binary(path_or_file, rows, d):
    rows = np.ascontiguousarray(np.asarray(rows, dtype="<f8").reshape(-1, d + 4))
    payload = _HEADER.pack(MAGIC, VERSION, d, rows.shape[0]) + rows.tobytes()
    if hasattr(path_or_file, "write"):
        path_or_file.write(payload)
    else:
        with open(path_or_file, "wb") as f:
            f.write(payload)


def read_binary(path):
    """Returns ``(rows, d)``; checks the magic, version and length."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise ValueError("truncated header")
    magic, version, d, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    body = blob[_HEADER.size :]
    if len(body) != count * (d + 4) * 8:
        raise ValueError("payload length does not match the header")
    return np.frombuffer(body, dtype="<f8").reshape(count, d + 4).copy(), d
