"""Counter-based Gaussian noise streams.

Each path owns a stream keyed by ``(seed, stream)``.  The generator is
Philox-4x64 (numpy's ``Philox`` bit generator); the k-th Gaussian vector of
a stream is built from raw 64-bit words ``k*q .. k*q + q - 1`` of that
stream by inverse-CDF: ``z = ndtri((w >> 11) * 2**-53 + 2**-54)``.  The
draw count per vector is fixed, so any counter can be reached directly and
the values never depend on how a run is chunked.

The inverse-CDF map truncates normals at about 8.3 standard deviations.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import ndtri

__all__ = ["NoiseSource", "gaussian_block", "MASK64"]

MASK64 = (1 << 64) - 1
_SHIFT = np.uint64(11)
_SCALE = 2.0**-53
_HALF = 2.0**-54


def _key(seed, stream):
    return np.array([int(seed) & MASK64, int(stream) & MASK64], dtype=np.uint64)


_local = threading.local()


def _generator():
    # re-keying one Philox instance is much cheaper than building a new one
    bg = getattr(_local, "bg", None)
    if bg is None:
        bg = _local.bg = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        _local.state = bg.state
    return bg, _local.state


def _raw(seed, stream, start, count):
    """Raw words ``start .. start+count-1`` of stream ``(seed, stream)``."""
    block, skip = divmod(start, 4)
    bg, st = _generator()
    st["state"]["key"] = _key(seed, stream)
    st["state"]["counter"] = np.array([block & MASK64, block >> 64, 0, 0], dtype=np.uint64)
    st["buffer_pos"] = 4
    st["has_uint32"] = 0
    bg.state = st
    if skip:
        bg.random_raw(skip)
    return bg.random_raw(count)


def _to_normal(words):
    u = (words >> _SHIFT).astype(np.float64)
    u *= _SCALE
    u += _HALF
    return ndtri(u)


class NoiseSource:
    """Standard Gaussian q-vectors indexed by a step counter.

    ``normals(start, count)`` returns an array of shape ``(count, q)`` whose
    row ``i`` is the vector for counter ``start + i``.  ``next(count)``
    reads sequentially from an internal cursor.
    """

    def __init__(self, seed, stream, q=1, counter=0):
        if q < 1:
            raise ValueError("q must be positive")
        self.seed = int(seed)
        self.stream = int(stream)
        self.q = int(q)
        self.counter = int(counter)

    def normals(self, start, count):
        if start < 0 or count < 0:
            raise ValueError("start and count must be non-negative")
        words = _raw(self.seed, self.stream, start * self.q, count * self.q)
        return _to_normal(words).reshape(count, self.q)

    def normal(self, counter):
        return self.normals(counter, 1)[0]

    def next(self, count):
        out = self.normals(self.counter, count)
        self.counter += count
        return out

    def __repr__(self):
        return f"NoiseSource(seed={self.seed}, stream={self.stream}, q={self.q}, counter={self.counter})"


def gaussian_block(seed, streams, start, count, q=1):
    """Gaussian vectors for several streams: shape ``(count, len(streams), q)``.

    Row ``k`` holds counter ``start + k`` of every stream, so the layout is
    step-major as needed by a vectorized path update.
    """
    streams = np.asarray(streams, dtype=np.int64)
    n = count * q
    words = np.empty((streams.size, n), dtype=np.uint64)
    for i, s in enumerate(streams.tolist()):
        words[i] = _raw(seed, s, start * q, n)
    out = np.empty((count, streams.size, q))
    # convert in narrow tiles so the transpose stays in cache
    for j0 in range(0, count, 64):
        j1 = min(j0 + 64, count)
        tile = _to_normal(words[:, j0 * q : j1 * q]).reshape(streams.size, j1 - j0, q)
        out[j0:j1] = tile.transpose(1, 0, 2)
    return out
