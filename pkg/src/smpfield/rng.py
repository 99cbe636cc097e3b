"""Counter-based random substreams.

Every (seed, stream, index) triple maps to its own Philox key, so the
numbers drawn for path ``p`` never depend on how many other paths are
simulated, in which order, or on how many threads share the work.
"""

import hashlib

import numpy as np

BROWNIAN = 0
PERTURBATION = 1
SAMPLING = 2

_INDEX_BITS = 48


def substream(seed, index, stream=BROWNIAN):
    """Generator for one substream; ``index`` is usually a path id."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    if index >= 1 << _INDEX_BITS:
        raise ValueError("substream index too large")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (stream << _INDEX_BITS) | index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(seed, path_ids, n_steps, brownian_dim, dt):
    """Brownian increments of shape (len(path_ids), n_steps, brownian_dim)."""
    path_ids = np.asarray(path_ids, dtype=np.int64)
    out = np.empty((path_ids.size, n_steps, brownian_dim))
    scale = np.sqrt(dt)
    for row, pid in enumerate(path_ids):
        out[row] = substream(seed, int(pid)).standard_normal((n_steps, brownian_dim))
    out *= scale
    return out


def checksum(array):
    """SHA-256 of the raw bytes; used to assert common random numbers."""
    arr = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
