"""Deterministic RNG streams, hashing, and small I/O helpers."""

import csv
import hashlib
import io

import numpy as np


def rng_stream(seed, *tags):
    """Independent, reproducible generator keyed by (seed, *tags).

    Tags are folded through SHA-256 so stream identity depends only on the
    tag values, never on call order or platform hash randomization.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        digest = hashlib.sha256(repr(t).encode("utf-8")).digest()
        entropy.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def tensor_sha256(arr):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def params_sha256(store, names):
    """One digest over the given parameter names in sorted order."""
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(store[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def format_cell(v):
    """CSV cell formatting: floats use repr (shortest exact round trip)."""
    if isinstance(v, (float, np.floating)):
        # plain-float repr even for numpy scalars (repr(np.float64(x))
        # prints the type wrapper)
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    """Write rows with LF newlines and round-trip float formatting; the byte
    output is a pure function of the values."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    data = buf.getvalue()
    with open(path, "w", newline="") as f:
        f.write(data)
    return data
