"""Stable hashing, seeding, and float formatting helpers.

Every stochastic component in the package derives its generator through
`rng_from`, so a (seed, purpose, ...) tuple fully determines the stream.
Hashes go through blake2b rather than `hash()` because the latter is
salted per process and would break run-to-run reproducibility.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np


def stable_digest(*parts: object) -> str:
    """Hex digest of the given parts, stable across processes and runs."""
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(_canonical_bytes(p))
        h.update(b"\x1f")  # separator so ("ab","c") != ("a","bc")
    return h.hexdigest()


def _canonical_bytes(p: object) -> bytes:
    if isinstance(p, bytes):
        return b"B" + p
    if isinstance(p, str):
        return b"S" + p.encode("utf-8")
    if isinstance(p, bool):
        return b"L1" if p else b"L0"
    if isinstance(p, int):
        return b"I" + str(p).encode("ascii")
    if isinstance(p, float):
        # repr round-trips doubles exactly, so this is bit-stable
        return b"F" + repr(p).encode("ascii")
    if isinstance(p, (tuple, list)):
        h = hashlib.blake2b(digest_size=16)
        for q in p:
            h.update(_canonical_bytes(q))
            h.update(b"\x1e")
        return b"T" + h.digest()
    raise TypeError(f"unhashable part of type {type(p).__name__}")


def stable_u32(*parts: object) -> int:
    return int(stable_digest(*parts)[:8], 16)


def rng_from(*parts: object) -> np.random.Generator:
    """Deterministic generator keyed by the given parts."""
    digest = stable_digest(*parts)
    words = [int(digest[i : i + 8], 16) for i in range(0, 32, 8)]
    return np.random.default_rng(np.random.SeedSequence(words))


def fmt(x: object) -> str:
    """Format a value for CSV output; floats use repr for exact round-trip."""
    if isinstance(x, float):
        return repr(x)
    if isinstance(x, (np.floating,)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable[object]]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
