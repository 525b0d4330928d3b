"""Deterministic seed derivation and canonical serialization.

Everything that must be reproducible across processes (dataset generation,
model initialization, per-epoch batch sampling, experiment digests) funnels
through these helpers, so reproducibility hinges on sha256 rather than on
Python hashing or RNG state threading.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def canonical_json(obj: Any) -> str:
    """Serialize ``obj`` to canonical JSON: sorted keys, no whitespace, ASCII.

    NaN/Infinity are rejected so the output is valid JSON everywhere.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True, allow_nan=False)


def digest_of(obj: Any) -> str:
    """Hex sha256 digest of the canonical JSON serialization of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("ascii")).hexdigest()


def derive_seed(*parts: int | str | bytes) -> int:
    """Derive a 64-bit unsigned seed from a tuple of ints/strings/bytes.

    The mapping is injective on the part tuple (each part is tagged and
    terminated) and stable across platforms and processes.
    """
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(b"b" + part)
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        elif isinstance(part, (int, np.integer)):
            h.update(b"i" + str(int(part)).encode("ascii"))
        else:
            raise TypeError(f"unsupported seed part type: {type(part)!r}")
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


def rng_from(*parts: int | str | bytes) -> np.random.Generator:
    """PCG64 generator seeded with :func:`derive_seed` of ``parts``."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
