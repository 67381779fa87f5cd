"""Deterministic hashing helpers: derived seeds and content hashes.

Every stochastic component in the pipeline draws from a seed derived with
:func:`derive_seed`, so cohorts, splits and sweep cells are reproducible
independent of generation order or process layout.
"""

import hashlib
import json
from typing import Any

_U64 = 0xFFFFFFFFFFFFFFFF


def derive_seed(base_seed: int, *parts: object) -> int:
    """Mix a base seed with arbitrary labels into a new 64-bit seed.

    The mixing function is blake2b over the little-endian base seed followed
    by the UTF-8 of each label, separated by NUL bytes; the first 8 digest
    bytes are read back little-endian. Stable across platforms and runs.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(base_seed & _U64).to_bytes(8, "little"))
    for part in parts:
        h.update(b"\x00")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_hash(obj: Any) -> str:
    """sha256 hex digest of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def bytes_hash(data: bytes) -> str:
    """sha256 hex digest of raw bytes."""
    return hashlib.sha256(data).hexdigest()
