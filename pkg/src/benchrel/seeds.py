"""Deterministic 64-bit seed derivation.

Fields are length-prefixed and hashed with BLAKE2b, then passed through
the SplitMix64 finalizer.  The derivation never depends on scheduling, so
every cell of the experiment grid gets the same seed however it is run.
"""

from __future__ import annotations

import hashlib
import struct

MASK64 = (1 << 64) - 1
PURPOSES = ("train", "draw", "eval")


def splitmix64_finalize(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _encode(field) -> bytes:
    if isinstance(field, bool):
        raise TypeError("bool is not a valid seed field")
    if isinstance(field, int):
        tag, raw = b"i", str(field).encode()
    else:
        tag, raw = b"s", str(field).encode("utf-8")
    return tag + struct.pack("<Q", len(raw)) + raw


def hash_fields(*fields) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"benchrel-seed")
    for f in fields:
        h.update(_encode(f))
    return splitmix64_finalize(int.from_bytes(h.digest(), "little"))


def _check_purpose(purpose: str):
    if purpose in PURPOSES:
        return
    if purpose.startswith("restart-") and purpose[len("restart-"):].isdigit():
        return
    raise ValueError(f"unknown seed purpose {purpose!r}")


def derive_seed(base_seed: int, dataset: str, method: str, n: int, rep: int, purpose: str) -> int:
    _check_purpose(purpose)
    return hash_fields(int(base_seed), dataset, method, int(n), int(rep), purpose)


def child_seed(seed: int, label: str) -> int:
    """Seed for a sub-stream (ensemble member, restart, validation split)."""
    return hash_fields(int(seed), "child", label)
