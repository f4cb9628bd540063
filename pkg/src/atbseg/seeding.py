"""Stable seed derivation.

Python's builtin hash() is salted per process, so every derived seed goes
through sha256 instead. Seeds are 63-bit so they fit both numpy and torch
generator APIs.
"""

import hashlib


def stable_seed(*parts: object) -> int:
    """Derive a deterministic 63-bit seed from an arbitrary tuple of parts."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
