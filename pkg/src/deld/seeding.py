"""Stable derivation of child seeds from (seed, tag...) tuples."""

from __future__ import annotations

import zlib


def derive_seed(*parts: int | str) -> int:
    """Fold parts into a 32-bit seed; strings hash via crc32, so the result
    is stable across runs and platforms."""
    acc = 0
    for part in parts:
        if isinstance(part, str):
            part = zlib.crc32(part.encode("utf-8"))
        acc = zlib.crc32(int(part).to_bytes(8, "little", signed=True), acc)
    return acc
