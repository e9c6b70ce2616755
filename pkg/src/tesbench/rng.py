"""Counter-based random streams shared by every module.

All randomness in the package flows through Philox generators keyed by
(seed, stream ids). Streams are independent of evaluation order, so data
generation and per-sample attacks can run in any order (or in parallel)
without changing results.
"""

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fold_stream_ids(*ids) -> int:
    """Collapse a tuple of small ints / strings into one 64-bit stream id."""
    h = _FNV_OFFSET
    for part in ids:
        if isinstance(part, str):
            data = part.encode("utf-8")
        else:
            data = int(part).to_bytes(8, "little", signed=False)
        for byte in data:
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def philox(seed: int, *stream_ids) -> np.random.Generator:
    """Fresh generator for the stream (seed, *stream_ids)."""
    key = np.array([seed & _MASK64, fold_stream_ids(*stream_ids)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
