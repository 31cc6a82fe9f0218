"""Deterministic random streams.

Every random draw in the library comes from a generator derived from
``(root_seed, purpose_tag, index)``. Tags are hashed with CRC-32 so the
derivation does not depend on Python's salted ``hash``. Because streams are
addressed rather than consumed, a run resumed at step ``k`` draws exactly
what an uninterrupted run would have drawn at step ``k``.
"""

import zlib

import numpy as np


def stream(root: int, tag: str, index: int = 0) -> np.random.Generator:
    key = zlib.crc32(tag.encode("utf-8"))
    seq = np.random.SeedSequence(entropy=int(root), spawn_key=(key, int(index)))
    return np.random.Generator(np.random.PCG64(seq))
