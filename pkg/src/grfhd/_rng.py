import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator keyed by (seed, operation name, extra ints)."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), *map(int, extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
