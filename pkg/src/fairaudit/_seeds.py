import zlib

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """Child seed from a master seed and a path of int/str keys, stable across runs."""
    path = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
