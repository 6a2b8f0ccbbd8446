import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def derive_seed(seed, *keys):
    """Child seed of ``seed`` for a stream named by ``keys`` (ints or strings)."""
    ss = np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)])
    return int(ss.generate_state(1, np.uint32)[0])


def rng_for(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)]))


def floor_count(rate, n):
    """``floor(rate * n)`` without float artefacts such as 0.29 * 100 -> 28."""
    return int(np.floor(round(float(rate) * n, 9)))
