"""Counter-based random number generation.

All randomness in the package flows through ``rng_for``: a Philox generator
keyed by the global seed plus a stream label (e.g. ``("mask", image_id,
epoch)``). Streams are independent of execution order, so masks, weights and
noise can be regenerated exactly from the values that name them.
"""

import hashlib

import numpy as np


def _key_words(seed: int, stream: tuple) -> np.ndarray:
    # Philox takes a 2x64-bit key; derive it by hashing the stream name so
    # that nearby seeds/ids never produce correlated streams.
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in stream:
        h.update(b"/")
        h.update(str(part).encode())
    digest = h.digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def rng_for(seed: int, *stream) -> np.random.Generator:
    """Generator for the stream named by ``(seed, *stream)``.

    The same name always yields the same sequence, on any platform and
    regardless of what other streams were drawn before it.
    """
    return np.random.Generator(np.random.Philox(key=_key_words(seed, stream)))
