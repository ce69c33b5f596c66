"""Named, order-independent random streams derived from a run seed."""
import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive_rng(seed, *keys):
    """Generator for stream ``keys`` under ``seed``.

    Streams with different keys are statistically independent, and a stream
    does not depend on how many draws other streams have made.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(_key(k) for k in keys)]))
