"""Named RNG substreams derived from one root seed."""

import zlib

import numpy as np


def derive_seed(root: int, name: str) -> int:
    """Stable 63-bit seed for substream ``name`` (e.g. "data", "init", "eps", "split")."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
