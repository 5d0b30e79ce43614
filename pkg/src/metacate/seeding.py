"""Named random substreams derived from one root seed."""
import hashlib

import numpy as np


def derive_seed(root: int, *names) -> int:
    """Stable 63-bit seed for the substream ``root/name1/name2/...``."""
    key = "/".join([str(int(root))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


def substream(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
