"""Named, collision-free random substreams derived from one root seed.

Every consumer asks for a generator by name, e.g.
``substream(seed, "synthpool", "init", n=128, xi=8)``. Streams depend only
on the root seed and the names, so adding new experiment cells never
perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _words(parts) -> tuple:
    h = hashlib.blake2s()
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    digest = h.digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def substream(root_seed: int, *parts, **kv) -> np.random.Generator:
    """A Generator unique to (root_seed, *parts, sorted kv items)."""
    key = list(parts) + sorted(kv.items())
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=_words(key))
    return np.random.default_rng(ss)


def child_seed(root_seed: int, *parts, **kv) -> int:
    """A stable 63-bit integer seed for handing to subprocesses."""
    key = list(parts) + sorted(kv.items())
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=_words(key))
    return int(ss.generate_state(1, np.uint64)[0] >> 1)
