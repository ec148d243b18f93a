"""Counter-style stream derivation for reproducible parallel Monte Carlo.

Every random draw in the package comes from a Philox generator keyed by
a (master seed, stream path) tuple, so results are independent of worker
scheduling and identical across replays.
"""

from __future__ import annotations

import numpy as np

# stream ids; fixed forever so dumps stay replayable
SITE_STREAM = 0
HIDDEN_STREAM = 1
REPLICA_STREAM = 2
ENV_DRAW_STREAM = 3
WALK_STREAM = 4


def _encode(value: int) -> int:
    # SeedSequence entropy words must be nonnegative
    return int(value) + 2**63 if value < 0 else int(value)


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Return an independent generator for (master_seed, *path)."""
    ss = np.random.SeedSequence([_encode(master_seed)] + [_encode(p) for p in path])
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


def spawn_seed(master_seed: int, *path: int) -> int:
    """Derive a child integer seed, for APIs that take seeds rather than rngs."""
    ss = np.random.SeedSequence([_encode(master_seed)] + [_encode(p) for p in path])
    return int(ss.generate_state(1, np.uint64)[0])


_MASK = (1 << 64) - 1


def _mix64(z: int) -> int:
    # splitmix64 finalizer; fixed forever so site draws stay replayable
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def counter_uniform(master_seed: int, *path: int, index: int = 0) -> float:
    """One uniform in [0, 1) addressed purely by its counter path.

    Cheap enough to call once per lazily materialized site; full Philox
    substreams are reserved for bulk draws.
    """
    h = _mix64(_encode(master_seed))
    for p in path:
        h = _mix64(h ^ _encode(p))
    h = _mix64(h ^ index)
    return h / 2.0**64


def counter_uniforms(master_seed: int, n: int, *path: int) -> list:
    return [counter_uniform(master_seed, *path, index=i) for i in range(n)]
