"""Named random streams derived from one master seed.

A stream is identified by ``(role, worker_id)``; its generator is seeded with
``SeedSequence([master_seed, ROLE_CODES[role], worker_id, salt])``, so the draws a
worker sees do not depend on how many other streams exist or in which order they are
used. Live streams use ``salt = 0``. Replay generators are seeded with
``[master_seed, ROLE_CODES["replay"], ROLE_CODES[role], worker_id, salt]`` where the
salt encodes the round and replay index. Server-side streams use ``worker_id = SERVER``.
"""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

SERVER = 2**31 - 1

ROLE_CODES = {
    "sample": 1,
    "compress": 2,
    "coin": 3,
    "bucket": 4,
    "data": 5,
    "pick": 6,
    "replay": 7,
}


def derive(master_seed: int, role: str, worker_id: int = SERVER, salt: int = 0) -> np.random.Generator:
    if role not in ROLE_CODES:
        raise KeyError(f"unknown stream role: {role}")
    seq = np.random.SeedSequence([int(master_seed), ROLE_CODES[role], int(worker_id), int(salt)])
    return np.random.default_rng(seq)


class RngStreams:
    """Lazily created, cached generators for one run."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._cache: Dict[Tuple[str, int], np.random.Generator] = {}

    def worker(self, role: str, worker_id: int) -> np.random.Generator:
        key = (role, int(worker_id))
        if key not in self._cache:
            self._cache[key] = derive(self.master_seed, role, worker_id)
        return self._cache[key]

    def server(self, role: str) -> np.random.Generator:
        return self.worker(role, SERVER)

    def replay(self, role: str, worker_id: int, k: int, r: int) -> np.random.Generator:
        # Replays never touch the live streams.
        salt = (int(k) << 20) + int(r) + 1
        seq = np.random.SeedSequence(
            [self.master_seed, ROLE_CODES["replay"], ROLE_CODES[role], int(worker_id), salt]
        )
        return np.random.default_rng(seq)
