"""Deterministic seed derivation for named randomness substreams.

Every stage draws its randomness from a substream derived from the experiment
seed and a stage label, so stages can be re-run in isolation without consuming
each other's random state.
"""

import hashlib
from contextlib import contextmanager
from typing import Iterator

import torch


def derive_seed(base_seed: int, label: str) -> int:
    """Map (base_seed, label) to a stable 32-bit seed.

    The derivation is a content hash, so it is independent of call order and
    of the process RNG state.
    """
    digest = hashlib.sha256(f"{int(base_seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


@contextmanager
def scoped_torch_seed(seed: int) -> Iterator[None]:
    """Run a block under a locally seeded torch RNG, restoring state after."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        yield
