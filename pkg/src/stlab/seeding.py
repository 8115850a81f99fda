"""Deterministic seed substreams: every stage derives its RNG from the run
seed and a stage name, so no component ever reads global entropy."""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(seed: int, name: str) -> int:
    h = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, name))
