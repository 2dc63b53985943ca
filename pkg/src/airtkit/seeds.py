"""Deterministic per-stage RNG substreams from one root seed.

Each pipeline stage draws from its own labeled substream so stages are
independently reproducible: rerunning one stage with the same root seed
consumes the same random numbers regardless of what ran before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    label_key = int.from_bytes(digest[:8], "little")
    root = int(seed) & (2**64 - 1)
    return np.random.default_rng(np.random.SeedSequence([root, label_key]))
