"""Deterministic, collision-free random streams.

Each (seed, purpose, index) triple keys an independent counter-based Philox
stream, so training steps and render chunks are reproducible in isolation and
independent of execution order or worker count.
"""

from __future__ import annotations

import numpy as np

PURPOSE_TRAIN = 1
PURPOSE_RENDER = 2


def stream(seed: int, purpose: int, index: int) -> np.random.Generator:
    if not 0 <= index < 1 << 48:
        raise ValueError("stream index out of range")
    key = [np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF), np.uint64((purpose << 48) | index)]
    return np.random.Generator(np.random.Philox(key=key))
