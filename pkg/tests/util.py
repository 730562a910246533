"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from cipherbreak.rng import MasterKey


def key_from_int(n: int) -> MasterKey:
    return MasterKey(n.to_bytes(32, "big"))


def textured_image(size: int, seed: int) -> np.ndarray:
    """Natural-looking test image: smooth coarse field plus fine noise.

    Avoids large constant regions so exact-pixel coincidences are rare,
    which matters for wrong-key and avalanche statistics.
    """
    rng = np.random.default_rng(seed)
    cells = -(-size // 8)
    coarse = rng.integers(0, 256, size=(cells, cells, 3))
    up = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    fine = rng.integers(-24, 25, size=(size, size, 3))
    return np.clip(up + fine, 0, 255).astype(np.uint8)


def random_image(size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
