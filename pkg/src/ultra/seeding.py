"""Seed derivation: one root seed fans out into independent labelled streams.

``derive_seed(root, *labels)`` folds each label into the state with a
splitmix64 finaliser.  Strings are reduced to 64 bits with FNV-1a so the
result does not depend on ``PYTHONHASHSEED``.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def mix(root: int, label: int | str) -> int:
    """Child seed for a single ``label`` under ``root``."""
    value = _fnv1a(label) if isinstance(label, str) else int(label) & MASK64
    return splitmix64(splitmix64(root & MASK64) ^ value)


def derive_seed(root: int, *labels: int | str) -> int:
    seed = root & MASK64
    for label in labels:
        seed = mix(seed, label)
    return seed


def make_rng(root: int, *labels: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, *labels)))
