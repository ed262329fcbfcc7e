"""Portable deterministic hashing used for seeded decisions.

The train/test split and CLI sub-seed derivation must be reproducible
bit-for-bit across runs, platforms, and implementations, so they are built
on pure 64-bit integer arithmetic (a splitmix-style finalizer over an
FNV-1a hash of string labels) rather than on any library RNG whose stream
layout might change.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer on a 64-bit value."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def fnv1a64(text: str) -> int:
    """FNV-1a hash of a string's UTF-8 bytes."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Derive a labeled sub-seed from a master seed."""
    return splitmix64((seed & _MASK64) ^ fnv1a64(label))


def fair_coin(seed: int, label: str) -> bool:
    """Deterministic probability-1/2 decision for (seed, label).

    Order-independent: the outcome depends only on the seed and the label,
    never on how many decisions were drawn before it.
    """
    return derive_seed(seed, label) < (1 << 63)
