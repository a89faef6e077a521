"""Portable 64-bit seed derivation.

Every random stream in the package is keyed by a path of integers below a
master seed::

    x = master
    for k in path:
        x = splitmix64(x ^ ((k * 0x9E3779B97F4A7C15) mod 2**64))

``splitmix64`` is the finalizer of Steele et al.'s SplitMix64 generator::

    z = (z + 0x9E3779B97F4A7C15) mod 2**64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    z = z ^ (z >> 31)

Only integer arithmetic is involved, so the same path yields the same seed in
any language.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> int:
    z = (z + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int) -> int:
    """Derive a child seed from ``master`` along an integer ``path``."""
    x = int(master) & MASK64
    for k in path:
        x = splitmix64(x ^ ((int(k) * GOLDEN) & MASK64))
    return x
