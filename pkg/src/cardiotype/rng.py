"""Deterministic 64-bit PRNG helpers (splitmix64).

Fold shuffles and seed derivation must be reproducible across runs and
platforms, so they use splitmix64 (Steele, Lea & Flood 2014) rather than
any library generator whose stream may change between versions.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def mix64(*parts: int) -> int:
    """Hash a sequence of integers into one 64-bit seed.

    Each part is folded into the stream, so (1, 2) and (2, 1) map to
    different seeds. Used to derive independent sub-seeds from a master
    seed plus run coordinates (config index, dimension, fold, ...).
    """
    state = 0x6A09E667F3BCC908  # sqrt(2) fractional bits, arbitrary non-zero start
    out = 0
    for part in parts:
        state = (state ^ (part & _MASK)) & _MASK
        state, out = splitmix64(state)
    return out


def shuffled(items: list, seed: int) -> list:
    """Fisher-Yates shuffle driven by splitmix64; returns a new list."""
    out = list(items)
    state = seed & _MASK
    for i in range(len(out) - 1, 0, -1):
        state, draw = splitmix64(state)
        j = draw % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out
