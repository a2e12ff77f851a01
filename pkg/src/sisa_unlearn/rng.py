"""Stable hashing and counter-based seed streams.

Every random draw in the package goes through :func:`stream`, which hashes a
tuple key with 64-bit FNV-1a and feeds the result to a SplitMix64 generator.
Draws are a pure function of the key, so a rollback never needs saved PRNG
state.
"""
from __future__ import annotations

import struct

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


@njit(cache=True)
def _fnv1a_array(buf, h):
    prime = np.uint64(0x100000001B3)
    for i in range(buf.shape[0]):
        h = (h ^ np.uint64(buf[i])) * prime
    return h


def fnv1a64(data: bytes | bytearray | memoryview | np.ndarray, h: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a over raw bytes; ``h`` continues a running hash."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        buf = memoryview(data).cast("B")
    if len(buf) < 64:
        for b in bytes(buf):
            h = ((h ^ b) * FNV_PRIME) & MASK64
        return h
    return int(_fnv1a_array(np.frombuffer(buf, dtype=np.uint8), np.uint64(h)))


def _encode_key(parts: tuple) -> bytes:
    out = bytearray()
    for p in parts:
        if isinstance(p, bool) or not isinstance(p, (int, str)):
            raise TypeError(f"seed key parts must be int or str, got {p!r}")
        if isinstance(p, int):
            out += b"i" + struct.pack("<Q", p & MASK64)
        else:
            raw = p.encode("utf-8")
            out += b"s" + struct.pack("<I", len(raw)) + raw
    return bytes(out)


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """Reference single-step SplitMix64; returns (new_state, output)."""
    state = (state + _GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    """Vectorised SplitMix64. Output i depends only on (seed, i)."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + k * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def random(self, n: int) -> np.ndarray:
        """Float64 draws in [0, 1) with 53 bits of precision."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.random(n)

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high)."""
        return np.minimum((self.random(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")


class SeedKey(tuple):
    """Hashable key naming one seed stream, e.g. ``SeedKey(7, "slice", 2, 3)``."""

    def __new__(cls, *parts):
        return super().__new__(cls, parts)

    def child(self, *parts) -> "SeedKey":
        return SeedKey(*self, *parts)

    @property
    def seed(self) -> int:
        return fnv1a64(_encode_key(tuple(self)))

    def generator(self) -> SplitMix64:
        return SplitMix64(self.seed)

    def __repr__(self):
        return f"SeedKey{tuple(self)!r}"


def stream(*parts) -> SplitMix64:
    """Generator for the stream named by ``parts`` (global seed, tag, indices...)."""
    return SeedKey(*parts).generator()
