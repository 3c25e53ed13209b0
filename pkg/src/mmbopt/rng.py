"""Splittable random streams and the block / data samplers.

Every random draw in a run is made from a substream addressed by a path of
labels such as ``(t, block, "data")``.  Two streams with the same root seed
and path produce identical draws, regardless of the order in which they are
created, which keeps traces independent of how blocks are scheduled.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConfigurationError

Label = Union[int, str]

_U32 = 0xFFFFFFFF


def _encode(label: Label) -> list[int]:
    # Strings are hashed with crc32 (stable across interpreter runs, unlike hash()).
    # A type tag keeps the int 3 and the string "3" apart.
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("boolean labels are ambiguous")
    if isinstance(label, (int, np.integer)):
        v = int(label)
        if v < 0:
            raise ValueError(f"negative label {v}")
        return [0, v & _U32, (v >> 32) & _U32]
    if isinstance(label, str):
        return [1, zlib.crc32(label.encode("utf-8"))]
    raise TypeError(f"unsupported label type {type(label).__name__}")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(root_seed, path)``."""

    root_seed: int
    path: tuple[Label, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.root_seed) < 2**64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.root_seed}")

    def child(self, *labels: Label) -> "RngStream":
        return RngStream(self.root_seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        key: list[int] = []
        for label in self.path:
            key.extend(_encode(label))
        ss = np.random.SeedSequence(entropy=int(self.root_seed), spawn_key=tuple(key))
        return np.random.Generator(np.random.PCG64(ss))


def _as_generator(rng: RngStream | np.random.Generator) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


def sample_blocks(rng: RngStream | np.random.Generator, m: int, k: int) -> np.ndarray:
    """Draw ``k`` distinct block ids from ``range(m)`` uniformly without replacement.

    The result is sorted so that per-block reductions happen in block-id order.
    """
    if m < 1:
        raise ConfigurationError(f"block count must be positive, got {m}")
    if not 1 <= k <= m:
        raise ConfigurationError(f"block batch size must lie in [1, {m}], got {k}")
    if k == m:
        return np.arange(m)
    return np.sort(_as_generator(rng).choice(m, size=k, replace=False))


def sample_data(rng: RngStream | np.random.Generator, n: int, b: int) -> np.ndarray:
    """Draw ``b`` sample indices uniformly with replacement from ``range(n)``."""
    if n < 1:
        raise ConfigurationError(f"population size must be positive, got {n}")
    if b < 1:
        raise ConfigurationError(f"data batch size must be positive, got {b}")
    return _as_generator(rng).integers(0, n, size=b)


def sample_from(rng: RngStream | np.random.Generator, pool: Sequence[int] | np.ndarray, b: int) -> np.ndarray:
    """Draw ``b`` entries of ``pool`` with replacement."""
    pool = np.asarray(pool)
    return pool[sample_data(rng, len(pool), b)]
