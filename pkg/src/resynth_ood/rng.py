"""Deterministic, splittable random streams.

A stream is identified by a root seed and a path of labels. The path is hashed
into a Philox key, so adding a new consumer somewhere never shifts the draws
seen by an existing one.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def _path_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update((seed & _MASK64).to_bytes(8, "little"))
    for label in path:
        encoded = label.encode("utf-8")
        h.update(len(encoded).to_bytes(4, "little"))
        h.update(encoded)
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    seed: int
    path: tuple[str, ...] = ()
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.path = tuple(str(x) for x in self.path)

    def split(self, *labels: object) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(str(x) for x in labels))

    @property
    def generator(self) -> np.random.Generator:
        """Lazily created numpy generator for this stream (stateful)."""
        if self._gen is None:
            key = _path_key(self.seed, self.path)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def next_uniform(self) -> float:
        return float(self.generator.random())

    def next_gaussian(self) -> float:
        # Box-Muller on two uniforms; 1 - u keeps the log argument in (0, 1]
        u1 = 1.0 - self.generator.random()
        u2 = self.generator.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def gaussian(self, shape) -> np.ndarray:
        u1 = 1.0 - self.generator.random(shape)
        u2 = self.generator.random(shape)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def torch_seed(self) -> int:
        """A 63-bit seed derived from the path, for seeding torch generators."""
        return _path_key(self.seed, self.path + ("torch",)) & ((1 << 63) - 1)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.torch_seed())
        return g
