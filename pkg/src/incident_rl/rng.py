"""Seeded random streams.

Every random decision in the package draws from numpy's PCG64 bit generator.
Independent runs get their own substream, keyed by ``(seed, purpose, index)``
through :class:`numpy.random.SeedSequence`, so a batch split across workers
reproduces the serial result exactly.
"""

from __future__ import annotations

import numpy as np

# purpose tags for substream keys
TRAIN = 1
EVALUATE = 2
ROLLOUT = 3
SYNTH = 4
PERTURB = 5
POLICY = 6

_BLOCK = 2048


def make_rng(seed: int, *key: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in key)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class UniformStream:
    """Buffered scalar uniforms in [0, 1) from a PCG64 generator.

    Pulling one float at a time from ``Generator.random()`` costs more than the
    TD update it feeds, so values are drawn in blocks.
    """

    __slots__ = ("_gen", "_buf", "_pos")

    def __init__(self, seed: int, *key: int):
        self._gen = make_rng(seed, *key)
        self._buf: list[float] = []
        self._pos = 0

    def __call__(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._gen.random(_BLOCK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def below(self, n: int) -> int:
        """Uniform integer in ``range(n)``."""
        return min(int(self() * n), n - 1)
