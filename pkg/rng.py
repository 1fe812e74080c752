"""Counter-based seeded streams for reproducible Monte Carlo.

Every trial draws from its own Philox stream keyed by (seed, trial), so the
numbers a trial sees do not depend on how many workers run or in which order
trials finish.
"""

import numpy as np


class SeededRNG:
    """numpy Generator on a Philox bit generator, addressable by a key path."""

    def __init__(self, seed: int, *path: int):
        self._seed = int(seed)
        self._path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence([self._seed & 0xFFFFFFFFFFFFFFFF, *self._path])
        self._gen = np.random.Generator(np.random.Philox(seq))

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def path(self):
        return self._path

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, index: int) -> 'SeededRNG':
        """Independent stream for sub-task `index` (trial, resample, ...)."""
        return SeededRNG(self._seed, *self._path, index)

    def complex_normal(self, size, variance=1.0) -> np.ndarray:
        """i.i.d. CN(0, variance) draws."""
        scale = np.sqrt(variance / 2.0)
        return scale * (self._gen.standard_normal(size) + 1j * self._gen.standard_normal(size))

    def uniform(self, size=None):
        return self._gen.random(size)

    def random_phases(self, size) -> np.ndarray:
        return np.exp(2j * np.pi * self._gen.random(size))

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f'<SeededRNG seed={self._seed} path={self._path}>'


def trial_stream(seed: int, trial: int) -> SeededRNG:
    """Stream for trial `trial` of an experiment seeded with `seed`."""
    return SeededRNG(seed, trial)


def as_rng(rng) -> SeededRNG:
    """Accept a SeededRNG or a bare integer seed."""
    if isinstance(rng, SeededRNG):
        return rng
    return SeededRNG(int(rng))
