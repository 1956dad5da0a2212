# lidar-probe-init/src/lidar_probe_init/random_generator.py
"""
Counter-based random streams for reproducible parallel work.

Every stochastic draw in the toolkit (range noise, dropouts, RANSAC
samples, correspondence tuples, ground-truth surface sampling) is taken
from a stream addressed by a key such as ``(seed, NOISE, scan_index)``.
A stream depends only on its key, never on how many draws were made
before it or on which thread asks for it, so results are bit-identical
for any worker count.

Key components:
    - RandomNumberGenerator: Seeded factory of keyed numpy generators.
    - Stream identifiers: NOISE, DROPOUT, RANSAC, TUPLES, SURFACE_SAMPLING.
"""

import logging
from typing import Tuple

import numpy as np

from lidar_probe_init.exceptions import RejectedInputError

logger = logging.getLogger(__name__)

NOISE = 1
DROPOUT = 2
RANSAC = 3
TUPLES = 4
SURFACE_SAMPLING = 5


class RandomNumberGenerator:
    """
    Factory of independent Philox streams derived from one seed.

    Attributes:
        seed (int): Root seed of every stream.
    """

    def __init__(self, seed: int = 69):
        """
        Initialize the generator.

        Args:
            seed: Non-negative root seed. Defaults to 69.

        Raises:
            RejectedInputError: If the seed is negative.
        """
        if int(seed) < 0:
            logger.error(f"Negative seed {seed}")
            raise RejectedInputError("Seed must be non-negative")
        self.seed = int(seed)
        logger.debug(f"Initializing RandomNumberGenerator with seed {self.seed}")

    def _key(self, stream: int, counter: Tuple[int, ...]) -> np.random.SeedSequence:
        if any(int(c) < 0 for c in counter):
            raise RejectedInputError(f"Stream counters must be non-negative: {counter}")
        return np.random.SeedSequence([self.seed, int(stream), *map(int, counter)])

    def stream(self, stream: int, *counter: int) -> np.random.Generator:
        """
        Return the generator addressed by ``(seed, stream, *counter)``.

        Two calls with the same address return generators that produce
        identical sequences.
        """
        return np.random.Generator(np.random.Philox(self._key(stream, counter)))

    def normal(self, stream: int, counter: Tuple[int, ...], size: int) -> np.ndarray:
        return self.stream(stream, *counter).standard_normal(size)

    def uniform(self, stream: int, counter: Tuple[int, ...], size: int) -> np.ndarray:
        return self.stream(stream, *counter).random(size)

    def spawn(self, offset: int) -> "RandomNumberGenerator":
        """Generator for a re-seeded trial, e.g. one repeatability repetition."""
        return RandomNumberGenerator(self.seed * 1_000_003 + int(offset))
