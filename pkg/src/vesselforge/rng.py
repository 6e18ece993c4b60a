"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream)``. Work that belongs to one sample uses that sample's stream,
and separate pipeline stages take disjoint counter blocks via ``substream``.
Because of this, a sample's draws do not depend on how many workers run or
in what order samples are produced.
"""

from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class Rng:
    seed: int
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            value = getattr(self, name)
            if not 0 <= int(value) <= _U64:
                raise ValueError(f"{name} must fit in an unsigned 64-bit integer, got {value}")

    def generator(self, substream: int = 0) -> np.random.Generator:
        """A fresh generator for the ``substream``-th counter block of this stream.

        Substreams are 2**128 draws apart (the third counter word), so no stage can
        run into another stage's draws.
        """
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream], dtype=np.uint64),
            counter=np.array([0, 0, substream, 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def child(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)


def make_rng(seed: int, stream: int = 0, substream: int = 0) -> np.random.Generator:
    return Rng(int(seed), int(stream)).generator(substream)


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an :class:`Rng`, or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, Rng):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return make_rng(int(rng))
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
