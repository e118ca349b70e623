"""Seedable, named random streams on top of numpy's Philox generator.

Every stochastic operation in the package pulls from its own named stream so
that experiments are reproducible and independent sub-computations (dataset
draw, minibatch noise, Monte-Carlo estimators, ...) never share state.
"""

import hashlib

import numpy as np


def _name_words(*names: str) -> list[int]:
    words = []
    for name in names:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return words


def stream(seed: int, *names: str) -> np.random.Generator:
    """Counter-based generator for the stream identified by (seed, *names)."""
    ss = np.random.SeedSequence([int(seed)] + _name_words(*names))
    return np.random.Generator(np.random.Philox(ss))


def substreams(seed: int, count: int, *names: str) -> list[np.random.Generator]:
    """`count` independent generators, e.g. one per Monte-Carlo worker."""
    return [stream(seed, *names, f"sub{i}") for i in range(count)]
