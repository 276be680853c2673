import numpy as np


def seedseq(seed) -> np.random.SeedSequence:
    """Accept an int, a sequence of ints, or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def spawn(seed, k: int) -> list[np.random.SeedSequence]:
    return seedseq(seed).spawn(k)
