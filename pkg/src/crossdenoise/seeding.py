"""Root-seed expansion.

Every random stream is ``SeedSequence([root_seed, purpose, *extra])`` so that
toggling one component never shifts another component's draws.
"""

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    SPLIT = 0
    INIT = 1
    NEGATIVES = 2
    SHUFFLE = 3
    CORRUPTION = 4
    SYNTH = 5


def rng_for(seed: int, purpose: Purpose, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(purpose), *map(int, extra)]))
