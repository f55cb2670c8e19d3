import numpy as np

# role tags for derive_seed; values are part of the reproducibility contract
ROLE_TREE = 0
ROLE_PREDICTOR = 1
ROLE_EMBEDDING = 2
ROLE_OS = 3
ROLE_SCORE = 4
ROLE_SUBSAMPLE = 5
ROLE_FOLDS = 6
ROLE_GRID = 7


def derive_seed(seed: int, *keys: int) -> int:
    """Stable non-negative 63-bit seed for the stream identified by ``keys``."""
    words = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(2, np.uint32)
    return (int(words[0]) << 31) ^ int(words[1])
