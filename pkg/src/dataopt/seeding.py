"""Deterministic RNG streams derived from explicit integer seed parts.

Every random draw in the package flows through here, so a run is fully
reproducible from the seeds in its config: no ambient randomness.
"""

import numpy as np


def derive_rng(*parts) -> np.random.Generator:
    """Independent generator for a (seed, purpose, epoch, batch, ...) tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]))


def derive_seed(*parts) -> int:
    """Collapse seed parts into a single integer sub-seed."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])
