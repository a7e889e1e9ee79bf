"""Deterministic seed derivation.

All randomness in a run flows from one root seed. Components receive named
sub-seeds so any stage (split, CAE, clustering, training, bootstrap) can be
re-run in isolation and still match the full pipeline bit for bit.
"""

from __future__ import annotations

import numpy as np

# Fixed component offsets; changing these changes every derived stream.
_COMPONENT_OFFSETS = {
    "synth": 1,
    "split": 2,
    "augment": 3,
    "cae": 4,
    "kmeans": 5,
    "model": 6,
    "train": 7,
    "bootstrap": 8,
}


def component_seed(root_seed: int, name: str) -> int:
    """Derive the named component's sub-seed from the run's root seed."""
    try:
        offset = _COMPONENT_OFFSETS[name]
    except KeyError:
        raise KeyError(f"unknown seed component {name!r}; known: {sorted(_COMPONENT_OFFSETS)}")
    return int(np.random.SeedSequence([root_seed, offset]).generate_state(1)[0])


def derive_seed(seed: int, *parts: int) -> int:
    """Mix extra integer coordinates (level, class index, ...) into a seed."""
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])
