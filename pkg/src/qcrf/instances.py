"""Named problem instances shared by the CLI, the checks and the tests."""
from __future__ import annotations

import numpy as np

from qcrf.crf import (Dataset, FeatureTable, FeatureTemplate, LabelAlphabet, Sequence,
                      Weights)

REFERENCE_WEIGHTS = (0.17, 0.35, 0.41, 0.52, 0.37)

# n = 2 positions with K = 5 features gives the 2^10 = 1024-entry clamped Hamiltonian
REFERENCE_ALPHABET = LabelAlphabet(("DET", "NOUN"))
REFERENCE_TEMPLATES = (
    FeatureTemplate("DET", "the"),
    FeatureTemplate("NOUN", "dog"),
    FeatureTemplate("NOUN"),
    FeatureTemplate("DET"),
    FeatureTemplate("NOUN", "the"),
)
REFERENCE_SENTENCE = Sequence(("the", "dog"), ("DET", "NOUN"))


def reference_instance(eta: float = 0.1) -> tuple[Dataset, Weights]:
    ds = Dataset.from_sequences([REFERENCE_SENTENCE], REFERENCE_ALPHABET, REFERENCE_TEMPLATES)
    return ds, Weights(REFERENCE_WEIGHTS, eta)


def aligned_table(n: int = 2, K: int = 2, Q: int = 2) -> FeatureTable:
    """Every feature is +1 exactly when a position carries label 0."""
    values = -np.ones((K, n, Q), dtype=np.int8)
    values[:, :, 0] = 1
    return FeatureTable(values)


def aligned_instance(n: int = 2, K: int = 2, Q: int = 2, eta: float = 0.1) -> tuple[Dataset, Weights]:
    ds = Dataset.uniform([(aligned_table(n, K, Q), [0] * n)])
    return ds, Weights(np.zeros(K), eta)


def random_table(rng: np.random.Generator, n: int, K: int, Q: int) -> FeatureTable:
    return FeatureTable(rng.choice(np.array([-1, 1], dtype=np.int8), size=(K, n, Q)))


def random_instance(rng: np.random.Generator, n: int, K: int, Q: int, records: int = 1,
                    scale: float = 1.0, eta: float = 0.1) -> tuple[Dataset, Weights]:
    pairs = [(random_table(rng, n, K, Q), rng.integers(0, Q, size=n)) for _ in range(records)]
    return Dataset.uniform(pairs), Weights(rng.normal(scale=scale, size=K), eta)


def random_shape(rng: np.random.Generator, max_dim: int = 2 ** 16, max_n: int = 4,
                 max_K: int = 4, max_Q: int = 3) -> tuple[int, int, int]:
    """Draw ``(n, K, Q)`` with ``Q^n * 2^(nK) <= max_dim``."""
    while True:
        n = int(rng.integers(1, max_n + 1))
        K = int(rng.integers(1, max_K + 1))
        Q = int(rng.integers(2, max_Q + 1))
        if Q ** n * 2 ** (n * K) <= max_dim:
            return n, K, Q


def small_instance(seed: int = 0, eta: float = 0.1) -> tuple[Dataset, Weights]:
    """n=2, K=2, Q=2 with a seeded table and the first two reference weights."""
    rng = np.random.default_rng(seed)
    table = random_table(rng, 2, 2, 2)
    labels = rng.integers(0, 2, size=2)
    return Dataset.uniform([(table, labels)]), Weights(REFERENCE_WEIGHTS[:2], eta)
