"""Synthetic sequence-classification task used for training and calibration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..numerics import make_rng


@dataclass(frozen=True)
class MajorityTask:
    """Label is 1 when tokens from the upper half of the vocabulary are in the majority.

    ``length`` must be odd so there are no ties.
    """

    vocab_size: int = 8
    length: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.length % 2 == 0:
            raise ConfigError("majority task needs an odd sequence length")
        if self.vocab_size < 2:
            raise ConfigError("majority task needs vocab_size >= 2")

    def sample(self, n: int, split: str = "train"):
        offset = {"train": 0, "test": 1, "calib": 2}[split]
        rng = make_rng(self.seed * 1000 + offset)
        # balanced classes: draw the count of "high" tokens first
        half = self.length // 2
        labels = rng.integers(0, 2, size=n)
        n_high = np.where(labels == 1,
                          rng.integers(half + 1, self.length + 1, size=n),
                          rng.integers(0, half + 1, size=n))
        lo, hi = self.vocab_size // 2, self.vocab_size
        tokens = np.empty((n, self.length), dtype=np.int64)
        for r in range(n):
            is_high = np.zeros(self.length, dtype=bool)
            is_high[rng.permutation(self.length)[: n_high[r]]] = True
            tokens[r] = np.where(is_high,
                                 rng.integers(lo, hi, size=self.length),
                                 rng.integers(0, lo, size=self.length))
        return tokens, labels.astype(np.int64)


def majority_label(tokens, vocab_size):
    tokens = np.atleast_2d(tokens)
    high = (tokens >= vocab_size // 2).sum(axis=1)
    return (high > tokens.shape[1] // 2).astype(np.int64)
