"""Seeded synthetic token streams standing in for natural-text calibration data."""
from __future__ import annotations

import numpy as np


def zipf_weights(vocab: int, exponent: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, vocab + 1) ** exponent
    return w / w.sum()


def zipf_markov_streams(num: int, length: int, vocab: int = 256, seed: int = 0,
                        exponent: float = 1.1, source_seed: int | None = None) -> np.ndarray:
    """Sample ``num`` sequences from a seeded Zipfian Markov source.

    Every token has its own next-token distribution: a Zipf law over a
    token-specific permutation of the vocabulary, so the streams carry bigram
    structure a small model can learn. ``source_seed`` fixes the chain itself
    (defaults to ``seed``) so train and held-out samples share one source.
    """
    src = np.random.default_rng(seed if source_seed is None else source_seed)
    perms = np.stack([src.permutation(vocab) for _ in range(vocab)])
    cdf = np.cumsum(zipf_weights(vocab, exponent))
    rng = np.random.default_rng((seed, 1))
    out = np.empty((num, length), dtype=np.int64)
    out[:, 0] = perms[0][np.searchsorted(cdf, rng.random(num))]
    for i in range(1, length):
        ranks = np.minimum(np.searchsorted(cdf, rng.random(num)), vocab - 1)
        out[:, i] = perms[out[:, i - 1], ranks]
    return out
