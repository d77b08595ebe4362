"""Independent test oracles: brute-force enumerations kept separate from the
implementations they check."""

import itertools

import numpy as np

from caasl.posterior import structural_hamming_distance


def exact_expected_shd(probs, truth):
    """Enumerate every off-diagonal outcome (feasible for d <= 3)."""
    d = probs.shape[0]
    off = [(i, j) for i in range(d) for j in range(d) if i != j]
    total = 0.0
    for bits in itertools.product([0, 1], repeat=len(off)):
        graph = np.zeros((d, d), dtype=int)
        weight = 1.0
        for (i, j), bit in zip(off, bits):
            graph[i, j] = bit
            weight *= probs[i, j] if bit else 1.0 - probs[i, j]
        total += weight * structural_hamming_distance(graph, truth)
    return total


def pairwise_expected_shd(probs, truth):
    """Closed form under independence: four outcomes per unordered pair."""
    d = probs.shape[0]
    total = 0.0
    for i in range(d):
        for j in range(i + 1, d):
            for a in (0, 1):
                for b in (0, 1):
                    weight = (probs[i, j] if a else 1 - probs[i, j]) * (
                        probs[j, i] if b else 1 - probs[j, i]
                    )
                    sample = np.zeros((2, 2), dtype=int)
                    mini_truth = np.zeros((2, 2), dtype=int)
                    sample[0, 1], sample[1, 0] = a, b
                    mini_truth[0, 1], mini_truth[1, 0] = truth[i, j], truth[j, i]
                    total += weight * structural_hamming_distance(sample, mini_truth)
    return total
