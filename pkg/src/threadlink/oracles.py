"""Slow, obviously-correct reference implementations used by selftest and tests.

Each oracle works element by element or pair by pair and shares no code
with :mod:`threadlink.metrics`.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from itertools import combinations

import numpy as np

from .data import ThreadPartition


def set_partitions(items: list[int]) -> Iterator[list[list[int]]]:
    """All partitions of ``items`` (Bell-number many)."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def random_partition(rng: np.random.Generator, n: int) -> ThreadPartition:
    k = int(rng.integers(1, n + 1))
    labels = rng.integers(0, k, size=n)
    groups: dict[int, list[int]] = {}
    for e, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(e)
    return ThreadPartition.from_clusters(groups.values())


def _cluster_of(p: ThreadPartition, e: int) -> frozenset[int]:
    return next(c for c in p.clusters if e in c)


def vi_oracle(a: ThreadPartition, b: ThreadPartition) -> float:
    """H(A|B) + H(B|A) in bits from per-cluster intersection counts."""
    n = len(a.elements)
    total = 0.0
    for ca in a.clusters:
        for cb in b.clusters:
            k = len(ca & cb)
            if k:
                p = k / n
                total -= p * (math.log2(p / (len(cb) / n)) + math.log2(p / (len(ca) / n)))
    return total


def ari_oracle(a: ThreadPartition, b: ThreadPartition) -> float:
    """Adjusted Rand index by enumerating every element pair."""
    elems = sorted(a.elements)
    both = in_a = in_b = 0
    pairs = 0
    for x, y in combinations(elems, 2):
        pairs += 1
        sa = _cluster_of(a, x) == _cluster_of(a, y)
        sb = _cluster_of(b, x) == _cluster_of(b, y)
        in_a += sa
        in_b += sb
        both += sa and sb
    expected = in_a * in_b / pairs if pairs else 0.0
    top = (in_a + in_b) / 2
    if top == expected:
        return 1.0
    return (both - expected) / (top - expected)


def cluster_prf_oracle(gold: ThreadPartition, pred: ThreadPartition) -> tuple[float, float, float]:
    correct = sum(1 for c in pred.clusters if any(c == g for g in gold.clusters))
    p = 100.0 * correct / len(pred.clusters)
    r = 100.0 * correct / len(gold.clusters)
    return p, r, (0.0 if p + r == 0 else 2 * p * r / (p + r))
