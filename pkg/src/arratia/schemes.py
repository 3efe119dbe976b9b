"""Coalescence schemes ``J = (j_1, ..., j_l)`` and their interval partitions."""
from __future__ import annotations

import itertools
import math
import numbers
from dataclasses import dataclass


@dataclass(frozen=True)
class CoalescenceScheme:
    """Merge indices of an ``n``-point motion; ``j_i`` lies in ``{1, ..., n - i}``."""

    n: int
    indices: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(j) for j in self.indices))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not validate(self.indices, self.n):
            raise ValueError(f"{self.indices} is not a coalescence scheme for n={self.n}")

    def __len__(self):
        return len(self.indices)

    @property
    def blocks(self) -> int:
        return self.n - len(self.indices)

    def partition(self) -> "IntervalPartition":
        return to_partition(self)


@dataclass(frozen=True)
class IntervalPartition:
    """Contiguous blocks of ``{1, ..., n}`` listed in ascending order."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(tuple(b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        flat = [i for b in blocks for i in b]
        if flat != list(range(1, len(flat) + 1)) or any(len(b) == 0 for b in blocks):
            raise ValueError(f"{blocks} is not an ascending interval partition")

    def __len__(self):
        return len(self.blocks)


def validate(indices, n: int) -> bool:
    """True iff every ``j_i`` lies in ``{1, ..., n - i}`` (so ``len <= n - 1``)."""
    indices = tuple(indices)
    if len(indices) > max(n - 1, 0):
        return False
    return all(isinstance(j, numbers.Integral) and 1 <= j <= n - i for i, j in enumerate(indices, start=1))


def count(n: int, l: int) -> int:
    """``|J_{n,l}| = (n-1)! / (n-1-l)!``."""
    return math.perm(n - 1, l)


def enumerate_schemes(n: int, l: int) -> list[CoalescenceScheme]:
    """All schemes of length ``l`` for ``n`` particles, in lexicographic order."""
    if n < 1 or not 0 <= l <= n - 1:
        raise ValueError(f"need 0 <= l <= n - 1, got n={n}, l={l}")
    ranges = [range(1, n - i + 1) for i in range(1, l + 1)]
    return [CoalescenceScheme(n, js) for js in itertools.product(*ranges)]


def all_schemes(n: int) -> list[CoalescenceScheme]:
    return [J for l in range(n) for J in enumerate_schemes(n, l)]


def to_partition(J: CoalescenceScheme) -> IntervalPartition:
    """Start from singletons; step ``i`` merges current blocks ``j_i`` and ``j_i + 1``."""
    if not isinstance(J, CoalescenceScheme):
        raise TypeError("expected a CoalescenceScheme")
    blocks = [[i] for i in range(1, J.n + 1)]
    for j in J.indices:
        blocks[j - 1:j + 1] = [blocks[j - 1] + blocks[j]]
    return IntervalPartition(tuple(tuple(b) for b in blocks))
