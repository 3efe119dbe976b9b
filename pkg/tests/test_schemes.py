import itertools
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from arratia.schemes import (CoalescenceScheme, IntervalPartition, all_schemes, count,
                             enumerate_schemes, to_partition, validate)


def brute_force(n, l):
    """Every tuple over 1..n-1 of length l that passes the range rule."""
    return [js for js in itertools.product(range(1, n), repeat=l)
            if all(j <= n - i for i, j in enumerate(js, start=1))]


@pytest.mark.parametrize("n", range(1, 9))
def test_counts_match_formula_and_brute_force(n):
    for l in range(n):
        schemes = enumerate_schemes(n, l)
        assert len(schemes) == count(n, l) == math.factorial(n - 1) // math.factorial(n - 1 - l)
        assert [J.indices for J in schemes] == brute_force(n, l)
    assert len(all_schemes(n)) == sum(count(n, l) for l in range(n))


def test_three_particle_schemes():
    assert [J.indices for J in enumerate_schemes(3, 1)] == [(1,), (2,)]
    assert [J.indices for J in enumerate_schemes(3, 2)] == [(1, 1), (2, 1)]
    assert len(enumerate_schemes(5, 3)) == 24


def test_partitions():
    assert to_partition(CoalescenceScheme(3, ())).blocks == ((1,), (2,), (3,))
    assert to_partition(CoalescenceScheme(3, (2,))).blocks == ((1,), (2, 3))
    assert to_partition(CoalescenceScheme(4, (2, 1))).blocks == ((1, 2, 3), (4,))
    assert to_partition(CoalescenceScheme(4, (3, 1, 1))).blocks == ((1, 2, 3, 4),)
    with pytest.raises(TypeError):
        to_partition((1,))


def test_validate():
    assert validate((), 1)
    assert validate((2, 1), 3)
    assert not validate((3,), 3)
    assert not validate((1, 2), 3)
    assert not validate((1, 1, 1), 3)
    assert not validate((0,), 3)
    with pytest.raises(ValueError):
        CoalescenceScheme(3, (1, 2))
    with pytest.raises(ValueError):
        IntervalPartition(((1,), (3,)))
    with pytest.raises(ValueError):
        enumerate_schemes(3, 3)


@st.composite
def schemes(draw):
    n = draw(st.integers(1, 9))
    l = draw(st.integers(0, n - 1))
    return CoalescenceScheme(n, [draw(st.integers(1, n - i)) for i in range(1, l + 1)])


@given(schemes())
def test_partition_shape(J):
    P = J.partition()
    assert len(P) == J.blocks == J.n - len(J)
    assert [i for b in P.blocks for i in b] == list(range(1, J.n + 1))


@given(schemes())
def test_scheme_round_trip(J):
    assert CoalescenceScheme(J.n, list(J.indices)) == J
    assert validate(J.indices, J.n)
