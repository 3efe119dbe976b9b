import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtri

from arratia import _kernels
from arratia.driver import (PathDriver, TimeGrid, _mix64, _stream_keys, _to_uniform,
                            brownian_values, hash_uniforms, knot_major_values, step_uniforms)


def levy_oracle(seed, replica, particle, level):
    """Independent Levy construction on the level-``level`` dyadic grid, written from scratch."""
    u = lambda t: hash_uniforms(seed, 0, replica, particle, [t])[0, 0]
    w = {0.0: 0.0, 1.0: float(ndtri(u(1.0)))}
    for k in range(1, level + 1):
        h = 2.0**-k
        for i in range(1, 2**k, 2):
            t = i * h
            w[t] = 0.5 * (w[t - h] + w[t + h]) + math.sqrt(h / 2) * float(ndtri(u(t)))
    return w


def test_values_match_independent_levy_construction():
    w = levy_oracle(11, 2, 5, 4)
    times = sorted(w)
    got = PathDriver(11, 5, replica=2).values(times)
    assert np.array_equal(got, [w[t] for t in times])


def test_increment_rejects_empty_interval():
    with pytest.raises(ValueError):
        PathDriver(0, 0).increment(0.25, 0.25)
    with pytest.raises(ValueError):
        PathDriver(0, 0).increment(0.5, 0.25)


def test_increments_telescope():
    d = PathDriver(3, 1)
    assert d.increment(0, 0.5) + d.increment(0.5, 1) == pytest.approx(d.increment(0, 1),
                                                                        abs=1e-15)


def test_repeated_queries_bit_exact():
    a = PathDriver(7, 2).values([0.3, 0.9, 0.1])
    c = PathDriver(7, 2).values([0.9, 0.1, 0.3])
    assert np.array_equal(a, c[[2, 0, 1]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6), st.floats(0.0, 1.0))
def test_value_does_not_depend_on_other_requests(ts, extra):
    base = PathDriver(5, 3).values(ts)
    again = PathDriver(5, 3).values([extra] + list(ts))[1:]
    assert np.array_equal(base, again)


def test_refine_keeps_increment_and_identity():
    d = PathDriver(9, 4)
    before = d.increment(0, 1)
    same = d.refine(d.base_grid)
    assert same.increment(0, 1) == before
    fine = d.refine(TimeGrid.dyadic(6))
    assert fine.increment(0, 1) == before
    assert np.array_equal(fine.values(TimeGrid.dyadic(6).knots),
                          PathDriver(9, 4).values(TimeGrid.dyadic(6).knots))


def test_refine_rejects_non_refinement():
    d = PathDriver(1, 0, base_grid=TimeGrid.uniform(4))
    with pytest.raises(ValueError):
        d.refine(TimeGrid.uniform(3))


def test_non_dyadic_knots_are_resolved():
    g = TimeGrid.uniform(3)
    w = brownian_values(0, np.arange(4), 0, g.knots)
    assert w.shape == (4, 4) and np.all(w[:, 0] == 0.0)
    assert np.all(np.isfinite(w))


def test_increment_moments():
    # 1e5 independent seeds: mean 0 +- 0.01, variance 1 +- 0.02
    w1 = brownian_values(np.arange(100_000), 0, 0, [1.0])[:, 0]
    assert abs(w1.mean()) < 0.01
    assert abs(w1.var() - 1.0) < 0.02


def test_bridge_midpoint_conditional_mean():
    # E[w(1/2) | w(1)] = w(1)/2: regress the midpoint on the endpoint
    w = brownian_values(np.arange(100_000), 0, 0, [0.5, 1.0])
    resid = w[:, 0] - 0.5 * w[:, 1]
    assert abs(resid.mean()) < 0.01
    assert abs(np.cov(resid, w[:, 1])[0, 1]) < 0.01


def test_disjoint_increments_uncorrelated():
    N = 100_000
    w = brownian_values(1, np.arange(N), 3, [0.3, 0.7, 1.0])
    a, b = w[:, 1] - w[:, 0], w[:, 2] - w[:, 1]
    assert abs(np.corrcoef(a, b)[0, 1]) < 3 / math.sqrt(N)
    assert abs(a.var() - 0.4) < 3 * 0.4 * math.sqrt(2 / N)


def test_knot_major_layout():
    knots = TimeGrid.graded(2**-10, 2**-4).knots
    a = knot_major_values(2, np.arange(5), 1, knots)
    b = brownian_values(2, np.arange(5), 1, knots)
    assert np.array_equal(a.T, b)


def test_compiled_uniforms_match_numpy_hash():
    keys = _stream_keys(3, 1, np.arange(200), 7)
    codes = np.array([17, 2**63 + 5, 0], dtype=np.uint64)
    ref = _to_uniform(_mix64(keys[None, :] ^ codes[:, None]))
    assert np.array_equal(_kernels.keyed_uniforms(keys, codes), ref)


def test_step_uniforms_in_open_unit_interval():
    u = step_uniforms(0, np.arange(10_000), 0, 0.5)
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01


class TestTimeGrid:
    def test_invariants(self):
        with pytest.raises(ValueError):
            TimeGrid([0.0, 0.5])
        with pytest.raises(ValueError):
            TimeGrid([0.0, 0.6, 0.4, 1.0])
        g = TimeGrid([0.0, 0.1, 0.5, 1.0])
        assert g.mesh == 0.5 and g.n == 3

    def test_refine_and_contains(self):
        g = TimeGrid.uniform(4)
        f = g.refine(3)
        assert f.n == 12 and f.contains(g) and not g.contains(f)

    def test_graded_is_dyadic_and_bounded(self):
        g = TimeGrid.graded(2**-16, 2**-7)
        steps = np.diff(g.knots)
        assert steps.min() == 2**-16 and steps.max() == 2**-7
        assert np.all(np.log2(steps) == np.round(np.log2(steps)))
