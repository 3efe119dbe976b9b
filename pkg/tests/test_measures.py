import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from arratia.drift import DriftSpec
from arratia.driver import TimeGrid
from arratia.measures import (AtomicMeasure, FlowConfig, LawDistanceEstimate, SharedDrivers,
                              estimate_law_distance, pushforward_lebesgue, pushforward_uniform,
                              wasserstein, wasserstein_equal_mass)


def assignment_oracle(x, y, p):
    """W_p between uniform measures on equally many points via an optimal assignment."""
    cost = np.abs(np.subtract.outer(x, y)) ** p
    r, c = linear_sum_assignment(cost)
    return cost[r, c].mean() ** (1 / p)


def random_measure(rng, k):
    return AtomicMeasure.from_points(rng.normal(size=k))


class TestAtomicMeasure:
    def test_validation(self):
        with pytest.raises(ValueError):
            AtomicMeasure([0.0, 0.0], [0.5, 0.5])
        with pytest.raises(ValueError):
            AtomicMeasure([0.0, 1.0], [0.5, 0.6])
        with pytest.raises(ValueError):
            AtomicMeasure([0.0, 1.0], [1.0, 0.0])

    def test_round_trips(self):
        mu = AtomicMeasure([-1.0, 0.25, 3.0], [0.2, 0.3, 0.5])
        assert AtomicMeasure.from_csv(mu.to_csv()) == mu
        assert AtomicMeasure.from_json(mu.to_json()) == mu
        assert mu.to_csv().splitlines()[0] == "location,mass"


class TestPushforwards:
    def test_uniform(self):
        assert pushforward_uniform([2.0] * 5) == AtomicMeasure.dirac(2.0)
        mu = pushforward_uniform([1.0, 1.0, 3.0, 3.0], m=4)
        assert mu.masses.tolist() == [0.5, 0.5]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=1, max_size=20))
    def test_uniform_masses_sum_to_one(self, xs):
        assert abs(pushforward_uniform(np.array(xs, float)).masses.sum() - 1) <= 1e-12

    def test_lebesgue_cells(self):
        mu = pushforward_lebesgue([0.0, 0.3, 1.0], [0, 1], [-1.0, 2.0])
        assert np.allclose(mu.masses, [0.3, 0.7])
        one = pushforward_lebesgue([0.0, 0.3, 1.0], [0, 0], [5.0, 5.0])
        assert one == AtomicMeasure.dirac(5.0)

    def test_lebesgue_points_split_at_midpoints(self):
        mu = pushforward_lebesgue([0.0, 0.5, 1.0], [0, 0, 2], [1.0, 1.0, 4.0])
        assert np.allclose(mu.masses, [0.75, 0.25])

    def test_inconsistent_cluster_map(self):
        with pytest.raises(RuntimeError):
            pushforward_lebesgue([0.0, 0.5, 1.0], [0, 0, 2], [1.0, 1.5, 4.0])


class TestWasserstein:
    def test_hand_values(self):
        mu = AtomicMeasure([0.0, 1.0], [0.5, 0.5])
        assert wasserstein(mu, mu, 2) == 0.0
        for p in (1, 2, 3.5, math.inf):
            assert wasserstein(AtomicMeasure.dirac(0), AtomicMeasure.dirac(1), p) == 1.0
        assert wasserstein(mu, AtomicMeasure.dirac(0.0), 2) == pytest.approx(0.70711, abs=5e-6)
        assert wasserstein(mu, AtomicMeasure.dirac(0.0), 3) == pytest.approx(0.5 ** (1 / 3))

    def test_brute_force_assignment(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            k = rng.integers(1, 7)
            x, y = rng.normal(size=k), rng.normal(size=k)
            p = rng.choice([1.0, 2.0, 3.0])
            got = wasserstein(pushforward_uniform(x), pushforward_uniform(y), p)
            worst = max(worst, abs(got - assignment_oracle(x, y, p)))
        assert worst < 1e-10

    def test_metric_axioms(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b, c = (random_measure(rng, rng.integers(1, 6)) for _ in range(3))
            ab, ba = wasserstein(a, b), wasserstein(b, a)
            assert ab >= 0 and abs(ab - ba) < 1e-10
            assert ab <= wasserstein(a, c) + wasserstein(c, b) + 1e-10
            assert wasserstein(a, a) < 1e-10

    def test_equal_mass_rows_match_general(self):
        rng = np.random.default_rng(2)
        X, Y = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        rows = wasserstein_equal_mass(X, Y, 2)
        for r in range(5):
            assert rows[r] == pytest.approx(
                wasserstein(pushforward_uniform(X[r]), pushforward_uniform(Y[r]), 2), abs=1e-12)

    def test_rejects_small_p(self):
        with pytest.raises(ValueError):
            wasserstein(AtomicMeasure.dirac(0), AtomicMeasure.dirac(1), 0.5)


class TestLawDistance:
    def test_identical_configs_give_zero(self):
        cfg = FlowConfig((0.0, 0.3, 0.6), TimeGrid.uniform(16), CLAMPED_DRIFT)
        est = estimate_law_distance(cfg, cfg, SharedDrivers(1), p=2, replicas=20)
        assert est.point_estimate == 0.0 and est.std_error == 0.0

    def test_zero_drift_split_is_the_same_flow(self):
        a = FlowConfig((0.4,), TimeGrid.uniform(8), substeps=4)
        b = FlowConfig((0.4,), TimeGrid.uniform(8), substeps=4, split=True)
        assert estimate_law_distance(a, b, SharedDrivers(0), 1, 20).point_estimate == 0.0

    def test_single_point_constant_drift_rate(self):
        # at t = 1365/4096 the split path leads by c * (distance to the next cell end),
        # which is delta/3 or 2 delta/3 for dyadic cells: slope near 1
        t, c = 1365 / 4096, DriftSpec.constant(1.0)
        fine = TimeGrid.uniform(4096)
        true = FlowConfig((0.0,), fine, c, t=t)
        ns = [4, 8, 16, 32, 64]
        est = [estimate_law_distance(true, FlowConfig((0.0,), TimeGrid.uniform(n), c, split=True,
                                                      substeps=4096 // n, t=t),
                                     SharedDrivers(0), 1, 4).point_estimate for n in ns]
        slope = np.polyfit(np.log(1 / np.array(ns)), np.log(est), 1)[0]
        assert slope >= 0.4

    def test_estimate_validation(self):
        with pytest.raises(ValueError):
            LawDistanceEstimate(0.1, -1.0, 10, 2.0)
        e = LawDistanceEstimate.from_samples([0.1, 0.3], 2.0)
        assert e.point_estimate == pytest.approx(0.2) and e.replicas == 2

    def test_lebesgue_measure_config(self):
        U = tuple(np.linspace(0, 1, 9))
        cfg = FlowConfig(U, TimeGrid.uniform(32), measure="lebesgue")
        ens = cfg.ensemble(3, 20)
        for r in range(20):
            mu = cfg.measure_of(ens, r)
            assert len(mu) == ens.cluster_count()[r]
            assert abs(mu.masses.sum() - 1.0) < 1e-12


CLAMPED_DRIFT = DriftSpec.affine(-2.0, 1.0, -1.0, 1.0)
