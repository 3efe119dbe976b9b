import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from arratia.densities import (DensityEstimate, KMKernel, QuadratureError, QuadSpec, chamber_mass,
                               estimate_scheme_density, expected_atoms_oracle, gauss_kernel,
                               km_density, km_determinant, merged_mass, nested_indices,
                               pair_density_free, pair_density_merged, pair_density_product_form,
                               refinement_counts, refinement_gap)
from arratia.driver import TimeGrid
from arratia.flow import simulate
from arratia.schemes import CoalescenceScheme


def merged_oracle(x, y, t):
    """Common position after a merge, reduced to one time integral.

    The meeting time of two free particles at distance d has density
    (d / t1) g_{2 t1}(d); they meet at the midpoint plus a N(0, t1 / 2) shift
    and then diffuse together for t - t1.
    """
    x1, x2 = x
    d, mid = x2 - x1, 0.5 * (x1 + x2)

    def f(t1):
        if t1 <= 0:
            return 0.0
        v1, v2 = 2 * t1, t - t1 / 2
        return (d / t1) * math.exp(-d * d / (2 * v1)) / math.sqrt(2 * math.pi * v1) \
            * math.exp(-(y - mid) ** 2 / (2 * v2)) / math.sqrt(2 * math.pi * v2)

    return integrate.quad(f, 0, t, epsabs=1e-13, epsrel=1e-11, limit=200)[0]


class TestAnalytic:
    def test_gauss_kernel(self):
        assert gauss_kernel(0.0, 1.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)
        assert gauss_kernel(1.3, 0.7) == gauss_kernel(-1.3, 0.7)
        mass = integrate.quad(lambda a: gauss_kernel(a, 0.3), -np.inf, np.inf)[0]
        assert mass == pytest.approx(1.0, abs=1e-10)
        with pytest.raises(ValueError):
            gauss_kernel(0.0, 0.0)

    def test_km_one_dimension_is_gauss(self):
        assert km_density([0.25], [1.0], 0.5) == gauss_kernel(0.75, 0.5)

    def test_km_two_dimension_spot_value(self):
        # g_1(0)^2 - g_1(1)^2 = (1 - e^-1) / 2 pi
        assert abs(km_density([0, 1], [0, 1], 1.0) - (1 - math.exp(-1)) / (2 * math.pi)) < 1e-9
        assert abs(km_density([0, 1], [0, 1], 1.0) - 0.100605) < 5e-7

    def test_separated_points_factorise(self):
        t = 1.0
        x = np.array([0.0, 50 * math.sqrt(t)])
        y = x + np.array([0.3, -0.2])
        prod = gauss_kernel(0.3, t) * gauss_kernel(0.2, t)
        assert abs(km_density(x, y, t) - prod) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-2, 2), st.floats(0.01, 2), st.floats(-2, 2), st.floats(0.01, 2),
           st.floats(0.1, 3))
    def test_antisymmetry_and_diagonal(self, x1, dx, y1, dy, t):
        x, y = (x1, x1 + dx), (y1, y1 + dy)
        assert km_determinant(x, y[::-1], t) == -km_determinant(x, y, t)
        assert km_determinant(x, (y1, y1), t) == 0.0
        assert pair_density_free(x, y, t) == km_density(x, y, t)
        assert pair_density_product_form(x, y, t) == pytest.approx(km_density(x, y, t),
                                                                   rel=1e-9, abs=1e-15)

    def test_kernel_object_checks_dimension(self):
        K = KMKernel(2, 1.0)
        assert K([0, 1], [0, 1]) == km_density([0, 1], [0, 1], 1.0)
        with pytest.raises(ValueError):
            K([0, 1, 2], [0, 1, 2])
        with pytest.raises(ValueError):
            km_density([1, 0], [0, 1], 1.0)

    def test_chamber_mass_is_survival(self):
        # two free particles at distance d stay apart with probability erf(d / 2 sqrt t)
        got = chamber_mass([0.0, 0.5], 1.0)
        assert got == pytest.approx(math.erf(0.25), abs=1e-6)
        assert abs(got - 0.27633) < 1e-4
        assert chamber_mass([0.3], 2.0) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("y", [-1.5, -0.2, 0.25, 0.9, 2.0])
    def test_merged_density_matches_one_dimensional_oracle(self, y):
        x = (0.0, 0.5)
        assert pair_density_merged(x, y, 1.0) == pytest.approx(merged_oracle(x, y, 1.0),
                                                               rel=1e-6, abs=1e-10)

    def test_merged_density_mirror_symmetry(self):
        x = (0.0, 0.5)
        for s in (0.1, 0.7, 1.6):
            assert pair_density_merged(x, 0.25 + s, 1.0) == pytest.approx(
                pair_density_merged(x, 0.25 - s, 1.0), rel=1e-7)

    def test_merged_mass_complements_survival(self):
        m = merged_mass((0.0, 0.5), 1.0)
        assert abs(m - 0.72367) < 1e-3
        assert m + math.erf(0.25) == pytest.approx(1.0, abs=1e-5)

    def test_quadrature_failure_is_reported(self):
        with pytest.raises(QuadratureError) as exc:
            pair_density_merged((0.0, 0.5), 0.2, 1.0, QuadSpec(epsabs=1e-15, epsrel=1e-15,
                                                               limit=1))
        assert exc.value.achieved > exc.value.target


class TestDensityEstimate:
    def _one(self):
        e = np.array([0.0, 0.5, 1.0])
        return DensityEstimate((e,), np.array([0.4, 1.6]), np.array([0.1, 0.2]), 1, 50,
                               np.array([10, 40]))

    def test_csv_and_json(self):
        est = self._one()
        lines = est.to_csv().splitlines()
        assert lines[0] == "bin_left,bin_right,value,half_width"
        assert len(lines) == 3
        assert DensityEstimate.from_json(est.to_json()) == est
        assert est.total_mass() == pytest.approx(1.0)
        assert est.low_confidence.tolist() == [True, False]

    def test_two_point_columns(self):
        e = np.array([0.0, 1.0, 2.0])
        est = DensityEstimate((e, e), np.ones((2, 2)), np.zeros((2, 2)), 2, 10,
                              np.ones((2, 2), int), CoalescenceScheme(3, (1,)))
        lines = est.to_csv().splitlines()
        assert lines[0] == "bin_left_1,bin_right_1,bin_left_2,bin_right_2,value,half_width"
        assert len(lines) == 5
        assert DensityEstimate.from_json(est.to_json()) == est

    def test_shape_validation(self):
        e = np.array([0.0, 1.0])
        with pytest.raises(ValueError):
            DensityEstimate((e,), np.ones(2), np.ones(2), 1, 1, np.ones(2, int))


class TestMonteCarlo:
    def test_single_particle_is_gaussian(self):
        N = 100_000
        edges = np.linspace(-3, 3, 25)
        est = estimate_scheme_density([0.0], 1.0, 1, bins=edges, replicas=N,
                                      grid=TimeGrid.uniform(1))
        expected = N * np.diff(stats.norm.cdf(edges))
        stat = np.sum((est.counts - expected) ** 2 / expected)
        assert stats.chi2.sf(stat, edges.size - 2) > 1e-3

    def test_expected_atom_count(self):
        N = 20_000
        ens = simulate([0.0, 0.5], TimeGrid.dyadic(8), seed=4, replicas=N, record_events=False)
        c = ens.cluster_count()
        oracle = expected_atoms_oracle([0.0, 0.5], 1.0)
        assert oracle == pytest.approx(1.27633, abs=5e-6)
        assert abs(c.mean() - oracle) < 3 * c.std() / math.sqrt(N)

    def test_unmerged_pair_density_is_dominated(self):
        # with no merges the two-point density is the killed kernel itself
        x = (0.0, 0.5)
        edges = np.linspace(-2.5, 3.0, 12)
        est = estimate_scheme_density(x, 1.0, 2, CoalescenceScheme(2, ()), bins=[edges, edges],
                                      replicas=20_000, grid=TimeGrid.dyadic(8))
        nodes, weights = np.polynomial.legendre.leggauss(4)
        oracle = np.zeros(est.values.shape)
        for i in range(edges.size - 1):
            for j in range(edges.size - 1):
                a, b = edges[i], edges[i + 1]
                c, d = edges[j], edges[j + 1]
                ys = 0.5 * (a + b) + 0.5 * (b - a) * nodes
                zs = 0.5 * (c + d) + 0.5 * (d - c) * nodes
                oracle[i, j] = sum(wa * wb * abs(km_determinant(x, (ya, zb), 1.0))
                                   for ya, wa in zip(ys, weights) for zb, wb in zip(zs, weights)) / 4
        assert np.all(est.values <= oracle + 3 * est.std_errors + 1e-12)

    def test_refinement_gap(self):
        U = np.linspace(0, 1, 9)
        g = TimeGrid.graded(2**-12, 2**-6)
        gap, se = refinement_gap(U, U, 1.0, (-4, 5), replicas=300, grid=g)
        assert gap == 0.0 and se == 0.0
        counts = refinement_counts(U, [np.arange(9), np.arange(0, 9, 2), np.arange(0, 9, 4)],
                                   (-1, 2), replicas=300, grid=g, chunk=128)
        assert np.all(np.diff(counts, axis=1) <= 0)

    def test_nested_indices(self):
        assert nested_indices([0.0, 0.5], [0.0, 0.25, 0.5]).tolist() == [0, 2]
        with pytest.raises(ValueError):
            nested_indices([0.1], [0.0, 0.25, 0.5])
        with pytest.raises(ValueError):
            nested_indices([0.9], [0.0, 0.25, 0.5])
