"""Densities of the point process of flow images: analytic kernels and MC estimators.

Analytic side: the heat kernel, the Karlin-McGregor determinant for
particles killed on collision, and the density of the merged location of
two coalescing particles (first hitting of the diagonal, then free motion).
Monte Carlo side: histogram estimators of the k-point densities, optionally
restricted to one coalescence scheme, and the refinement gap between nested
start grids simulated on one flow.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from .driver import TimeGrid
from .flow import Ensemble, simulate
from .schemes import CoalescenceScheme

_SQRT2PI = math.sqrt(2.0 * math.pi)
Z95 = 1.959963984540054


def gauss_kernel(a, t: float):
    """``g_t(a) = exp(-a^2 / 2t) / sqrt(2 pi t)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    a = np.asarray(a, dtype=np.float64)
    out = np.exp(-a * a / (2.0 * t)) / (_SQRT2PI * math.sqrt(t))
    return float(out) if out.ndim == 0 else out


def _ordered(v, name):
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if v.ndim != 1:
        raise ValueError(f"{name} must be a point of R^m")
    if np.any(np.diff(v) <= 0):
        raise ValueError(f"{name} must be strictly ordered (a point of the open chamber)")
    return v


def km_determinant(x, y, t: float) -> float:
    """``det || g_t(x_i - y_j) ||`` with no ordering check.

    Sizes up to 2 use the explicit expansion, so swapping two ``y`` entries
    negates the value exactly and equal entries give exactly 0.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be points of the same R^m")
    G = gauss_kernel(x[:, None] - y[None, :], t)
    if x.size == 1:
        return float(G[0, 0])
    if x.size == 2:
        return float(G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0])
    return float(np.linalg.det(G))


def km_density(x, y, t: float) -> float:
    """Transition density of ``m`` independent Brownian motions killed on leaving the chamber."""
    return km_determinant(_ordered(x, "x"), _ordered(y, "y"), t)


@dataclass(frozen=True)
class KMKernel:
    """``y -> det || g_t(x_i - y_j) ||`` for fixed dimension and time."""

    m: int
    t: float

    def __post_init__(self):
        if self.m < 1 or not self.t > 0:
            raise ValueError("need m >= 1 and t > 0")

    def __call__(self, x, y) -> float:
        x, y = _ordered(x, "x"), _ordered(y, "y")
        if x.size != self.m:
            raise ValueError(f"expected points of R^{self.m}")
        return km_determinant(x, y, self.t)


def pair_density_free(x, y, t: float) -> float:
    """Density of two particles that have not met by ``t``: the 2x2 determinant."""
    x, y = _ordered(x, "x"), _ordered(y, "y")
    if x.size != 2:
        raise ValueError("pair density needs two coordinates")
    return km_determinant(x, y, t)


def pair_density_product_form(x, y, t: float) -> float:
    """Expanded form of the 2x2 determinant.

    ``exp(-|x - y|^2 / 2t) (1 - exp(-(x2 - x1)(y2 - y1) / t)) / (2 pi t)``
    """
    x, y = _ordered(x, "x"), _ordered(y, "y")
    d2 = float(np.sum((x - y) ** 2))
    cross = (x[1] - x[0]) * (y[1] - y[0]) / t
    return math.exp(-d2 / (2.0 * t)) * -math.expm1(-cross) / (2.0 * math.pi * t)


@dataclass(frozen=True)
class QuadSpec:
    """Tolerances for nested adaptive quadrature."""

    epsabs: float = 1e-10
    epsrel: float = 1e-7
    limit: int = 200
    width: float = 12.0  # inner window half-width in standard deviations


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach its tolerance."""

    def __init__(self, what: str, achieved: float, target: float):
        super().__init__(f"{what}: achieved error {achieved:.3g} exceeds target {target:.3g}")
        self.achieved = achieved
        self.target = target


def _quad(f, a, b, spec: QuadSpec, what: str, points=None):
    val, err, info, *rest = integrate.quad(f, a, b, epsabs=spec.epsabs, epsrel=spec.epsrel,
                                           limit=spec.limit, points=points, full_output=1)
    target = max(spec.epsabs, spec.epsrel * abs(val))
    if rest and err > 10 * target:
        raise QuadratureError(what, err, target)
    return val


def diagonal_normal_derivative(x, z: float, t: float) -> float:
    """Outward normal derivative of the 2x2 determinant in ``y`` at ``y = (z, z)``.

    With ``A = g_t(x1 - z) g_t(x2 - z)`` the ``y1`` and ``y2`` partials are
    ``-A (x2 - x1) / t`` and ``+A (x2 - x1) / t``; the outward normal of
    ``{y1 < y2}`` is ``(1, -1) / sqrt 2``.
    """
    x1, x2 = _ordered(x, "x")
    A = gauss_kernel(x1 - z, t) * gauss_kernel(x2 - z, t)
    return -math.sqrt(2.0) * A * (x2 - x1) / t


def pair_density_merged(x, y: float, t: float, quad_spec: QuadSpec = QuadSpec()) -> float:
    """Density at ``y`` of the common position of two particles that merged by ``t``.

    ``int_0^t dt1 int dz (-1/2) d_nu p(x; z, t1) g_{t - t1}(z - y)``, with the
    diagonal surface element ``sqrt 2 dz``.  Both integrals are adaptive; the
    inner window is centred on the product of the two Gaussian factors.
    """
    x1, x2 = (float(v) for v in _ordered(x, "x"))
    if not t > 0:
        raise ValueError("t must be positive")
    y = float(y)
    mid, d = 0.5 * (x1 + x2), x2 - x1
    exp, sqrt = math.exp, math.sqrt

    def inner(t1):
        if t1 <= 0.0 or t1 >= t:
            return 0.0
        s = t - t1
        prec = 2.0 / t1 + 1.0 / s
        c = (2.0 * mid / t1 + y / s) / prec
        sd = 1.0 / sqrt(prec)
        # -(1/2) d_nu p * sqrt(2) = g(x1 - z) g(x2 - z) d / t1, inlined for speed
        k = d / (t1 * 2.0 * math.pi * t1 * sqrt(2.0 * math.pi * s))

        def f(z):
            return k * exp(-((x1 - z) ** 2 + (x2 - z) ** 2) / (2.0 * t1) - (z - y) ** 2 / (2.0 * s))

        return _quad(f, c - quad_spec.width * sd, c + quad_spec.width * sd, quad_spec,
                     "inner diagonal integral")

    return _quad(inner, 0.0, t, quad_spec, "outer time integral")


def merged_mass(x, t: float, quad_spec: QuadSpec = QuadSpec(epsabs=1e-8, epsrel=1e-6)) -> float:
    """``int pair_density_merged(x, y, t) dy`` by a third adaptive quadrature."""
    x1, x2 = _ordered(x, "x")
    mid, half = 0.5 * (x1 + x2), 10.0 * math.sqrt(t)
    return _quad(lambda y: pair_density_merged((x1, x2), y, t, quad_spec),
                 mid - half, mid + half, quad_spec, "mass integral")


def chamber_mass(x, t: float, quad_spec: QuadSpec = QuadSpec(epsabs=1e-9, epsrel=1e-9)) -> float:
    """``int_{chamber} km_density(x, y, t) dy``: survival probability, for ``m`` in {1, 2, 3}."""
    x = _ordered(x, "x")
    lo, hi = x[0] - 10 * math.sqrt(t), x[-1] + 10 * math.sqrt(t)
    opts = dict(epsabs=quad_spec.epsabs, epsrel=quad_spec.epsrel)
    if x.size == 1:
        return integrate.quad(lambda a: gauss_kernel(x[0] - a, t), lo, hi, **opts)[0]
    if x.size == 2:
        return integrate.dblquad(lambda b, a: km_determinant(x, (a, b), t),
                                 lo, hi, lambda a: a, hi, **opts)[0]
    if x.size == 3:
        return integrate.tplquad(lambda c, b, a: km_determinant(x, (a, b, c), t),
                                 lo, hi, lambda a: a, hi, lambda a, b: b, hi, **opts)[0]
    raise ValueError("chamber_mass supports m <= 3")


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """Histogram density on a product of per-axis bins with 95% half-widths.

    ``counts`` holds raw hit totals (integers), so sums of estimates over a
    partition of the replicas can be compared exactly.
    """

    edges: tuple
    values: np.ndarray
    half_widths: np.ndarray
    k: int
    replicas: int
    counts: np.ndarray
    scheme_filter: Optional[CoalescenceScheme] = None
    min_hits: int = 20

    def __post_init__(self):
        edges = tuple(np.asarray(e, dtype=np.float64) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        shape = tuple(e.size - 1 for e in edges)
        if len(edges) != self.k or any(np.any(np.diff(e) <= 0) for e in edges):
            raise ValueError("need k ascending edge arrays")
        for name in ("values", "half_widths", "counts"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")

    @property
    def bin_edges(self) -> np.ndarray:
        return self.edges[0] if self.k == 1 else self.edges

    @property
    def std_errors(self) -> np.ndarray:
        return self.half_widths / Z95

    @property
    def low_confidence(self) -> np.ndarray:
        return self.counts < self.min_hits

    @property
    def bin_volumes(self) -> np.ndarray:
        vol = np.ones(())
        for e in self.edges:
            vol = np.multiply.outer(vol, np.diff(e))
        return vol

    def total_mass(self) -> float:
        return float(np.sum(self.values * self.bin_volumes))

    def _rows(self):
        for idx in itertools.product(*(range(e.size - 1) for e in self.edges)):
            bounds = []
            for axis, i in enumerate(idx):
                bounds += [self.edges[axis][i], self.edges[axis][i + 1]]
            yield bounds, self.values[idx], self.half_widths[idx]

    def header(self) -> list:
        if self.k == 1:
            return ["bin_left", "bin_right", "value", "half_width"]
        cols = []
        for i in range(1, self.k + 1):
            cols += [f"bin_left_{i}", f"bin_right_{i}"]
        return cols + ["value", "half_width"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.header())
        for bounds, v, h in self._rows():
            wr.writerow([repr(float(b)) for b in bounds] + [repr(float(v)), repr(float(h))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "replicas": self.replicas,
            "scheme_filter": None if self.scheme_filter is None else list(self.scheme_filter.indices),
            "n": None if self.scheme_filter is None else self.scheme_filter.n,
            "edges": [e.tolist() for e in self.edges],
            "values": self.values.tolist(),
            "half_widths": self.half_widths.tolist(),
            "counts": self.counts.tolist(),
            "min_hits": self.min_hits,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DensityEstimate":
        d = json.loads(text)
        J = None if d["scheme_filter"] is None else CoalescenceScheme(d["n"], d["scheme_filter"])
        return cls(tuple(d["edges"]), np.array(d["values"]), np.array(d["half_widths"]),
                   d["k"], d["replicas"], np.array(d["counts"]), J, d["min_hits"])

    def __eq__(self, other):
        return (isinstance(other, DensityEstimate) and self.to_dict() == other.to_dict())


def default_window(U, t: float, bins: int = 40, half_width: float = 3.0) -> np.ndarray:
    """Equal-width bins over ``[min U - c sqrt t, max U + c sqrt t]`` (total width >= 6 sqrt t)."""
    U = np.asarray(U, dtype=float)
    r = half_width * math.sqrt(t)
    return np.linspace(U.min() - r, U.max() + r, bins + 1)


def cluster_points(ens: Ensemble, r: int) -> np.ndarray:
    """Distinct terminal positions of replica ``r`` in start order."""
    roots = ens.roots[r]
    first = np.unique(roots, return_index=True)[1]
    return ens.positions[r, np.sort(first)]


def histogram_density(ens: Ensemble, k: int, edges, J: Optional[CoalescenceScheme] = None,
                      mask=None) -> DensityEstimate:
    """k-point density estimate from an ensemble (ordered k-tuples of distinct atoms)."""
    n = ens.n
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in 1..{n}")
    if J is not None:
        if J.n != n:
            raise ValueError("scheme filter is for a different particle count")
        if k > J.blocks:
            raise ValueError(f"k={k} exceeds the {J.blocks} blocks of {J.indices}")
    R = len(ens)
    if k == 1 and np.ndim(edges[0]) == 0:
        edges = [edges]
    axes = tuple(np.asarray(e, dtype=float) for e in edges)
    if len(axes) != k:
        raise ValueError(f"need {k} edge arrays")
    shape = tuple(a.size - 1 for a in axes)
    nb = int(np.prod(shape))
    keep = np.ones(R, dtype=bool) if mask is None else np.asarray(mask, bool).copy()
    if J is not None:
        target = J.indices
        keys = ens.scheme_keys()
        keep &= np.array([kk == target for kk in keys])
    s1 = np.zeros(nb)
    s2 = np.zeros(nb)
    if k == 1:
        # one distinct atom per cluster: the survivor's own position
        alive = ens.roots == np.arange(n)
        rr, cc = np.nonzero(alive & keep[:, None])
        y = ens.positions[rr, cc]
        b = np.searchsorted(axes[0], y, side="right") - 1
        ok = (b >= 0) & (b < shape[0])
        flat = rr[ok].astype(np.int64) * nb + b[ok]
        per = np.bincount(flat, minlength=R * nb).reshape(R, nb)
        s1 = per.sum(axis=0).astype(float)
        s2 = (per.astype(float) ** 2).sum(axis=0)
    else:
        for r in np.flatnonzero(keep):
            pts = cluster_points(ens, r)
            if pts.size < k:
                continue
            tup = np.array(list(itertools.permutations(pts, k)))
            idx = [np.searchsorted(axes[i], tup[:, i], side="right") - 1 for i in range(k)]
            ok = np.all([(ix >= 0) & (ix < shape[i]) for i, ix in enumerate(idx)], axis=0)
            if not ok.any():
                continue
            flat = np.ravel_multi_index([ix[ok] for ix in idx], shape)
            c = np.bincount(flat, minlength=nb).astype(float)
            s1 += c
            s2 += c * c
    vol = np.ones(())
    for a in axes:
        vol = np.multiply.outer(vol, np.diff(a))
    vol = vol.ravel()
    mean = s1 / R
    var = np.maximum(s2 / R - mean**2, 0.0) * R / max(R - 1, 1)
    se = np.sqrt(var / R)
    return DensityEstimate(axes, (mean / vol).reshape(shape), (Z95 * se / vol).reshape(shape),
                           k, R, s1.reshape(shape).astype(np.int64), J)


def estimate_scheme_density(U, t: float, k: int, J: Optional[CoalescenceScheme] = None,
                            bins=40, replicas: int = 10_000, seed: int = 0,
                            grid: TimeGrid = TimeGrid.dyadic(10), bridge: bool = True,
                            ensemble: Optional[Ensemble] = None) -> DensityEstimate:
    """Histogram estimate of the scheme-resolved k-point density at time ``t``.

    ``bins`` is a bin count (default window of :func:`default_window`) or an
    explicit edge array (per-axis list for ``k >= 2``).  Replica ``r`` uses
    drivers ``(seed, r, i)``; pass ``ensemble`` to reuse a simulation.
    """
    U = np.asarray(U, dtype=float)
    if k < 1 or k > U.size:
        raise ValueError(f"k={k} larger than the particle count {U.size}")
    if replicas < 100:
        raise ValueError("need replicas >= 100")
    if ensemble is None:
        ensemble = simulate(U, grid, seed=seed, replicas=replicas, bridge=bridge, horizon=t)
    if np.isscalar(bins):
        edges = default_window(U, t, int(bins))
        edges = edges if k == 1 else [edges] * k
    else:
        edges = bins
    return histogram_density(ensemble, k, edges, J)


def refinement_counts(U_fine, subsets: Sequence, target_interval, t: float = 1.0,
                      replicas: int = 10_000, seed: int = 0,
                      grid: TimeGrid = TimeGrid.graded(2.0**-16, 2.0**-7),
                      bridge: bool = True, chunk: int = 1 << 15) -> np.ndarray:
    """Atom counts in ``target_interval`` for nested start sets read off one flow.

    ``subsets`` are index arrays into ``U_fine``.  Returns an integer array
    ``(replicas, len(subsets))``; replicas are simulated in chunks so memory
    stays bounded.
    """
    lo, hi = target_interval
    out = np.empty((replicas, len(subsets)), dtype=np.int64)
    for a in range(0, replicas, chunk):
        b = min(a + chunk, replicas)
        ens = simulate(U_fine, grid, seed=seed, replicas=np.arange(a, b), bridge=bridge,
                       record_events=False, horizon=t)
        for i, sub in enumerate(subsets):
            out[a:b, i] = ens.count_in(lo, hi, subset=sub)
    return out


def nested_indices(U_coarse, U_fine) -> np.ndarray:
    """Positions of the coarse points inside the fine grid; raises if not nested."""
    U_coarse = np.asarray(U_coarse, dtype=float)
    U_fine = np.asarray(U_fine, dtype=float)
    idx = np.searchsorted(U_fine, U_coarse)
    if np.any(idx >= U_fine.size) or np.any(U_fine[np.minimum(idx, U_fine.size - 1)] != U_coarse):
        raise ValueError("coarse start points are not a subset of the fine ones")
    return idx


def refinement_gap(U_coarse, U_fine, t: float, target_interval, replicas: int = 10_000,
                   seed: int = 0, grid: TimeGrid = TimeGrid.graded(2.0**-16, 2.0**-7),
                   bridge: bool = True):
    """``E[#fine atoms in A] - E[#coarse atoms in A]`` on one coupled flow.

    The coarse system is the sub-family of fine particles started from
    ``U_coarse``, so the per-replica difference is non-negative.  Returns
    ``(gap_estimate, std_error)``.
    """
    sub = nested_indices(U_coarse, U_fine)
    U_fine = np.asarray(U_fine, dtype=float)
    counts = refinement_counts(U_fine, [np.arange(U_fine.size), sub], target_interval, t,
                               replicas, seed, grid, bridge)
    d = (counts[:, 0] - counts[:, 1]).astype(float)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))


def expected_atoms_oracle(U, t: float) -> float:
    """``E |X_t(U)|`` for zero drift: ``1 + sum_i erf((u_{i+1} - u_i) / (2 sqrt t))``.

    Clusters of an ordered coalescing system are separated exactly at the
    adjacent pairs that have not met, and each pair meets like two free
    particles.
    """
    d = np.diff(np.asarray(U, dtype=float))
    return 1.0 + float(np.sum(np.vectorize(math.erf)(d / (2.0 * math.sqrt(t)))))
