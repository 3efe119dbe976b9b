"""Atomic measures carried by flow images and exact 1-D transport distances."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .drift import DriftSpec
from .driver import TimeGrid
from .flow import Ensemble, simulate
from .splitting import SplitScheme, simulate_split

_MASS_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Probability measure ``sum_i masses[i] * delta(atoms[i])``."""

    atoms: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=np.float64).ravel()
        m = np.asarray(self.masses, dtype=np.float64).ravel()
        if a.size == 0 or a.size != m.size:
            raise ValueError("need matching, non-empty atoms and masses")
        if np.any(np.diff(a) <= 0) or not np.all(np.isfinite(a)):
            raise ValueError("atoms must be finite and strictly ascending")
        if np.any(m <= 0):
            raise ValueError("masses must be positive")
        if abs(m.sum() - 1.0) > _MASS_TOL:
            raise ValueError(f"masses sum to {m.sum()!r}, not 1")
        a.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "masses", m)

    @classmethod
    def from_points(cls, points, weights=None) -> "AtomicMeasure":
        """Merge coinciding points, summing their weights (equal weights by default)."""
        x = np.asarray(points, dtype=np.float64).ravel()
        if x.size == 0:
            raise ValueError("empty point set")
        w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, float)
        atoms, inv = np.unique(x, return_inverse=True)
        masses = np.bincount(inv, weights=w, minlength=atoms.size)
        return cls(atoms, masses / masses.sum())

    @classmethod
    def dirac(cls, y: float) -> "AtomicMeasure":
        return cls([y], [1.0])

    def __len__(self):
        return self.atoms.size

    def __eq__(self, other):
        return (isinstance(other, AtomicMeasure) and np.array_equal(self.atoms, other.atoms)
                and np.array_equal(self.masses, other.masses))

    def cdf_levels(self) -> np.ndarray:
        c = np.cumsum(self.masses)
        c[-1] = 1.0
        return c

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["location", "mass"])
        for a, m in zip(self.atoms, self.masses):
            wr.writerow([repr(float(a)), repr(float(m))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AtomicMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["location", "mass"]:
            raise ValueError("expected header 'location,mass'")
        body = np.array([[float(v) for v in r] for r in rows[1:] if r])
        return cls(body[:, 0], body[:, 1])

    def to_json(self) -> str:
        return json.dumps([[float(a), float(m)] for a, m in zip(self.atoms, self.masses)])

    @classmethod
    def from_json(cls, text: str) -> "AtomicMeasure":
        pairs = np.array(json.loads(text), dtype=float)
        return cls(pairs[:, 0], pairs[:, 1])


def pushforward_uniform(positions, m: Optional[int] = None) -> AtomicMeasure:
    """``m^{-1} sum_j delta(positions[j])``: an atom per distinct position."""
    x = np.asarray(positions, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("no positions")
    if m is not None and m != x.size:
        raise ValueError(f"expected {m} positions, got {x.size}")
    return AtomicMeasure.from_points(x)


def pushforward_lebesgue(start_grid, cluster_map, positions) -> AtomicMeasure:
    """Image of Lebesgue measure on [0, 1] under a flow known on a start grid.

    With one position per grid point, point ``u_i`` carries the part of
    [0, 1] closer to it than to its neighbours, so two adjacent clusters
    split their straddling cell at its midpoint.  With one position per
    cell (``len(positions) == len(start_grid) - 1``) each cell carries its
    own length.  ``cluster_map[i]`` names the cluster of entry ``i``;
    entries of one cluster must share a position.
    """
    u = np.asarray(start_grid, dtype=np.float64)
    x = np.asarray(positions, dtype=np.float64)
    roots = np.asarray(cluster_map)
    if u.ndim != 1 or u.size < 2 or np.any(np.diff(u) <= 0) or u[0] != 0.0 or u[-1] != 1.0:
        raise ValueError("start grid must ascend from 0 to 1")
    if x.size == u.size:
        mids = 0.5 * (u[1:] + u[:-1])
        edges = np.concatenate([[0.0], mids, [1.0]])
    elif x.size == u.size - 1:
        edges = u
    else:
        raise ValueError("need one position per grid point or per grid cell")
    if roots.shape != x.shape:
        raise ValueError("cluster map and positions differ in length")
    lengths = np.diff(edges)
    keys, inv = np.unique(roots, return_inverse=True)
    first = np.zeros(keys.size, dtype=np.intp)
    first[inv[::-1]] = np.arange(x.size)[::-1]
    if np.any(x != x[first][inv]):
        raise RuntimeError("cluster map inconsistent with positions")
    return AtomicMeasure.from_points(x, lengths)


def _check_p(p: float):
    if not p >= 1:
        raise ValueError(f"need p >= 1, got {p}")


def wasserstein(mu: AtomicMeasure, nu: AtomicMeasure, p: float = 2.0) -> float:
    """Exact ``W_p`` in 1-D by integrating the quantile gap over merged breakpoints."""
    _check_p(p)
    F, G = mu.cdf_levels(), nu.cdf_levels()
    q = np.union1d(F, G)
    dq = np.diff(np.concatenate([[0.0], q]))
    keep = dq > 0
    q, dq = q[keep], dq[keep]
    mid = q - 0.5 * dq
    i = np.minimum(np.searchsorted(F, mid), F.size - 1)
    j = np.minimum(np.searchsorted(G, mid), G.size - 1)
    gap = np.abs(mu.atoms[i] - nu.atoms[j])
    if math.isinf(p):
        return float(gap.max())
    return float(np.dot(dq, gap**p) ** (1.0 / p))


def wasserstein_equal_mass(X, Y, p: float = 2.0) -> np.ndarray:
    """Row-wise ``W_p`` between uniform empirical measures of equal size.

    For ``m`` equally weighted points on each side the quantile coupling
    matches sorted samples, so ``W_p^p = mean |sort(X) - sort(Y)|^p``.
    """
    _check_p(p)
    X = np.sort(np.atleast_2d(X), axis=1)
    Y = np.sort(np.atleast_2d(Y), axis=1)
    if X.shape != Y.shape:
        raise ValueError("shape mismatch")
    return np.mean(np.abs(X - Y) ** p, axis=1) ** (1.0 / p)


@dataclass(frozen=True)
class LawDistanceEstimate:
    """Monte Carlo mean of ``W_p`` over a coupling: an upper bound on ``W_{1,p}``."""

    point_estimate: float
    std_error: float
    replicas: int
    p: float
    failed: int = 0

    def __post_init__(self):
        if self.std_error < 0 or self.replicas < 2 or self.p < 1:
            raise ValueError("invalid law-distance estimate")

    @classmethod
    def from_samples(cls, samples, p: float, failed: int = 0) -> "LawDistanceEstimate":
        s = np.asarray(samples, dtype=float)
        if s.size < 2:
            raise ValueError("need at least two successful replicas")
        return cls(float(s.mean()), float(s.std(ddof=1) / math.sqrt(s.size)), int(s.size),
                   float(p), failed)


@dataclass(frozen=True)
class FlowConfig:
    """One way of producing ``mu_t`` from keyed drivers.

    ``split=False`` runs the coalescing SDE flow with Euler drift on
    ``grid.refine(substeps)``; ``split=True`` runs the fractional-step scheme on
    ``grid`` with ``substeps`` web steps per cell.  ``measure`` selects the
    uniform pushforward of the start points or the Lebesgue pushforward.
    ``t`` is the observation time and must be a knot of the step grid.
    """

    start_points: tuple
    grid: TimeGrid = field(default_factory=lambda: TimeGrid.uniform(64))
    drift: DriftSpec = DriftSpec()
    split: bool = False
    substeps: int = 1
    ode_substeps: int = 8
    bridge: bool = True
    measure: str = "uniform"
    t: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "start_points", tuple(float(u) for u in self.start_points))
        if self.measure not in ("uniform", "lebesgue"):
            raise ValueError(f"unknown measure {self.measure!r}")

    def ensemble(self, seed: int, replicas) -> Ensemble:
        if self.split:
            scheme = SplitScheme(self.grid, self.drift, self.ode_substeps, self.substeps)
            return simulate_split(self.start_points, scheme, seed=seed, replicas=replicas,
                                  bridge=self.bridge, record_events=False, horizon=self.t)
        return simulate(self.start_points, self.grid, seed=seed, replicas=replicas,
                        drift=self.drift, substeps=self.substeps, bridge=self.bridge,
                        record_events=False, horizon=self.t)

    def measure_of(self, ens: Ensemble, r: int) -> AtomicMeasure:
        if self.measure == "uniform":
            return pushforward_uniform(ens.positions[r])
        return pushforward_lebesgue(self.start_points, ens.roots[r], ens.positions[r])


@dataclass(frozen=True)
class SharedDrivers:
    """Coupling plan: replica ``r`` of both configs uses drivers ``(seed, r, i)``."""

    seed: int


def estimate_law_distance(config_a: FlowConfig, config_b: FlowConfig, coupling: SharedDrivers,
                          p: float = 2.0, replicas: int = 100) -> LawDistanceEstimate:
    """Mean and standard error of ``W_p(mu_a, mu_b)`` over the shared-driver coupling.

    Replicas whose measures cannot be formed (non-finite positions) are
    skipped and counted in ``failed``.
    """
    _check_p(p)
    if replicas < 2:
        raise ValueError("need replicas >= 2")
    ea = config_a.ensemble(coupling.seed, replicas)
    eb = config_b.ensemble(coupling.seed, replicas)
    vals, failed = [], 0
    for r in range(replicas):
        try:
            vals.append(wasserstein(config_a.measure_of(ea, r), config_b.measure_of(eb, r), p))
        except (ValueError, RuntimeError):
            failed += 1
    return LawDistanceEstimate.from_samples(vals, p, failed)
