"""Fractional-step (splitting) approximation of the Arratia flow with drift.

On each cell ``[t_j, t_{j+1})`` the drift ODE flow is applied over the whole
cell, then a driftless coalescing segment runs over the same cell.  The
single-path solvers compare one SDE path ``x = D(w, u)`` with its split
counterpart ``(y, z) = S(w, u_y, u_z)`` on the same Brownian driver.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .drift import DriftSpec
from .driver import PathDriver, TimeGrid, brownian_values
from .flow import Ensemble, ParticleSystem, run, simulate


@dataclass(frozen=True)
class SplitScheme:
    """Partition of [0, 1] plus the drift and the inner step counts."""

    grid: TimeGrid
    drift: DriftSpec = DriftSpec()
    ode_substeps: int = 8
    web_substeps: int = 1

    def __post_init__(self):
        if self.ode_substeps < 1 or self.web_substeps < 1:
            raise ValueError("substeps must be >= 1")

    @classmethod
    def uniform(cls, n: int, drift: DriftSpec = DriftSpec(), ode_substeps: int = 8,
                web_substeps: int = 1) -> "SplitScheme":
        """``t_j = j / n``, so ``delta_n = 1 / n``."""
        return cls(TimeGrid.uniform(n), drift, ode_substeps, web_substeps)

    @property
    def delta(self) -> float:
        return self.grid.mesh

    @property
    def fine_grid(self) -> TimeGrid:
        return self.grid.refine(self.web_substeps)

    def cell_map(self):
        """``x -> A_{t_j, t_{j+1}}(x)``, or ``None`` when the drift vanishes."""
        if self.drift.is_zero:
            return None
        drift, k = self.drift, self.ode_substeps
        return lambda x, s, t: ode_flow(x, s, t, drift, k)


def ode_flow(u, s: float, t: float, drift: DriftSpec, substeps: int = 8, method: str = "auto"):
    """``A_{s,t}(u)`` for ``dA = a(A) dt``; vectorized over ``u``.

    ``method="auto"`` uses the closed form for zero, constant and unclamped
    affine drift and classical RK4 with ``substeps`` steps otherwise;
    ``method="rk4"`` forces RK4.
    """
    if t < s:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if method not in ("auto", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    x = np.asarray(u, dtype=np.float64)
    h = t - s
    if h == 0 or drift.is_zero:
        return x.copy() if x.ndim else float(x)
    if method == "auto":
        if drift.kind == "constant":
            return x + drift.value * h
        if drift.kind == "affine" and not drift.clamped:
            alpha, beta = drift.slope, drift.intercept
            if alpha == 0.0:
                return x + beta * h
            return (x + beta / alpha) * np.exp(alpha * h) - beta / alpha
    dt = h / substeps
    for _ in range(substeps):
        k1 = drift(x)
        k2 = drift(x + 0.5 * dt * k1)
        k3 = drift(x + 0.5 * dt * k2)
        k4 = drift(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


@dataclass(frozen=True)
class Path:
    """Values of a path at increasing times in [0, 1] (value at 1 is the left limit)."""

    times: np.ndarray
    values: np.ndarray

    def at(self, t: float) -> float:
        i = np.searchsorted(self.times, t)
        if i == self.times.size or self.times[i] != t:
            raise KeyError(f"{t} is not a sample time of this path")
        return float(self.values[i])

    def sup_distance(self, other: "Path") -> float:
        if not np.array_equal(self.times, other.times):
            raise ValueError("paths sampled on different times")
        return float(np.max(np.abs(self.values - other.values)))


@dataclass(frozen=True)
class PairPath:
    """``(y, z)`` of the split single-path scheme on a common time set."""

    y_path: Path
    z_path: Path


def _drift_integral(x0, w, times, drift: DriftSpec):
    # Euler-Maruyama, written as x = u + A + w so additive drifts stay exact
    if drift.is_zero:
        return np.zeros_like(w)
    if drift.kind == "constant":
        return np.broadcast_to(drift.value * times, w.shape).copy()
    A = np.zeros_like(w)
    dts = np.diff(times)
    for k in range(times.size - 1):
        x = x0 + A[..., k] + w[..., k]
        A[..., k + 1] = A[..., k] + drift(x) * dts[k]
    return A


def solve_D(driver: PathDriver, u: float, drift: DriftSpec, fine_grid: TimeGrid) -> Path:
    """Euler-Maruyama path of ``dx = a(x) dt + dw`` from ``u`` on ``fine_grid``."""
    times = fine_grid.knots
    w = driver.values(times)
    return Path(times, u + _drift_integral(u, w, times, drift) + w)


def solve_D_batch(seed: int, replicas, u: float, drift: DriftSpec, fine_grid: TimeGrid,
                  particle: int = 0) -> np.ndarray:
    """:func:`solve_D` for many replicas at once; rows match ``PathDriver(seed, particle, r)``."""
    rid = np.arange(replicas) if np.isscalar(replicas) else np.asarray(replicas)
    times = fine_grid.knots
    w = brownian_values(seed, rid, particle, times)
    return u + _drift_integral(u, w, times, drift) + w


def _split_arrays(w, times, cells, u_y, u_z, scheme: SplitScheme):
    """y, z sampled at ``times``; ``cells[k]`` is the cell index of ``times[k]``."""
    knots = scheme.grid.knots
    n = scheme.grid.n
    lead = w.shape[:-1]
    # w frozen at every cell's left end
    w_left = w[..., np.searchsorted(times, knots[:-1])]
    I = np.zeros(lead + (n + 1,))  # drift integral through t_j
    zl = np.zeros(lead + (n,))
    for j in range(n):
        zl[..., j] = u_z + I[..., j] + w_left[..., j]
        end = ode_flow(zl[..., j], knots[j], knots[j + 1], scheme.drift, scheme.ode_substeps)
        I[..., j + 1] = I[..., j] + (end - zl[..., j])
    y = u_y + I[..., cells + 1] + w
    z = np.empty_like(w)
    for k, (t, j) in enumerate(zip(times, cells)):
        z[..., k] = ode_flow(zl[..., j], knots[j], t, scheme.drift, scheme.ode_substeps)
    return y, z


def _sample_times(scheme: SplitScheme):
    times = scheme.fine_grid.knots
    # t = 1 belongs to the last cell (left limit)
    cells = np.minimum(np.searchsorted(scheme.grid.knots, times, side="right") - 1,
                       scheme.grid.n - 1)
    return times, cells


def solve_S(driver: PathDriver, u_y: float, u_z: float, scheme: SplitScheme) -> PairPath:
    """Split pair ``(y, z)`` sampled on ``scheme.fine_grid``.

    On cell ``j``: ``z`` follows the ODE from ``u_z + I_j + w(t_j)`` and
    ``y(t) = u_y + I_{j+1} + w(t)``, where ``I_j`` is the drift integral
    of ``z`` over ``[0, t_j]``.
    """
    times, cells = _sample_times(scheme)
    w = driver.values(times)
    y, z = _split_arrays(w, times, cells, u_y, u_z, scheme)
    return PairPath(Path(times, y), Path(times, z))


def solve_S_batch(seed: int, replicas, u_y: float, u_z: float, scheme: SplitScheme,
                  particle: int = 0):
    """:func:`solve_S` for many replicas; returns ``(times, y, z)`` with rows per replica."""
    rid = np.arange(replicas) if np.isscalar(replicas) else np.asarray(replicas)
    times, cells = _sample_times(scheme)
    w = brownian_values(seed, rid, particle, times)
    y, z = _split_arrays(w, times, cells, u_y, u_z, scheme)
    return times, y, z


def run_split_flow(start_points, scheme: SplitScheme, drivers: Sequence[PathDriver],
                   bridge: bool = True):
    """Split flow ``Phi^(n)_1`` at the start points; returns ``(positions, J)``.

    ODE step over each whole cell, then a coalescing driftless segment with
    ``scheme.web_substeps`` steps.  Clusters whose order the ODE step breaks are
    merged at once and flagged as numerical merges on the returned system.
    """
    system = ParticleSystem(start_points)
    out, J = run(system, scheme.grid, scheme.web_substeps, drivers, bridge=bridge,
                 cell_map=scheme.cell_map())
    return out.positions, J


def simulate_split(start_points, scheme: SplitScheme, *, seed: int, replicas,
                   bridge: bool = True, **kw) -> Ensemble:
    """Vectorized :func:`run_split_flow` over replicas (same keyed drivers)."""
    return simulate(start_points, scheme.grid, seed=seed, replicas=replicas,
                    substeps=scheme.web_substeps, bridge=bridge, cell_map=scheme.cell_map(), **kw)

