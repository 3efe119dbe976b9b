"""n-point motion of the Arratia flow: coalescing Brownian particles.

Two entry points share one merge rule:

* :class:`ParticleSystem` with :func:`step` / :func:`run` drives a single
  system from explicit :class:`~arratia.driver.PathDriver` objects;
* :func:`simulate` runs many replicas at once, vectorized over replicas,
  drawing the same keyed driver values (so replica ``r`` of ``simulate`` is
  bit-identical to a :class:`ParticleSystem` driven by
  ``PathDriver(seed, i, replica=r)``).

Merge rule after every step: clusters are scanned left to right; a cluster
merges into the nearest surviving cluster on its left when their order is
violated (or equal) at the step end, or, with the bridge correction on,
with probability ``exp(-a b / dt)`` where ``a`` and ``b`` are the start and
end gaps (the crossing probability of the difference bridge, variance 2).
The lower start index survives and keeps its own driver.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erfc

from .drift import DriftSpec
from . import _kernels
from .driver import (_GAMMA, STREAM_BRIDGE, PathDriver, TimeGrid, _as_u64, _mix64, _time_codes,
                     knot_major_values)
from .schemes import CoalescenceScheme

ZERO = DriftSpec.zero()

# rows * particles per chunk, and the element budget of one driver block
_CHUNK_CELLS = 1 << 21
_BLOCK_CELLS = 1 << 24

# crossing probabilities below exp(-40) are smaller than every hashed uniform
# (>= 2**-54), so skipping those tests never changes an outcome
_EXPO_CUT = 40.0


def coalescence_prob_oracle(d: float, t: float) -> float:
    """P(two free unit-diffusion particles at distance ``d`` meet by ``t``).

    Reflection principle for the difference process (variance ``2t``):
    ``2 (1 - Phi(d / sqrt(2 t))) = erfc(d / (2 sqrt t))``.
    """
    if d <= 0 or t <= 0:
        raise ValueError("need d > 0 and t > 0")
    return float(erfc(d / (2.0 * math.sqrt(t))))


def _check_start(points) -> np.ndarray:
    u = np.asarray(points, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise ValueError("start points must be a non-empty 1-d sequence")
    if np.any(np.diff(u) <= 0):
        raise ValueError("start points must be strictly ascending")
    return u


@dataclass
class _State:
    """Cluster arrays of shape (R, C); column c holds the cluster whose survivor is rep[:, c]."""

    base: np.ndarray  # position minus the survivor's driver value
    w: np.ndarray
    rep: np.ndarray
    alive: np.ndarray
    root: np.ndarray  # (R, n): surviving start index of each particle's cluster
    ev_j: np.ndarray  # (R, n - 1) merge indices, 0 = unused
    ev_t: np.ndarray
    n_ev: np.ndarray
    numerical: np.ndarray

    @classmethod
    def fresh(cls, u: np.ndarray, rows: int) -> "_State":
        n = u.size
        cols = np.broadcast_to(np.arange(n), (rows, n))
        return cls(
            base=np.tile(u, (rows, 1)),
            w=np.zeros((rows, n)),
            rep=cols.copy(),
            alive=np.ones((rows, n), dtype=bool),
            root=cols.copy(),
            ev_j=np.zeros((rows, max(n - 1, 0)), dtype=np.int32),
            ev_t=np.full((rows, max(n - 1, 0)), np.nan),
            n_ev=np.zeros(rows, dtype=np.int64),
            numerical=np.zeros(rows, dtype=bool),
        )

    @property
    def x(self) -> np.ndarray:
        return self.base + self.w

    def compact(self) -> None:
        # pack alive columns to the left (order kept) and drop all-dead tail
        order = np.argsort(~self.alive, axis=1, kind="stable")
        width = int(self.alive.sum(axis=1).max())
        order = order[:, :width]
        for name in ("base", "w", "rep", "alive"):
            setattr(self, name, np.take_along_axis(getattr(self, name), order, axis=1))

    def particle_positions(self) -> np.ndarray:
        rows, cols = np.nonzero(self.alive)
        by_rep = np.zeros(self.root.shape)
        by_rep[rows, self.rep[rows, cols]] = self.x[rows, cols]
        return np.take_along_axis(by_rep, self.root, axis=1)


def _merge_scan(xs, xe, alive, rep, dt, t_end, uniform: Optional[Callable]):
    """Left-to-right coalescence pass.  Returns ``(merged, into)`` column maps.

    Column 0 always holds start index 0, which is never absorbed.
    """
    R, C = xe.shape
    merged = np.zeros((R, C), dtype=bool)
    into = np.full((R, C), -1, dtype=np.intp)
    top = np.zeros(R, dtype=np.intp)
    ts = xs[:, 0].copy()
    te = xe[:, 0].copy()
    for c in range(1, C):
        live = alive[:, c]
        if not live.any():
            continue
        xc = xe[:, c]
        m = live & (xc <= te)
        if uniform is not None:
            idx = np.flatnonzero(live & ~m)
            if idx.size:
                expo = (xs[idx, c] - ts[idx]) * (xc[idx] - te[idx]) / dt
                near = expo < _EXPO_CUT
                idx, expo = idx[near], expo[near]
                if idx.size:
                    m[idx] = uniform(idx, rep[idx, c], t_end) < np.exp(-expo)
        merged[:, c] = m
        into[m, c] = top[m]
        keep = live & ~m
        top[keep] = c
        np.copyto(ts, xs[:, c], where=keep)
        np.copyto(te, xc, where=keep)
    return merged, into


def _apply_merges(st: _State, act, merged, into, xs, xe, t0, t1, record_events, numerical=False):
    """Fold merges found on rows ``act`` (local arrays) into the global state."""
    local = np.flatnonzero(merged.any(axis=1))
    if local.size == 0:
        return
    g = act[local]
    merged, into, xs, xe = merged[local], into[local], xs[local], xe[local]
    alive0 = st.alive[g]
    rep = st.rep[g]
    C = merged.shape[1]
    _kernels.relabel_roots(st.root, g, merged, into, rep)
    st.alive[g] = alive0 & ~merged
    if numerical:
        st.numerical[g] = True
    if not record_events:
        return
    # each merged column closes the gap to its predecessor among the step-start survivors;
    # events inside one step are ordered by the estimated crossing time of that gap
    rank = np.cumsum(alive0, axis=1)
    last = np.maximum.accumulate(np.where(alive0, np.arange(C), -1), axis=1)
    prev = np.empty_like(last)
    prev[:, 0] = -1
    prev[:, 1:] = last[:, :-1]
    r_idx, c_idx = np.nonzero(merged)
    p_idx = prev[r_idx, c_idx]
    gap = rank[r_idx, c_idx] - 1
    if numerical:
        tau = np.full(r_idx.size, t0)
    else:
        a = xs[r_idx, c_idx] - xs[r_idx, p_idx]
        b = np.abs(xe[r_idx, c_idx] - xe[r_idx, p_idx])
        tau = t0 + (t1 - t0) * a / (a + b)
    per_row = np.bincount(r_idx, minlength=merged.shape[0])
    single = per_row[r_idx] == 1
    rs = g[r_idx[single]]
    k = st.n_ev[rs]
    st.ev_j[rs, k] = gap[single]
    st.ev_t[rs, k] = tau[single]
    st.n_ev[rs] += 1
    for r in np.flatnonzero(per_row > 1):
        sel = np.flatnonzero(r_idx == r)
        gr = g[r]
        closed: list[int] = []
        for i in sorted(sel, key=lambda i: (tau[i], gap[i])):
            h = int(gap[i])
            k = st.n_ev[gr]
            st.ev_j[gr, k] = h - sum(1 for c in closed if c < h)
            st.ev_t[gr, k] = tau[i]
            st.n_ev[gr] += 1
            closed.append(h)


def _active_rows(st: _State) -> np.ndarray:
    return np.flatnonzero(st.alive[:, 1:].any(axis=1)) if st.alive.shape[1] > 1 else \
        np.zeros(0, dtype=np.intp)


@dataclass(frozen=True)
class _KeyedBridge:
    """Bridge uniforms hashed from ``(seed, replica id, particle, t_end)`` inside the kernel."""

    seed_key: np.uint64
    rid: np.ndarray

    @classmethod
    def of(cls, seed, rid) -> "_KeyedBridge":
        key = _mix64(_as_u64(seed) * _GAMMA + np.uint64(STREAM_BRIDGE + 1))[0]
        return cls(key, np.ascontiguousarray(rid, dtype=np.int64))


def _sub_uniform(uniform, act):
    if uniform is None:
        return None
    return lambda idx, parts, t: uniform(act[idx], parts, t)


def _scan(xs, xe, alive, rep, dt, t1, uniform, act):
    if isinstance(uniform, _KeyedBridge):
        code = _time_codes([t1])[0]
        return _kernels.merge_scan(xs, xe, alive, rep, uniform.rid[act], dt, uniform.seed_key,
                                   code, True, _EXPO_CUT)
    return _merge_scan(xs, xe, alive, rep, dt, t1, _sub_uniform(uniform, act))


def _advance(st: _State, t0, t1, w_new, drift: DriftSpec, uniform, record_events):
    """One Euler step of every surviving cluster followed by the merge pass."""
    dt = t1 - t0
    act = _active_rows(st)
    full = act.size == st.alive.shape[0]

    def rows(a):
        # np.take is much faster than a[act] for row gathers
        return a if full else np.take(a, act, axis=0)

    xs = rows(st.base) + rows(st.w)
    if drift.kind == "constant":
        st.base += drift.value * dt
    elif not drift.is_zero:
        st.base = st.base + drift(st.x) * dt
    st.w = w_new
    if act.size == 0:
        return
    xe = rows(st.base) + rows(st.w)
    merged, into = _scan(xs, xe, rows(st.alive), rows(st.rep), dt, t1, uniform, act)
    _apply_merges(st, act, merged, into, xs, xe, t0, t1, record_events)


def _apply_cell_map(st: _State, cell_map, t0, t1, record_events):
    x = st.x
    st.base = st.base + (cell_map(x, t0, t1) - x)
    act = _active_rows(st)
    if act.size == 0:
        return
    xe = st.base[act] + st.w[act]
    merged, into = _merge_scan(xe, xe, st.alive[act], st.rep[act], 1.0, t0, None)
    _apply_merges(st, act, merged, into, xe, xe, t0, t0, record_events, numerical=True)


# ---------------------------------------------------------------------------
# single system


@dataclass
class ParticleSystem:
    """Ordered coalescing particles started from ``start_points`` at time 0."""

    start_points: np.ndarray
    clock: float = 0.0
    event_log: list = field(default_factory=list)
    _st: _State = field(default=None, repr=False)

    def __post_init__(self):
        self.start_points = _check_start(self.start_points)
        if self._st is None:
            self._st = _State.fresh(self.start_points, 1)

    @property
    def n(self) -> int:
        return self.start_points.size

    @property
    def positions(self) -> np.ndarray:
        """Current ``X(u_i, clock)`` for every start point."""
        return self._st.particle_positions()[0]

    @property
    def representative(self) -> np.ndarray:
        """Merge map: start index of the surviving member of each particle's cluster."""
        return self._st.root[0].copy()

    @property
    def clusters(self) -> int:
        return int(self._st.alive.sum())

    @property
    def numerical_merge(self) -> bool:
        return bool(self._st.numerical[0])

    def scheme(self) -> CoalescenceScheme:
        return CoalescenceScheme(self.n, [j for _, j in self.event_log])

    def copy(self) -> "ParticleSystem":
        return copy.deepcopy(self)

    def _sync_log(self):
        st = self._st
        self.event_log = [(float(st.ev_t[0, i]), int(st.ev_j[0, i])) for i in range(st.n_ev[0])]


def _driver_uniform(drivers):
    return lambda idx, parts, t: np.array([drivers[p].uniform(t) for p in parts])


def step(system: ParticleSystem, dt: float, drivers: Sequence[PathDriver],
         drift: DriftSpec = ZERO, bridge: bool = True) -> ParticleSystem:
    """Advance a copy of ``system`` by ``dt``; ``drivers[i]`` moves particle ``i``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    t0 = system.clock
    t1 = t0 + dt
    if t1 > 1.0 + 1e-12:
        raise ValueError(f"clock overflow: {t0} + {dt} > 1")
    t1 = min(t1, 1.0)
    if len(drivers) != system.n:
        raise ValueError("need one driver per original particle")
    out = system.copy()
    st = out._st
    w_new = st.w.copy()
    for c in np.flatnonzero(st.alive[0]):
        w_new[0, c] = drivers[st.rep[0, c]].value(t1)
    _advance(st, t0, t1, w_new, drift, _driver_uniform(drivers) if bridge else None, True)
    out.clock = t1
    out._sync_log()
    return out


def run(system: ParticleSystem, grid: TimeGrid, substeps_per_cell: int,
        drivers: Sequence[PathDriver], drift: DriftSpec = ZERO, bridge: bool = True,
        cell_map: Optional[Callable] = None):
    """Run ``system`` over ``grid`` (each cell split into ``substeps_per_cell``).

    ``cell_map(x, t_j, t_{j+1})`` is applied to the surviving clusters at the
    start of every cell, as in :func:`simulate`.  Returns the terminal system
    and its coalescence scheme.
    """
    if substeps_per_cell < 1:
        raise ValueError("substeps_per_cell must be >= 1")
    if len(drivers) != system.n:
        raise ValueError("need one driver per original particle")
    knots = grid.refine(substeps_per_cell).knots
    start = np.searchsorted(knots, system.clock)
    if start >= knots.size or knots[start] != system.clock:
        raise ValueError("system clock is not a grid knot")
    cell_end = np.repeat(grid.knots[1:], substeps_per_cell)
    out = system.copy()
    st = out._st
    uniform = _driver_uniform(drivers) if bridge else None
    for s in range(start, knots.size - 1):
        t0, t1 = float(knots[s]), float(knots[s + 1])
        if cell_map is not None and s % substeps_per_cell == 0:
            _apply_cell_map(st, cell_map, t0, float(cell_end[s]), True)
        w_new = st.w.copy()
        for c in np.flatnonzero(st.alive[0]):
            w_new[0, c] = drivers[st.rep[0, c]].value(t1)
        _advance(st, t0, t1, w_new, drift, uniform, True)
    out.clock = 1.0
    out._sync_log()
    return out, out.scheme()


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class Ensemble:
    """Terminal state of many independent replicas of one n-point motion."""

    start_points: np.ndarray
    replicas: np.ndarray
    positions: np.ndarray  # (R, n) X(u_i, 1)
    roots: np.ndarray  # (R, n)
    merge_index: np.ndarray  # (R, n - 1), 0-padded
    merge_time: np.ndarray  # (R, n - 1), nan-padded
    numerical: np.ndarray  # (R,) a drift step forced a merge
    snapshots: dict = field(default_factory=dict)  # time -> (R, n) positions
    time: float = 1.0

    def __len__(self):
        return self.replicas.size

    @property
    def n(self) -> int:
        return self.start_points.size

    @property
    def n_merges(self) -> np.ndarray:
        return (self.merge_index > 0).sum(axis=1)

    def scheme(self, r: int) -> CoalescenceScheme:
        k = int((self.merge_index[r] > 0).sum())
        return CoalescenceScheme(self.n, self.merge_index[r, :k].tolist())

    def schemes(self) -> list:
        return [self.scheme(r) for r in range(len(self))]

    def scheme_keys(self) -> list:
        return [tuple(int(j) for j in row[row > 0]) for row in self.merge_index]

    def atoms(self, r: int) -> np.ndarray:
        return np.unique(self.positions[r])

    def cluster_count(self, subset=None) -> np.ndarray:
        roots = self.roots if subset is None else self.roots[:, subset]
        s = np.sort(roots, axis=1)
        return 1 + (np.diff(s, axis=1) != 0).sum(axis=1)

    def count_in(self, lo: float, hi: float, subset=None) -> np.ndarray:
        """Per replica, the number of distinct images of ``subset`` lying in ``[lo, hi]``."""
        roots = self.roots if subset is None else self.roots[:, subset]
        pos = self.positions if subset is None else self.positions[:, subset]
        # distinct clusters; a cluster is counted once, at its first member
        order = np.argsort(roots, axis=1, kind="stable")
        r_sorted = np.take_along_axis(roots, order, axis=1)
        p_sorted = np.take_along_axis(pos, order, axis=1)
        first = np.ones(r_sorted.shape, dtype=bool)
        first[:, 1:] = r_sorted[:, 1:] != r_sorted[:, :-1]
        inside = (p_sorted >= lo) & (p_sorted <= hi)
        return (first & inside).sum(axis=1)


def _chunk_rows(n: int) -> int:
    return max(1, _CHUNK_CELLS // max(n, 1))


def simulate(start_points, grid: TimeGrid, *, seed: int, replicas, drift: DriftSpec = ZERO,
             substeps: int = 1, bridge: bool = True, cell_map: Optional[Callable] = None,
             snapshot_times=(), record_events: bool = True, block: int = 64,
             chunk_rows: Optional[int] = None, horizon: float = 1.0) -> Ensemble:
    """Simulate independent replicas of the coalescing system on shared keyed drivers.

    ``replicas`` is a count or an explicit array of replica ids; replica ``r``
    uses drivers ``(seed, r, i)``, so growing the count only appends replicas.
    ``cell_map(x, t_j, t_{j+1})``, if given, is applied to every cluster at the
    start of each grid cell before the Brownian motion over that cell (the
    drift half of a splitting scheme).  ``horizon`` stops the run early at a
    step knot; terminal positions and schemes then refer to that time.
    """
    u = _check_start(start_points)
    rid = np.arange(replicas) if np.isscalar(replicas) else np.asarray(replicas, dtype=np.int64)
    if rid.size < 1:
        raise ValueError("need at least one replica")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    knots = grid.refine(substeps).knots
    if horizon not in set(knots.tolist()) or horizon <= 0:
        raise ValueError(f"horizon {horizon} is not a positive step knot")
    knots = knots[knots <= horizon]
    cell_start = np.zeros(knots.size - 1, dtype=bool)
    cell_start[::substeps] = True
    cell_end = np.repeat(grid.knots[1:], substeps)[:knots.size - 1]
    snaps = sorted(float(t) for t in snapshot_times)
    for t in snaps:
        if t not in set(knots.tolist()):
            raise ValueError(f"snapshot time {t} is not a step knot")
    rows = chunk_rows or _chunk_rows(u.size)
    parts = [
        _simulate_chunk(u, knots, cell_start, cell_end, seed, rid[i:i + rows], drift, bridge,
                        cell_map, snaps, record_events, block)
        for i in range(0, rid.size, rows)
    ]
    snapshots = {t: np.concatenate([p[-1][t] for p in parts]) for t in snaps}
    cat = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    return Ensemble(u, rid, *cat, snapshots=snapshots, time=float(horizon))


def _simulate_chunk(u, knots, cell_start, cell_end, seed, rid, drift, bridge, cell_map, snaps,
                    record_events, block):
    st = _State.fresh(u, rid.size)
    snap_out = {}
    if snaps and snaps[0] == 0.0:
        snap_out[0.0] = st.particle_positions()

    uniform = _KeyedBridge.of(seed, rid)

    nsteps = knots.size - 1
    b0 = 0
    while b0 < nsteps:
        st.compact()
        width = max(1, min(block, _BLOCK_CELLS // st.alive.size - 1))
        b1 = min(b0 + width, nsteps)
        rows, cols = np.nonzero(st.alive)
        W = np.zeros((b1 - b0 + 1,) + st.alive.shape)
        W[:, rows, cols] = knot_major_values(seed, rid[rows], st.rep[rows, cols],
                                             knots[b0:b1 + 1])
        for s in range(b0, b1):
            t0, t1 = float(knots[s]), float(knots[s + 1])
            if cell_map is not None and cell_start[s]:
                _apply_cell_map(st, cell_map, t0, float(cell_end[s]), record_events)
            _advance(st, t0, t1, W[s - b0 + 1], drift, uniform if bridge else None,
                     record_events)
            if t1 in snaps:
                snap_out[t1] = st.particle_positions()
        b0 = b1
    return (st.particle_positions(), st.root, st.ev_j, st.ev_t, st.numerical, snap_out)
