"""Seedable Brownian drivers shared by every simulation in the package.

Randomness is counter based: each standard normal is a pure function of
``(seed, stream, replica, particle, node)`` where ``node`` is a dyadic time.
Paths are built by the Levy (Brownian bridge) construction on the dyadic
tree of [0, 1].  Every float in [0, 1] is a dyadic rational, so the value of
a path at any float time is canonical: it does not depend on which other
times were requested, in which order, or on how many replicas are generated
alongside it.  Refining a grid therefore never changes values that were
already produced, and couplings across schemes reduce to reusing keys.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

from ._kernels import keyed_uniforms

__all__ = [
    "TimeGrid",
    "PathDriver",
    "brownian_values",
    "step_uniforms",
    "hash_uniforms",
]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

STREAM_PATH = 0
STREAM_BRIDGE = 1


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; operates on uint64 arrays, wraps silently
    z = z ^ (z >> np.uint64(30))
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def _as_u64(x) -> np.ndarray:
    a = np.atleast_1d(np.asarray(x))
    if a.dtype == np.uint64:
        return a
    if a.dtype.kind == "i":
        return a.astype(np.int64).view(np.uint64)
    if a.dtype.kind in "uO":
        return np.array([int(v) & _MASK64 for v in a.ravel()], dtype=np.uint64).reshape(a.shape)
    raise TypeError(f"integer keys expected, got {a.dtype}")


def _absorb(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _mix64(h ^ _mix64(x + _GAMMA))


def _stream_keys(seed, stream: int, replica, particle) -> np.ndarray:
    h = _mix64(_as_u64(seed) * _GAMMA + np.uint64(stream + 1))
    h = _absorb(h, _as_u64(replica))
    return _absorb(h, _as_u64(particle))


def _time_codes(times) -> np.ndarray:
    bits = np.ascontiguousarray(np.asarray(times, dtype=np.float64)).view(np.uint64)
    return _mix64(bits + _GAMMA)


def _to_uniform(z: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted off zero: values lie strictly inside (0, 1)
    u = (z >> np.uint64(11)).astype(np.float64)
    u += 0.5
    u *= 2.0**-53
    return u


def hash_uniforms(seed, stream: int, replica, particle, times) -> np.ndarray:
    """Uniforms on (0, 1) keyed by ``(seed, stream, replica, particle, time)``.

    ``seed``, ``replica`` and ``particle`` broadcast to a row shape ``(M,)``;
    ``times`` gives the columns.  Returns shape ``(M, len(times))``.
    """
    keys = _stream_keys(seed, stream, replica, particle)
    codes = _time_codes(np.atleast_1d(times))
    return _to_uniform(_mix64(keys[:, None] ^ codes[None, :]))


def step_uniforms(seed, replica, particle, t_end: float) -> np.ndarray:
    """One uniform per (replica, particle) for the step ending at ``t_end``."""
    return hash_uniforms(seed, STREAM_BRIDGE, replica, particle, [t_end])[:, 0]


@dataclass(frozen=True)
class _LevyTable:
    times: np.ndarray
    codes: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    levels: tuple  # (level, start, stop) slices into the node arrays
    knot_index: np.ndarray


@lru_cache(maxsize=512)
def _levy_table(knots: tuple) -> _LevyTable:
    # node -> (level, left parent, right parent); 0 and 1 are the roots
    nodes: dict[float, tuple] = {0.0: (-1, None, None), 1.0: (0, None, None)}
    for t in knots:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t!r} outside [0, 1]")
        if t in nodes:
            continue
        lo, hi, level = 0.0, 1.0, 0
        while True:
            level += 1
            mid = 0.5 * (lo + hi)
            if mid not in nodes:
                nodes[mid] = (level, lo, hi)
            if mid == t:
                break
            if t < mid:
                hi = mid
            else:
                lo = mid
            if level > 1100:  # pragma: no cover - floats resolve by level 1074
                raise RuntimeError(f"could not resolve {t!r} on the dyadic tree")
    order = sorted(nodes, key=lambda s: (nodes[s][0], s))
    index = {s: i for i, s in enumerate(order)}
    lo_idx = np.array([index[nodes[s][1]] if nodes[s][1] is not None else -1 for s in order])
    hi_idx = np.array([index[nodes[s][2]] if nodes[s][2] is not None else -1 for s in order])
    levels = []
    lv = [nodes[s][0] for s in order]
    start = 2
    while start < len(order):
        stop = start
        while stop < len(order) and lv[stop] == lv[start]:
            stop += 1
        levels.append((lv[start], start, stop))
        start = stop
    times = np.array(order, dtype=np.float64)
    return _LevyTable(
        times=times,
        codes=_time_codes(times),
        lo=lo_idx,
        hi=hi_idx,
        levels=tuple(levels),
        knot_index=np.array([index[t] for t in knots], dtype=np.intp),
    )


def brownian_values(seed, replica, particle, knots) -> np.ndarray:
    """Values ``w(t)`` of the keyed Brownian paths at the requested times.

    Rows are the broadcast of ``seed``, ``replica`` and ``particle``; columns
    follow ``knots``.  ``w(0) = 0`` exactly.
    """
    return np.ascontiguousarray(knot_major_values(seed, replica, particle, knots).T)


def knot_major_values(seed, replica, particle, knots) -> np.ndarray:
    """Same values as :func:`brownian_values`, laid out ``(len(knots), M)``."""
    knots = tuple(float(t) for t in np.atleast_1d(knots))
    table = _levy_table(knots)
    keys = _stream_keys(seed, STREAM_PATH, replica, particle)
    m = keys.shape[0]
    # node-major storage keeps parent gathers contiguous
    vals = np.empty((table.times.size, m))
    vals[0] = 0.0
    vals[1] = ndtri(keyed_uniforms(keys, table.codes[1:2])[0])
    for level, a, b in table.levels:
        z = ndtri(keyed_uniforms(keys, table.codes[a:b]), out=vals[a:b])
        sd = np.sqrt(np.ldexp(1.0, -(level + 1)))
        mid = np.take(vals, table.lo[a:b], axis=0)
        mid += np.take(vals, table.hi[a:b], axis=0)
        mid *= 0.5
        z *= sd
        mid += z
        vals[a:b] = mid
    return np.take(vals, table.knot_index, axis=0)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Partition ``0 = t_0 < ... < t_n = 1`` of the unit time interval."""

    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("a grid needs at least the knots 0 and 1")
        if k[0] != 0.0 or k[-1] != 1.0:
            raise ValueError("grid must start at 0 and end at 1")
        if np.any(np.diff(k) <= 0):
            raise ValueError("grid knots must be strictly ascending")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @classmethod
    def uniform(cls, n: int) -> "TimeGrid":
        if n < 1:
            raise ValueError("n must be positive")
        return cls(np.arange(n + 1) / n)

    @classmethod
    def dyadic(cls, level: int) -> "TimeGrid":
        return cls.uniform(2**level)

    @classmethod
    def graded(cls, dt_min: float, dt_max: float, steps_per_octave: int = 8) -> "TimeGrid":
        """Dyadic grid whose step grows with time, roughly ``t / steps_per_octave``.

        Steps are powers of two between ``dt_min`` and ``dt_max`` (both
        rounded down to powers of two), so every knot is a dyadic rational.
        """
        lo = 2.0 ** np.floor(np.log2(dt_min))
        hi = 2.0 ** np.floor(np.log2(dt_max))
        knots = [0.0]
        t = 0.0
        while t < 1.0:
            dt = lo
            while dt * 2 <= hi and t >= 2 * dt * steps_per_octave:
                dt *= 2
            # keep knots aligned to multiples of the current step
            t = min(1.0, t + dt)
            knots.append(t)
        return cls(np.array(knots))

    @property
    def n(self) -> int:
        return self.knots.size - 1

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.knots)))

    def refine(self, substeps: int) -> "TimeGrid":
        """Split every cell into ``substeps`` equal pieces."""
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        if substeps == 1:
            return self
        k = self.knots
        frac = np.arange(substeps) / substeps
        inner = (k[:-1, None] + (k[1:] - k[:-1])[:, None] * frac[None, :]).ravel()
        return TimeGrid(np.append(inner, 1.0))

    def contains(self, other: "TimeGrid") -> bool:
        """True when every knot of ``other`` is a knot of this grid."""
        return bool(np.all(np.isin(other.knots, self.knots)))

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.knots, other.knots)

    def __hash__(self):
        return hash(self.knots.tobytes())

    def __len__(self):
        return self.knots.size


@dataclass
class PathDriver:
    """One Brownian path ``w`` identified by ``(seed, particle_index, replica)``.

    Values are resolved lazily on the dyadic tree and cached; ``refine``
    declares a finer base grid without disturbing anything already returned.
    """

    seed: int
    particle_index: int
    replica: int = 0
    base_grid: TimeGrid = field(default_factory=lambda: TimeGrid.uniform(1))
    _cache: dict = field(default_factory=dict, repr=False)

    def value(self, t: float) -> float:
        t = float(t)
        if t not in self._cache:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"time {t!r} outside [0, 1]")
            self._cache[t] = float(
                brownian_values(self.seed, self.replica, self.particle_index, [t])[0, 0]
            )
        return self._cache[t]

    def values(self, times) -> np.ndarray:
        times = [float(t) for t in np.atleast_1d(times)]
        missing = [t for t in times if t not in self._cache]
        if missing:
            fresh = brownian_values(self.seed, self.replica, self.particle_index, missing)[0]
            self._cache.update(zip(missing, fresh.tolist()))
        return np.array([self._cache[t] for t in times])

    def increment(self, s: float, t: float) -> float:
        if not 0.0 <= s < t <= 1.0:
            raise ValueError(f"need 0 <= s < t <= 1, got ({s}, {t})")
        return self.value(t) - self.value(s)

    def refine(self, grid: TimeGrid) -> "PathDriver":
        if not grid.contains(self.base_grid):
            raise ValueError("new grid does not refine the driver's grid")
        out = PathDriver(self.seed, self.particle_index, self.replica, grid, dict(self._cache))
        out.values(grid.knots)
        return out

    def uniform(self, t_end: float) -> float:
        """Bridge-test uniform for the step ending at ``t_end``."""
        return float(step_uniforms(self.seed, self.replica, self.particle_index, t_end)[0])
