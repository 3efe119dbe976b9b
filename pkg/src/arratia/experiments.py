"""Monte Carlo studies: configuration, replica fan-out, reduction and result files.

Every study is a *sampler* mapping a contiguous block of replica ids to
per-replica arrays, plus a *reducer* turning the concatenated arrays into a
:class:`ResultRecord`.  Replica ``r`` always uses drivers keyed by
``(seed, r, particle)``, so the record depends on ``(config, seed)`` only:
not on the number of workers, and growing ``replicas`` extends the sample.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .densities import expected_atoms_oracle, merged_mass, pair_density_merged
from .drift import DriftSpec
from .driver import TimeGrid
from .flow import coalescence_prob_oracle, simulate
from .measures import wasserstein_equal_mass
from .schemes import all_schemes
from .splitting import SplitScheme, simulate_split, solve_D_batch, solve_S_batch

__version__ = "0.1.0"

KINDS = ("split-rate", "discretize-rate", "refinement", "density-check", "scheme-census",
         "strong-rate")

CSV_HEADER = ["level", "estimate", "std_error", "replicas"]
FAILURE_LIMIT = 0.01
Z95 = 1.959963984540054

_DRIFT_KEYS = ("value", "slope", "intercept", "lower", "upper", "xs", "ys")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One study.  Level lists mean different things per ``kind``:

    ``split-rate``       ``partition_sizes`` are the cell counts ``n``; ``m`` is the
                         reference point count ``M``; ``substeps`` fine steps on [0, 1].
    ``strong-rate``      ``partition_sizes`` are ``n``; one path from ``start_points[0]``.
    ``discretize-rate``  ``start_grids`` are the point counts ``m``; ``m`` is ``M``.
    ``refinement``       ``start_grids`` are cell counts of nested uniform grids on
                         [0, 1], the last one being the reference.
    ``density-check``    two ``start_points``; ``bins`` histogram bins.
    ``scheme-census``    ``m`` particles at ``start_points`` (default spacing 1).
    """

    kind: str
    drift: DriftSpec = DriftSpec()
    t: float = 1.0
    p: float = 2.0
    m: int = 0
    partition_sizes: tuple = ()
    start_grids: tuple = ()
    replicas: int = 1000
    seed: int = 0
    substeps: int = 512
    output: str = ""
    start_points: tuple = ()
    target_interval: tuple = (-4.0, 5.0)
    bins: int = 40
    bridge: bool = True
    dt_min: float = 2.0**-16
    dt_max: float = 2.0**-7
    ode_substeps: int = 8
    m_rule_eps: float = 0.1
    m_rule_c4: float = 2.0**0.2
    chunk: int = 0

    def __post_init__(self):
        for name in ("partition_sizes", "start_grids"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "start_points", tuple(float(v) for v in self.start_points))
        object.__setattr__(self, "target_interval",
                           tuple(float(v) for v in self.target_interval))
        if isinstance(self.drift, dict):
            object.__setattr__(self, "drift", DriftSpec.from_dict(self.drift))
        self._validate()

    def _validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.kind in KINDS, f"unknown kind {self.kind!r}; expected one of {KINDS}")
        need(self.replicas >= 2, "replicas must be >= 2")
        need(0.0 < self.t <= 1.0, "t must lie in (0, 1]")
        need(self.p >= 1.0, "p must be >= 1")
        need(self.seed >= 0 and self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        need(self.substeps >= 1 and self.ode_substeps >= 1, "substeps must be positive")
        need(self.chunk >= 0, "chunk must be >= 0")
        k = self.kind
        if k in ("split-rate", "strong-rate"):
            need(len(self.partition_sizes) >= 2, f"{k} needs >= 2 partition sizes")
            for n in self.partition_sizes:
                need(n >= 1 and self.substeps % n == 0, f"n={n} must divide substeps")
            need(float(self.t * self.substeps).is_integer(), "t must be a fine-grid knot")
        if k == "split-rate":
            need(self.m >= 1, "split-rate needs the reference point count m")
            for n in self.partition_sizes:
                mn = self.m_of_n(n)
                need(self.m % mn == 0, f"m={self.m} is not a multiple of m(n)={mn} at n={n}")
        if k == "strong-rate":
            need(len(self.start_points) <= 1, "strong-rate follows one path")
        if k == "discretize-rate":
            need(len(self.start_grids) >= 2, "discretize-rate needs >= 2 point counts")
            need(self.m >= 1, "discretize-rate needs the reference point count m")
            for q in self.start_grids:
                need(q >= 1 and self.m % q == 0, f"m={self.m} is not a multiple of {q}")
        if k == "refinement":
            g = self.start_grids
            need(len(g) >= 2, "refinement needs a coarse level and a reference")
            need(all(a < b for a, b in zip(g, g[1:])), "start grids must refine")
            need(all(g[-1] % a == 0 for a in g), "grids must be nested in the reference")
            need(self.target_interval[0] < self.target_interval[1], "empty target interval")
        if k == "density-check":
            need(len(self.start_points) in (0, 2), "density-check uses two start points")
            need(self.bins >= 1, "bins must be positive")
        if k == "scheme-census":
            need(1 <= self.m <= 8, "scheme-census needs 1 <= m <= 8 particles")
            need(len(self.start_points) in (0, self.m), "need m start points")
        if k in ("refinement", "density-check", "scheme-census", "discretize-rate"):
            if k != "discretize-rate" or self.drift.is_zero:
                need(self.t in set(self.grid().knots.tolist()), "t must be a time-grid knot")

    # -- derived quantities ------------------------------------------------

    def grid(self) -> TimeGrid:
        """Time grid of the zero-drift studies."""
        return TimeGrid.graded(self.dt_min, self.dt_max)

    def m_of_n(self, n: int) -> int:
        """Point count matched to ``delta = 1/n``: ``(1/4 - eps/2) log(n) / log C4``."""
        raw = (0.25 - 0.5 * self.m_rule_eps) * math.log(n) / math.log(self.m_rule_c4)
        return max(1, int(round(raw)))

    def points(self) -> np.ndarray:
        if self.start_points:
            return np.asarray(self.start_points)
        if self.kind == "density-check":
            return np.array([0.0, 0.5])
        if self.kind == "scheme-census":
            return np.arange(self.m, dtype=float)
        if self.kind == "strong-rate":
            return np.array([0.0])
        raise ConfigError(f"{self.kind} has no start points")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "drift":
                dd = v.to_dict()
                d["drift"] = dd.pop("kind")
                d.update({f"drift_{key}": val for key, val in dd.items()})
            elif isinstance(v, tuple):
                d[f.name] = list(v)
            else:
                d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        drift = d.pop("drift", "zero")
        extra = {key[6:]: d.pop(key) for key in list(d) if key.startswith("drift_")}
        if isinstance(drift, dict):
            spec = dict(drift)
        else:
            spec = {"kind": str(drift), **extra}
        bad = [key for key in spec if key != "kind" and key not in _DRIFT_KEYS]
        known = {f.name for f in fields(cls)}
        bad += [key for key in d if key not in known]
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        try:
            spec = DriftSpec.from_dict(spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad drift: {exc}") from None
        for key in ("m", "replicas", "seed", "substeps", "bins", "ode_substeps", "chunk"):
            if key in d:
                d[key] = _as_int(key, d[key])
        try:
            return cls(drift=spec, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        data = yaml.safe_load(text)
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping of keys to values")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_yaml(text)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output")
        d.pop("chunk")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _as_int(key, v):
    if isinstance(v, bool) or not float(v).is_integer():
        raise ConfigError(f"{key} must be an integer, got {v!r}")
    return int(v)


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class LevelStat:
    level: Any
    estimate: float
    std_error: float
    replicas: int


@dataclass(frozen=True)
class SlopeFit:
    """Weighted least-squares slope of ``log estimate`` on ``log level`` with a 95% CI."""

    slope: float
    std_error: float
    ci_low: float
    ci_high: float
    intercept: float


def _plain(v):
    # JSON-stable python values; tuples become lists so round trips compare equal
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v


@dataclass(frozen=True)
class ResultRecord:
    kind: str
    config_digest: str
    seed: int
    version: str
    levels: tuple
    slope: Optional[SlopeFit] = None
    fit: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    status: str = "ok"
    failed: int = 0
    wall_clock: float = field(default=0.0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(
            lv if isinstance(lv, LevelStat) else LevelStat(**lv) for lv in self.levels))
        if isinstance(self.slope, dict):
            object.__setattr__(self, "slope", SlopeFit(**self.slope))
        object.__setattr__(self, "fit", _plain(self.fit))
        object.__setattr__(self, "extra", _plain(self.extra))

    def to_dict(self) -> dict:
        # wall-clock time is kept in memory only, so files stay byte-reproducible
        d = {
            "kind": self.kind, "config_digest": self.config_digest, "seed": int(self.seed),
            "version": self.version, "status": self.status, "failed": int(self.failed),
            "levels": [_plain(asdict(lv)) for lv in self.levels],
            "slope": None if self.slope is None else _plain(asdict(self.slope)),
            "fit": self.fit, "extra": self.extra,
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ResultRecord":
        return cls(**json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for lv in self.levels:
            level = repr(float(lv.level)) if isinstance(lv.level, (int, float)) else lv.level
            wr.writerow([level, repr(float(lv.estimate)), repr(float(lv.std_error)),
                         int(lv.replicas)])
        return buf.getvalue()


def emit(record: ResultRecord, format: str, path) -> Path:
    """Write ``record`` as ``csv`` or ``json`` to ``path``."""
    if format not in ("csv", "json"):
        raise ValueError(f"unknown format {format!r}")
    text = record.to_csv() if format == "csv" else record.to_json()
    path = Path(path)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def output_paths(stem) -> dict:
    p = Path(stem)
    if p.suffix in (".csv", ".json"):
        p = p.with_suffix("")
    return {"csv": p.with_name(p.name + ".csv"), "json": p.with_name(p.name + ".json")}


# ---------------------------------------------------------------------------
# statistics


def _mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / math.sqrt(n)


def fit_loglog(x, est, se) -> Optional[SlopeFit]:
    """WLS of ``log est`` on ``log x`` with delta-method weights ``(est / se)^2``."""
    x, est, se = (np.asarray(v, dtype=float) for v in (x, est, se))
    if x.size < 2 or np.any(est <= 0):
        return None
    s = np.where(se > 0, se / est, np.min(se[se > 0] / est[se > 0]) if np.any(se > 0) else 1.0)
    w = 1.0 / s**2
    X = np.column_stack([np.ones_like(x), np.log(x)])
    A = X.T @ (w[:, None] * X)
    beta = np.linalg.solve(A, X.T @ (w * np.log(est)))
    cov = np.linalg.inv(A)
    if x.size > 2:
        resid = np.log(est) - X @ beta
        cov = cov * max(1.0, float(np.sum(w * resid**2)) / (x.size - 2))
    sd = math.sqrt(cov[1, 1])
    b = float(beta[1])
    return SlopeFit(b, sd, b - Z95 * sd, b + Z95 * sd, float(beta[0]))


def _ratio_se(a, b):
    """Mean-ratio ``E a / E b`` with a delta-method standard error from paired samples."""
    ma, mb = a.mean(), b.mean()
    if mb == 0:
        return None, None
    n = a.size
    cov = np.cov(np.vstack([a, b]), ddof=1) / n
    r = ma / mb
    var = (cov[0, 0] - 2 * r * cov[0, 1] + r * r * cov[1, 1]) / mb**2
    return float(r), float(math.sqrt(max(var, 0.0)))


# ---------------------------------------------------------------------------
# samplers: (config, replica ids) -> dict of per-replica arrays


def _fail_mask(*arrays) -> np.ndarray:
    bad = np.zeros(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        bad |= ~np.all(np.isfinite(a.reshape(a.shape[0], -1)), axis=1)
    return bad


def _subset(M: int, m: int) -> np.ndarray:
    # indices of j/m, j = 1..m, inside the points j/M, j = 1..M
    return np.arange(1, m + 1) * (M // m) - 1


def _w_nested(X_fine, X_coarse, p):
    """``W_p`` between uniform measures on ``M`` and ``m`` points (``m | M``)."""
    rep = X_fine.shape[1] // X_coarse.shape[1]
    return wasserstein_equal_mass(X_fine, np.repeat(X_coarse, rep, axis=1), p)


def _sample_split_rate(cfg: ExperimentConfig, rid):
    M = cfg.m
    pts = np.arange(1, M + 1) / M
    fine = TimeGrid.uniform(cfg.substeps)
    true = simulate(pts, fine, seed=cfg.seed, replicas=rid, drift=cfg.drift, bridge=cfg.bridge,
                    record_events=False, horizon=cfg.t).positions
    L = len(cfg.partition_sizes)
    out = {k: np.zeros((rid.size, L)) for k in ("total", "d_true", "d_split", "d_approx",
                                                 "direct")}
    bad = _fail_mask(true)
    for i, n in enumerate(cfg.partition_sizes):
        scheme = SplitScheme.uniform(n, cfg.drift, cfg.ode_substeps, cfg.substeps // n)
        approx = simulate_split(pts, scheme, seed=cfg.seed, replicas=rid, bridge=cfg.bridge,
                                record_events=False, horizon=cfg.t).positions
        bad |= _fail_mask(approx)
        sub = _subset(M, cfg.m_of_n(n))
        with np.errstate(invalid="ignore"):
            out["d_true"][:, i] = _w_nested(true, true[:, sub], cfg.p)
            out["d_split"][:, i] = wasserstein_equal_mass(true[:, sub], approx[:, sub], cfg.p)
            out["d_approx"][:, i] = _w_nested(approx, approx[:, sub], cfg.p)
            out["direct"][:, i] = wasserstein_equal_mass(true, approx, cfg.p)
        out["total"][:, i] = out["d_true"][:, i] + out["d_split"][:, i] + out["d_approx"][:, i]
    out["failed"] = bad
    return out


def _sample_strong_rate(cfg: ExperimentConfig, rid):
    u = float(cfg.points()[0])
    L = len(cfg.partition_sizes)
    ys, zs = np.zeros((rid.size, L)), np.zeros((rid.size, L))
    x = None
    for i, n in enumerate(cfg.partition_sizes):
        scheme = SplitScheme.uniform(n, cfg.drift, cfg.ode_substeps, cfg.substeps // n)
        if x is None:  # the fine grid is the same at every level
            x = solve_D_batch(cfg.seed, rid, u, cfg.drift, scheme.fine_grid)
        times, y, z = solve_S_batch(cfg.seed, rid, u, u, scheme)
        upto = times <= cfg.t
        ys[:, i] = np.max(np.abs(x - y)[:, upto], axis=1) ** cfg.p
        zs[:, i] = np.max(np.abs(x - z)[:, upto], axis=1) ** cfg.p
    return {"sup_y": ys, "sup_z": zs, "failed": _fail_mask(ys, zs)}


def _sample_discretize_rate(cfg: ExperimentConfig, rid):
    M = cfg.m
    pts = np.arange(1, M + 1) / M
    # Euler steps need a uniform fine grid; the driftless flow is exact on a graded one
    grid = cfg.grid() if cfg.drift.is_zero else TimeGrid.uniform(cfg.substeps)
    X = simulate(pts, grid, seed=cfg.seed, replicas=rid, drift=cfg.drift,
                 bridge=cfg.bridge, record_events=False, horizon=cfg.t).positions
    W = np.column_stack([_w_nested(X, X[:, _subset(M, q)], cfg.p) for q in cfg.start_grids])
    return {"w": W, "failed": _fail_mask(X)}


def _refinement_sets(cfg: ExperimentConfig):
    ref = cfg.start_grids[-1]
    U = np.linspace(0.0, 1.0, ref + 1)
    return U, [np.arange(0, ref + 1, ref // k) for k in cfg.start_grids]


def _sample_refinement(cfg: ExperimentConfig, rid):
    U, subsets = _refinement_sets(cfg)
    ens = simulate(U, cfg.grid(), seed=cfg.seed, replicas=rid, bridge=cfg.bridge,
                   record_events=False, horizon=cfg.t)
    lo, hi = cfg.target_interval
    counts = np.column_stack([ens.count_in(lo, hi, subset=s) for s in subsets])
    return {"counts": counts, "failed": _fail_mask(ens.positions)}


def _sample_density_check(cfg: ExperimentConfig, rid):
    U = cfg.points()
    ens = simulate(U, cfg.grid(), seed=cfg.seed, replicas=rid, bridge=cfg.bridge,
                   record_events=False, horizon=cfg.t)
    return {"merged": ens.roots[:, 1] == 0, "y": ens.positions[:, 0],
            "failed": _fail_mask(ens.positions)}


def _sample_scheme_census(cfg: ExperimentConfig, rid):
    U = cfg.points()
    ens = simulate(U, cfg.grid(), seed=cfg.seed, replicas=rid, bridge=cfg.bridge, horizon=cfg.t)
    index = {J.indices: i for i, J in enumerate(all_schemes(U.size))}
    return {"scheme": np.array([index[k] for k in ens.scheme_keys()], dtype=np.int64),
            "failed": _fail_mask(ens.positions)}


_SAMPLERS = {
    "split-rate": _sample_split_rate,
    "strong-rate": _sample_strong_rate,
    "discretize-rate": _sample_discretize_rate,
    "refinement": _sample_refinement,
    "density-check": _sample_density_check,
    "scheme-census": _sample_scheme_census,
}

_DEFAULT_CHUNK = {"refinement": 1 << 15, "density-check": 1 << 17, "scheme-census": 1 << 15,
                  "split-rate": 1000, "discretize-rate": 500, "strong-rate": 1 << 14}


def _sample_block(cfg: ExperimentConfig, a: int, b: int) -> dict:
    return _SAMPLERS[cfg.kind](cfg, np.arange(a, b, dtype=np.int64))


def collect_samples(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Per-replica arrays for replicas ``0 .. replicas - 1``, in replica order."""
    size = cfg.chunk or _DEFAULT_CHUNK[cfg.kind]
    blocks = [(a, min(a + size, cfg.replicas)) for a in range(0, cfg.replicas, size)]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sample_block, [cfg] * len(blocks),
                                  [a for a, _ in blocks], [b for _, b in blocks]))
    else:
        parts = [_sample_block(cfg, a, b) for a, b in blocks]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# ---------------------------------------------------------------------------
# reducers: samples -> record fields


def _levels(xs, samples) -> list:
    est, se = _mean_se(samples)
    return [LevelStat(float(x), float(e), float(s), int(samples.shape[0]))
            for x, e, s in zip(xs, est, se)]


def _reduce_split_rate(cfg, s):
    ns = np.array(cfg.partition_sizes, dtype=float)
    delta = 1.0 / ns
    tot = s["total"]
    levels = _levels(delta, tot)
    est = np.array([lv.estimate for lv in levels])
    se = np.array([lv.std_error for lv in levels])
    f = np.log(1.0 / delta) ** (-1.0 / cfg.p)
    w = 1.0 / np.maximum(se, 1e-300) ** 2
    C = float(np.sum(w * f * est) / np.sum(w * f * f))
    chi_log = float(np.sum(w * (est - C * f) ** 2))
    slope = fit_loglog(delta, est, se)
    chi_pow = (float(np.sum(w * (est - math.exp(slope.intercept) * delta**slope.slope) ** 2))
               if slope else math.inf)
    red_log = chi_log / max(ns.size - 1, 1)
    red_pow = chi_pow / max(ns.size - 2, 1)
    # coupled levels share replicas, so successive differences use paired samples
    diffs = tot[:, :-1] - tot[:, 1:]
    d_mean, d_se = _mean_se(diffs)
    fit = {
        "log_model": {"C": C, "chi2": chi_log, "dof": int(ns.size - 1), "reduced_chi2": red_log},
        "power_model": {"K": math.exp(slope.intercept) if slope else None,
                        "beta": slope.slope if slope else None, "chi2": chi_pow,
                        "dof": int(ns.size - 2), "reduced_chi2": red_pow},
        "better": "log" if red_log <= red_pow else "power",
    }
    extra = {
        "n": list(cfg.partition_sizes), "m_of_n": [cfg.m_of_n(n) for n in cfg.partition_sizes],
        "reference_points": cfg.m,
        "monotone_2sigma": bool(np.all(d_mean > 2.0 * d_se)),
        "decrease": d_mean.tolist(), "decrease_se": d_se.tolist(),
        # the curve is pinned at the coarsest level; finer ones must stay under it
        "bound_C": float(est[0] / f[0]),
        "bound_curve": (est[0] / f[0] * f).tolist(),
        "bounded_2sigma": bool(np.all(est[1:] <= est[0] / f[0] * f[1:] + 2.0 * se[1:])),
    }
    for key in ("d_true", "d_split", "d_approx", "direct"):
        m, e = _mean_se(s[key])
        extra[key] = m.tolist()
        extra[key + "_se"] = e.tolist()
    return levels, slope, fit, extra


def _reduce_strong_rate(cfg, s):
    delta = 1.0 / np.array(cfg.partition_sizes, dtype=float)
    levels = _levels(delta, s["sup_y"])
    slope = fit_loglog(delta, [lv.estimate for lv in levels], [lv.std_error for lv in levels])
    zl = _levels(delta, s["sup_z"])
    zs = fit_loglog(delta, [lv.estimate for lv in zl], [lv.std_error for lv in zl])
    extra = {"z_estimate": [lv.estimate for lv in zl], "z_std_error": [lv.std_error for lv in zl],
             "z_slope": None if zs is None else asdict(zs)}
    return levels, slope, {}, extra


def _reduce_discretize_rate(cfg, s):
    ms = np.array(cfg.start_grids, dtype=float)
    levels = _levels(ms, s["w"])
    slope = fit_loglog(ms, [lv.estimate for lv in levels], [lv.std_error for lv in levels])
    return levels, slope, {}, {"reference_points": cfg.m}


def _reduce_refinement(cfg, s):
    c = s["counts"].astype(float)
    lo, hi = cfg.target_interval
    gaps = (c[:, -1:] - c[:, :-1]) / (hi - lo)
    delta = 1.0 / np.array(cfg.start_grids[:-1], dtype=float)
    levels = _levels(delta, gaps)
    ratios, ratio_se = [], []
    for i in range(gaps.shape[1] - 1):
        r, e = _ratio_se(gaps[:, i], gaps[:, i + 1])
        ratios.append(r)
        ratio_se.append(e)
    U, subsets = _refinement_sets(cfg)
    mc, mc_se = _mean_se(c)
    pathwise = bool(np.all(np.diff(s["counts"], axis=1) >= 0))
    extra = {
        "ratios": ratios, "ratio_std_error": ratio_se,
        "mean_counts": mc.tolist(), "mean_counts_se": mc_se.tolist(),
        "free_line_expected_counts": [expected_atoms_oracle(U[sub], cfg.t) for sub in subsets],
        "pathwise_monotone": pathwise, "reference_cells": cfg.start_grids[-1],
    }
    slope = fit_loglog(delta, [lv.estimate for lv in levels], [lv.std_error for lv in levels])
    return levels, slope, {}, extra


def _bin_average(f, edges, nodes: int = 4) -> np.ndarray:
    g, wts = np.polynomial.legendre.leggauss(nodes)
    out = np.empty(edges.size - 1)
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        ys = 0.5 * (a + b) + 0.5 * (b - a) * g
        out[i] = 0.5 * np.dot(wts, [f(y) for y in ys])
    return out


def _reduce_density_check(cfg, s):
    U = cfg.points()
    R = s["merged"].size
    r = 3.0 * math.sqrt(cfg.t)
    edges = np.linspace(U.min() - r, U.max() + r, cfg.bins + 1)
    width = np.diff(edges)
    y = s["y"][s["merged"]]
    b = np.searchsorted(edges, y, side="right") - 1
    ok = (b >= 0) & (b < cfg.bins)
    frac = np.bincount(b[ok], minlength=cfg.bins) / R
    est = frac / width
    se = np.sqrt(frac * (1.0 - frac) / (R - 1)) / width
    centers = 0.5 * (edges[1:] + edges[:-1])
    levels = [LevelStat(float(x), float(e), float(q), R) for x, e, q in zip(centers, est, se)]
    exact = _bin_average(lambda v: pair_density_merged(U, v, cfg.t), edges)
    z = np.where(se > 0, (est - exact) / np.where(se > 0, se, 1.0), 0.0)
    p_hat, p_se = _mean_se(s["merged"].astype(float))
    extra = {
        "bin_edges": edges.tolist(), "exact_bin_average": exact.tolist(), "z": z.tolist(),
        "max_abs_z": float(np.max(np.abs(z))),
        "merged_fraction": float(p_hat), "merged_fraction_se": float(p_se),
        "merged_mass_quadrature": merged_mass(U, cfg.t),
        "merged_mass_oracle": coalescence_prob_oracle(float(U[1] - U[0]), cfg.t),
    }
    return levels, None, {}, extra


def _label(J) -> str:
    return "()" if not J else "(" + ",".join(str(j) for j in J) + ")"


def _reduce_scheme_census(cfg, s):
    schemes = all_schemes(cfg.m)
    R = s["scheme"].size
    counts = np.bincount(s["scheme"], minlength=len(schemes))
    f = counts / R
    se = np.sqrt(f * (1.0 - f) / (R - 1))
    levels = [LevelStat(_label(J.indices), float(a), float(b), R)
              for J, a, b in zip(schemes, f, se)]
    extra = {"schemes": [_label(J.indices) for J in schemes], "counts": counts.tolist(),
             "frequency_sum": math.fsum(f)}
    return levels, None, {}, extra


_REDUCERS = {
    "split-rate": _reduce_split_rate,
    "strong-rate": _reduce_strong_rate,
    "discretize-rate": _reduce_discretize_rate,
    "refinement": _reduce_refinement,
    "density-check": _reduce_density_check,
    "scheme-census": _reduce_scheme_census,
}


# ---------------------------------------------------------------------------


def run_experiment(config: ExperimentConfig, workers: int = 1, write: bool = True) -> ResultRecord:
    """Run the study named by ``config.kind``; write CSV and JSON if ``config.output`` is set.

    Replicas with non-finite output are dropped from the statistics.  If more
    than 1% fail, the record's status is ``partial-failure`` and a warning is
    issued.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    t0 = time.perf_counter()
    samples = collect_samples(config, workers)
    bad = samples.pop("failed")
    failed = int(bad.sum())
    if failed:
        samples = {k: v[~bad] for k, v in samples.items()}
    status = "ok"
    if failed > FAILURE_LIMIT * config.replicas:
        status = "partial-failure"
        warnings.warn(f"{failed} of {config.replicas} replicas failed", RuntimeWarning)
    if config.replicas - failed < 2:
        raise RuntimeError(f"only {config.replicas - failed} replicas succeeded")
    levels, slope, fit, extra = _REDUCERS[config.kind](config, samples)
    record = ResultRecord(config.kind, config.digest(), config.seed, __version__, tuple(levels),
                          slope, fit, extra, status, failed,
                          wall_clock=time.perf_counter() - t0)
    if write and config.output:
        for fmt, path in output_paths(config.output).items():
            emit(record, fmt, path)
    return record


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    """Copy of ``config`` with the non-``None`` keyword values replaced."""
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
