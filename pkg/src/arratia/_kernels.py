"""Compiled inner loops for wide ensembles.

The uniforms hashed here are bit-identical to :func:`arratia.driver.step_uniforms`.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)


@njit(cache=True, inline="always")
def _mix(z):
    z = z ^ (z >> _S30)
    z = z * _M1
    z = z ^ (z >> _S27)
    z = z * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def _absorb(h, x):
    return _mix(h ^ _mix(x + _GAMMA))


@njit(cache=True, inline="always")
def _uniform(seed_key, replica, particle, time_code):
    h = _absorb(_absorb(seed_key, replica), particle)
    z = _mix(h ^ time_code)
    return (np.float64(z >> _S11) + 0.5) * 2.0**-53


@njit(cache=True)
def merge_scan(xs, xe, alive, rep, rid, dt, seed_key, time_code, bridge, cut):
    """Row-wise coalescence pass; same contract as the NumPy reference scan."""
    R, C = xe.shape
    merged = np.zeros((R, C), dtype=np.bool_)
    into = np.full((R, C), -1, dtype=np.intp)
    for r in range(R):
        top = 0
        ts = xs[r, 0]
        te = xe[r, 0]
        rr = np.uint64(rid[r])
        for c in range(1, C):
            if not alive[r, c]:
                continue
            xc = xe[r, c]
            m = xc <= te
            if not m and bridge:
                expo = (xs[r, c] - ts) * (xc - te) / dt
                if expo < cut:
                    m = _uniform(seed_key, rr, np.uint64(rep[r, c]), time_code) < math.exp(-expo)
            if m:
                merged[r, c] = True
                into[r, c] = top
            else:
                top = c
                ts = xs[r, c]
                te = xc
    return merged, into


@njit(cache=True)
def relabel_roots(root, g, merged, into, rep):
    """Point every particle of an absorbed cluster at its survivor (in place)."""
    L, C = merged.shape
    n = root.shape[1]
    for i in range(L):
        row = g[i]
        for c in range(C):
            if merged[i, c]:
                a = rep[i, c]
                s = rep[i, into[i, c]]
                for k in range(n):
                    if root[row, k] == a:
                        root[row, k] = s


@njit(cache=True)
def keyed_uniforms(keys, codes):
    """``out[k, i]`` is the uniform hashed from ``keys[i] ^ codes[k]``."""
    K = codes.size
    M = keys.size
    out = np.empty((K, M))
    for k in range(K):
        ck = codes[k]
        for i in range(M):
            z = _mix(keys[i] ^ ck)
            out[k, i] = (np.float64(z >> _S11) + 0.5) * 2.0**-53
    return out
