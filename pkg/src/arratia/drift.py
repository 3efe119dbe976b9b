"""Bounded Lipschitz drift functions ``a`` with their constants ``C_a`` and ``M_a``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("zero", "constant", "affine", "tabulated")


@dataclass(frozen=True)
class DriftSpec:
    """Drift ``a(x)``.

    ``affine`` is ``clip(slope * x + intercept, lower, upper)``; with infinite
    clamps it is a plain affine map (unbounded, used only for ODE checks).
    ``tabulated`` interpolates ``(xs, ys)`` linearly and is flat outside.
    """

    kind: str = "zero"
    value: float = 0.0
    slope: float = 0.0
    intercept: float = 0.0
    lower: float = -math.inf
    upper: float = math.inf
    xs: tuple = ()
    ys: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown drift kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "affine" and not self.lower <= self.upper:
            raise ValueError("affine drift needs lower <= upper")
        if self.kind == "tabulated":
            xs = np.asarray(self.xs, dtype=float)
            if xs.size < 2 or xs.size != len(self.ys) or np.any(np.diff(xs) <= 0):
                raise ValueError("tabulated drift needs >= 2 ascending abscissae matching ys")

    @classmethod
    def zero(cls) -> "DriftSpec":
        return cls()

    @classmethod
    def constant(cls, c: float) -> "DriftSpec":
        return cls("constant", value=float(c))

    @classmethod
    def affine(cls, slope: float, intercept: float = 0.0, lower=-math.inf, upper=math.inf):
        return cls("affine", slope=float(slope), intercept=float(intercept),
                   lower=float(lower), upper=float(upper))

    @classmethod
    def tabulated(cls, xs, ys) -> "DriftSpec":
        return cls("tabulated", xs=tuple(map(float, xs)), ys=tuple(map(float, ys)))

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "constant" and self.value == 0.0)

    @property
    def clamped(self) -> bool:
        return self.kind == "affine" and (math.isfinite(self.lower) or math.isfinite(self.upper))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "constant":
            return np.full_like(x, self.value)
        if self.kind == "affine":
            return np.clip(self.slope * x + self.intercept, self.lower, self.upper)
        return np.interp(x, self.xs, self.ys)

    @property
    def lipschitz_bound(self) -> float:
        """``C_a``."""
        if self.kind in ("zero", "constant"):
            return 0.0
        if self.kind == "affine":
            return abs(self.slope)
        return float(np.max(np.abs(np.diff(self.ys) / np.diff(self.xs))))

    @property
    def sup_bound(self) -> float:
        """``M_a = sup |a|`` (infinite for an unclamped non-constant affine map)."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return abs(self.value)
        if self.kind == "affine":
            if self.slope == 0.0:
                return abs(float(np.clip(self.intercept, self.lower, self.upper)))
            return max(abs(self.lower), abs(self.upper))
        return float(np.max(np.abs(self.ys)))

    def to_dict(self) -> dict:
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "affine":
            return {"kind": "affine", "slope": self.slope, "intercept": self.intercept,
                    "lower": self.lower, "upper": self.upper}
        return {"kind": "tabulated", "xs": list(self.xs), "ys": list(self.ys)}

    @classmethod
    def from_dict(cls, d: dict) -> "DriftSpec":
        d = dict(d)
        kind = d.pop("kind", "zero")
        if kind == "tabulated":
            return cls.tabulated(d["xs"], d["ys"])
        return cls(kind, **{k: float(v) for k, v in d.items()})
