"""Parametric logistic IRT models: response curves, likelihoods, exact derivatives.

The three-parameter logistic response curve is

    p(theta) = c + (1 - c) * sigma(a * (theta - d))

with discrimination a > 0, chance floor 0 <= c < 1, and difficulty d.
Setting c = 0 gives the 2PL model; additionally forcing a = 1 gives the
Rasch (1PL) model. All functions here are pure and accept scalar or
ndarray theta.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

# Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] before any log.
PROB_EPS = 1e-12


class _ClampCounter:
    """Counts probability-clamping events instead of letting logs go to -inf."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int) -> None:
        if n:
            with self._lock:
                self._count += n

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


clamp_counter = _ClampCounter()


def sigmoid(x):
    """Standard logistic 1 / (1 + exp(-x)), branch-by-sign so |x| > 700 cannot overflow."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class ItemParams:
    """Item parameter triple (a, c, d): discrimination, chance, difficulty."""

    a: float
    c: float
    d: float

    def __post_init__(self) -> None:
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ValueError(f"discrimination must be positive and finite, got a={self.a}")
        if not (0.0 <= self.c < 1.0):
            raise ValueError(f"chance must lie in [0, 1), got c={self.c}")
        if not math.isfinite(self.d):
            raise ValueError(f"difficulty must be finite, got d={self.d}")

    def to_record(self, item_id: str) -> dict:
        """JSON record for the item-bank file; log(a) is carried alongside a."""
        return {
            "item_id": item_id,
            "a": self.a,
            "d": self.d,
            "c": self.c,
            "log_a": math.log(self.a),
        }

    @classmethod
    def from_record(cls, record: dict) -> "ItemParams":
        # log_a wins when present: keeps positivity exact across round-trips.
        a = math.exp(record["log_a"]) if "log_a" in record else record["a"]
        return cls(a=a, c=record.get("c", 0.0), d=record["d"])


@dataclass(frozen=True)
class ModelFamily:
    """A logistic model family: which of (a, c, d) are free per item.

    kind is one of "rasch" (a=1, c=0), "2pl" (c=0), "3pl" with a shared fixed
    chance, or "3pl" with fixed_c=None meaning c is fitted per item.
    """

    kind: str
    fixed_c: float | None = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("rasch", "2pl", "3pl"):
            raise ValueError(f"unknown model family kind: {self.kind!r}")
        if self.kind in ("rasch", "2pl") and self.fixed_c != 0.0:
            raise ValueError(f"{self.kind} requires c = 0")
        if self.fixed_c is not None and not (0.0 <= self.fixed_c < 1.0):
            raise ValueError(f"fixed chance must lie in [0, 1), got {self.fixed_c}")

    @classmethod
    def rasch(cls) -> "ModelFamily":
        return cls("rasch", 0.0)

    @classmethod
    def two_pl(cls) -> "ModelFamily":
        return cls("2pl", 0.0)

    @classmethod
    def three_pl(cls, chance: float = 0.25) -> "ModelFamily":
        return cls("3pl", chance)

    @classmethod
    def three_pl_free(cls) -> "ModelFamily":
        return cls("3pl", None)

    @classmethod
    def parse(cls, text: str) -> "ModelFamily":
        """Parse "rasch" | "2pl" | "3pl:<c>" | "3pl:free"."""
        t = text.strip().lower()
        if t in ("rasch", "1pl"):
            return cls.rasch()
        if t == "2pl":
            return cls.two_pl()
        if t.startswith("3pl"):
            _, _, tail = t.partition(":")
            if tail in ("", "free"):
                return cls.three_pl_free() if tail == "free" else cls.three_pl()
            return cls.three_pl(float(tail))
        raise ValueError(f"cannot parse model family {text!r}")

    def spec_string(self) -> str:
        if self.kind != "3pl":
            return self.kind
        return "3pl:free" if self.fixed_c is None else f"3pl:{self.fixed_c:g}"

    @property
    def frees_a(self) -> bool:
        return self.kind != "rasch"

    @property
    def frees_c(self) -> bool:
        return self.kind == "3pl" and self.fixed_c is None

    def constrain(self, a: float = 1.0, c: float = 0.0, d: float = 0.0) -> ItemParams:
        """Build ItemParams with the family's fixed entries forced."""
        if self.kind == "rasch":
            a = 1.0
        if not self.frees_c:
            c = 0.0 if self.fixed_c is None else self.fixed_c
        return ItemParams(a=a, c=c, d=d)


def irf(theta, params: ItemParams):
    """Item response function p(theta) = c + (1 - c) * sigma(a * (theta - d))."""
    return params.c + (1.0 - params.c) * sigmoid(params.a * (np.asarray(theta, dtype=float) - params.d))


def irf_arrays(theta, a, c, d):
    """Response curve with per-element parameter arrays (vectorized irf)."""
    return c + (1.0 - np.asarray(c, dtype=float)) * sigmoid(np.asarray(a) * (np.asarray(theta) - np.asarray(d)))


def clamp_probability(p):
    """Clip p into [PROB_EPS, 1 - PROB_EPS], counting every clamped entry."""
    p = np.asarray(p, dtype=float)
    clipped = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    clamp_counter.add(int(np.count_nonzero(clipped != p)))
    if clipped.ndim == 0:
        return float(clipped)
    return clipped


def bernoulli_log_likelihood(grade, p):
    """g*log(p) + (1-g)*log(1-p) with clamped p; grade and p broadcast together."""
    p = clamp_probability(p)
    g = np.asarray(grade, dtype=float)
    out = g * np.log(p) + (1.0 - g) * np.log1p(-np.asarray(p))
    if np.ndim(out) == 0:
        return float(out)
    return out


def response_log_likelihood(grade: int, theta, params: ItemParams):
    """Log-likelihood of a binary grade under the item's response curve."""
    if grade not in (0, 1):
        raise ValueError(f"grade must be 0 or 1, got {grade!r}")
    return bernoulli_log_likelihood(grade, irf(theta, params))


def irf_gradient(theta, params: ItemParams):
    """Exact partials (dp/da, dp/dc, dp/dd) of the response curve.

    With s = sigma(a * (theta - d)):
        dp/da = (1 - c) * s * (1 - s) * (theta - d)
        dp/dc = 1 - s
        dp/dd = -(1 - c) * s * (1 - s) * a
    """
    theta = np.asarray(theta, dtype=float)
    s = sigmoid(params.a * (theta - params.d))
    core = (1.0 - params.c) * s * (1.0 - s)
    dp_da = core * (theta - params.d)
    dp_dc = 1.0 - s
    dp_dd = -core * params.a
    if theta.ndim == 0:
        return float(dp_da), float(dp_dc), float(dp_dd)
    return dp_da, dp_dc, dp_dd
