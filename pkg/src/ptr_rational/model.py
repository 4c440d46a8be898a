"""Consumer, uncertainty and program parameters plus the per-period payoff pieces.

All functions accept scalars or numpy arrays and broadcast. Energy is in kWh,
money in $, prices in $/kWh.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

# Relative tolerance used when a price must be compared against another price
# (e.g. the rebate landing exactly on the retail price).
PRICE_RTOL = 1e-12


class Strategy(str, Enum):
    A = "A"  # called, keeps the unconstrained optimum
    B = "B"  # called, reduces below the baseline
    C = "C"  # called, consumes nothing
    D = "D"  # not called


@dataclass(frozen=True)
class ConsumerParams:
    gamma: float = 0.05
    retail_price: float = 0.26
    q_bar: float = 8.0
    q_max: float = 20.0
    k: float | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.retail_price > 0:
            raise ValueError(f"retail_price must be positive, got {self.retail_price}")
        if not 0 < self.q_bar < self.q_max:
            raise ValueError(f"need 0 < q_bar < q_max, got q_bar={self.q_bar}, q_max={self.q_max}")
        # k is pinned so that G(0) = 0 at theta = 0
        k = 0.5 * self.gamma * self.q_bar**2 + self.retail_price * self.q_bar
        if self.k is None:
            object.__setattr__(self, "k", k)
        elif not math.isclose(self.k, k, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"k={self.k} inconsistent with G(0)=0 normalization (expected {k})")

    @property
    def saturation_gap(self) -> float:
        """Distance p/gamma between the ideal load and the start of saturation."""
        return self.retail_price / self.gamma


@dataclass(frozen=True)
class UncertaintyModel:
    """Additive load shock on a symmetric, zero-mean support.

    ``kind`` is ``"uniform"`` for every closed-form path. ``"triangular"``
    (symmetric, same support) is accepted by the Monte Carlo oracle only.
    """

    theta_lo: float
    theta_hi: float
    kind: str = "uniform"

    def __post_init__(self):
        if not self.theta_hi > 0:
            raise ValueError(f"theta_hi must be positive, got {self.theta_hi}")
        if not math.isclose(self.theta_lo, -self.theta_hi, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError("support must be symmetric around zero (theta_lo = -theta_hi)")
        if self.kind not in ("uniform", "triangular"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def symmetric(cls, theta_hi: float, kind: str = "uniform") -> "UncertaintyModel":
        return cls(-theta_hi, theta_hi, kind)

    @classmethod
    def from_percent(cls, pct: float, q_bar: float, kind: str = "uniform") -> "UncertaintyModel":
        if not 0 < pct <= 100:
            raise ValueError(f"uncertainty percent must lie in (0, 100], got {pct}")
        return cls.symmetric(pct * q_bar / 100.0, kind)

    @property
    def width(self) -> float:
        return self.theta_hi - self.theta_lo

    def density(self, theta):
        theta = np.asarray(theta, dtype=float)
        inside = (theta >= self.theta_lo) & (theta <= self.theta_hi)
        if self.kind == "uniform":
            return np.where(inside, 1.0 / self.width, 0.0)
        h = self.theta_hi
        return np.where(inside, (h - np.abs(theta)) / h**2, 0.0)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.theta_lo, self.theta_hi, size)
        return rng.triangular(self.theta_lo, 0.0, self.theta_hi, size)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        slack = 1e-12 * max(1.0, self.theta_hi)
        return bool(np.all((theta >= self.theta_lo - slack) & (theta <= self.theta_hi + slack)))


@dataclass(frozen=True)
class ProgramParams:
    """Rebate price and system-operator call indicator (or call probability)."""

    p2: float = 0.0
    call: float = 1.0

    def __post_init__(self):
        if not self.p2 >= 0:
            raise ValueError(f"p2 must be non-negative, got {self.p2}")
        if not 0.0 <= self.call <= 1.0:
            raise ValueError(f"call must lie in [0, 1], got {self.call}")

    @property
    def is_binary(self) -> bool:
        return self.call in (0.0, 1.0)


def check_support(cp: ConsumerParams, um: UncertaintyModel) -> None:
    """Reject supports that push the ideal load q_bar + theta outside [0, q_max]."""
    if cp.q_bar + um.theta_lo < -1e-12 or cp.q_bar + um.theta_hi > cp.q_max + 1e-12:
        raise ValueError(
            f"support [{um.theta_lo}, {um.theta_hi}] moves q_bar + theta outside [0, {cp.q_max}]"
        )


def price_at_or_above(p2: float, price: float) -> bool:
    return p2 >= price or math.isclose(p2, price, rel_tol=PRICE_RTOL, abs_tol=0.0)


def _raw_utility(q, theta, cp: ConsumerParams):
    # saturation starts at q* + p/gamma with q* = q_bar + theta (shifted form of G)
    q_star = cp.q_bar + theta
    dev = q - q_star
    quad = -0.5 * cp.gamma * dev**2 + cp.retail_price * dev + cp.k
    sat = cp.retail_price**2 / (2.0 * cp.gamma) + cp.k
    return np.where(dev <= cp.saturation_gap, quad, sat)


def utility_g(q, theta, cp: ConsumerParams):
    """Consumer utility G(q - theta): concave quadratic that saturates at q* + p/gamma."""
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise ValueError("consumption must be non-negative")
    out = _raw_utility(q, np.asarray(theta, dtype=float), cp)
    return float(out) if out.ndim == 0 else out


def rebate(baseline, q, p2):
    """PTR payment: p2 per kWh below the baseline, never negative."""
    baseline = np.asarray(baseline, dtype=float)
    q = np.asarray(q, dtype=float)
    out = p2 * np.maximum(baseline - q, 0.0)
    return float(out) if out.ndim == 0 else out


def _raw_payoff(q, theta, baseline, p2, call, cp: ConsumerParams):
    return _raw_utility(q, theta, cp) - cp.retail_price * q + call * p2 * np.maximum(baseline - q, 0.0)


def payoff_u(q, theta, baseline, pp: ProgramParams, cp: ConsumerParams):
    """Event-period payoff G(q - theta) - p q + call * rebate."""
    q = np.asarray(q, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    if np.any(q < 0):
        raise ValueError("consumption must be non-negative")
    if np.any(baseline < 0):
        raise ValueError("baseline must be non-negative")
    out = _raw_payoff(q, np.asarray(theta, dtype=float), baseline, pp.p2, pp.call, cp)
    return float(out) if out.ndim == 0 else out


def period_payoff(q, theta, cp: ConsumerParams):
    """Payoff of a period without any rebate, G(q - theta) - p q."""
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise ValueError("consumption must be non-negative")
    out = _raw_utility(q, np.asarray(theta, dtype=float), cp) - cp.retail_price * q
    return float(out) if out.ndim == 0 else out


def rational_no_program(theta, cp: ConsumerParams):
    """Load that maximizes G - p q without a rebate: q_bar + theta, clamped to [0, q_max]."""
    out = np.clip(cp.q_bar + np.asarray(theta, dtype=float), 0.0, cp.q_max)
    return float(out) if out.ndim == 0 else out

