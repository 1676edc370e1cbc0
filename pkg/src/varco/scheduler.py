"""Compression-ratio schedules r(t) >= 1, nonincreasing over training."""

from __future__ import annotations

import math
from dataclasses import dataclass

KINDS = ("fixed", "step", "linear", "exponential", "clamped-linear")


@dataclass(frozen=True)
class SchedulerSpec:
    """Ratio policy over ``horizon`` training steps.

    ``step`` and ``exponential`` are defined on the communicated fraction
    ``1 / r`` (it grows over training) and mapped back to a ratio:

    * fixed:          r = c_max
    * step:           1/r = 1/c_max + step * t
    * linear:         r = max(c_max - slope * t, c_min)
    * exponential:    1/r = base ** -(horizon - t + 1)
    * clamped-linear: r = c_max - slope * (c_max - c_min) * t / horizon

    Every kind is finally clamped to [c_min, c_max].
    """

    kind: str = "clamped-linear"
    c_max: float = 128.0
    c_min: float = 1.0
    slope: float = 5.0
    step: float = 0.01
    base: float = 1.05
    horizon: int = 300

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheduler kind {self.kind!r}; expected one of {KINDS}")
        if self.c_min < 1:
            raise ValueError(f"c_min must be >= 1, got {self.c_min}")
        if self.c_max < self.c_min:
            raise ValueError(f"c_max ({self.c_max}) must be >= c_min ({self.c_min})")
        if self.horizon < 1:
            raise ValueError("horizon must be at least one step")
        if self.kind == "exponential" and self.base <= 0:
            raise ValueError("exponential base must be positive")


def fixed(ratio: float, horizon: int = 300) -> SchedulerSpec:
    return SchedulerSpec("fixed", c_max=ratio, c_min=1.0, horizon=horizon)


def _raw(spec: SchedulerSpec, t: int) -> float:
    if spec.kind == "fixed":
        return spec.c_max
    if spec.kind == "linear":
        return max(spec.c_max - spec.slope * t, spec.c_min)
    if spec.kind == "clamped-linear":
        return spec.c_max - (spec.c_max - spec.c_min) * (spec.slope * t / spec.horizon)
    if spec.kind == "step":
        frac = 1.0 / spec.c_max + spec.step * t
        return math.inf if frac <= 0 else 1.0 / frac
    # exponential: ratio = base ** (horizon - t + 1), computed in log space
    log_r = (spec.horizon - t + 1) * math.log(spec.base)
    return math.exp(min(log_r, 700.0))


def ratio_at(spec: SchedulerSpec, t: int) -> float:
    spec.validate()
    if not 0 <= t <= spec.horizon:
        raise ValueError(f"step {t} outside [0, {spec.horizon}]")
    return min(max(_raw(spec, t), spec.c_min), spec.c_max)


@dataclass(frozen=True)
class MonotoneReport:
    ok: bool
    first_violation: int | None = None
    message: str = ""


def validate_monotone(spec: SchedulerSpec, ratio_fn=None) -> MonotoneReport:
    """Check nonincreasing and within [c_min, c_max] at every t in [0, horizon].

    ``ratio_fn(t)`` replaces the built-in formula when given, so hand-built
    schedules can be checked against a SchedulerSpec's bounds.
    """
    if ratio_fn is None:
        spec.validate()

        def ratio_fn(t):
            return ratio_at(spec, t)

    prev = math.inf
    for t in range(spec.horizon + 1):
        r = ratio_fn(t)
        if not (spec.c_min <= r <= spec.c_max):
            return MonotoneReport(False, t, f"r({t})={r} outside [{spec.c_min}, {spec.c_max}]")
        if r > prev:
            return MonotoneReport(False, t, f"r({t})={r} > r({t - 1})={prev}")
        prev = r
    return MonotoneReport(True)
