"""Noise schedules (α_t, σ_t), their time derivatives, and timestep mapping.

A schedule defines the forward corruption x_t = α_t x_0 + σ_t ε over
continuous time t ∈ [0, 1], with t=0 clean data and t=1 pure noise.

Kinds:
    Linear      α_t = 1 − t,        σ_t = t          (flow-matching path)
    Cosine      α_t = cos(πt/2),    σ_t = sin(πt/2)  (variance preserving)
    VP-generic  tabulated (t, α, σ) knots, linearly interpolated

Derivatives are central finite differences with h = 1e−4; second-order
one-sided stencils take over within h of the boundaries, where the central
formula would leave [0, 1]. Linear returns the exact (−1, +1).

Discrete timesteps: index = round(999·t), rounding half away from zero,
clamped to {0..999}. The rounding mode is fixed so serialized models are
portable across platforms.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SpecError

MAX_INDEX = 999
DERIVATIVE_H = 1e-4

# Snap tolerance for grid dust just outside [0, 1] (e.g. 1 + 2e-16 from
# accumulated linspace arithmetic). Anything further out is a domain error.
_EDGE_SNAP = 1e-9


class ScheduleKind(enum.Enum):
    LINEAR = 0
    COSINE = 1
    VP_GENERIC = 2

    @property
    def tag(self) -> int:
        """One-byte tag used in checkpoint headers."""
        return self.value


def kind_from_tag(tag: int) -> ScheduleKind:
    try:
        return ScheduleKind(tag)
    except ValueError:
        raise SpecError(f"unknown schedule tag {tag}") from None


@dataclass(frozen=True)
class Schedule:
    """Immutable schedule descriptor; safe to share across threads."""

    kind: ScheduleKind
    knots_t: np.ndarray | None = field(default=None, repr=False)
    knots_alpha: np.ndarray | None = field(default=None, repr=False)
    knots_sigma: np.ndarray | None = field(default=None, repr=False)

    @staticmethod
    def linear() -> "Schedule":
        return Schedule(ScheduleKind.LINEAR)

    @staticmethod
    def cosine() -> "Schedule":
        return Schedule(ScheduleKind.COSINE)

    @staticmethod
    def vp_generic(knots_t, knots_alpha, knots_sigma) -> "Schedule":
        """Tabulated schedule; linear interpolation between knots.

        Knots must start at t=0 with (α, σ) = (1, 0), end at t=1, have
        strictly increasing t, nonincreasing α and nondecreasing σ.
        """
        t = np.asarray(knots_t, dtype=np.float64)
        a = np.asarray(knots_alpha, dtype=np.float64)
        s = np.asarray(knots_sigma, dtype=np.float64)
        if t.ndim != 1 or t.shape != a.shape or t.shape != s.shape or t.size < 2:
            raise SpecError("VP-generic knots must be three equal-length 1-D arrays")
        if not (np.all(np.diff(t) > 0) and abs(t[0]) < 1e-12 and abs(t[-1] - 1.0) < 1e-12):
            raise SpecError("knot times must increase strictly from 0 to 1")
        if abs(a[0] - 1.0) > 1e-12 or abs(s[0]) > 1e-12:
            raise SpecError("VP-generic schedule must start at (alpha, sigma) = (1, 0)")
        if np.any(np.diff(a) > 1e-12) or np.any(np.diff(s) < -1e-12):
            raise SpecError("alpha must be nonincreasing and sigma nondecreasing")
        return Schedule(ScheduleKind.VP_GENERIC, t, a, s)

    def alpha_sigma(self, t):
        return alpha_sigma(self, t)

    def derivatives(self, t, h: float = DERIVATIVE_H):
        return schedule_derivatives(self, t, h=h)


def _check_t(t):
    """Validate t ∈ [0, 1] (snapping boundary dust); returns float64 array."""
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("timestep t must be finite")
    if np.any(arr < -_EDGE_SNAP) or np.any(arr > 1.0 + _EDGE_SNAP):
        bad = arr[(arr < -_EDGE_SNAP) | (arr > 1.0 + _EDGE_SNAP)].flat[0]
        raise DomainError(f"timestep t={bad} outside [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def alpha_sigma(schedule: Schedule, t):
    """Schedule coefficients (α_t, σ_t). Accepts scalars or arrays."""
    arr = _check_t(t)
    if schedule.kind is ScheduleKind.LINEAR:
        a, s = 1.0 - arr, arr.copy()
    elif schedule.kind is ScheduleKind.COSINE:
        half_pi_t = (math.pi / 2.0) * arr
        a, s = np.cos(half_pi_t), np.sin(half_pi_t)
    else:
        a = np.interp(arr, schedule.knots_t, schedule.knots_alpha)
        s = np.interp(arr, schedule.knots_t, schedule.knots_sigma)
    if np.isscalar(t) or np.ndim(t) == 0:
        return float(a), float(s)
    return a, s


def schedule_derivatives(schedule: Schedule, t, h: float = DERIVATIVE_H):
    """(dα/dt, dσ/dt) via finite differences (Linear: exact −1, +1).

    Interior points use the central stencil (f(t+h) − f(t−h)) / 2h; points
    within h of either boundary use the second-order one-sided stencil
    (−3f(t) + 4f(t±h) − f(t±2h)) / ±2h so probes never leave [0, 1].
    """
    arr = _check_t(t)
    scalar = np.isscalar(t) or np.ndim(t) == 0
    if schedule.kind is ScheduleKind.LINEAR:
        da = np.full_like(arr, -1.0)
        ds = np.full_like(arr, 1.0)
        return (float(da), float(ds)) if scalar else (da, ds)

    def both(ts):
        return alpha_sigma(schedule, ts)

    da = np.empty_like(arr)
    ds = np.empty_like(arr)
    lo = arr < h
    hi = arr > 1.0 - h
    mid = ~(lo | hi)
    if np.any(mid):
        ap, sp = both(arr[mid] + h)
        am, sm = both(arr[mid] - h)
        da[mid] = (ap - am) / (2.0 * h)
        ds[mid] = (sp - sm) / (2.0 * h)
    if np.any(lo):
        a0, s0 = both(arr[lo])
        a1, s1 = both(arr[lo] + h)
        a2, s2 = both(arr[lo] + 2.0 * h)
        da[lo] = (-3.0 * a0 + 4.0 * a1 - a2) / (2.0 * h)
        ds[lo] = (-3.0 * s0 + 4.0 * s1 - s2) / (2.0 * h)
    if np.any(hi):
        a0, s0 = both(arr[hi])
        a1, s1 = both(arr[hi] - h)
        a2, s2 = both(arr[hi] - 2.0 * h)
        da[hi] = (3.0 * a0 - 4.0 * a1 + a2) / (2.0 * h)
        ds[hi] = (3.0 * s0 - 4.0 * s1 + s2) / (2.0 * h)
    if scalar:
        return float(da), float(ds)
    return da, ds


def to_discrete_index(t):
    """round(999·t) with half away from zero, clamped to {0..999}.

    Monotone in t and deterministic; this is the embedding-table index for
    both objectives, so continuous-time experts reuse discrete embeddings.
    """
    arr = _check_t(t)
    idx = np.clip(np.floor(MAX_INDEX * arr + 0.5).astype(np.int64), 0, MAX_INDEX)
    if np.isscalar(t) or np.ndim(t) == 0:
        return int(idx)
    return idx


def is_variance_preserving(schedule: Schedule, t, tol: float = 1e-12) -> bool:
    """True when α_t² + σ_t² = 1 within tol at every queried t."""
    a, s = alpha_sigma(schedule, t)
    return bool(np.all(np.abs(np.square(a) + np.square(s) - 1.0) <= tol))
