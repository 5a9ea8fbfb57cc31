"""Schedule-aware conversion of ε-predictions to velocity predictions.

The pipeline is pure algebra: invert the forward map to estimate the clean
sample, then differentiate the schedule path through that estimate,

    x̂_0 = (x_t − σ_t ε̂) / α_t,      v = (dα/dt) x̂_0 + (dσ/dt) ε̂,

which for the linear path collapses to v = ε̂ − x̂_0. Three safeguards keep
the algebra stable where α_t → 0:

    * x̂_0 is clamped elementwise to [−r, r] (r = 20 latent-style, 5
      pixel-style),
    * the divisor is floored at α_safe = max(α_t, 0.01),
    * converted velocities are dampened by s(t) at elevated noise.

Two incompatible s(t) recipes circulate for the same method — a capped
sigmoid and a piecewise table. Both are implemented; note the sigmoid's
min(1, ·) cap makes it identically 1.0 on all of [0, 1] (the uncapped
expression only drops below 1 past t ≈ 1.11), so Piecewise is the default
and the discrepancy is surfaced in reports. Every safeguard is individually
toggleable (``ConversionConfig.exact()``) so oracle tests can exercise the
raw identities.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, SpecError
from .io_utils import write_csv
from .schedules import DERIVATIVE_H, Schedule, alpha_sigma, schedule_derivatives


class ScalingMode(enum.Enum):
    SIGMOID = "sigmoid"
    PIECEWISE = "piecewise"
    OFF = "off"


@dataclass(frozen=True)
class ConversionConfig:
    """Safeguard settings. clamp_range=inf and alpha_floor=0 disable those
    safeguards; scaling_mode OFF disables dampening."""

    clamp_range: float = 20.0
    alpha_floor: float = 0.01
    scaling_mode: ScalingMode = ScalingMode.PIECEWISE
    derivative_h: float = DERIVATIVE_H

    def __post_init__(self):
        if not self.clamp_range > 0.0:
            raise SpecError("clamp_range must be positive")
        if not (0.0 <= self.alpha_floor < 1.0):
            raise SpecError("alpha_floor must lie in [0, 1)")
        if not self.derivative_h > 0.0:
            raise SpecError("derivative_h must be positive")

    @staticmethod
    def exact() -> "ConversionConfig":
        """All safeguards off: pure inversion and path-derivative algebra."""
        return ConversionConfig(
            clamp_range=math.inf, alpha_floor=0.0, scaling_mode=ScalingMode.OFF
        )

    @staticmethod
    def pixel() -> "ConversionConfig":
        return ConversionConfig(clamp_range=5.0)


@dataclass
class ConversionAudit:
    """Per-call safeguard activity, dumped as CSV alongside sampling runs."""

    records: list = field(default_factory=list)

    def record(self, t: float, n: int, clamp_rate: float, floor_rate: float, scale: float):
        self.records.append((float(t), int(n), clamp_rate, floor_rate, scale))

    def to_csv(self, path) -> None:
        write_csv(
            path,
            ["t", "n_values", "clamp_hit_rate", "alpha_floor_rate", "scale_applied"],
            self.records,
        )


def adaptive_scale(t: float, mode: ScalingMode) -> float:
    """Velocity dampening factor s(t) ∈ (0, 1]."""
    if mode is ScalingMode.OFF:
        return 1.0
    if mode is ScalingMode.SIGMOID:
        if t > 0.85:
            return min(1.0, 15.0 / (1.0 + math.exp(10.0 * (t - 0.85))))
        return 1.0
    if t > 0.85:
        return 0.88
    if t > 0.6:
        return 0.93
    return 0.96


def recover_x0(
    x_t,
    eps_pred,
    t,
    schedule: Schedule,
    cfg: ConversionConfig = ConversionConfig(),
    audit: ConversionAudit | None = None,
):
    """Estimate the clean sample from an ε-prediction.

    x̂_0 = (x_t − σ_t ε̂) / max(α_t, floor), clamped to [−r, r].
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(eps_pred))):
        raise NumericError("recover_x0 received non-finite inputs")
    a, s = alpha_sigma(schedule, t)
    a_safe = np.maximum(a, cfg.alpha_floor)
    if x_t.ndim > 1 and np.ndim(a_safe) == 1:
        a_safe = np.asarray(a_safe)[:, None]
        s = np.asarray(s)[:, None]
    x0_hat = (x_t - s * eps_pred) / a_safe
    r = cfg.clamp_range
    clamp_rate = 0.0
    if np.isfinite(r):
        clamp_rate = float(np.mean(np.abs(x0_hat) > r))
        x0_hat = np.clip(x0_hat, -r, r)
    if audit is not None:
        floor_rate = float(np.mean(np.asarray(a) < cfg.alpha_floor))
        audit.record(float(np.mean(t)), x0_hat.size, clamp_rate, floor_rate, math.nan)
    return x0_hat


def eps_to_velocity(
    x_t,
    eps_pred,
    t,
    schedule: Schedule,
    cfg: ConversionConfig = ConversionConfig(),
    audit: ConversionAudit | None = None,
):
    """Convert an ε-prediction into a path velocity at time t.

    v = (dα/dt) x̂_0 + (dσ/dt) ε̂, then dampened by s(t). With safeguards off
    and a linear schedule this is exactly ε̂ − x̂_0, the flow-matching drift.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    x0_hat = recover_x0(x_t, eps_pred, t, schedule, cfg)
    da, ds = schedule_derivatives(schedule, t, h=cfg.derivative_h)
    if x_t.ndim > 1 and np.ndim(da) == 1:
        da = np.asarray(da)[:, None]
        ds = np.asarray(ds)[:, None]
    v = da * x0_hat + ds * eps_pred
    if np.ndim(t) == 0:
        scale = adaptive_scale(float(t), cfg.scaling_mode)
    else:
        scale = np.array([adaptive_scale(float(ti), cfg.scaling_mode) for ti in np.asarray(t)])
        if x_t.ndim > 1:
            scale = scale[:, None]
    v = scale * v
    if audit is not None:
        a, _ = alpha_sigma(schedule, t)
        r = cfg.clamp_range
        clamp_rate = float(np.mean(np.abs(x0_hat) >= r)) if np.isfinite(r) else 0.0
        floor_rate = float(np.mean(np.asarray(a) < cfg.alpha_floor))
        audit.record(float(np.mean(t)), v.size, clamp_rate, floor_rate, float(np.mean(scale)))
    return v
