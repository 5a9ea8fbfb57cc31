"""Training targets, MSE loss, and the implicit timestep-weighting algebra.

Two objectives coexist:

    Epsilon   corrupt with the expert's schedule, x_t = α_t x_0 + σ_t ε,
              and regress the noise ε.
    Velocity  corrupt along the linear interpolation path,
              x_t = (1−t) x_0 + t ε, and regress the path velocity ε − x_0.

Velocity training is pinned to the linear path; the diffusion-style
v-parameterization αε − σx_0 appears here only inside the weighting
analysis (``empirical_weighting_check``) and is never a training target.

Both objectives reduce to clean-sample estimation error with different
time weights: w_eps = α²/σ² and w_v = 1/σ², so their ratio 1/α² upweights
velocity experts at high noise. ``weighting_profile`` tabulates the
closed-form curves and ``empirical_weighting_check`` verifies the
per-sample identities on random predictions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, SpecError
from .io_utils import write_csv
from .schedules import Schedule, ScheduleKind, alpha_sigma


class Objective(enum.Enum):
    EPSILON = 0
    VELOCITY = 1

    @property
    def tag(self) -> int:
        """One-byte tag used in checkpoint headers."""
        return self.value


def objective_from_tag(tag: int) -> Objective:
    try:
        return Objective(tag)
    except ValueError:
        raise SpecError(f"unknown objective tag {tag}") from None


@dataclass(frozen=True)
class NoisySample:
    """One corrupted batch: x_t plus the regression target for its objective.

    Arrays are (batch, dim); t is (batch,). Single vectors are promoted to a
    batch of one.
    """

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    target: np.ndarray
    objective: Objective


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"expected vector or (batch, dim) array, got shape {arr.shape}")
    return arr


def make_noisy(
    x0,
    t,
    objective: Objective,
    schedule: Schedule,
    rng: np.random.Generator,
    eps=None,
) -> NoisySample:
    """Corrupt x0 at time t and build the matching regression target.

    eps may be passed explicitly (tests, paired comparisons); otherwise it is
    drawn standard normal from rng.
    """
    x0 = _as_batch(x0)
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise DomainError("timestep t outside [0, 1]")
    eps = rng.standard_normal(x0.shape) if eps is None else _as_batch(eps)
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")

    if objective is Objective.EPSILON:
        a, s = alpha_sigma(schedule, t_arr)
        x_t = a[:, None] * x0 + s[:, None] * eps
        target = eps
    else:
        if schedule.kind is not ScheduleKind.LINEAR:
            raise SpecError("velocity objective trains on the linear interpolation path")
        x_t = (1.0 - t_arr)[:, None] * x0 + t_arr[:, None] * eps
        target = eps - x0
    return NoisySample(x0=x0, eps=eps, t=t_arr, x_t=x_t, target=target, objective=objective)


def loss_and_grad_target(prediction, sample: NoisySample):
    """Mean-per-element squared error and its gradient w.r.t. the prediction.

    loss = mean((pred − target)²); grad = 2 (pred − target) / n_elements.
    Mean (not sum) keeps loss magnitudes comparable across data dimensions.
    """
    pred = _as_batch(prediction)
    if pred.shape != sample.target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {sample.target.shape}")
    diff = pred - sample.target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad


@dataclass(frozen=True)
class WeightingProfile:
    """Closed-form implicit weights over a timestep grid.

    w_eps = α²/σ², w_v = 1/σ², ratio = w_v/w_eps = 1/α².
    """

    t: np.ndarray
    w_eps: np.ndarray
    w_v: np.ndarray
    ratio: np.ndarray

    def to_csv(self, path) -> None:
        write_csv(
            path,
            ["t", "w_eps", "w_v", "ratio"],
            zip(self.t.tolist(), self.w_eps.tolist(), self.w_v.tolist(), self.ratio.tolist()),
        )


def weighting_profile(schedule: Schedule, grid) -> WeightingProfile:
    t = np.asarray(grid, dtype=np.float64)
    a, s = alpha_sigma(schedule, t)
    a = np.atleast_1d(a)
    s = np.atleast_1d(s)
    if np.any(s == 0.0) or np.any(a == 0.0):
        raise DomainError("weighting profile undefined where alpha or sigma vanishes")
    return WeightingProfile(
        t=np.atleast_1d(t),
        w_eps=(a * a) / (s * s),
        w_v=1.0 / (s * s),
        ratio=1.0 / (a * a),
    )


@dataclass(frozen=True)
class WeightingCheck:
    """Measured per-sample identity ratios at one timestep.

    eps_ratio_samples[i] = ‖ε̂−ε‖² / ‖x̂0^(ε)−x0‖² (expected α²/σ²)
    v_ratio_samples[i]   = ‖v̂−v‖² / ‖x̂0^(v)−x0‖²  (expected 1/σ², VP only)
    """

    eps_ratio: float
    eps_ratio_samples: np.ndarray
    v_ratio: float | None
    v_ratio_samples: np.ndarray | None


def empirical_weighting_check(
    schedule: Schedule, t: float, batch: int, rng: np.random.Generator, dim: int = 2
) -> WeightingCheck:
    """Measure the loss-equivalence ratios on arbitrary random predictions.

    Draws (x0, ε) pairs plus unrelated random predictions and evaluates the
    error identities sample by sample; the ratios are algebraic, so any
    prediction works. The v-form needs the variance-preserving recovery
    x̂0 = α x_t − σ v̂ and is reported only when α²+σ² = 1 at this t.
    """
    a, s = alpha_sigma(schedule, float(t))
    if s == 0.0 or a == 0.0:
        raise DomainError("identity ratios undefined where alpha or sigma vanishes")
    x0 = rng.standard_normal((batch, dim))
    eps = rng.standard_normal((batch, dim))
    x_t = a * x0 + s * eps

    eps_hat = rng.standard_normal((batch, dim))
    x0_hat_eps = (x_t - s * eps_hat) / a
    eps_err = np.sum((eps_hat - eps) ** 2, axis=1)
    rec_err = np.sum((x0_hat_eps - x0) ** 2, axis=1)
    eps_samples = eps_err / rec_err

    v_samples = None
    if abs(a * a + s * s - 1.0) <= 1e-12:
        v_target = a * eps - s * x0
        v_hat = rng.standard_normal((batch, dim))
        x0_hat_v = a * x_t - s * v_hat
        v_err = np.sum((v_hat - v_target) ** 2, axis=1)
        v_rec = np.sum((x0_hat_v - x0) ** 2, axis=1)
        v_samples = v_err / v_rec

    return WeightingCheck(
        eps_ratio=float(np.mean(eps_samples)),
        eps_ratio_samples=eps_samples,
        v_ratio=None if v_samples is None else float(np.mean(v_samples)),
        v_ratio_samples=v_samples,
    )
