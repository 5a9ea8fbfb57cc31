"""Metrics and baselines: raw-coordinate Fréchet distance, pairwise
diversity, the ancestral ε-sampler baseline, and closed-form stand-ins that
let the oracle impersonate experts and routers.

The Fréchet distance here is the 2-Wasserstein distance between Gaussians
fitted to raw sample coordinates — the comparison structure of an
Inception-feature FID without the feature network, so values are only
comparable within this package. Diversity is plain mean pairwise Euclidean
distance, optionally averaged within condition groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError, SpecError
from .objectives import Objective
from .oracle import MixtureOracle
from .rngstream import stream
from .schedules import Schedule, ScheduleKind, alpha_sigma

_EIGEN_DUST = 1e-10
_DEGENERATE_EIG = 1e-12
_REGULARIZER = 1e-8


@dataclass
class MetricReport:
    frechet: float
    diversity_mean_pairwise: float
    intra_condition_diversity: float | None = None
    router_accuracy_curve: list = field(default_factory=list)  # [(t, accuracy)]
    sample_count: int = 0
    covariance_regularized: bool = False


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    vals = _clip_dust(vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _clip_dust(eigenvalues: np.ndarray) -> np.ndarray:
    floor = -_EIGEN_DUST * max(1.0, float(np.max(np.abs(eigenvalues), initial=1.0)))
    if np.any(eigenvalues < floor):
        raise NumericError(f"matrix eigenvalues below dust tolerance: {eigenvalues.min()}")
    return np.maximum(eigenvalues, 0.0)


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """‖μa−μb‖² + tr(Σa + Σb − 2 (Σa Σb)^{1/2}) via eigendecomposition."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _psd_sqrt(cov_a)
    cross = root_a @ cov_b @ root_a  # symmetric PSD form of (cov_a cov_b)^{1/2}
    cross_eigs = _clip_dust(np.linalg.eigvalsh((cross + cross.T) / 2.0))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(cross_eigs)))
    if value < -_EIGEN_DUST:
        raise NumericError(f"Fréchet distance came out negative: {value}")
    return max(value, 0.0)


def _fit_moments(samples: np.ndarray):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise SpecError("samples must be (n, dim)")
    n, dim = samples.shape
    if n < dim + 1:
        raise SpecError(f"need at least dim+1={dim + 1} samples, got {n}")
    mu = samples.mean(axis=0)
    cov = np.cov(samples, rowvar=False).reshape(dim, dim)
    regularized = False
    if float(np.min(np.linalg.eigvalsh(cov))) < _DEGENERATE_EIG:
        cov = cov + _REGULARIZER * np.eye(dim)
        regularized = True
    return mu, cov, regularized


def frechet_distance_detailed(samples_a, samples_b):
    """(distance, covariance_regularized flag)."""
    mu_a, cov_a, reg_a = _fit_moments(samples_a)
    mu_b, cov_b, reg_b = _fit_moments(samples_b)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b), (reg_a or reg_b)


def frechet_distance(samples_a, samples_b) -> float:
    return frechet_distance_detailed(samples_a, samples_b)[0]


@dataclass(frozen=True)
class DiversityResult:
    mean_pairwise: float
    intra_condition: float | None
    skipped_groups: tuple


def _mean_pairwise(samples: np.ndarray) -> float:
    n = len(samples)
    sq = np.sum(samples * samples, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * samples @ samples.T
    iu = np.triu_indices(n, k=1)
    return float(np.mean(np.sqrt(np.maximum(d2[iu], 0.0))))


def diversity(samples, grouping=None) -> DiversityResult:
    """Mean Euclidean distance over unordered pairs; optionally the average
    of per-group means (groups with fewer than two samples are skipped and
    reported)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or len(samples) < 2:
        raise SpecError("diversity needs at least two samples")
    overall = _mean_pairwise(samples)
    if grouping is None:
        return DiversityResult(overall, None, ())
    grouping = np.asarray(grouping)
    if grouping.shape != (len(samples),):
        raise SpecError("grouping must label every sample")
    means, skipped = [], []
    for g in np.unique(grouping):
        members = samples[grouping == g]
        if len(members) < 2:
            skipped.append(g)
            continue
        means.append(_mean_pairwise(members))
    if not means:
        raise SpecError("every group was a singleton; intra diversity undefined")
    return DiversityResult(overall, float(np.mean(means)), tuple(skipped))


def native_ddpm_baseline(
    expert,
    steps: int,
    seed: int,
    batch: int = 1,
    cond=None,
    x0_clamp: float = 20.0,
    alpha_bar_floor: float = 1e-4,
) -> np.ndarray:
    """Ancestral ε-sampling over a subsampled discrete grid.

    Baseline-parity sampler for ε-experts on variance-preserving schedules;
    steps=1 performs a single posterior jump (valid, deliberately crude).
    """
    if expert.objective is not Objective.EPSILON:
        raise TypeError("native DDPM sampling needs an epsilon-prediction expert")
    sched: Schedule = expert.schedule
    grid = np.linspace(1.0, 0.0, steps + 1)
    alphas, sigmas = alpha_sigma(sched, grid)
    if np.max(np.abs(alphas**2 + sigmas**2 - 1.0)) > 1e-9:
        raise DomainError("ancestral sampling requires a variance-preserving schedule")
    alpha_bar = alphas**2

    dim = getattr(expert, "data_dim", None) or expert.config.data_dim
    x = np.empty((batch, dim))
    for i in range(batch):
        x[i] = stream(seed, "native-ddpm", "traj", i).standard_normal(dim)
    noise_rng = stream(seed, "native-ddpm", "steps")

    for i in range(steps):
        t_hi, ab_hi = float(grid[i]), float(alpha_bar[i])
        ab_lo = float(alpha_bar[i + 1])
        eps_hat = expert.predict(x, t_hi, cond=cond, use_ema=True)
        sqrt_ab = max(np.sqrt(ab_hi), np.sqrt(alpha_bar_floor))
        x0_hat = np.clip((x - np.sqrt(1.0 - ab_hi) * eps_hat) / sqrt_ab, -x0_clamp, x0_clamp)
        a_step = ab_hi / ab_lo
        beta = 1.0 - a_step
        denom = 1.0 - ab_hi
        mean = (np.sqrt(ab_lo) * beta / denom) * x0_hat + (
            np.sqrt(a_step) * (1.0 - ab_lo) / denom
        ) * x
        var = beta * (1.0 - ab_lo) / denom
        x = mean
        if var > 0.0:
            x = x + np.sqrt(var) * noise_rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite ancestral state at step {i}")
    return x


# -- oracle stand-ins for the sampler protocol ---------------------------------

_T_EDGE = 1e-9


class OracleVelocityExpert:
    """Closed-form optimal velocity presented as a sampler expert.

    component=None serves the marginal field; boundary t is nudged into the
    open interval where the conditional means are defined (the limits are
    continuous, so the nudge is exact to float precision).
    """

    objective = Objective.VELOCITY

    def __init__(self, oracle: MixtureOracle, component: int | None = None):
        if oracle.schedule.kind is not ScheduleKind.LINEAR:
            raise SpecError("velocity stand-ins need a linear-schedule oracle")
        self.oracle = oracle
        self.component = component
        self.schedule = oracle.schedule
        self.data_dim = oracle.dim

    def predict(self, x, t, cond=None, use_ema=True):
        t = min(max(float(t), _T_EDGE), 1.0 - _T_EDGE)
        if self.component is None:
            return self.oracle.optimal_velocity_marginal(x, t)
        return self.oracle.optimal_velocity_component(self.component, x, t)


class OracleEpsilonExpert:
    """Closed-form optimal ε-predictor for one component, sampler-shaped."""

    objective = Objective.EPSILON

    def __init__(self, oracle: MixtureOracle, component: int):
        self.oracle = oracle
        self.component = component
        self.schedule = oracle.schedule
        self.data_dim = oracle.dim

    def predict(self, x, t, cond=None, use_ema=True):
        t = min(max(float(t), _T_EDGE), 1.0 - _T_EDGE)
        return self.oracle.optimal_eps_component(self.component, x, t)


class OracleRouter:
    """Exact Bayes posterior presented as a router."""

    def __init__(self, oracle: MixtureOracle):
        self.oracle = oracle
        self.n_experts = oracle.n_components

    def probabilities(self, x, t):
        return self.oracle.posterior(x, float(t))


class UniformRouter:
    """Constant router; the K=1 case makes any single model sampleable."""

    def __init__(self, k: int):
        self.n_experts = k

    def probabilities(self, x, t):
        n = 1 if np.asarray(x).ndim == 1 else len(x)
        return np.full((n, self.n_experts), 1.0 / self.n_experts)


def router_accuracy_curve(router, points, labels, schedule, seed, ts=(0.05, 0.25, 0.5, 0.75)):
    """Top-1 agreement with the clustering labels at a few noise levels."""
    rng = stream(seed, "router-probe")
    curve = []
    for t in ts:
        a, s = alpha_sigma(schedule, float(t))
        x_t = a * points + s * rng.standard_normal(points.shape)
        pred = np.argmax(np.atleast_2d(router.probabilities(x_t, float(t))), axis=1)
        curve.append((float(t), float(np.mean(pred == labels))))
    return curve
