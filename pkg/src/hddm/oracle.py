"""Closed-form ground truth for Gaussian-mixture data.

For data drawn from Σ_k w_k N(μ_k, Σ_k) and corrupted by a schedule,
x_t | k ~ N(α_t μ_k, α_t² Σ_k + σ_t² I), so posteriors and the conditional
means E[x_0 | x_t, k], E[ε | x_t, k] have exact expressions. These back
every algebraic claim in the package: the posterior-weighted decomposition
of the marginal velocity, optimality of converted ε-predictions, and the
sampler's discretization behaviour.

Velocity queries (E[ε − x_0 | x_t], the flow-matching ODE drift) are only
meaningful on the linear interpolation path and require a linear-schedule
oracle; ε/x_0 queries follow whatever schedule the oracle was built with.

Densities accumulate in log space so small-t posteriors cannot underflow.
Covariances are diagonal by default ((K, dim) variance rows); full PD
matrices ((K, dim, dim)) are supported via solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError, SpecError
from .schedules import Schedule, ScheduleKind, alpha_sigma

_LOG_2PI = float(np.log(2.0 * np.pi))


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return m.squeeze(axis) + np.log(np.sum(np.exp(a - m), axis=axis))


@dataclass(frozen=True)
class MixtureOracle:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray = field(repr=False)
    schedule: Schedule = field(default_factory=Schedule.linear)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        if mu.ndim != 2:
            raise SpecError("means must be (K, dim)")
        k, dim = mu.shape
        if w.shape != (k,):
            raise SpecError("weights must be (K,)")
        if np.any(w <= 0.0) or abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise SpecError("weights must be positive and sum to 1 within 1e-12")
        if cov.shape == (k, dim):
            if np.any(cov <= 0.0):
                raise SpecError("diagonal variances must be positive")
        elif cov.shape == (k, dim, dim):
            for j in range(k):
                try:
                    np.linalg.cholesky(cov[j])
                except np.linalg.LinAlgError:
                    raise SpecError(f"covariance {j} is not positive definite") from None
        else:
            raise SpecError("covariances must be (K, dim) diagonals or (K, dim, dim)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    # -- basic facts ------------------------------------------------------

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def diagonal(self) -> bool:
        return self.covariances.ndim == 2

    def data_moments(self):
        """Exact mean and covariance of the mixture itself."""
        mean = self.weights @ self.means
        centered = self.means - mean
        cov = np.einsum("k,ki,kj->ij", self.weights, centered, centered)
        if self.diagonal:
            cov += np.diag(self.weights @ self.covariances)
        else:
            cov += np.einsum("k,kij->ij", self.weights, self.covariances)
        return mean, cov

    # -- shared plumbing ---------------------------------------------------

    def _as_points(self, x_t):
        arr = np.asarray(x_t, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ShapeError(f"x_t must be ({self.dim},) or (n, {self.dim})")
        return arr, single

    def _coeffs(self, t, n):
        a, s = alpha_sigma(self.schedule, t)
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), (n,))
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (n,))
        return a, s

    def _check_interior(self, t):
        arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise DomainError("conditional-mean queries require t in the open interval (0, 1)")

    # -- posteriors --------------------------------------------------------

    def posterior(self, x_t, t):
        """Exact Bayes posterior p(k | x_t) under the oracle's schedule.

        Defined on t ∈ [0, 1]; at t = 1 the observation carries no signal
        (α = 0) and the computation degenerates to the prior weights.
        """
        x, single = self._as_points(x_t)
        n = x.shape[0]
        a, s = self._coeffs(t, n)
        log_post = self._log_component_likelihoods(x, a, s) + np.log(self.weights)[None, :]
        log_post -= _logsumexp(log_post, axis=1)[:, None]
        post = np.exp(log_post)
        return post[0] if single else post

    def _log_component_likelihoods(self, x, a, s):
        """(n, K) log N(x; α μ_k, α² Σ_k + σ² I)."""
        n = x.shape[0]
        k = self.n_components
        a2 = (a * a)[:, None]
        s2 = (s * s)[:, None]
        if self.diagonal:
            var = a2[:, :, None] * self.covariances[None, :, :] + s2[:, :, None]  # (n, K, dim)
            diff = x[:, None, :] - a[:, None, None] * self.means[None, :, :]
            return -0.5 * np.sum(diff * diff / var + np.log(var) + _LOG_2PI, axis=2)
        out = np.empty((n, k))
        for j in range(k):
            for i, (ai, si) in enumerate(zip(a, s)):
                m = ai * ai * self.covariances[j] + si * si * np.eye(self.dim)
                chol = np.linalg.cholesky(m)
                diff = x[i] - ai * self.means[j]
                z = np.linalg.solve(chol, diff)
                logdet = 2.0 * np.sum(np.log(np.diag(chol)))
                out[i, j] = -0.5 * (z @ z + logdet + self.dim * _LOG_2PI)
        return out

    # -- per-component conditional means ------------------------------------

    def _component_means(self, x, a, s, k):
        """E[x0 | x_t, k] and E[eps | x_t, k], each (n, dim)."""
        mu = self.means[k]
        if self.diagonal:
            var = self.covariances[k][None, :]  # (1, dim)
            denom = (a * a)[:, None] * var + (s * s)[:, None]
            resid = x - a[:, None] * mu[None, :]
            e_x0 = mu[None, :] + (a[:, None] * var / denom) * resid
            e_eps = (s[:, None] / denom) * resid
            return e_x0, e_eps
        e_x0 = np.empty_like(x)
        e_eps = np.empty_like(x)
        for i, (ai, si) in enumerate(zip(a, s)):
            m = ai * ai * self.covariances[k] + si * si * np.eye(self.dim)
            resid = x[i] - ai * mu
            solved = np.linalg.solve(m, resid)
            e_x0[i] = mu + ai * (self.covariances[k] @ solved)
            e_eps[i] = si * solved
        return e_x0, e_eps

    def optimal_x0_component(self, k: int, x_t, t):
        """E[x_0 | x_t, component k] under the oracle's schedule."""
        self._check_interior(t)
        x, single = self._as_points(x_t)
        a, s = self._coeffs(t, x.shape[0])
        e_x0, _ = self._component_means(x, a, s, k)
        return e_x0[0] if single else e_x0

    def optimal_eps_component(self, k: int, x_t, t):
        """E[ε | x_t, component k]: the MSE-optimal ε-predictor for shard k."""
        self._check_interior(t)
        x, single = self._as_points(x_t)
        a, s = self._coeffs(t, x.shape[0])
        _, e_eps = self._component_means(x, a, s, k)
        return e_eps[0] if single else e_eps

    # -- velocities (linear path only) ---------------------------------------

    def _require_linear(self):
        if self.schedule.kind is not ScheduleKind.LINEAR:
            raise DomainError(
                "flow-matching velocities live on the linear path; "
                "construct the oracle with Schedule.linear()"
            )

    def optimal_velocity_component(self, k: int, x_t, t):
        """E[ε − x_0 | x_t, component k]: the optimal velocity for shard k."""
        self._require_linear()
        self._check_interior(t)
        x, single = self._as_points(x_t)
        a, s = self._coeffs(t, x.shape[0])
        e_x0, e_eps = self._component_means(x, a, s, k)
        v = e_eps - e_x0
        return v[0] if single else v

    def optimal_velocity_marginal(self, x_t, t):
        """Marginal drift: posterior-weighted combination of component velocities."""
        self._require_linear()
        self._check_interior(t)
        x, single = self._as_points(x_t)
        a, s = self._coeffs(t, x.shape[0])
        post = self.posterior(x, t)
        v = np.zeros_like(x)
        for k in range(self.n_components):
            e_x0, e_eps = self._component_means(x, a, s, k)
            v += post[:, k : k + 1] * (e_eps - e_x0)
        return v[0] if single else v
