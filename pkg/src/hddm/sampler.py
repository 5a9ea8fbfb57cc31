"""Router-weighted fusion of heterogeneous experts and Euler ODE sampling.

Per step at time t: the router scores p(k | x_t, t); a selection strategy
masks those scores (single best expert, the top k, all of them, or a
deterministic objective-family switch at a time threshold) and renormalizes;
every selected ε-expert's prediction passes through schedule-aware
conversion while velocity experts contribute as-is; the convex combination
is the fused drift. States integrate on the uniform grid t = 1 → 0 with
x_{t−Δ} = x_t − Δ·u_t(x_t).

Classifier-free guidance happens after fusion: the conditional and
null-conditioned fused velocities reuse one set of router weights (the
router never sees the condition), and u = u_uncond + s·(u_cond − u_uncond).

Experts and routers are duck-typed: an expert exposes ``objective``,
``schedule`` and ``predict(x, t, cond, use_ema)``; a router exposes
``probabilities(x, t)``. Closed-form oracle stand-ins therefore plug in
anywhere a trained model does.

Per-trajectory noise comes from streams named by (seed, trajectory index),
so a batch gives identical results at any parallelism. Integration itself
is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conversion import ConversionAudit, ConversionConfig, eps_to_velocity
from .errors import NumericError, SelectionError, SpecError
from .io_utils import write_csv
from .objectives import Objective
from .rngstream import stream


@dataclass(frozen=True)
class Top1:
    pass


@dataclass(frozen=True)
class TopK:
    k: int


@dataclass(frozen=True)
class Full:
    pass


@dataclass(frozen=True)
class Threshold:
    """Deterministic objective-family switch at native time tau.

    Default order sends high-noise steps (t > tau) to velocity experts and
    the rest to ε-experts; ddpm_first reverses it for the ordering study.
    Weights inside the active family follow the router if one is supplied,
    else they are uniform.
    """

    tau: float
    ddpm_first: bool = False


Selection = Top1 | TopK | Full | Threshold


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 7.5
    selection: Selection = field(default_factory=Full)
    seed: int = 0
    batch: int = 1
    conversion: ConversionConfig = field(default_factory=ConversionConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise SpecError("steps must be >= 1")
        if self.cfg_scale < 0.0:
            raise SpecError("cfg_scale must be >= 0")
        if self.batch < 1:
            raise SpecError("batch must be >= 1")
        if isinstance(self.selection, TopK) and self.selection.k < 1:
            raise SpecError("TopK needs k >= 1")
        if isinstance(self.selection, Threshold) and not 0.0 <= self.selection.tau <= 1.0:
            raise SpecError("threshold tau must lie in [0, 1]")

    @staticmethod
    def conversion_study(**overrides) -> "SamplerConfig":
        """The conversion-experiment regime: lighter guidance, more steps."""
        base = dict(steps=75, cfg_scale=6.0)
        base.update(overrides)
        return SamplerConfig(**base)


@dataclass
class Trajectory:
    """One sampling run: states on the time grid plus per-step fusion facts."""

    states: np.ndarray  # (steps+1, batch, dim)
    ts: np.ndarray  # (steps+1,)
    weights: np.ndarray  # (steps, batch, K)
    experts_used: np.ndarray  # (steps, K) bool
    velocity_norms: np.ndarray  # (steps,) mean ||u|| per step
    clamp_rates: np.ndarray  # (steps,) conversion clamp hit-rate per step

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def audit_to_csv(self, path) -> None:
        k = self.weights.shape[2]
        header = ["step", "t", "experts_used"] + [f"w{j}" for j in range(k)] + [
            "velocity_norm",
            "clamp_hit_rate",
        ]
        rows = []
        for i in range(len(self.velocity_norms)):
            used = "|".join(str(j) for j in np.flatnonzero(self.experts_used[i]))
            mean_w = self.weights[i].mean(axis=0)
            rows.append(
                [i, float(self.ts[i]), used]
                + [float(w) for w in mean_w]
                + [float(self.velocity_norms[i]), float(self.clamp_rates[i])]
            )
        write_csv(path, header, rows)


def save_samples_csv(path, samples: np.ndarray, cond=None) -> None:
    samples = np.asarray(samples)
    dim = samples.shape[1]
    header = [f"x{i}" for i in range(dim)] + ["cond"]
    cond_col = np.full(len(samples), -1) if cond is None else np.broadcast_to(cond, (len(samples),))
    rows = [[float(v) for v in row] + [int(c)] for row, c in zip(samples, cond_col)]
    write_csv(path, header, rows)


def cfg_combine(v_cond, v_uncond, scale: float):
    """Classifier-free guidance: v_uncond + scale · (v_cond − v_uncond)."""
    return v_uncond + scale * (np.asarray(v_cond) - np.asarray(v_uncond))


def _selection_weights(probs, t, experts, selection):
    """Mask router probabilities per the strategy and renormalize rows."""
    n, k = probs.shape
    if isinstance(selection, Full):
        masked = probs.copy()
    elif isinstance(selection, Top1):
        masked = np.zeros_like(probs)
        best = np.argmax(probs, axis=1)
        masked[np.arange(n), best] = 1.0
    elif isinstance(selection, TopK):
        if selection.k > k:
            raise SpecError(f"TopK({selection.k}) exceeds the {k} available experts")
        masked = np.zeros_like(probs)
        # stable sort so probability ties resolve to the lower expert index,
        # keeping TopK(1) trajectories identical to Top1
        top = np.argsort(-probs, axis=1, kind="stable")[:, : selection.k]
        rows = np.repeat(np.arange(n), selection.k)
        masked[rows, top.ravel()] = probs[rows, top.ravel()]
    else:
        fm_group = np.array([e.objective is Objective.VELOCITY for e in experts])
        high_noise = t > selection.tau
        active = fm_group if high_noise != selection.ddpm_first else ~fm_group
        if not np.any(active):
            raise SelectionError(
                f"threshold switch selected the "
                f"{'velocity' if high_noise != selection.ddpm_first else 'epsilon'} "
                f"family but no expert carries that objective"
            )
        masked = probs * active[None, :]
    totals = masked.sum(axis=1, keepdims=True)
    if np.any(totals <= 0.0):
        raise SelectionError("expert selection left all router weights at zero")
    return masked / totals


def fused_velocity(
    x_t,
    t: float,
    experts,
    router,
    cond,
    cfg: SamplerConfig,
    audit: ConversionAudit | None = None,
    weights_out: list | None = None,
):
    """Router-weighted convex combination of unified expert velocities."""
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    n = x.shape[0]
    k = len(experts)
    if k == 0:
        raise SpecError("need at least one expert")
    if any(e.objective is None for e in experts):
        raise SpecError("every expert must carry an objective tag")

    if isinstance(cfg.selection, Threshold) and router is None:
        probs = np.full((n, k), 1.0 / k)
    else:
        if router is None:
            raise SpecError("this selection strategy requires a router")
        probs = np.atleast_2d(router.probabilities(x, t))
        if probs.shape != (n, k):
            raise SpecError(f"router produced {probs.shape}, expected ({n}, {k})")
    weights = _selection_weights(probs, t, experts, cfg.selection)
    if weights_out is not None:
        weights_out.append(weights)

    def fuse(cond_value):
        u = np.zeros_like(x)
        for j, expert in enumerate(experts):
            w = weights[:, j]
            rows = np.flatnonzero(w)
            if rows.size == 0:
                continue
            c = None
            if cond_value is not None:
                c = np.broadcast_to(np.atleast_1d(cond_value), (n,))[rows]
            pred = expert.predict(x[rows], t, cond=c, use_ema=True)
            if expert.objective is Objective.EPSILON:
                pred = eps_to_velocity(x[rows], pred, t, expert.schedule, cfg.conversion, audit)
            u[rows] += w[rows, None] * pred
        return u

    if cond is None:
        u = fuse(None)
    elif cfg.cfg_scale == 1.0:
        u = fuse(cond)
    else:
        u = cfg_combine(fuse(cond), fuse(None), cfg.cfg_scale)
    return u[0] if single else u


def sample(experts, router, config: SamplerConfig, cond=None, audit: ConversionAudit | None = None) -> Trajectory:
    """Integrate x from t=1 noise to t=0 data with uniform Euler steps."""
    if not experts:
        raise SpecError("need at least one expert")
    dims = {getattr(e, "data_dim", None) or e.config.data_dim for e in experts}
    if len(dims) != 1:
        raise SpecError(f"experts disagree on data dimension: {sorted(dims)}")
    dim = dims.pop()
    n, steps = config.batch, config.steps
    k = len(experts)
    audit = ConversionAudit() if audit is None else audit

    x = np.empty((n, dim))
    for i in range(n):
        x[i] = stream(config.seed, "sampler", "traj", i).standard_normal(dim)

    delta = 1.0 / steps
    states = np.empty((steps + 1, n, dim))
    ts = 1.0 - delta * np.arange(steps + 1)
    ts[-1] = 0.0
    states[0] = x
    weights_log: list = []
    vel_norms = np.empty(steps)
    clamp_rates = np.empty(steps)
    for i in range(steps):
        t = float(ts[i])
        before = len(audit.records)
        u = fused_velocity(x, t, experts, router, cond, config, audit, weights_log)
        new_records = audit.records[before:]
        clamp_rates[i] = float(np.mean([r[2] for r in new_records])) if new_records else 0.0
        x = x - delta * u
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sampler state at step {i} (t={t:.4f})")
        states[i + 1] = x
        vel_norms[i] = float(np.mean(np.linalg.norm(u, axis=1)))
    experts_used = np.stack([w.sum(axis=0) > 0.0 for w in weights_log])
    return Trajectory(
        states=states,
        ts=ts,
        weights=np.stack(weights_log),
        experts_used=experts_used,
        velocity_norms=vel_norms,
        clamp_rates=clamp_rates,
    )
