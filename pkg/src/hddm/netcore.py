"""Denoiser networks: modulated residual trunk, manual autodiff, Adam, EMA.

Architecture (single-token analog of a conditioned transformer): the input
vector is projected to width d and refined by L residual blocks. Each block
applies, twice, the pattern

    h ← h + α ⊙ MLP(LN(h) ⊙ (1 + γ) + β)

with layer norm carrying no learnable affine and (γ, β, α) coming from the
conditioning path. Conditioning is a single shared map: the time embedding
(sinusoidal features of the discrete index round(999·t), then a two-layer
MLP) plus a learned per-condition embedding feed one global d → 6d map,
whose output is broadcast to every block and offset by a learned per-block
(6, d) table. Sharing the map is what makes this variant cheaper than
giving every block its own 6d-wide MLP; ``count_parameters`` exposes both
variants' exact counts.

Initialization: the global modulation map, the two α-gate rows of every
per-block table, condition embeddings, and the output head start at zero,
so a fresh network is the identity on its residual stream and outputs
exactly zero. Per-block γ/β rows draw from N(0, 1/√d); remaining dense
layers use Kaiming-uniform fan-in. Each tensor's values come from a named
stream, so initialization is independent of construction order.

Gradients are reverse-mode by hand, batch-vectorized, f64 throughout, and
checked against central finite differences in the test suite.

Concurrency: a model is mutated only by its owning trainer; forward with
frozen or EMA weights is read-only and freely shareable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError, SpecError
from .objectives import Objective
from .rngstream import stream
from .schedules import Schedule, to_discrete_index

_LN_EPS = 1e-6

# Modulation row order inside every (6, d) slice.
_GAMMA_MSA, _BETA_MSA, _ALPHA_MSA, _GAMMA_MLP, _BETA_MLP, _ALPHA_MLP = range(6)


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int
    width: int
    data_dim: int
    cond_count: int
    out_dim: int = 0  # 0 means "same as data_dim"

    def __post_init__(self):
        if self.n_blocks < 1 or self.width < 2 or self.width % 2:
            raise SpecError("need n_blocks >= 1 and even width >= 2")
        if self.data_dim < 1 or self.cond_count < 0:
            raise SpecError("data_dim must be >= 1 and cond_count >= 0")
        if self.out_dim == 0:
            object.__setattr__(self, "out_dim", self.data_dim)

    @property
    def null_cond_id(self) -> int:
        return self.cond_count


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def _dsilu(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


def _layer_norm(h):
    mu = np.mean(h, axis=1, keepdims=True)
    var = np.var(h, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    y = (h - mu) * inv
    return y, inv


def _layer_norm_backward(g, y, inv):
    return inv * (g - np.mean(g, axis=1, keepdims=True) - y * np.mean(g * y, axis=1, keepdims=True))


def sinusoidal_features(index, width: int) -> np.ndarray:
    """(n, width) sin/cos features of integer timestep indices."""
    idx = np.atleast_1d(np.asarray(index, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    ang = idx[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class GradientTape:
    """Per-parameter gradient buffers matching the model's shapes."""

    def __init__(self, grads: dict[str, np.ndarray]):
        self.grads = grads

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def assert_finite(self) -> None:
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter '{name}'")

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))

    def scale(self, factor: float) -> None:
        for g in self.grads.values():
            g *= factor


class ModulatedNet:
    """Shared trunk for experts and the router; owns parameters and EMA."""

    def __init__(self, config: ModelConfig, seed: int, ema_decay: float = 0.9999):
        self.config = config
        self.ema_decay = float(ema_decay)
        self.step_count = 0
        self.params = self._init_params(seed)
        self.ema = {k: v.copy() for k, v in self.params.items()}
        self._adam_m = None
        self._adam_v = None
        self._adam_t = 0

    # -- construction -------------------------------------------------------

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        cfg = self.config
        d, dd, out = cfg.width, cfg.data_dim, cfg.out_dim

        def kaiming(name, shape):
            bound = math.sqrt(6.0 / shape[1])
            return stream(seed, "init", name).uniform(-bound, bound, size=shape)

        params: dict[str, np.ndarray] = {}
        params["input.w"] = kaiming("input.w", (d, dd))
        params["input.b"] = np.zeros(d)
        params["time.w1"] = kaiming("time.w1", (d, d))
        params["time.b1"] = np.zeros(d)
        params["time.w2"] = kaiming("time.w2", (d, d))
        params["time.b2"] = np.zeros(d)
        params["cond.table"] = np.zeros((cfg.cond_count + 1, d))
        params["adaln.w"] = np.zeros((6 * d, d))
        params["adaln.b"] = np.zeros(6 * d)
        for i in range(cfg.n_blocks):
            emb = stream(seed, "init", f"blocks.{i}.emb").normal(0.0, 1.0 / math.sqrt(d), (6, d))
            emb[_ALPHA_MSA] = 0.0
            emb[_ALPHA_MLP] = 0.0
            params[f"blocks.{i}.emb"] = emb
            for slot in ("msa", "mlp"):
                params[f"blocks.{i}.{slot}.w1"] = kaiming(f"blocks.{i}.{slot}.w1", (d, d))
                params[f"blocks.{i}.{slot}.b1"] = np.zeros(d)
                params[f"blocks.{i}.{slot}.w2"] = kaiming(f"blocks.{i}.{slot}.w2", (d, d))
                params[f"blocks.{i}.{slot}.b2"] = np.zeros(d)
        params["head.w"] = np.zeros((out, d))
        params["head.b"] = np.zeros(out)
        return {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}

    @property
    def zero_init_flags(self) -> dict[str, bool]:
        """Which projections start at zero (near-identity bootstrap)."""
        return {
            "global_modulation_map": True,
            "alpha_gate_rows": True,
            "cond_embeddings": True,
            "output_head": True,
            "dense_trunk": False,
        }

    # -- forward / backward --------------------------------------------------

    def _prepare(self, x, t, cond):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.config.data_dim:
            raise ShapeError(
                f"input shape {x.shape} incompatible with data_dim {self.config.data_dim}"
            )
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite network input")
        n = x.shape[0]
        idx = to_discrete_index(t)
        idx = np.broadcast_to(np.atleast_1d(np.asarray(idx, dtype=np.int64)), (n,))
        if cond is None:
            cond_idx = np.full(n, self.config.null_cond_id, dtype=np.int64)
        else:
            cond_idx = np.broadcast_to(np.atleast_1d(np.asarray(cond, dtype=np.int64)), (n,)).copy()
            if np.any(cond_idx < 0) or np.any(cond_idx > self.config.null_cond_id):
                raise ShapeError(f"condition ids must lie in [0, {self.config.null_cond_id}]")
        return x, idx, cond_idx, single

    def forward(self, x, t, cond=None, use_ema: bool = False, want_cache: bool = False):
        """Evaluate the network; per-sample t and cond broadcast from scalars."""
        p = self.ema if use_ema else self.params
        cfg = self.config
        x, idx, cond_idx, single = self._prepare(x, t, cond)
        d = cfg.width

        feats = sinusoidal_features(idx, d)
        z_t1 = feats @ p["time.w1"].T + p["time.b1"]
        a_t1, sig_t1 = _silu(z_t1)
        e_t = a_t1 @ p["time.w2"].T + p["time.b2"]
        e = e_t + p["cond.table"][cond_idx]
        c = e @ p["adaln.w"].T + p["adaln.b"]
        mod_base = c.reshape(-1, 6, d)

        h = x @ p["input.w"].T + p["input.b"]
        blocks = []
        for i in range(cfg.n_blocks):
            mod = mod_base + p[f"blocks.{i}.emb"][None]
            slots = []
            for j, slot in enumerate(("msa", "mlp")):
                gamma = mod[:, _GAMMA_MSA + 3 * j]
                beta = mod[:, _BETA_MSA + 3 * j]
                alpha = mod[:, _ALPHA_MSA + 3 * j]
                h_in = h
                u, inv = _layer_norm(h_in)
                m = u * (1.0 + gamma) + beta
                z1 = m @ p[f"blocks.{i}.{slot}.w1"].T + p[f"blocks.{i}.{slot}.b1"]
                a1, sig1 = _silu(z1)
                z2 = a1 @ p[f"blocks.{i}.{slot}.w2"].T + p[f"blocks.{i}.{slot}.b2"]
                h = h_in + alpha * z2
                slots.append((h_in, u, inv, gamma, alpha, m, z1, a1, sig1, z2))
            blocks.append(slots)
        out = h @ p["head.w"].T + p["head.b"]

        if want_cache:
            cache = {
                "params": p,
                "use_ema": use_ema,
                "x": x,
                "feats": feats,
                "z_t1": z_t1,
                "a_t1": a_t1,
                "sig_t1": sig_t1,
                "e": e,
                "cond_idx": cond_idx,
                "blocks": blocks,
                "h_final": h,
            }
            return (out[0] if single else out), cache
        return out[0] if single else out

    def backward(self, cache, dout) -> GradientTape:
        """Reverse-mode gradients of sum(dout * output) w.r.t. live parameters."""
        if cache["use_ema"]:
            raise SpecError("backward requires a cache built from live parameters")
        p = cache["params"]
        cfg = self.config
        d = cfg.width
        dout = np.asarray(dout, dtype=np.float64)
        if dout.ndim == 1:
            dout = dout[None, :]
        if dout.shape != (cache["x"].shape[0], cfg.out_dim):
            raise ShapeError(f"upstream gradient shape {dout.shape} mismatches output")

        g: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}

        g["head.w"] += dout.T @ cache["h_final"]
        g["head.b"] += dout.sum(axis=0)
        dh = dout @ p["head.w"]
        dmod_base = np.zeros((dout.shape[0], 6, d))

        for i in reversed(range(cfg.n_blocks)):
            demb = np.zeros((6, d))
            for j in reversed(range(2)):
                slot = ("msa", "mlp")[j]
                h_in, u, inv, gamma, alpha, m, z1, a1, sig1, z2 = cache["blocks"][i][j]
                dalpha = dh * z2
                dz2 = dh * alpha
                g[f"blocks.{i}.{slot}.w2"] += dz2.T @ a1
                g[f"blocks.{i}.{slot}.b2"] += dz2.sum(axis=0)
                da1 = dz2 @ p[f"blocks.{i}.{slot}.w2"]
                dz1 = da1 * _dsilu(z1, sig1)
                g[f"blocks.{i}.{slot}.w1"] += dz1.T @ m
                g[f"blocks.{i}.{slot}.b1"] += dz1.sum(axis=0)
                dm = dz1 @ p[f"blocks.{i}.{slot}.w1"]
                dgamma = dm * u
                dbeta = dm
                du = dm * (1.0 + gamma)
                dh = dh + _layer_norm_backward(du, u, inv)
                dmod_base[:, _GAMMA_MSA + 3 * j] += dgamma
                dmod_base[:, _BETA_MSA + 3 * j] += dbeta
                dmod_base[:, _ALPHA_MSA + 3 * j] += dalpha
                demb[_GAMMA_MSA + 3 * j] += dgamma.sum(axis=0)
                demb[_BETA_MSA + 3 * j] += dbeta.sum(axis=0)
                demb[_ALPHA_MSA + 3 * j] += dalpha.sum(axis=0)
            g[f"blocks.{i}.emb"] += demb

        g["input.w"] += dh.T @ cache["x"]
        g["input.b"] += dh.sum(axis=0)

        dc = dmod_base.reshape(-1, 6 * d)
        g["adaln.w"] += dc.T @ cache["e"]
        g["adaln.b"] += dc.sum(axis=0)
        de = dc @ p["adaln.w"]
        np.add.at(g["cond.table"], cache["cond_idx"], de)
        g["time.w2"] += de.T @ cache["a_t1"]
        g["time.b2"] += de.sum(axis=0)
        da_t1 = de @ p["time.w2"]
        dz_t1 = da_t1 * _dsilu(cache["z_t1"], cache["sig_t1"])
        g["time.w1"] += dz_t1.T @ cache["feats"]
        g["time.b1"] += dz_t1.sum(axis=0)

        tape = GradientTape(g)
        tape.assert_finite()
        return tape


class ExpertModel(ModulatedNet):
    """A denoiser with an immutable objective tag and training schedule."""

    def __init__(
        self,
        config: ModelConfig,
        objective: Objective,
        schedule: Schedule,
        seed: int,
        ema_decay: float = 0.9999,
    ):
        if config.out_dim != config.data_dim:
            raise SpecError("expert output dimension must equal the data dimension")
        super().__init__(config, seed, ema_decay)
        self._objective = objective
        self.schedule = schedule

    @property
    def objective(self) -> Objective:
        return self._objective

    def predict(self, x, t, cond=None, use_ema: bool = True):
        """Inference entry point: ε̂ or v̂ per the objective tag."""
        return self.forward(x, t, cond=cond, use_ema=use_ema)


class RouterModel(ModulatedNet):
    """Unconditional classifier p(k | x_t, t) over the K experts."""

    def __init__(self, config: ModelConfig, seed: int, ema_decay: float = 0.9999):
        if config.out_dim < 1:
            raise SpecError("router needs at least one expert class")
        if config.cond_count != 0:
            raise SpecError("the router is unconditional; cond_count must be 0")
        super().__init__(config, seed, ema_decay)

    @property
    def n_experts(self) -> int:
        return self.config.out_dim

    def probabilities(self, x, t, use_ema: bool = True):
        logits = self.forward(x, t, use_ema=use_ema)
        logits = np.atleast_2d(logits)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p[0] if np.asarray(x).ndim == 1 else p


# -- module-level operation surface ------------------------------------------


def forward(model: ModulatedNet, x, t, cond=None, use_ema: bool = False):
    return model.forward(x, t, cond=cond, use_ema=use_ema)


def backward(model: ModulatedNet, cache, dout) -> GradientTape:
    return model.backward(cache, dout)


def adam_step(
    model: ModulatedNet,
    tape: GradientTape,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    clip_norm: float | None = 1.0,
    weight_decay: float = 0.0,
) -> float:
    """One Adam update with global-norm clipping; returns the pre-clip norm.

    Weight decay is decoupled (applied directly to parameters), matching the
    AdamW convention; experts train with decay 0.
    """
    grads = tape.grads
    if set(grads) != set(model.params):
        raise ShapeError("gradient tape does not match model parameters")
    norm = tape.global_norm()
    scale = 1.0
    if clip_norm is not None and norm > clip_norm > 0.0:
        scale = clip_norm / norm
    if model._adam_m is None:
        model._adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
        model._adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    model._adam_t += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**model._adam_t
    bc2 = 1.0 - b2**model._adam_t
    for name, param in model.params.items():
        grad = grads[name] * scale
        m = model._adam_m[name]
        v = model._adam_v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        if weight_decay:
            param -= lr * weight_decay * param
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    model.step_count += 1
    return norm


def ema_update(model: ModulatedNet, decay: float | None = None) -> None:
    """EMA ← μ·EMA + (1−μ)·θ, once per optimizer step."""
    mu = model.ema_decay if decay is None else float(decay)
    for name, param in model.params.items():
        shadow = model.ema[name]
        shadow *= mu
        shadow += (1.0 - mu) * param


# -- closed-form parameter counting -------------------------------------------


def conditioning_param_count(n_blocks: int, width: int, variant: str) -> int:
    """Exact size of the conditioning path for either modulation variant.

    'single' shares one d → 6d map across blocks plus per-block (6, d)
    embedding tables; 'per-block' gives every block its own d → 6d map.
    """
    l, d = n_blocks, width
    if variant == "single":
        return (6 * d * d + 6 * d) + l * 6 * d
    if variant == "per-block":
        return l * (6 * d * d + 6 * d)
    raise SpecError(f"unknown conditioning variant {variant!r}")


def count_parameters(
    n_blocks: int,
    width: int,
    variant: str = "single",
    data_dim: int = 2,
    cond_count: int = 0,
    out_dim: int | None = None,
) -> int:
    """Total parameter count of a model built with the given conditioning variant."""
    l, d = n_blocks, width
    out = data_dim if out_dim is None else out_dim
    total = d * data_dim + d  # input projection
    total += 2 * (d * d + d)  # time-embedding MLP
    total += (cond_count + 1) * d  # condition table incl. null row
    total += l * 4 * (d * d + d)  # two dense sublayers per block
    total += out * d + out  # head
    return total + conditioning_param_count(l, d, variant)
