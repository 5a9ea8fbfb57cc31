"""Isolated expert trainers, the router trainer, and checkpoint conversion.

Each expert trains on exactly one shard with exactly one objective and
never exchanges gradients, parameters, or activations with its peers: a
trainer touches only its shard, its own model, and streams derived from its
own seed, so K trainers produce bit-identical results whether they run
sequentially, in threads, or as separate OS processes.

Training step: sample a batch → draw t ~ U(0, 1) → corrupt → forward →
MSE → backward → global-norm clip → Adam → EMA.  Conditioning uses the
shard's cluster label, dropped to the learned null embedding with
probability cfg_drop_prob so guidance works at inference.  Both objectives
share the discrete-index time embedding (round(999·t)), mirroring the
runtime timestep conversion used when checkpoints cross objectives.

The router is an independent classifier trained with cross-entropy on
(x_t, t) → cluster label over the full dataset.  Timesteps are uniform on
[0, 1]; every distinct schedule used by the expert mix corrupts an equal
share of each batch, so the router sees the noise laws it will route at
inference.

Checkpoint conversion transfers the trunk, time embedding, input
projection, and conditioning path bit-exactly, reinitializes the output
head at N(0, 0.02), replaces the condition table with a fresh one, retags
objective and schedule, and resets step count and EMA.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConversionError, NumericError, SpecError
from .io_utils import write_csv
from .netcore import ExpertModel, ModelConfig, RouterModel, adam_step, ema_update
from .objectives import Objective, loss_and_grad_target, make_noisy
from .partition import ClusterAssignment, SyntheticDataset
from .rngstream import derive_seed, stream
from .schedules import Schedule, ScheduleKind


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    seed: int
    objective: Objective | None = None
    schedule: Schedule | None = None
    lr: float = 1e-4
    lr_final: float | None = None  # cosine-anneal target; None keeps lr flat
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_steps: int | None = None  # None -> 1% of steps (scaled-down rule)
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    cfg_drop_prob: float = 0.1
    clip_norm: float = 1.0
    val_fraction: float = 0.1
    eval_every: int = 50

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise SpecError("steps and batch_size must be positive")
        if not self.lr > 0:
            raise SpecError("lr must be positive")
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise SpecError("cfg_drop_prob must lie in [0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise SpecError("val_fraction must lie in [0, 1)")
        if self.objective is Objective.VELOCITY and (
            self.schedule is None or self.schedule.kind is not ScheduleKind.LINEAR
        ):
            raise SpecError("velocity experts train on the linear schedule")

    @property
    def effective_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, self.steps // 100)

    def lr_at(self, step: int) -> float:
        warmup = self.effective_warmup
        if step < warmup:
            return self.lr * (step + 1) / warmup
        if self.lr_final is None or self.steps <= warmup:
            return self.lr
        progress = (step - warmup) / max(1, self.steps - warmup)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * progress))

    @staticmethod
    def router_defaults(steps: int, batch_size: int, seed: int, **overrides) -> "TrainConfig":
        """Router optimizer settings: decayed LR, decoupled weight decay, no warmup."""
        base = dict(
            steps=steps,
            batch_size=batch_size,
            seed=seed,
            lr=5e-5,
            lr_final=5e-7,
            weight_decay=1e-2,
            warmup_steps=0,
            cfg_drop_prob=0.0,
        )
        base.update(overrides)
        return TrainConfig(**base)


@dataclass
class TrainLog:
    """Per-step curve plus the periodic validation track."""

    rows: list = field(default_factory=list)  # (step, loss, lr, grad_norm)
    val_rows: list = field(default_factory=list)  # (step, val_loss)

    def record(self, step, loss, lr, grad_norm):
        self.rows.append((int(step), float(loss), float(lr), float(grad_norm)))

    def record_val(self, step, loss):
        self.val_rows.append((int(step), float(loss)))

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def decile_means(self) -> tuple[float, float]:
        losses = self.losses()
        n = max(1, len(losses) // 10)
        return float(losses[:n].mean()), float(losses[-n:].mean())

    def to_csv(self, path) -> None:
        write_csv(path, ["step", "loss", "lr", "grad_norm"], self.rows)

    def val_to_csv(self, path) -> None:
        write_csv(path, ["step", "val_loss"], self.val_rows)


@dataclass(frozen=True)
class ObjectiveMix:
    """Per-expert objective and schedule tags for a K-expert ensemble."""

    objectives: tuple
    schedules: tuple

    def __post_init__(self):
        if len(self.objectives) != len(self.schedules) or not self.objectives:
            raise SpecError("mix needs matching, non-empty objective and schedule lists")
        for obj, sched in zip(self.objectives, self.schedules):
            if obj is Objective.VELOCITY and sched.kind is not ScheduleKind.LINEAR:
                raise SpecError("velocity experts train on the linear schedule")

    @property
    def k(self) -> int:
        return len(self.objectives)

    @property
    def ddpm_expert_ids(self) -> tuple:
        return tuple(i for i, o in enumerate(self.objectives) if o is Objective.EPSILON)

    @staticmethod
    def standard(
        k: int,
        ddpm_ids: tuple = (0, 3),
        ddpm_schedule: Schedule | None = None,
        fm_schedule: Schedule | None = None,
    ) -> "ObjectiveMix":
        """The default heterogeneous mix: ε-experts on the named clusters
        (high-fidelity shards), velocity experts elsewhere."""
        ddpm_schedule = ddpm_schedule or Schedule.cosine()
        fm_schedule = fm_schedule or Schedule.linear()
        bad = [i for i in ddpm_ids if not 0 <= i < k]
        if bad:
            raise SpecError(f"ddpm expert ids {bad} out of range for K={k}")
        objectives = tuple(
            Objective.EPSILON if i in ddpm_ids else Objective.VELOCITY for i in range(k)
        )
        schedules = tuple(
            ddpm_schedule if i in ddpm_ids else fm_schedule for i in range(k)
        )
        return ObjectiveMix(objectives, schedules)

    @staticmethod
    def homogeneous(k: int) -> "ObjectiveMix":
        return ObjectiveMix.standard(k, ddpm_ids=())

    def distinct_schedules(self) -> list[Schedule]:
        seen: list[Schedule] = []
        for sched in self.schedules:
            if not any(s.kind is sched.kind and s is not None for s in seen):
                seen.append(sched)
        return seen


def _split_validation(n: int, fraction: float, seed: int):
    n_val = int(math.floor(n * fraction))
    order = stream(seed, "valsplit").permutation(n)
    return order[n_val:], order[:n_val]


def train_expert(
    shard: SyntheticDataset,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    cond_id=None,
):
    """Train one expert in isolation on its shard; returns (model, log).

    cond_id is the expert's global cluster label; an array of per-point
    labels (e.g. the full assignment, for a monolithic baseline) is also
    accepted, and None trains fully unconditionally. Validation uses a
    held-out split with frozen noise draws, so curves are comparable across
    runs and initializations.
    """
    if len(shard) == 0:
        raise SpecError("cannot train an expert on an empty shard")
    if cfg.objective is None or cfg.schedule is None:
        raise SpecError("expert training needs an objective and a schedule")
    model = ExpertModel(
        model_cfg,
        cfg.objective,
        cfg.schedule,
        seed=derive_seed(cfg.seed, "init"),
        ema_decay=cfg.ema_decay,
    )
    log = TrainLog()
    _run_training(model, shard, cfg, cond_id, log)
    return model, log


def resume_training(
    model: ExpertModel,
    shard: SyntheticDataset,
    cfg: TrainConfig,
    cond_id: int | None = None,
) -> TrainLog:
    """Continue training an existing model (e.g. a converted checkpoint)."""
    if cfg.objective is not model.objective:
        raise SpecError("config objective does not match the model's tag")
    log = TrainLog()
    model.ema_decay = cfg.ema_decay
    _run_training(model, shard, cfg, cond_id, log)
    return log


def _run_training(model, shard, cfg, cond_id, log):
    train_idx, val_idx = _split_validation(len(shard), cfg.val_fraction, cfg.seed)
    if len(train_idx) == 0:
        raise SpecError("validation split left no training points")
    points = shard.points
    per_point_cond = None
    if cond_id is not None and np.ndim(cond_id) == 1:
        per_point_cond = np.asarray(cond_id, dtype=np.int64)
        if per_point_cond.shape != (len(shard),):
            raise SpecError("per-point condition labels must cover the shard")
    batches = stream(cfg.seed, "batches")

    val_state = None
    if len(val_idx):
        val_points = points[val_idx][:512]
        val_cond = cond_id if per_point_cond is None else per_point_cond[val_idx][:512]
        val_rng = stream(cfg.seed, "val")
        val_t = val_rng.uniform(0.0, 1.0, len(val_points))
        val_eps = val_rng.standard_normal(val_points.shape)
        val_state = (val_points, val_cond, val_t, val_eps)

    def validation_loss():
        vp, vc, vt, veps = val_state
        sample = make_noisy(vp, vt, cfg.objective, cfg.schedule, batches, eps=veps)
        pred = model.forward(sample.x_t, vt, cond=vc)
        return loss_and_grad_target(pred, sample)[0]

    for step in range(cfg.steps):
        idx = batches.integers(0, len(train_idx), cfg.batch_size)
        rows = train_idx[idx]
        x0 = points[rows]
        t = batches.uniform(0.0, 1.0, cfg.batch_size)
        sample = make_noisy(x0, t, cfg.objective, cfg.schedule, batches)
        if cond_id is None:
            cond = None
        else:
            if per_point_cond is None:
                cond = np.full(cfg.batch_size, cond_id, dtype=np.int64)
            else:
                cond = per_point_cond[rows].copy()
            dropped = batches.random(cfg.batch_size) < cfg.cfg_drop_prob
            cond[dropped] = model.config.null_cond_id
        pred, cache = model.forward(sample.x_t, t, cond=cond, want_cache=True)
        loss, dpred = loss_and_grad_target(pred, sample)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}")
        tape = model.backward(cache, dpred)
        lr = cfg.lr_at(step)
        grad_norm = adam_step(
            model,
            tape,
            lr=lr,
            betas=cfg.betas,
            eps=cfg.adam_eps,
            clip_norm=cfg.clip_norm,
            weight_decay=cfg.weight_decay,
        )
        ema_update(model)
        log.record(step, loss, lr, grad_norm)
        if val_state is not None and (step % cfg.eval_every == cfg.eval_every - 1 or step == cfg.steps - 1):
            log.record_val(step, validation_loss())


def convert_checkpoint(
    source: ExpertModel,
    target_objective: Objective,
    target_schedule: Schedule,
    reinit_seed: int,
    target_config: ModelConfig | None = None,
) -> ExpertModel:
    """Re-tag a trained expert for a new objective.

    The trunk, time embedding, input projection, and conditioning path copy
    bit-exactly; the output head reinitializes at N(0, 0.02); the condition
    table is replaced fresh; EMA and step count reset.
    """
    if target_config is not None and target_config != source.config:
        probe = ExpertModel(target_config, target_objective, target_schedule, seed=0)
        differing = sorted(
            name
            for name in set(probe.params) | set(source.params)
            if name not in probe.params
            or name not in source.params
            or probe.params[name].shape != source.params[name].shape
        )
        raise ConversionError(f"incompatible architectures; differing tensors: {differing}")
    target = ExpertModel(
        source.config,
        target_objective,
        target_schedule,
        seed=derive_seed(reinit_seed, "convert", "fresh-layers"),
        ema_decay=source.ema_decay,
    )
    for name, values in source.params.items():
        if name.startswith("head.") or name.startswith("cond."):
            continue
        target.params[name][:] = values
    head_rng = stream(reinit_seed, "convert", "head")
    target.params["head.w"][:] = head_rng.normal(0.0, 0.02, target.params["head.w"].shape)
    target.params["head.b"][:] = 0.0
    for name in target.params:
        target.ema[name][:] = target.params[name]
    target.step_count = 0
    return target


def train_router(
    data: SyntheticDataset,
    assignment: ClusterAssignment | np.ndarray,
    mix: ObjectiveMix,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
):
    """Train the cluster classifier on the full dataset; returns (router, log)."""
    labels = assignment.assignment if isinstance(assignment, ClusterAssignment) else np.asarray(assignment)
    if labels.shape != (len(data),):
        raise SpecError("assignment does not cover the dataset")
    if model_cfg.out_dim != mix.k:
        raise SpecError("router output width must equal the number of experts")
    router = RouterModel(model_cfg, seed=derive_seed(cfg.seed, "init"), ema_decay=cfg.ema_decay)
    log = TrainLog()
    laws = mix.distinct_schedules()
    points = data.points
    train_idx, val_idx = _split_validation(len(data), cfg.val_fraction, cfg.seed)
    batches = stream(cfg.seed, "batches")

    val_state = None
    if len(val_idx):
        vp = points[val_idx][:512]
        vl = labels[val_idx][:512]
        val_rng = stream(cfg.seed, "val")
        vt = val_rng.uniform(0.0, 1.0, len(vp))
        veps = val_rng.standard_normal(vp.shape)
        vlaw = val_rng.integers(0, len(laws), len(vp))
        val_state = (vp, vl, vt, veps, vlaw)

    def corrupt(x0, t, eps, law_idx):
        x_t = np.empty_like(x0)
        for i, sched in enumerate(laws):
            mask = law_idx == i
            if not np.any(mask):
                continue
            sub = make_noisy(x0[mask], t[mask], Objective.EPSILON, sched, batches, eps=eps[mask])
            x_t[mask] = sub.x_t
        return x_t

    def ce_loss_and_grad(x_t, t, lab, want_cache):
        out = router.forward(x_t, t, want_cache=want_cache)
        logits, cache = out if want_cache else (out, None)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        n = len(lab)
        loss = float(-np.mean(np.log(p[np.arange(n), lab] + 1e-300)))
        grad = p
        grad[np.arange(n), lab] -= 1.0
        grad /= n
        return loss, grad, cache

    for step in range(cfg.steps):
        idx = batches.integers(0, len(train_idx), cfg.batch_size)
        rows = train_idx[idx]
        x0 = points[rows]
        lab = labels[rows]
        t = batches.uniform(0.0, 1.0, cfg.batch_size)
        eps = batches.standard_normal(x0.shape)
        law_idx = batches.integers(0, len(laws), cfg.batch_size)
        x_t = corrupt(x0, t, eps, law_idx)
        loss, grad, cache = ce_loss_and_grad(x_t, t, lab, want_cache=True)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite router loss at step {step}")
        tape = router.backward(cache, grad)
        lr = cfg.lr_at(step)
        grad_norm = adam_step(
            router,
            tape,
            lr=lr,
            betas=cfg.betas,
            eps=cfg.adam_eps,
            clip_norm=cfg.clip_norm,
            weight_decay=cfg.weight_decay,
        )
        ema_update(router)
        log.record(step, loss, lr, grad_norm)
        if val_state is not None and (step % cfg.eval_every == cfg.eval_every - 1 or step == cfg.steps - 1):
            vp, vl, vt, veps, vlaw = val_state
            vx = corrupt(vp, vt, veps, vlaw)
            log.record_val(step, ce_loss_and_grad(vx, vt, vl, want_cache=False)[0])
    return router, log


def flop_proxy(batch_size: int, steps: int, param_count: int) -> int:
    """Aggregate per-run compute proxy used for budget matching."""
    return batch_size * steps * param_count


def matched_expert_batch(monolithic_batch: int, k: int) -> int:
    """Budget rule: a monolithic batch of B becomes B/K per expert."""
    if monolithic_batch % k:
        raise SpecError(f"monolithic batch {monolithic_batch} not divisible by K={k}")
    return monolithic_batch // k
