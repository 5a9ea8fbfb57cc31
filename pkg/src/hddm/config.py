"""Experiment configuration: one plain key-value file drives the pipeline.

The format is INI-style sections parsed with the standard library — no
configuration language dependencies. Every field has a desk-scale default,
so an empty file (or no file) runs the standard 8-blob benchmark.
``TrainConfig`` defaults carry the full-scale optimizer settings; the
values here are the desk-scale operating point (smaller nets, fewer steps,
faster EMA) and are documented in the README.

All randomness in a run flows from [experiment] seed through named stream
derivations, so re-running any command reproduces its outputs byte for
byte.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .conversion import ConversionConfig, ScalingMode
from .errors import SpecError
from .netcore import ModelConfig
from .objectives import Objective
from .partition import MixtureSpec, octagon_spec
from .sampler import Full, SamplerConfig, Selection, Threshold, Top1, TopK
from .schedules import Schedule
from .training import ObjectiveMix, TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    seed: int = 0
    out_dir: str = "runs/default"

    # [dataset] circle-of-blobs family
    n_components: int = 8
    radius: float = 5.0
    variance: float = 0.1
    n_points: int = 8000

    # [partition]
    k: int = 8
    m_fine: int = 64
    metric: str = "euclidean"

    # [experts]
    expert_blocks: int = 2
    expert_width: int = 8
    expert_steps: int = 800
    expert_batch: int = 32  # per expert; the monolithic baseline uses k * expert_batch
    expert_lr: float = 3e-3
    expert_lr_final: float | None = 3e-4
    expert_ema_decay: float = 0.99
    cfg_drop_prob: float = 0.1
    clip_norm: float = 1.0
    ddpm_expert_ids: tuple = (0, 3)
    ddpm_schedule: str = "cosine"

    # [router]
    router_blocks: int = 2
    router_width: int = 32
    router_steps: int = 800
    router_batch: int = 128
    router_lr: float = 3e-3
    router_lr_final: float | None = 1e-4
    router_weight_decay: float = 1e-2

    # [sampler]
    sampler_steps: int = 50
    cfg_scale: float = 7.5
    selection: str = "top2"
    topk: int = 2
    tau: float = 0.5
    sample_batch: int = 512

    # [conversion]
    clamp_range: float = 20.0
    alpha_floor: float = 0.01
    scaling_mode: str = "piecewise"

    # [evaluation]
    n_eval: int = 1024
    repetitions: int = 5
    thresholds: tuple = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    threshold_batch: int = 2400
    threshold_schedule: str = "linear"  # eps-expert schedule for the 2-expert pair
    samples_per_condition: int = 10
    focus_cluster: int = 0

    # [warmstart]
    warm_source_steps: int = 1500
    warm_steps: int = 1000
    warm_eval_every: int = 25

    # -- derived pieces -----------------------------------------------------

    def dataset_spec(self) -> MixtureSpec:
        return octagon_spec(self.radius, self.variance, self.n_components)

    def schedule_by_name(self, name: str) -> Schedule:
        if name == "cosine":
            return Schedule.cosine()
        if name == "linear":
            return Schedule.linear()
        raise SpecError(f"unknown schedule {name!r} (expected cosine or linear)")

    def mix(self, n_eps: int | None = None) -> ObjectiveMix:
        ids = self.ddpm_expert_ids if n_eps is None else self.ddpm_expert_ids[:n_eps]
        return ObjectiveMix.standard(
            self.k, ddpm_ids=tuple(ids), ddpm_schedule=self.schedule_by_name(self.ddpm_schedule)
        )

    def expert_model_config(self) -> ModelConfig:
        return ModelConfig(
            n_blocks=self.expert_blocks,
            width=self.expert_width,
            data_dim=2,
            cond_count=self.k,
        )

    def router_model_config(self) -> ModelConfig:
        return ModelConfig(
            n_blocks=self.router_blocks,
            width=self.router_width,
            data_dim=2,
            cond_count=0,
            out_dim=self.k,
        )

    def expert_train_config(
        self, seed: int, objective: Objective, schedule: Schedule, **overrides
    ) -> TrainConfig:
        base = dict(
            steps=self.expert_steps,
            batch_size=self.expert_batch,
            seed=seed,
            objective=objective,
            schedule=schedule,
            lr=self.expert_lr,
            lr_final=self.expert_lr_final,
            ema_decay=self.expert_ema_decay,
            cfg_drop_prob=self.cfg_drop_prob,
            clip_norm=self.clip_norm,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def router_train_config(self, seed: int, **overrides) -> TrainConfig:
        base = dict(
            steps=self.router_steps,
            batch_size=self.router_batch,
            seed=seed,
            lr=self.router_lr,
            lr_final=self.router_lr_final,
            weight_decay=self.router_weight_decay,
            warmup_steps=0,
            cfg_drop_prob=0.0,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def selection_strategy(self) -> Selection:
        name = self.selection
        if name == "top1":
            return Top1()
        if name == "top2":
            return TopK(2)
        if name == "topk":
            return TopK(self.topk)
        if name == "full":
            return Full()
        if name == "threshold":
            return Threshold(self.tau)
        raise SpecError(f"unknown selection {name!r}")

    def conversion_config(self) -> ConversionConfig:
        return ConversionConfig(
            clamp_range=self.clamp_range,
            alpha_floor=self.alpha_floor,
            scaling_mode=ScalingMode(self.scaling_mode),
        )

    def sampler_config(self, seed: int, **overrides) -> SamplerConfig:
        base = dict(
            steps=self.sampler_steps,
            cfg_scale=self.cfg_scale,
            selection=self.selection_strategy(),
            seed=seed,
            batch=self.sample_batch,
            conversion=self.conversion_config(),
        )
        base.update(overrides)
        return SamplerConfig(**base)

    def out_path(self) -> Path:
        return Path(self.out_dir)


_SECTIONS = {
    "experiment": ("seed", "out_dir"),
    "dataset": ("n_components", "radius", "variance", "n_points"),
    "partition": ("k", "m_fine", "metric"),
    "experts": (
        "expert_blocks",
        "expert_width",
        "expert_steps",
        "expert_batch",
        "expert_lr",
        "expert_lr_final",
        "expert_ema_decay",
        "cfg_drop_prob",
        "clip_norm",
        "ddpm_expert_ids",
        "ddpm_schedule",
    ),
    "router": (
        "router_blocks",
        "router_width",
        "router_steps",
        "router_batch",
        "router_lr",
        "router_lr_final",
        "router_weight_decay",
    ),
    "sampler": ("sampler_steps", "cfg_scale", "selection", "topk", "tau", "sample_batch"),
    "conversion": ("clamp_range", "alpha_floor", "scaling_mode"),
    "evaluation": (
        "n_eval",
        "repetitions",
        "thresholds",
        "threshold_batch",
        "threshold_schedule",
        "samples_per_condition",
        "focus_cluster",
    ),
    "warmstart": ("warm_source_steps", "warm_steps", "warm_eval_every"),
}

_FIELD_SECTION = {name: section for section, names in _SECTIONS.items() for name in names}


def _parse_value(name: str, text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if default is None or isinstance(default, float):
        if text.lower() == "none":
            return None
        return float(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, tuple):
        if not text:
            return ()
        cast = float if name == "thresholds" else int
        return tuple(cast(v.strip()) for v in text.split(","))
    return text


def load_experiment_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI config (missing file fields fall back to defaults)."""
    defaults = ExperimentConfig()
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise SpecError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise SpecError(f"malformed config {path}: {exc}") from None
        known = {f.name: getattr(defaults, f.name) for f in fields(defaults)}
        for section in parser.sections():
            if section not in _SECTIONS:
                raise SpecError(f"{path}: unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise SpecError(f"{path}: unknown key '{key}' in section [{section}]")
                try:
                    values[key] = _parse_value(key, raw, known[key])
                except ValueError as exc:
                    raise SpecError(f"{path}: bad value for '{key}': {exc}") from None
    if overrides:
        values.update(overrides)
    cfg = replace(defaults, **values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.k < 1 or cfg.m_fine < cfg.k:
        raise SpecError("need 1 <= K <= M_fine")
    if any(not 0 <= i < cfg.k for i in cfg.ddpm_expert_ids):
        raise SpecError("ddpm_expert_ids must lie in [0, K)")
    if cfg.focus_cluster not in range(cfg.k):
        raise SpecError("focus_cluster must lie in [0, K)")
    if cfg.repetitions < 1:
        raise SpecError("repetitions must be >= 1")
    cfg.schedule_by_name(cfg.ddpm_schedule)
    cfg.schedule_by_name(cfg.threshold_schedule)
    cfg.selection_strategy()
    ScalingMode(cfg.scaling_mode)


def dump_default_config() -> str:
    """Render the full default configuration as an annotated INI document."""
    defaults = ExperimentConfig()
    lines = ["# hddm experiment configuration (all values shown are the defaults)"]
    for section, names in _SECTIONS.items():
        lines.append("")
        lines.append(f"[{section}]")
        for name in names:
            value = getattr(defaults, name)
            if isinstance(value, tuple):
                rendered = ",".join(str(v) for v in value)
            elif value is None:
                rendered = "none"
            else:
                rendered = str(value)
            lines.append(f"{name} = {rendered}")
    return "\n".join(lines) + "\n"
