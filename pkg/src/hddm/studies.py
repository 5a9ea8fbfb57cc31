"""Experiment harnesses: the headline comparisons at desk scale.

Five studies, each emitting one CSV row per configuration per repetition
(plus rendered figures, see ``reports``):

    mono-vs-decentralized  monolithic baseline vs {Top-1, Top-2, Full}
                           fusion at a matched FLOP budget
    strategy-sweep         the fusion strategies alone
    threshold-sweep        2-expert heterogeneous pair under the
                           deterministic time-threshold switch
    mix-sweep              homogeneous vs heterogeneous objective mixes,
                           intra-condition diversity protocol
    warm-start             converted-checkpoint vs scratch initialization,
                           steps-to-target on the validation curve

Every repetition derives its own seed tree, so studies are reproducible
byte for byte, individual repetitions can be recomputed in isolation, and
repetitions may fan out across worker processes (HDDM_THREADS) without
changing any result. Fréchet values use raw coordinates and are comparable
only within runs of this package, never to image-space numbers.
"""

from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import SpecError
from .evaluation import (
    MetricReport,
    UniformRouter,
    diversity,
    frechet_distance_detailed,
    router_accuracy_curve,
)
from .io_utils import write_csv
from .objectives import Objective
from .partition import generate_mixture, hierarchical_kmeans, shard
from .rngstream import derive_seed
from .sampler import Full, SamplerConfig, Threshold, Top1, TopK, sample
from .schedules import Schedule
from .training import (
    ObjectiveMix,
    convert_checkpoint,
    resume_training,
    train_expert,
    train_router,
)


class Study(enum.Enum):
    MONO_VS_DECENTRALIZED = "mono-vs-decentralized"
    STRATEGY_SWEEP = "strategy-sweep"
    THRESHOLD_SWEEP = "threshold-sweep"
    MIX_SWEEP = "mix-sweep"
    WARM_START = "warm-start"


@dataclass
class StudyResult:
    study: Study
    columns: list
    rows: list
    extras: dict = field(default_factory=dict)  # figure payloads, not part of the CSV

    def as_dicts(self):
        return [dict(zip(self.columns, row)) for row in self.rows]

    def to_csv(self, path) -> None:
        write_csv(path, self.columns, self.rows)


def worker_count() -> int:
    """Worker parallelism cap from HDDM_THREADS (default: serial)."""
    try:
        return max(1, int(os.environ.get("HDDM_THREADS", "1")))
    except ValueError:
        return 1


def _map_reps(fn, cfg: ExperimentConfig, note):
    """Run the per-repetition job serially or across worker processes.

    Repetitions share nothing and derive their own seed trees, so the
    fan-out never changes results; outputs keep repetition order.
    """
    reps = range(cfg.repetitions)
    workers = min(worker_count(), cfg.repetitions)
    if workers <= 1:
        return [fn((cfg, rep, note)) for rep in reps]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [(cfg, rep, None) for rep in reps]))


def run_study(study: Study, cfg: ExperimentConfig, progress=None) -> StudyResult:
    note = progress or (lambda msg: None)
    if study is Study.MONO_VS_DECENTRALIZED:
        return _assemble_strategy(study, _map_reps(_mono_rep, cfg, note))
    if study is Study.STRATEGY_SWEEP:
        return _assemble_strategy(study, _map_reps(_strategy_rep, cfg, note))
    if study is Study.THRESHOLD_SWEEP:
        return _assemble_threshold(_map_reps(_threshold_rep, cfg, note))
    if study is Study.MIX_SWEEP:
        return _assemble_mix(_map_reps(_mix_rep, cfg, note))
    if study is Study.WARM_START:
        return _assemble_warm(_map_reps(_warm_rep, cfg, note))
    raise SpecError(f"unknown study {study}")


# -- shared pipeline pieces ------------------------------------------------------


@dataclass
class RepPipeline:
    rep: int
    seed: int
    data: object
    assignment: object
    shards: list
    reference: np.ndarray


def _prepare(cfg: ExperimentConfig, rep: int) -> RepPipeline:
    rep_seed = derive_seed(cfg.seed, "rep", rep)
    spec = cfg.dataset_spec()
    data = generate_mixture(spec, cfg.n_points, derive_seed(rep_seed, "data"))
    assignment = hierarchical_kmeans(
        data, cfg.m_fine, cfg.k, metric=cfg.metric, seed=derive_seed(rep_seed, "cluster")
    )
    shards = [shard(data, assignment, j) for j in range(cfg.k)]
    reference = generate_mixture(spec, cfg.n_eval, derive_seed(rep_seed, "reference")).points
    return RepPipeline(rep, rep_seed, data, assignment, shards, reference)


def _train_shard_expert(cfg: ExperimentConfig, pipe: RepPipeline, j: int, objective, schedule, tag):
    train_cfg = cfg.expert_train_config(derive_seed(pipe.seed, tag, j), objective, schedule)
    return train_expert(pipe.shards[j], train_cfg, cfg.expert_model_config(), cond_id=j)[0]


def _train_fm_experts(cfg: ExperimentConfig, pipe: RepPipeline, note):
    experts = []
    for j in range(cfg.k):
        note(f"rep {pipe.rep}: training FM expert {j}")
        experts.append(
            _train_shard_expert(cfg, pipe, j, Objective.VELOCITY, Schedule.linear(), "expert-fm")
        )
    return experts


def _train_router_for_mix(cfg: ExperimentConfig, pipe: RepPipeline, mix: ObjectiveMix, label, note):
    note(f"rep {pipe.rep}: training router ({label})")
    router_cfg = cfg.router_train_config(derive_seed(pipe.seed, "router", label))
    return train_router(pipe.data, pipe.assignment, mix, router_cfg, cfg.router_model_config())[0]


def _metric_report(samples, reference, cond=None, router=None, pipe=None) -> MetricReport:
    frechet, regularized = frechet_distance_detailed(samples, reference)
    div = diversity(samples, grouping=cond)
    curve = []
    if router is not None:
        probe = pipe.data.points[:512]
        labels = pipe.assignment.assignment[:512]
        curve = router_accuracy_curve(
            router, probe, labels, Schedule.linear(), derive_seed(pipe.seed, "router-probe")
        )
    return MetricReport(
        frechet=frechet,
        diversity_mean_pairwise=div.mean_pairwise,
        intra_condition_diversity=div.intra_condition,
        router_accuracy_curve=curve,
        sample_count=len(samples),
        covariance_regularized=regularized,
    )


def _curve_cell(curve) -> str:
    return "|".join(f"{t:g}:{acc:g}" for t, acc in curve)


_REPORT_COLUMNS = [
    "frechet",
    "diversity_mean_pairwise",
    "intra_condition_diversity",
    "sample_count",
    "covariance_regularized",
    "router_accuracy_curve",
]


def _report_cells(report: MetricReport):
    return [
        report.frechet,
        report.diversity_mean_pairwise,
        math.nan if report.intra_condition_diversity is None else report.intra_condition_diversity,
        report.sample_count,
        int(report.covariance_regularized),
        _curve_cell(report.router_accuracy_curve),
    ]


# -- strategy / monolithic study --------------------------------------------------


def _strategy_rep_common(cfg: ExperimentConfig, rep: int, note, include_monolithic: bool):
    """Distribution-level comparison on unconditional samples: conditioning
    would only add guidance noise on top of what the strategies differ in."""
    pipe = _prepare(cfg, rep)
    experts = _train_fm_experts(cfg, pipe, note)
    router = _train_router_for_mix(cfg, pipe, ObjectiveMix.homogeneous(cfg.k), "fm", note)

    runs = []
    if include_monolithic:
        note(f"rep {rep}: training monolithic baseline")
        mono_cfg = cfg.expert_train_config(
            derive_seed(pipe.seed, "monolithic"),
            Objective.VELOCITY,
            Schedule.linear(),
            batch_size=cfg.expert_batch * cfg.k,
        )
        mono = train_expert(
            pipe.data, mono_cfg, cfg.expert_model_config(), cond_id=pipe.assignment.assignment
        )[0]
        runs.append(("monolithic", [mono], UniformRouter(1), None))
    runs += [
        ("top1", experts, router, Top1()),
        ("top2", experts, router, TopK(2)),
        ("full", experts, router, Full()),
    ]
    rows, scatter = [], None
    for name, run_experts, run_router, selection in runs:
        note(f"rep {rep}: sampling {name}")
        sampler_cfg = cfg.sampler_config(
            derive_seed(pipe.seed, "sample", name),
            batch=cfg.n_eval,
            selection=selection or Full(),
        )
        terminal = sample(run_experts, run_router, sampler_cfg, cond=None).terminal
        report = _metric_report(
            terminal, pipe.reference,
            router=run_router if selection is not None else None, pipe=pipe,
        )
        rows.append([rep, pipe.seed, name, *_report_cells(report)])
        scatter = (terminal, pipe.reference, name)
    return rows, scatter


def _mono_rep(args):
    cfg, rep, note = args
    return _strategy_rep_common(cfg, rep, note or (lambda m: None), include_monolithic=True)


def _strategy_rep(args):
    cfg, rep, note = args
    return _strategy_rep_common(cfg, rep, note or (lambda m: None), include_monolithic=False)


def _assemble_strategy(study: Study, results) -> StudyResult:
    columns = ["rep", "seed", "strategy", *_REPORT_COLUMNS]
    rows = [row for rep_rows, _ in results for row in rep_rows]
    scatter = results[-1][1]
    return StudyResult(study, columns, rows, extras={"scatter": scatter})


# -- threshold sweep ---------------------------------------------------------------


def _threshold_rep(args):
    """Deterministic-switch sweep over a 2-expert heterogeneous pair.

    Both experts train on the same data (the full set), isolating objective
    conversion from data differences. The ε-expert's schedule defaults to
    linear so the pair shares one corruption path and the switch isolates
    the objective difference; set threshold_schedule=cosine for the
    mixed-schedule variant. Sampling is unconditional at the
    conversion-study settings.
    """
    cfg, rep, note = args
    note = note or (lambda m: None)
    pair_schedule = cfg.schedule_by_name(cfg.threshold_schedule)
    pipe = _prepare(cfg, rep)
    note(f"rep {rep}: training heterogeneous pair on the shared dataset")
    model_cfg = cfg.expert_model_config()
    eps_cfg = cfg.expert_train_config(
        derive_seed(pipe.seed, "pair-eps"), Objective.EPSILON, pair_schedule
    )
    fm_cfg = cfg.expert_train_config(
        derive_seed(pipe.seed, "pair-fm"), Objective.VELOCITY, Schedule.linear()
    )
    eps_expert = train_expert(pipe.data, eps_cfg, model_cfg, cond_id=None)[0]
    fm_expert = train_expert(pipe.data, fm_cfg, model_cfg, cond_id=None)[0]
    rows, scatter = [], None
    for tau in cfg.thresholds:
        note(f"rep {rep}: sampling threshold tau={tau}")
        sampler_cfg = SamplerConfig(
            steps=75,
            cfg_scale=6.0,
            selection=Threshold(float(tau)),
            seed=derive_seed(pipe.seed, "sample", "tau", round(tau * 1000)),
            batch=cfg.threshold_batch,
            conversion=cfg.conversion_config(),
        )
        terminal = sample([eps_expert, fm_expert], None, sampler_cfg, cond=None).terminal
        report = _metric_report(terminal, pipe.reference)
        rows.append([rep, pipe.seed, float(tau), *_report_cells(report)])
        scatter = (terminal, pipe.reference, f"tau={tau}")
    return rows, scatter


def _assemble_threshold(results) -> StudyResult:
    columns = ["rep", "seed", "tau", *_REPORT_COLUMNS]
    rows = [row for rep_rows, _ in results for row in rep_rows]
    return StudyResult(
        Study.THRESHOLD_SWEEP, columns, rows, extras={"scatter": results[-1][1]}
    )


# -- mix sweep ----------------------------------------------------------------------


def _mix_rep(args):
    """Homogeneous vs heterogeneous mixes under one matched sampler setting.

    Per condition, samples_per_condition trajectories are drawn with full
    router-weighted fusion at the conversion-study settings (75 steps,
    guidance 6), so converted ε-experts contribute to every trajectory and
    their dispersion shows up in the intra-condition diversity column.
    """
    cfg, rep, note = args
    note = note or (lambda m: None)
    if len(cfg.ddpm_expert_ids) < 2:
        raise SpecError("mix sweep needs at least two ddpm_expert_ids")
    mixes = [("8fm", 0), ("1eps-7fm", 1), ("2eps-6fm", 2)]
    pipe = _prepare(cfg, rep)
    fm_experts = _train_fm_experts(cfg, pipe, note)
    eps_experts = {}
    for j in cfg.ddpm_expert_ids[:2]:
        note(f"rep {rep}: training eps expert {j}")
        eps_experts[j] = _train_shard_expert(
            cfg, pipe, j, Objective.EPSILON, cfg.schedule_by_name(cfg.ddpm_schedule), "expert-eps"
        )
    rows = []
    for label, n_eps in mixes:
        mix = cfg.mix(n_eps=n_eps)
        ensemble = [
            eps_experts[j] if mix.objectives[j] is Objective.EPSILON else fm_experts[j]
            for j in range(cfg.k)
        ]
        router = _train_router_for_mix(cfg, pipe, mix, label, note)
        per_cond, conds = [], []
        for j in range(cfg.k):
            sampler_cfg = cfg.sampler_config(
                derive_seed(pipe.seed, "sample", label, j),
                batch=cfg.samples_per_condition,
                steps=75,
                cfg_scale=6.0,
                selection=Full(),
            )
            per_cond.append(sample(ensemble, router, sampler_cfg, cond=j).terminal)
            conds.append(np.full(cfg.samples_per_condition, j))
        samples = np.concatenate(per_cond)
        cond = np.concatenate(conds)
        report = _metric_report(samples, pipe.reference, cond=cond, router=router, pipe=pipe)
        rows.append([rep, pipe.seed, label, n_eps, *_report_cells(report)])
    return rows


def _assemble_mix(results) -> StudyResult:
    columns = ["rep", "seed", "mix", "n_eps_experts", *_REPORT_COLUMNS]
    return StudyResult(Study.MIX_SWEEP, columns, [row for rep_rows in results for row in rep_rows])


# -- warm start -----------------------------------------------------------------------


def _warm_rep(args):
    cfg, rep, note = args
    note = note or (lambda m: None)
    pipe = _prepare(cfg, rep)
    j = cfg.focus_cluster
    note(f"rep {rep}: training source eps expert on cluster {j}")
    source_cfg = cfg.expert_train_config(
        derive_seed(pipe.seed, "warm-source"),
        Objective.EPSILON,
        cfg.schedule_by_name(cfg.ddpm_schedule),
        steps=cfg.warm_source_steps,
    )
    source = train_expert(pipe.shards[j], source_cfg, cfg.expert_model_config(), cond_id=j)[0]
    converted = convert_checkpoint(
        source, Objective.VELOCITY, Schedule.linear(), derive_seed(pipe.seed, "convert")
    )
    # one config for both runs: identical batch and noise streams, so the
    # comparison isolates the initialization
    run_cfg = cfg.expert_train_config(
        derive_seed(pipe.seed, "warm-train"),
        Objective.VELOCITY,
        Schedule.linear(),
        steps=cfg.warm_steps,
        eval_every=cfg.warm_eval_every,
    )
    note(f"rep {rep}: scratch run")
    _, scratch_log = train_expert(pipe.shards[j], run_cfg, cfg.expert_model_config(), cond_id=j)
    note(f"rep {rep}: warm-start run")
    warm_log = resume_training(converted, pipe.shards[j], run_cfg, cond_id=j)

    scratch_final = scratch_log.val_rows[-1][1]
    warm_hit = next(
        (step + 1 for step, loss in warm_log.val_rows if loss <= scratch_final), math.inf
    )
    ratio = warm_hit / cfg.warm_steps
    row = [rep, pipe.seed, cfg.warm_steps, scratch_final, warm_hit, ratio, int(ratio <= 0.9)]
    return row, (scratch_log.val_rows, warm_log.val_rows)


def _assemble_warm(results) -> StudyResult:
    columns = [
        "rep",
        "seed",
        "scratch_steps",
        "scratch_final_val",
        "warm_steps_to_target",
        "step_ratio",
        "accelerated",
    ]
    return StudyResult(
        Study.WARM_START,
        columns,
        [row for row, _ in results],
        extras={"curves": [curves for _, curves in results]},
    )
