"""Command-line pipeline: cluster, train, convert, sample, evaluate.

One INI config plus one seed drives everything; every command reads only
its declared inputs, writes its outputs atomically, and is re-runnable.
Expert training jobs are safe to launch as concurrent OS processes against
the same output directory — they share nothing but the clustered dataset
file, which is exactly the decentralization story made operational.

Layout under the output directory:

    dataset.csv, centroids.csv        cluster
    expert_<k>.hddm, expert_<k>_curve.csv
                                      train-expert --k <k>
    router.hddm, router_curve.csv     train-router
    samples.csv, trajectory_audit.csv, conversion_audit.csv,
    samples_scatter.png               sample
    <study>/<study>.csv + figures     evaluate --study <study>

HDDM_THREADS caps worker parallelism inside evaluate (repetition fan-out).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import diff_checkpoints, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_default_config, load_experiment_config
from .conversion import ConversionAudit
from .errors import HddmError, SpecError
from .io_utils import atomic_write_text
from .objectives import Objective
from .partition import (
    SyntheticDataset,
    generate_mixture,
    hierarchical_kmeans,
    load_dataset_csv,
    save_centroids_csv,
    save_dataset_csv,
    shard,
)
from .reports import write_study_outputs
from .rngstream import derive_seed
from .sampler import sample as run_sampler
from .sampler import save_samples_csv
from .studies import Study, run_study
from .training import train_expert, train_router


def _load_config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return load_experiment_config(args.config, overrides)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise SpecError(f"missing input {path} — run `hddm {hint}` first")
    return path


def _read_pipeline_dataset(out_dir: Path):
    data, labels = load_dataset_csv(_require(out_dir / "dataset.csv", "cluster"))
    if labels is None:
        raise SpecError(f"{out_dir / 'dataset.csv'} carries no cluster assignment")
    return data, labels


def cmd_cluster(args) -> int:
    cfg = _load_config(args)
    out = cfg.out_path()
    data = generate_mixture(cfg.dataset_spec(), cfg.n_points, derive_seed(cfg.seed, "pipeline", "data"))
    assignment = hierarchical_kmeans(
        data, cfg.m_fine, cfg.k, metric=cfg.metric, seed=derive_seed(cfg.seed, "pipeline", "cluster")
    )
    save_dataset_csv(out / "dataset.csv", data, assignment)
    save_centroids_csv(out / "centroids.csv", assignment)
    sizes = np.bincount(assignment.assignment, minlength=cfg.k)
    print(f"clustered {len(data)} points into {cfg.k} shards: {sizes.tolist()}")
    print(f"wrote {out / 'dataset.csv'} and {out / 'centroids.csv'}")
    return 0


def cmd_train_expert(args) -> int:
    cfg = _load_config(args)
    out = cfg.out_path()
    k = args.k
    if not 0 <= k < cfg.k:
        raise SpecError(f"--k must lie in [0, {cfg.k})")
    data, labels = _read_pipeline_dataset(out)
    shard_k = shard(data, labels, k)
    mix = cfg.mix()
    train_cfg = cfg.expert_train_config(
        derive_seed(cfg.seed, "pipeline", "expert", k), mix.objectives[k], mix.schedules[k]
    )
    model, log = train_expert(shard_k, train_cfg, cfg.expert_model_config(), cond_id=k)
    save_checkpoint(model, out / f"expert_{k}.hddm")
    log.to_csv(out / f"expert_{k}_curve.csv")
    first, last = log.decile_means()
    print(
        f"expert {k} ({mix.objectives[k].name.lower()}): {train_cfg.steps} steps on "
        f"{len(shard_k)} points, loss {first:.4f} -> {last:.4f}"
    )
    print(f"wrote {out / f'expert_{k}.hddm'}")
    return 0


def cmd_train_router(args) -> int:
    cfg = _load_config(args)
    out = cfg.out_path()
    data, labels = _read_pipeline_dataset(out)
    router_cfg = cfg.router_train_config(derive_seed(cfg.seed, "pipeline", "router"))
    router, log = train_router(data, labels, cfg.mix(), router_cfg, cfg.router_model_config())
    save_checkpoint(router, out / "router.hddm")
    log.to_csv(out / "router_curve.csv")
    first, last = log.decile_means()
    print(f"router: {router_cfg.steps} steps, cross-entropy {first:.4f} -> {last:.4f}")
    print(f"wrote {out / 'router.hddm'}")
    return 0


def cmd_convert_checkpoint(args) -> int:
    cfg = _load_config(args)
    source = load_checkpoint(args.src)
    objective = Objective[args.objective.upper()]
    schedule = cfg.schedule_by_name(args.schedule)
    from .training import convert_checkpoint as convert

    converted = convert(source, objective, schedule, derive_seed(cfg.seed, "pipeline", "convert"))
    save_checkpoint(converted, args.dst)
    print(
        f"converted {args.src} ({source.objective.name.lower()}) -> "
        f"{args.dst} ({objective.name.lower()}, {args.schedule} schedule)"
    )
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = cfg.out_path()
    experts = [
        load_checkpoint(_require(out / f"expert_{k}.hddm", f"train-expert --k {k}"))
        for k in range(cfg.k)
    ]
    router = load_checkpoint(_require(out / "router.hddm", "train-router"))
    audit = ConversionAudit()
    sampler_cfg = cfg.sampler_config(derive_seed(cfg.seed, "pipeline", "sample"))
    cond = args.cond
    trajectory = run_sampler(experts, router, sampler_cfg, cond=cond, audit=audit)
    save_samples_csv(out / "samples.csv", trajectory.terminal, cond)
    trajectory.audit_to_csv(out / "trajectory_audit.csv")
    audit.to_csv(out / "conversion_audit.csv")
    from .reports import sample_scatter_figure

    reference = generate_mixture(
        cfg.dataset_spec(), min(cfg.n_eval, 2048), derive_seed(cfg.seed, "pipeline", "reference")
    ).points
    sample_scatter_figure(trajectory.terminal, reference, cfg.selection, out / "samples_scatter.png")
    print(
        f"sampled {sampler_cfg.batch} trajectories x {sampler_cfg.steps} steps "
        f"({cfg.selection}, cfg={sampler_cfg.cfg_scale})"
    )
    print(f"wrote {out / 'samples.csv'}, audits, and samples_scatter.png")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    study = Study(args.study)
    result = run_study(study, cfg, progress=lambda msg: print(f"  {msg}", flush=True))
    paths = write_study_outputs(result, cfg.out_path() / study.value)
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_diff_checkpoint(args) -> int:
    rows = diff_checkpoints(args.a, args.b)
    width = max(len(name) for name, _, _, _ in rows)
    differing = 0
    for name, section, status, delta in rows:
        differing += status != "equal"
        detail = "" if status == "equal" else f"  max|diff|={delta:.6g}"
        print(f"{name:<{width}}  {section:<4}  {status}{detail}")
    identical = differing == 0
    print(f"{'identical' if identical else f'{differing} tensors differ'}")
    return 0


def cmd_default_config(args) -> int:
    text = dump_default_config()
    if args.out_file:
        atomic_write_text(args.out_file, text)
        print(f"wrote {args.out_file}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hddm",
        description="Heterogeneous decentralized diffusion at desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("cluster", help="generate the dataset and shard it")
    common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-expert", help="train one expert on its shard")
    common(p)
    p.add_argument("--k", type=int, required=True, help="expert / shard index")
    p.set_defaults(func=cmd_train_expert)

    p = sub.add_parser("train-router", help="train the cluster router")
    common(p)
    p.set_defaults(func=cmd_train_router)

    p = sub.add_parser("convert-checkpoint", help="re-tag a checkpoint for a new objective")
    common(p)
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--objective", choices=("epsilon", "velocity"), required=True)
    p.add_argument("--schedule", choices=("linear", "cosine"), required=True)
    p.set_defaults(func=cmd_convert_checkpoint)

    p = sub.add_parser("sample", help="run the fused ODE sampler from checkpoints")
    common(p)
    p.add_argument("--cond", type=int, help="condition id (omit for unconditional)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="run a study end to end and render reports")
    common(p)
    p.add_argument("--study", choices=[s.value for s in Study], required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diff-checkpoint", help="compare two checkpoints tensor by tensor")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_diff_checkpoint)

    p = sub.add_parser("default-config", help="print the annotated default config")
    p.add_argument("-o", "--out-file", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_default_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HddmError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
