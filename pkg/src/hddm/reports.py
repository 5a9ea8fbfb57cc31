"""Report rendering: delimited tables plus matplotlib figures side by side.

Every study writes ``<study>.csv`` (byte-deterministic) and a small set of
PNG figures into the same directory: the headline comparison for the study,
plus a scatter of generated samples over the reference set where that makes
sense. Figures are for eyeballs; the CSV is the artifact of record.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .objectives import WeightingProfile
from .studies import Study, StudyResult


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)


def _group_by(dicts, key, value):
    grouped = defaultdict(list)
    for row in dicts:
        grouped[row[key]].append(row[value])
    return grouped


def write_study_outputs(result: StudyResult, out_dir) -> list[Path]:
    """CSV plus figures for one study run; returns every path written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = out_dir / f"{result.study.value}.csv"
    result.to_csv(csv_path)
    written.append(csv_path)

    if result.study in (Study.MONO_VS_DECENTRALIZED, Study.STRATEGY_SWEEP):
        written.append(_strategy_figure(result, out_dir / "frechet_by_strategy.png"))
    elif result.study is Study.THRESHOLD_SWEEP:
        written.append(_threshold_figure(result, out_dir / "threshold_sweep.png"))
    elif result.study is Study.MIX_SWEEP:
        written.append(_mix_figure(result, out_dir / "mix_sweep.png"))
    elif result.study is Study.WARM_START:
        written.append(_warm_start_figure(result, out_dir / "warm_start.png"))

    scatter = result.extras.get("scatter")
    if scatter is not None:
        written.append(_scatter_figure(scatter, out_dir / "samples_scatter.png"))
    return written


def _strategy_figure(result: StudyResult, path) -> Path:
    rows = result.as_dicts()
    order = []
    for row in rows:
        if row["strategy"] not in order:
            order.append(row["strategy"])
    grouped = _group_by(rows, "strategy", "frechet")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    means = [float(np.mean(grouped[name])) for name in order]
    ax.bar(order, means, color="#7393b3")
    for i, name in enumerate(order):
        vals = grouped[name]
        ax.plot([i] * len(vals), vals, "k.", ms=5, alpha=0.7)
    ax.set_ylabel("Fréchet distance (raw coords)")
    ax.set_title("Inference strategy comparison (dots: repetitions)")
    _finish(fig, path)
    return Path(path)


def _threshold_figure(result: StudyResult, path) -> Path:
    rows = result.as_dicts()
    taus = sorted({row["tau"] for row in rows})
    frech = _group_by(rows, "tau", "frechet")
    div = _group_by(rows, "tau", "diversity_mean_pairwise")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for ax, data, label in ((ax1, frech, "Fréchet distance"), (ax2, div, "mean pairwise diversity")):
        for tau in taus:
            ax.plot([tau] * len(data[tau]), data[tau], "k.", ms=4, alpha=0.5)
        ax.plot(taus, [float(np.mean(data[tau])) for tau in taus], "o-", color="#b35757")
        ax.set_xlabel("switch threshold tau")
        ax.set_ylabel(label)
    fig.suptitle("Quality / diversity trade-off across switch thresholds")
    _finish(fig, path)
    return Path(path)


def _mix_figure(result: StudyResult, path) -> Path:
    rows = result.as_dicts()
    order = []
    for row in rows:
        if row["mix"] not in order:
            order.append(row["mix"])
    intra = _group_by(rows, "mix", "intra_condition_diversity")
    frech = _group_by(rows, "mix", "frechet")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.bar(order, [float(np.mean(intra[m])) for m in order], color="#6aa84f")
    ax1.set_ylabel("intra-condition diversity")
    ax2.bar(order, [float(np.mean(frech[m])) for m in order], color="#7393b3")
    ax2.set_ylabel("Fréchet distance")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=15)
    fig.suptitle("Objective-mix comparison (means over repetitions)")
    _finish(fig, path)
    return Path(path)


def _warm_start_figure(result: StudyResult, path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    curves = result.extras.get("curves") or []
    if curves:
        scratch, warm = curves[0]
        ax1.plot([s for s, _ in scratch], [v for _, v in scratch], label="scratch init")
        ax1.plot([s for s, _ in warm], [v for _, v in warm], label="converted init")
        ax1.axhline(scratch[-1][1], color="gray", lw=0.8, ls="--")
        ax1.set_xlabel("step")
        ax1.set_ylabel("validation loss")
        ax1.set_yscale("log")
        ax1.legend()
        ax1.set_title("validation curves (repetition 0)")
    rows = result.as_dicts()
    reps = [row["rep"] for row in rows]
    ratios = [row["step_ratio"] for row in rows]
    ax2.bar([str(r) for r in reps], ratios, color="#b38f57")
    ax2.axhline(0.9, color="red", lw=0.8, ls="--", label="0.9 x scratch budget")
    ax2.set_xlabel("repetition")
    ax2.set_ylabel("steps-to-target ratio")
    ax2.legend()
    _finish(fig, path)
    return Path(path)


def sample_scatter_figure(samples, reference, label, path) -> Path:
    """Generated samples over the reference set, for quick visual checks."""
    return _scatter_figure((samples, reference, label), path)


def _scatter_figure(payload, path) -> Path:
    samples, reference, label = payload
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(reference[:, 0], reference[:, 1], s=6, alpha=0.35, label="reference", color="#999999")
    ax.scatter(samples[:, 0], samples[:, 1], s=6, alpha=0.5, label=f"samples ({label})", color="#b35757")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    _finish(fig, path)
    return Path(path)


def weighting_profile_figure(profile: WeightingProfile, path) -> Path:
    """Companion figure for the weighting-profile CSV dump."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.plot(profile.t, profile.w_eps, label="w_eps = alpha^2/sigma^2")
    ax.plot(profile.t, profile.w_v, label="w_v = 1/sigma^2")
    ax.plot(profile.t, profile.ratio, label="ratio = 1/alpha^2")
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    ax.set_title("Implicit timestep weighting by objective")
    _finish(fig, path)
    return Path(path)
