"""Component and mixing-weight sweeps.

Each sweep trains the same base configuration under a set of variant
overrides and seeds, evaluates every run on its split's evaluation
halves, and aggregates per-variant medians with the seed list attached
to every row. Runs are independent, so they can be dispatched to worker
processes; results are ordered by (variant, seed) before aggregation
either way.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .encoder import EncoderConfig
from .evaluation import evaluate_split
from .seeding import derive_seed
from .synth import Clip, split_support_query
from .trainer import TrainConfig, train

__all__ = [
    "COMPONENT_VARIANTS",
    "alpha_variants",
    "RunOutcome",
    "run_single",
    "run_matrix",
    "aggregate_rows",
    "table_text",
    "plot_loss_curves",
    "plot_metric_bars",
]

# the three-row component ablation: contrastive only, plus the pairing
# branch, plus the two-stage update
COMPONENT_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("cl", {"alpha": 0.0, "use_bl": False, "use_meta_stages": False}),
    ("cl_bl", {"use_bl": True, "use_meta_stages": False}),
    ("cl_bl_meta", {"use_bl": True, "use_meta_stages": True}),
)


def alpha_variants(alphas: tuple[float, ...]) -> tuple[tuple[str, dict], ...]:
    return tuple((f"alpha={alpha:g}", {"alpha": alpha, "use_bl": True, "use_meta_stages": True})
                 for alpha in alphas)


@dataclass
class RunOutcome:
    variant: str
    seed: int
    metrics: dict[str, float]
    loss_curve: list[float]
    wall_time_s: float


@dataclass(frozen=True)
class SweepSettings:
    """Data-prep and probe knobs shared by every run of a sweep."""

    support_fraction: float = 0.5
    eval_train_fraction: float = 0.5
    probe_iters: int = 300
    probe_lr: float = 0.5
    ks: tuple[int, ...] = (1, 5, 10, 20, 50)


def run_single(corpus: list[Clip], base_cfg: TrainConfig, enc_config: EncoderConfig,
               variant: str, overrides: dict, seed: int,
               settings: SweepSettings) -> RunOutcome:
    cfg = replace(base_cfg, seed=seed, **overrides)
    split = split_support_query(corpus, settings.support_fraction,
                                derive_seed(seed, "split"), settings.eval_train_fraction)
    params, record = train(cfg, enc_config, split)
    report = evaluate_split(params, enc_config, split, ks=settings.ks,
                            probe_iters=settings.probe_iters, probe_lr=settings.probe_lr)
    metrics = {"probe_top1": report.probe_top1}
    for k, acc in report.retrieval.items():
        metrics[f"retrieval_top{k}"] = acc
    curve = [row["l_meta_sup"] for row in record.iterations]
    return RunOutcome(variant=variant, seed=seed, metrics=metrics,
                      loss_curve=curve, wall_time_s=record.wall_time_s)


def _job(args) -> RunOutcome:
    return run_single(*args)


def run_matrix(corpus: list[Clip], base_cfg: TrainConfig, enc_config: EncoderConfig,
               variants: tuple[tuple[str, dict], ...], seeds: tuple[int, ...],
               settings: SweepSettings, workers: int = 1) -> list[RunOutcome]:
    jobs = [(corpus, base_cfg, enc_config, variant, overrides, seed, settings)
            for variant, overrides in variants for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_job, jobs))
    else:
        outcomes = [_job(job) for job in jobs]
    variant_order = {variant: i for i, (variant, _) in enumerate(variants)}
    outcomes.sort(key=lambda oc: (variant_order[oc.variant], oc.seed))
    return outcomes


def aggregate_rows(outcomes: list[RunOutcome], metrics: tuple[str, ...]) -> list[dict]:
    """One row per (variant, metric): median/min/max plus per-seed values."""
    rows: list[dict] = []
    seen: list[str] = []
    for outcome in outcomes:
        if outcome.variant not in seen:
            seen.append(outcome.variant)
    for variant in seen:
        members = [oc for oc in outcomes if oc.variant == variant]
        for metric in metrics:
            values = [oc.metrics[metric] for oc in members]
            rows.append({
                "variant": variant,
                "metric": metric,
                "median": float(np.median(values)),
                "min": float(np.min(values)),
                "max": float(np.max(values)),
                "n_seeds": len(members),
                "seeds": ",".join(str(oc.seed) for oc in members),
                "values": ",".join(repr(v) for v in values),
            })
    return rows


def table_text(rows: list[dict], config_echo: dict) -> str:
    columns = ("variant", "metric", "median", "min", "max", "n_seeds", "seeds", "values")
    lines = [f"# {key} = {config_echo[key]}" for key in sorted(config_echo)]
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(
            repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns
        ))
    return "\n".join(lines) + "\n"


def plot_loss_curves(outcomes: list[RunOutcome], path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = []
    for outcome in outcomes:
        if outcome.variant not in variants:
            variants.append(outcome.variant)
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(8, 5))
    for i, variant in enumerate(variants):
        for j, outcome in enumerate(oc for oc in outcomes if oc.variant == variant):
            ax.plot(outcome.loss_curve, color=cmap(i % 10), alpha=0.5,
                    label=variant if j == 0 else None)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective (support stage)")
    ax.set_title("training loss by variant")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={})
    plt.close(fig)


def plot_metric_bars(rows: list[dict], metric: str, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    chosen = [row for row in rows if row["metric"] == metric]
    labels = [row["variant"] for row in chosen]
    medians = [row["median"] for row in chosen]
    lows = [row["median"] - row["min"] for row in chosen]
    highs = [row["max"] - row["median"] for row in chosen]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.bar(range(len(chosen)), medians, yerr=[lows, highs], capsize=4, color="#4878a8")
    ax.set_xticks(range(len(chosen)))
    ax.set_xticklabels(labels, rotation=15)
    ax.set_ylabel(f"{metric} (median, min-max whiskers)")
    ax.set_title(f"{metric} by variant")
    fig.tight_layout()
    fig.savefig(path, metadata={})
    plt.close(fig)
