"""End-to-end pipeline: original fit, unlearning runs, evaluation, artifacts.

Per seed the pipeline generates a corpus, partitions it, fits the original
model to the train split, then runs one or more unlearning variants against
the same fitted state and evaluates each. All randomness flows from the run
seed through named substreams, so a config plus a seed pins every byte of the
deterministic artifacts. Wall-clock and memory figures are never written to
the report CSVs; they land in ``metadata.json``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import tracemalloc
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .corpus import (
    Dataset,
    Example,
    example_level,
    holdout_examples,
    partition_dataset,
    schedule_blocks,
    split_by_subject,
)
from .engine import (
    RunTrace,
    UnlearnConfig,
    Variant,
    run_gradient_ascent,
    run_unlearning,
    serialize_trace,
)
from .hierarchy import ConceptMap, Level
from .metrics import (
    REPORT_COLUMNS,
    EvalReport,
    accuracy_by_level,
    accuracy_by_subject,
    build_report,
    forgetting_rate,
    knowledge_preservation,
    mia_attack,
)
from .model import FitInfo, ModelState, accuracy, fit_dataset, init_model
from .privacy import NoiseSource, PrivacyParams

BASELINE_NAME = "GradientAscent"


class MissingArtifacts(FileNotFoundError):
    """Plot emission requires artifacts from a prior run."""


def _substream_seeds(seed: int) -> Dict[str, int]:
    state = np.random.SeedSequence(seed).generate_state(8)
    names = ("corpus", "partition", "init", "fit", "schedule", "noise", "holdout")
    return {name: int(state[i]) for i, name in enumerate(names)}


@dataclass
class SeedContext:
    """Everything variant-independent about one seed: corpus + fitted model."""

    seed: int
    substreams: Dict[str, int]
    full: Dataset
    train: Dataset
    validation: Dataset
    test: Dataset
    forget_train: Dataset
    retain_train: Dataset
    forget_test: Dataset
    retain_test: Dataset
    concept_map: ConceptMap
    original: ModelState
    fit_info: FitInfo
    fit_peak_mem: float
    members: Tuple[Example, ...]
    nonmembers: Tuple[Example, ...]
    original_auc: float
    original_retain_acc: float
    original_forget_acc: float


def prepare_seed_context(cfg: RunConfig, seed: int) -> SeedContext:
    """Generate the corpus and fit the original model for one seed."""
    from .corpus import generate_synthetic

    subs = _substream_seeds(seed)
    cc = cfg.corpus
    full, concept_map = generate_synthetic(
        vocab_size=cc.vocab_size,
        n_subjects=cc.n_subjects,
        n_examples=cc.n_examples,
        level_mix=cc.level_mix,
        seed=subs["corpus"],
        question_len=cc.question_len,
        answer_len=cc.answer_len,
        target_general_share=cc.target_general_share,
    )
    train, validation, test = partition_dataset(
        full, cc.split_ratios, subs["partition"], concept_map
    )
    forget_train, retain_train = split_by_subject(train, cc.target_subject)
    forget_test, retain_test = split_by_subject(test, cc.target_subject)

    mc = cfg.model
    fresh = init_model(
        vocab_size=cc.vocab_size,
        d_model=mc.d_model,
        n_blocks=mc.n_blocks,
        lora_rank=mc.lora_rank,
        seed=subs["init"],
        lora_scaling=mc.lora_scaling,
    )
    if cfg.measure_memory:
        tracemalloc.start()
    original, fit_info = fit_dataset(
        fresh,
        train,
        lr=mc.fit_lr,
        batch_size=mc.fit_batch_size,
        max_epochs=mc.fit_max_epochs,
        min_epochs=mc.fit_min_epochs,
        target_accuracy=mc.fit_target_accuracy,
        seed=subs["fit"],
    )
    fit_peak = 1.0
    if cfg.measure_memory:
        _, fit_peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

    # Membership inference targets the subject's private records: the
    # L4-keyed slice of the forget train split, against fresh L4 questions.
    members = tuple(
        e
        for e in forget_train.examples
        if example_level(e, concept_map) == Level.L4
    ) or forget_train.examples
    n_non = cfg.mia_nonmembers or len(members)
    nonmembers = holdout_examples(
        full, concept_map, cc.target_subject, n_non, subs["holdout"], level=Level.L4
    )
    original_attack = mia_attack(original, original, members, nonmembers)
    return SeedContext(
        seed=seed,
        substreams=subs,
        full=full,
        train=train,
        validation=validation,
        test=test,
        forget_train=forget_train,
        retain_train=retain_train,
        forget_test=forget_test,
        retain_test=retain_test,
        concept_map=concept_map,
        original=original,
        fit_info=fit_info,
        fit_peak_mem=float(fit_peak),
        members=tuple(members),
        nonmembers=nonmembers,
        original_auc=original_attack.auc,
        original_retain_acc=accuracy(original, retain_test),
        original_forget_acc=accuracy(original, forget_test),
    )


@dataclass
class VariantResult:
    name: str
    seed: int
    report: EvalReport
    trace: RunTrace
    model_after: ModelState
    details: Dict[str, object]
    wall_seconds: float


def _sampling_rate(cfg: RunConfig, ctx: SeedContext) -> float:
    block = cfg.schedule.block_size
    per_step = block + max(1, math.ceil(block / cfg.schedule.retain_ratio_m))
    return min(1.0, per_step / max(1, len(ctx.train)))


def run_variant(cfg: RunConfig, ctx: SeedContext, variant: Variant) -> VariantResult:
    """Unlearn with one variant and evaluate against the fitted original."""
    engine_cfg: UnlearnConfig = replace(cfg.unlearn, variant=variant)
    privacy = PrivacyParams.create(
        epsilon=cfg.privacy.epsilon,
        delta=cfg.privacy.delta,
        sampling_rate_q=_sampling_rate(cfg, ctx),
        clip_norm_c=cfg.privacy.clip_norm,
        enabled=cfg.privacy.enabled,
    )
    schedule = schedule_blocks(
        ctx.forget_train,
        ctx.retain_train,
        cfg.schedule.block_size,
        cfg.schedule.retain_ratio_m,
        ctx.substreams["schedule"],
    )
    if cfg.measure_memory:
        tracemalloc.start()
    t0 = time.perf_counter()
    model_after, trace = run_unlearning(
        ctx.original,
        schedule,
        ctx.train.by_id(),
        engine_cfg,
        privacy,
        ctx.concept_map,
        noise=NoiseSource(seed=ctx.substreams["noise"]),
        coeff_table=cfg.hierarchy.table(),
        level_cutoffs=tuple(cfg.hierarchy.cutoffs),
    )
    wall = time.perf_counter() - t0
    peak = 1.0
    if cfg.measure_memory:
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

    dp_on = cfg.privacy.enabled and variant is not Variant.NO_DP
    epsilon = cfg.privacy.epsilon if dp_on else math.inf
    return _evaluate(cfg, ctx, variant.value, model_after, trace, wall, peak, epsilon)


def run_baseline(cfg: RunConfig, ctx: SeedContext) -> VariantResult:
    """Plain gradient-ascent unlearning baseline (no projection, no DP)."""
    engine_cfg = replace(cfg.unlearn, variant=Variant.FULL)
    schedule = schedule_blocks(
        ctx.forget_train,
        ctx.retain_train,
        cfg.schedule.block_size,
        cfg.schedule.retain_ratio_m,
        ctx.substreams["schedule"],
    )
    if cfg.measure_memory:
        tracemalloc.start()
    t0 = time.perf_counter()
    model_after, trace = run_gradient_ascent(
        ctx.original, schedule, ctx.train.by_id(), engine_cfg
    )
    wall = time.perf_counter() - t0
    peak = 1.0
    if cfg.measure_memory:
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    return _evaluate(
        cfg, ctx, BASELINE_NAME, model_after, trace, wall, peak, math.inf
    )


def _evaluate(
    cfg: RunConfig,
    ctx: SeedContext,
    name: str,
    model_after: ModelState,
    trace: RunTrace,
    wall_seconds: float,
    peak_mem: float,
    epsilon: float,
) -> VariantResult:
    fr = forgetting_rate(model_after, ctx.forget_test)
    kpr = knowledge_preservation(model_after, ctx.retain_test)
    attack = mia_attack(ctx.original, model_after, ctx.members, ctx.nonmembers)
    acc_levels = accuracy_by_level(model_after, ctx.test, ctx.concept_map)
    retain_subjects = accuracy_by_subject(model_after, ctx.retain_test)
    baseline_hours = max(ctx.fit_info.wall_seconds / 3600.0, 1e-12)
    report = build_report(
        fr=fr,
        kpr=kpr,
        auc=attack.auc,
        epsilon=epsilon,
        acc_by_level_map=acc_levels,
        acc_by_subject_map=retain_subjects,
        trainable=model_after.trainable_param_count(),
        total=model_after.total_param_count(),
        runtime_hours=wall_seconds / 3600.0,
        baseline_runtime_hours=baseline_hours,
        peak_mem=float(peak_mem),
        baseline_peak_mem=float(max(ctx.fit_peak_mem, 1e-12)),
    )
    details: Dict[str, object] = {
        "variant": name,
        "seed": ctx.seed,
        "corpus_seed": ctx.substreams["corpus"],
        "target_subject": cfg.corpus.target_subject,
        "original_auc": ctx.original_auc,
        "original_retain_accuracy": ctx.original_retain_acc,
        "original_forget_accuracy": ctx.original_forget_acc,
        "fit_epochs": ctx.fit_info.epochs,
        "fit_train_accuracy": ctx.fit_info.train_accuracy,
        "subject_accuracy_before": accuracy_by_subject(ctx.original, ctx.test),
        "subject_accuracy_after": accuracy_by_subject(model_after, ctx.test),
        "level_accuracy_before": {
            lv.name: v
            for lv, v in accuracy_by_level(ctx.original, ctx.test, ctx.concept_map).items()
        },
        "level_accuracy_after": {lv.name: v for lv, v in report.acc_by_level.items()},
    }
    return VariantResult(
        name=name,
        seed=ctx.seed,
        report=report,
        trace=trace,
        model_after=model_after,
        details=details,
        wall_seconds=wall_seconds,
    )


# ---------------------------------------------------------------------------
# Artifact emission


def _fmt(x: float) -> str:
    return f"{float(x):.12g}"


def reports_csv(results: Sequence[VariantResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "seed", *REPORT_COLUMNS])
    for r in results:
        row = r.report.deterministic_row()
        writer.writerow([r.name, r.seed] + [_fmt(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def summary_csv(results: Sequence[VariantResult]) -> str:
    """Mean and population std per variant across seeds, fixed column order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["variant", "n_seeds"]
    for col in REPORT_COLUMNS:
        header += [f"{col}_mean", f"{col}_std"]
    writer.writerow(header)
    names = []
    for r in results:
        if r.name not in names:
            names.append(r.name)
    for name in names:
        rows = [r.report.deterministic_row() for r in results if r.name == name]
        out = [name, len(rows)]
        for col in REPORT_COLUMNS:
            vals = np.array([row[col] for row in rows], dtype=float)
            out += [_fmt(vals.mean()), _fmt(float(np.sqrt(np.mean((vals - vals.mean()) ** 2))))]
        writer.writerow(out)
    return buf.getvalue()


def write_artifacts(
    out_dir: str,
    config_bytes: bytes,
    results: Sequence[VariantResult],
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "wb") as fh:
        fh.write(config_bytes)
    with open(os.path.join(out_dir, "reports.csv"), "w", encoding="utf-8") as fh:
        fh.write(reports_csv(results))
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(summary_csv(results))
    for r in results:
        stem = f"{r.name}_seed{r.seed}"
        with open(os.path.join(out_dir, f"trace_{stem}.csv"), "w", encoding="utf-8") as fh:
            fh.write(serialize_trace(r.trace))
        with open(os.path.join(out_dir, f"report_{stem}.txt"), "w", encoding="utf-8") as fh:
            fh.write(r.report.to_text())
        with open(os.path.join(out_dir, f"details_{stem}.json"), "w", encoding="utf-8") as fh:
            json.dump(r.details, fh, indent=2, sort_keys=True)
            fh.write("\n")
    metadata = {
        "written_at_unix": time.time(),
        "runs": [
            {
                "variant": r.name,
                "seed": r.seed,
                "unlearn_wall_seconds": r.wall_seconds,
                "tem_hours": r.report.tem_hours,
                "tem_ratio": r.report.tem,
                "mcr": r.report.mcr,
            }
            for r in results
        ],
    }
    with open(os.path.join(out_dir, "metadata.json"), "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2)
        fh.write("\n")


def run_experiment(
    cfg: RunConfig,
    variants: Sequence[Variant] | None = None,
    include_baseline: bool = False,
    seeds: Sequence[int] | None = None,
) -> List[VariantResult]:
    """Run (variants x seeds), sharing one fitted original model per seed."""
    variants = list(variants) if variants is not None else [cfg.unlearn.variant]
    seeds = list(seeds) if seeds is not None else list(cfg.seeds)
    results: List[VariantResult] = []
    for seed in seeds:
        ctx = prepare_seed_context(cfg, seed)
        for variant in variants:
            results.append(run_variant(cfg, ctx, variant))
        if include_baseline:
            results.append(run_baseline(cfg, ctx))
    order = {v.value: i for i, v in enumerate(Variant)}
    order[BASELINE_NAME] = len(order)
    results.sort(key=lambda r: (order[r.name], seeds.index(r.seed)))
    return results


# ---------------------------------------------------------------------------
# Plot-data emission (tidy CSV series, no rendering)

TOKEN_CATEGORIES = ("surgical", "memorized", "general")


def emit_plot_data(run_dir: str) -> List[str]:
    """Derive tidy plot CSVs from run artifacts; returns written paths."""
    reports_path = os.path.join(run_dir, "reports.csv")
    if not os.path.isdir(run_dir) or not os.path.exists(reports_path):
        raise MissingArtifacts(f"no run artifacts under {run_dir!r}")
    detail_files = sorted(
        f for f in os.listdir(run_dir) if f.startswith("details_") and f.endswith(".json")
    )
    trace_files = sorted(
        f for f in os.listdir(run_dir) if f.startswith("trace_") and f.endswith(".csv")
    )
    if not detail_files or not trace_files:
        raise MissingArtifacts(f"run dir {run_dir!r} lacks trace/details artifacts")
    plots_dir = os.path.join(run_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    written: List[str] = []

    # Per-subject accuracy before/after unlearning.
    path = os.path.join(plots_dir, "per_subject_accuracy.csv")
    with open(path, "w", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "seed", "subject", "phase", "accuracy"])
        for fname in detail_files:
            with open(os.path.join(run_dir, fname), "r", encoding="utf-8") as dfh:
                det = json.load(dfh)
            for phase, key in (("before", "subject_accuracy_before"), ("after", "subject_accuracy_after")):
                for subject in sorted(det[key]):
                    writer.writerow(
                        [det["variant"], det["seed"], subject, phase, _fmt(det[key][subject])]
                    )
    written.append(path)

    # Per-level accuracy, 4 rows per checkpoint (original / after).
    path = os.path.join(plots_dir, "level_accuracy.csv")
    with open(path, "w", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "seed", "checkpoint", "level", "accuracy"])
        for fname in detail_files:
            with open(os.path.join(run_dir, fname), "r", encoding="utf-8") as dfh:
                det = json.load(dfh)
            for checkpoint, key in (("original", "level_accuracy_before"), ("after", "level_accuracy_after")):
                for lv in Level:
                    writer.writerow(
                        [
                            det["variant"],
                            det["seed"],
                            checkpoint,
                            lv.name,
                            _fmt(det[key].get(lv.name, float("nan"))),
                        ]
                    )
    written.append(path)

    # Token-category loss trajectories: surgical=L4, memorized=L3,
    # general=mean(L1, L2).
    path = os.path.join(plots_dir, "token_category_loss.csv")
    with open(path, "w", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "seed", "step", "category", "loss"])
        for fname in trace_files:
            stem = fname[len("trace_") : -len(".csv")]
            variant, _, seed_part = stem.rpartition("_seed")
            with open(os.path.join(run_dir, fname), "r", encoding="utf-8") as tfh:
                reader = csv.DictReader(tfh)
                for row in reader:
                    shared = [
                        v
                        for v in (float(row["loss_l1"]), float(row["loss_l2"]))
                        if not math.isnan(v)
                    ]
                    series = {
                        "surgical": float(row["loss_l4"]),
                        "memorized": float(row["loss_l3"]),
                        "general": sum(shared) / len(shared) if shared else float("nan"),
                    }
                    for category in TOKEN_CATEGORIES:
                        writer.writerow(
                            [variant, seed_part, row["step"], category, _fmt(series[category])]
                        )
    written.append(path)
    return written
