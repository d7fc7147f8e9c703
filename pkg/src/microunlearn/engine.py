"""Dual-strategy unlearning loop.

Per block and step: paired forget/retain gradients, per-group orthogonal
projection modulated by the group's hierarchy alpha, sign-flipped combination
with a drift regularizer, concept-weighted scaling of embedding-row
gradients, clip + Gaussian noise, plain SGD step. Diagonal FIM estimates over
a sliding window drive parameter-level refreshes at block boundaries.

Ablation variants: GGOnly drops the token intervention, CTOnly drops the
projection, NoDP drops the privacy noise (clipping stays, since unclipped
ratio-amplified ascent runs away), NoHierarchy flattens both coefficient
ladders to their means.
"""

from __future__ import annotations

import enum
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from . import privacy as privacy_mod
from .corpus import BlockSchedule, Example
from .hierarchy import (
    DEFAULT_COEFFICIENTS,
    DEFAULT_CUTOFFS,
    EPSILON_STAB,
    ConceptMap,
    Level,
    LevelCoefficients,
    assign_parameter_levels,
    coefficients_for,
    flat_coefficients,
)
from .model import (
    EMBEDDING,
    OUTPUT,
    ForwardCache,
    GradientBundle,
    ModelState,
    ShapeMismatch,
    _forward_arrays,
    apply_update,
    backward,
    batch_arrays,
)
from .privacy import NoiseSource, PrivacyParams


class EmptyBatch(ValueError):
    """A gradient pair needs non-empty batches on both streams."""


class NonFiniteScore(ValueError):
    """Token importance table contains NaN or infinity."""


class DivergenceDetected(RuntimeError):
    """Retain loss blew past the configured ceiling (or went non-finite)."""


class Variant(enum.Enum):
    FULL = "Full"
    GG_ONLY = "GGOnly"
    CT_ONLY = "CTOnly"
    NO_DP = "NoDP"
    NO_HIERARCHY = "NoHierarchy"


ALL_VARIANTS = tuple(Variant)


@dataclass(frozen=True)
class UnlearnConfig:
    """Hyperparameters of the unlearning loop.

    Dataclass defaults are the generic textbook settings; the desk-scale
    benchmark overrides several of them (see config.RunConfig).
    """

    lambda_forget: float = 1.0
    gamma_reg: float = 0.1
    eta_lr: float = 0.05
    alpha_retain_factor: float = 1.0
    clip_norm_c: float = 1.0
    epsilon_stab: float = EPSILON_STAB
    fim_window: int = 32
    variant: Variant = Variant.FULL
    steps_per_block: int = 1
    epochs: int = 3
    initial_param_level: Level = Level.L2
    divergence_multiplier: float = 10.0

    def __post_init__(self):
        if self.lambda_forget < 0 or self.gamma_reg < 0:
            raise ValueError("lambda_forget and gamma_reg must be >= 0")
        if self.eta_lr < 0:
            raise ValueError("eta_lr must be >= 0")
        if self.alpha_retain_factor <= 0:
            raise ValueError("alpha_retain_factor must be > 0")
        if self.clip_norm_c <= 0:
            raise ValueError("clip_norm_c must be > 0")
        if self.epsilon_stab <= 0:
            raise ValueError("epsilon_stab must be > 0")
        if self.fim_window < 1:
            raise ValueError("fim_window must be >= 1")
        if self.steps_per_block < 1 or self.epochs < 1:
            raise ValueError("steps_per_block and epochs must be >= 1")


@dataclass
class FimAccumulator:
    """Sliding-window diagonal FIM estimates for forget and retain streams."""

    capacity: int
    windows: Dict[str, Dict[str, deque]] = field(
        default_factory=lambda: {"forget": {}, "retain": {}}
    )

    def estimate(self, stream: str) -> Dict[str, np.ndarray]:
        """Windowed mean of squared gradients per trainable group."""
        out: Dict[str, np.ndarray] = {}
        for gid, window in self.windows[stream].items():
            out[gid] = np.mean(np.stack(list(window), axis=0), axis=0)
        return out

    def scalar_estimate(self, stream: str, factor_ids: Sequence[str]) -> float:
        """Mean diagonal entry across the given factors (one matrix group)."""
        vals = []
        for fid in factor_ids:
            window = self.windows[stream].get(fid)
            if window:
                est = np.mean(np.stack(list(window), axis=0), axis=0)
                vals.append(float(est.mean()))
        return float(np.mean(vals)) if vals else 0.0


def update_fim(acc: FimAccumulator, g: GradientBundle, stream: str) -> FimAccumulator:
    """Push a squared-gradient snapshot, evicting beyond the window."""
    if stream not in ("forget", "retain"):
        raise ValueError(f"stream must be 'forget' or 'retain', got {stream!r}")
    for gid, arr in g.per_group.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteScore(f"non-finite gradient for group {gid!r}")
        window = acc.windows[stream].setdefault(gid, deque(maxlen=acc.capacity))
        window.append(np.asarray(arr) ** 2)
    return acc


@dataclass(frozen=True)
class TokenImportanceTable:
    """Per-token unlearning weights I(t); the update scaler is 1 + I(t)."""

    scores: Mapping[int, float]


def compute_gradient_pair(
    m: ModelState,
    batch_r: Sequence[Example],
    batch_f: Sequence[Example],
) -> Tuple[GradientBundle, GradientBundle]:
    """Independent retain and forget gradient bundles from one model state."""
    if len(batch_r) == 0 or len(batch_f) == 0:
        raise EmptyBatch("both retain and forget batches must be non-empty")
    g_r = _batch_bundle(m, batch_r)[0]
    g_f = _batch_bundle(m, batch_f)[0]
    return g_r, g_f


def _batch_bundle(
    m: ModelState, examples: Sequence[Example]
) -> Tuple[GradientBundle, ForwardCache]:
    X, mask = batch_arrays(examples)
    cache = _forward_arrays(m, X, mask, X)
    return backward(m, cache), cache


def project_forget_gradient(
    g_f: np.ndarray,
    g_r: np.ndarray,
    alpha_level: float,
    epsilon_stab: float,
) -> np.ndarray:
    """Remove the retain-aligned component of the forget gradient.

    g_f_perp = g_f - alpha * (<g_f, g_r> / (||g_r||^2 + eps)) * g_r, computed
    over the flattened tensors.
    """
    g_f = np.asarray(g_f, dtype=float)
    g_r = np.asarray(g_r, dtype=float)
    if g_f.shape != g_r.shape:
        raise ShapeMismatch(f"shapes differ: {g_f.shape} vs {g_r.shape}")
    inner = float(np.vdot(g_f, g_r))
    denom = float(np.vdot(g_r, g_r)) + epsilon_stab
    if denom == 0.0:
        return g_f.copy()
    return g_f - alpha_level * (inner / denom) * g_r


def regularizer_grad(
    theta_current: np.ndarray,
    theta_original: np.ndarray,
    gamma_reg: float,
) -> np.ndarray:
    """Gradient of gamma * ||theta - theta0||^2: 2 gamma (theta - theta0)."""
    theta_current = np.asarray(theta_current, dtype=float)
    theta_original = np.asarray(theta_original, dtype=float)
    if theta_current.shape != theta_original.shape:
        raise ShapeMismatch(
            f"shapes differ: {theta_current.shape} vs {theta_original.shape}"
        )
    return gamma_reg * 2.0 * (theta_current - theta_original)


def combine_objective(
    g_r: np.ndarray,
    g_f_perp: np.ndarray,
    lambda_forget: float,
    reg_grad: np.ndarray,
) -> np.ndarray:
    """Descent direction: minimize retain loss, maximize forget loss.

    g_total = g_r - lambda * g_f_perp + reg_grad.
    """
    g_r = np.asarray(g_r, dtype=float)
    g_f_perp = np.asarray(g_f_perp, dtype=float)
    reg = np.asarray(reg_grad, dtype=float)
    if not (g_r.shape == g_f_perp.shape == reg.shape):
        raise ShapeMismatch("combine_objective requires matching shapes")
    return g_r - lambda_forget * g_f_perp + reg


def _project_rows(
    arr_f: np.ndarray,
    arr_r: np.ndarray,
    token_level: Mapping[int, Level],
    table: Mapping[Level, LevelCoefficients],
    epsilon_stab: float,
    flat: LevelCoefficients | None,
) -> np.ndarray:
    """Row-wise projection for vocabulary-aligned factors.

    Row t of these factors is token t's parameter slice, so the projection
    uses token t's preservation alpha. Rows with zero retain gradient are
    untouched (their projection coefficient vanishes).
    """
    inner = np.einsum("vr,vr->v", arr_f, arr_r)
    denom = np.einsum("vr,vr->v", arr_r, arr_r) + epsilon_stab
    if flat is not None:
        alphas = np.full(arr_f.shape[0], flat.alpha_preserve)
    else:
        alphas = np.array(
            [table[token_level[t]].alpha_preserve for t in range(arr_f.shape[0])]
        )
    coef = alphas * inner / denom
    return arr_f - coef[:, None] * arr_r


def token_importance(
    grad_f_norm: float,
    grad_r_norm: float,
    beta_level: float,
    epsilon_stab: float,
) -> float:
    """I = beta * |grad_f| / (|grad_r| + eps); beta enters exactly once here."""
    if grad_f_norm < 0 or grad_r_norm < 0:
        raise ValueError("gradient norms must be >= 0")
    if grad_f_norm == 0.0:
        return 0.0
    return beta_level * grad_f_norm / (grad_r_norm + epsilon_stab)


def build_importance_table(
    g_f: GradientBundle,
    g_r: GradientBundle,
    token_level: Mapping[int, Level],
    coeff_table: Mapping[Level, LevelCoefficients] | None = None,
    epsilon_stab: float = EPSILON_STAB,
    flat_beta: float | None = None,
) -> TokenImportanceTable:
    """Score every token seen by the forget stream.

    ``flat_beta`` overrides the per-level intensity (hierarchy-free mode).
    """
    scores: Dict[int, float] = {}
    for t, row in g_f.per_token_embedding.items():
        fnorm = float(np.linalg.norm(row))
        r_row = g_r.per_token_embedding.get(t)
        rnorm = float(np.linalg.norm(r_row)) if r_row is not None else 0.0
        if flat_beta is not None:
            beta = flat_beta
        else:
            beta = coefficients_for(token_level[t], coeff_table).beta_unlearn
        scores[t] = token_importance(fnorm, rnorm, beta, epsilon_stab)
    return TokenImportanceTable(scores=scores)


def apply_token_intervention(
    g_total: GradientBundle,
    table: TokenImportanceTable,
) -> GradientBundle:
    """Scale embedding-row gradients of token t by (1 + I(t)).

    Acts on the actionable embedding factor rows (embedding.B is row-aligned
    with the vocabulary) and the per-token diagnostic rows; every other group
    passes through unchanged.
    """
    for t, s in table.scores.items():
        if not math.isfinite(s):
            raise NonFiniteScore(f"non-finite importance for token {t}")
    per_group = dict(g_total.per_group)
    emb_key = f"{EMBEDDING}.B"
    if emb_key in per_group and table.scores:
        scaled = per_group[emb_key].copy()
        for t, s in table.scores.items():
            scaled[t] *= 1.0 + s
        per_group[emb_key] = scaled
    per_token = dict(g_total.per_token_embedding)
    for t, s in table.scores.items():
        if t in per_token:
            per_token[t] = per_token[t] * (1.0 + s)
    return GradientBundle(
        per_group=per_group,
        per_token_embedding=per_token,
        loss_value=g_total.loss_value,
    )


# ---------------------------------------------------------------------------
# Run trace


@dataclass(frozen=True)
class StepRecord:
    step: int
    block: int
    loss_forget: float
    loss_retain: float
    level_losses: Mapping[Level, float]
    grad_norm_preclip: float
    grad_norm_postclip: float


@dataclass
class RunTrace:
    """Per-step records plus (non-serialized) applied updates and wall time."""

    records: List[StepRecord] = field(default_factory=list)
    updates: List[Dict[str, np.ndarray]] = field(default_factory=list)
    wall_seconds: float = 0.0


TRACE_HEADER = (
    "step,block,loss_forget,loss_retain,"
    "loss_l1,loss_l2,loss_l3,loss_l4,grad_norm_preclip,grad_norm_postclip"
)


def serialize_trace(trace: RunTrace) -> str:
    """Line-delimited text form; wall time and raw updates are excluded."""
    lines = [TRACE_HEADER]
    for r in trace.records:
        lvl = [r.level_losses.get(lv, float("nan")) for lv in Level]
        fields = [str(r.step), str(r.block)] + [
            _fmt(x)
            for x in (r.loss_forget, r.loss_retain, *lvl, r.grad_norm_preclip, r.grad_norm_postclip)
        ]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return f"{float(x):.12g}"


def _level_losses(
    caches: Sequence[ForwardCache], token_level: Mapping[int, Level]
) -> Dict[Level, float]:
    """Mean masked cross-entropy bucketed by target-token level."""
    sums: Dict[Level, float] = {}
    counts: Dict[Level, int] = {}
    for cache in caches:
        masked = np.argwhere(cache.mask)
        for b, p in masked:
            lv = token_level[int(cache.targets[b, p])]
            sums[lv] = sums.get(lv, 0.0) + float(cache.position_nll[b, p])
            counts[lv] = counts.get(lv, 0) + 1
    return {lv: sums[lv] / counts[lv] for lv in sums}


# ---------------------------------------------------------------------------
# Main loop


def run_unlearning(
    m: ModelState,
    schedule: BlockSchedule,
    examples_by_id: Mapping[int, Example],
    cfg: UnlearnConfig,
    privacy: PrivacyParams,
    concept_map: ConceptMap,
    noise: NoiseSource | None = None,
    coeff_table: Mapping[Level, LevelCoefficients] | None = None,
    level_cutoffs: Tuple[float, float, float] = DEFAULT_CUTOFFS,
) -> Tuple[ModelState, RunTrace]:
    """Execute the dual-strategy loop over the block schedule."""
    t0 = time.perf_counter()
    table = DEFAULT_COEFFICIENTS if coeff_table is None else coeff_table
    noise = noise if noise is not None else NoiseSource(seed=0)
    variant = cfg.variant
    dp_active = privacy.enabled and variant is not Variant.NO_DP

    flat = flat_coefficients(table) if variant is Variant.NO_HIERARCHY else None
    theta0 = {k: v.copy() for k, v in m.trainable_arrays().items()}
    param_level: Dict[str, Level] = dict(concept_map.param_level) or {
        name: cfg.initial_param_level for name in m.matrix_names()
    }
    fim = FimAccumulator(capacity=cfg.fim_window)
    trace = RunTrace()
    ceiling = None
    step = 0

    for _ in range(cfg.epochs):
        for block_idx, (forget_ids, retain_ids) in enumerate(schedule.blocks):
            batch_f = [examples_by_id[i] for i in forget_ids]
            batch_r = [examples_by_id[i] for i in retain_ids]
            if not batch_f or not batch_r:
                raise EmptyBatch(f"block {block_idx} has an empty stream")
            for _ in range(cfg.steps_per_block):
                step += 1
                g_r, cache_r = _batch_bundle(m, batch_r)
                g_f, cache_f = _batch_bundle(m, batch_f)
                update_fim(fim, g_f, "forget")
                update_fim(fim, g_r, "retain")

                if ceiling is None:
                    base = max(g_f.loss_value, math.log(m.vocab_size))
                    ceiling = cfg.divergence_multiplier * base
                if not (math.isfinite(g_r.loss_value) and math.isfinite(g_f.loss_value)):
                    raise DivergenceDetected(f"non-finite loss at step {step}")
                if g_r.loss_value > ceiling:
                    raise DivergenceDetected(
                        f"retain loss {g_r.loss_value:.3g} exceeded ceiling "
                        f"{ceiling:.3g} at step {step}"
                    )

                theta = m.trainable_arrays()
                g_total_groups: Dict[str, np.ndarray] = {}
                skip_proj = variant is Variant.CT_ONLY
                for name in m.matrix_names():
                    for fid in m.factor_ids_of_matrix(name):
                        arr_f = g_f.per_group[fid]
                        arr_r = g_r.per_group[fid]
                        if skip_proj:
                            f_perp = arr_f
                        elif fid in (f"{EMBEDDING}.B", f"{OUTPUT}.B"):
                            # Vocabulary-aligned rows are per-token parameters;
                            # each row projects with its own token's alpha.
                            f_perp = _project_rows(
                                arr_f,
                                arr_r,
                                concept_map.token_level,
                                table,
                                cfg.epsilon_stab,
                                flat,
                            )
                        else:
                            if flat is not None:
                                alpha = flat.alpha_preserve
                            else:
                                alpha = coefficients_for(
                                    param_level[name], table
                                ).alpha_preserve
                            f_perp = project_forget_gradient(
                                arr_f, arr_r, alpha, cfg.epsilon_stab
                            )
                        reg = regularizer_grad(theta[fid], theta0[fid], cfg.gamma_reg)
                        g_total_groups[fid] = combine_objective(
                            cfg.alpha_retain_factor * arr_r,
                            f_perp,
                            cfg.lambda_forget,
                            reg,
                        )

                combined_rows: Dict[int, np.ndarray] = {}
                all_tokens = set(g_f.per_token_embedding) | set(g_r.per_token_embedding)
                for t in sorted(all_tokens):
                    fr = g_f.per_token_embedding.get(t)
                    rr = g_r.per_token_embedding.get(t)
                    row = np.zeros(m.d_model)
                    if rr is not None:
                        row = row + cfg.alpha_retain_factor * rr
                    if fr is not None:
                        row = row - cfg.lambda_forget * fr
                    combined_rows[t] = row
                g_total = GradientBundle(
                    per_group=g_total_groups,
                    per_token_embedding=combined_rows,
                    loss_value=g_r.loss_value,
                )

                if variant is not Variant.GG_ONLY:
                    imp = build_importance_table(
                        g_f,
                        g_r,
                        concept_map.token_level,
                        table,
                        cfg.epsilon_stab,
                        flat_beta=(flat.beta_unlearn if flat is not None else None),
                    )
                    g_total = apply_token_intervention(g_total, imp)

                # Clipping always applies (unclipped ratio-amplified ascent is
                # a runaway; C may be set infinite to disable). The calibrated
                # Gaussian noise is the differential-privacy mechanism proper
                # and is what the NoDP variant or disabled privacy removes.
                pre_norm = privacy_mod.global_norm(g_total.per_group)
                g_tilde = privacy_mod.clip(g_total, privacy.clip_norm_c)
                post_norm = privacy_mod.global_norm(g_tilde.per_group)
                sigma = privacy.sigma if dp_active else 0.0
                g_tilde = privacy_mod.add_gaussian_noise(g_tilde, sigma, noise)

                delta = {
                    gid: -cfg.eta_lr * arr for gid, arr in g_tilde.per_group.items()
                }
                m = apply_update(m, delta)

                trace.records.append(
                    StepRecord(
                        step=step,
                        block=block_idx,
                        loss_forget=g_f.loss_value,
                        loss_retain=g_r.loss_value,
                        level_losses=_level_losses(
                            (cache_r, cache_f), concept_map.token_level
                        ),
                        grad_norm_preclip=pre_norm,
                        grad_norm_postclip=post_norm,
                    )
                )
                trace.updates.append(delta)

            # Refresh parameter levels from windowed FIM at block boundaries.
            fim_f: Dict[str, float] = {}
            fim_r: Dict[str, float] = {}
            est_f = fim.estimate("forget")
            est_r = fim.estimate("retain")
            for name in m.matrix_names():
                fids = [f for f in m.factor_ids_of_matrix(name) if f in est_f]
                if fids:
                    fim_f[name] = float(np.mean([est_f[f].mean() for f in fids]))
                    fim_r[name] = float(np.mean([est_r[f].mean() for f in fids]))
            if fim_f:
                param_level = dict(
                    assign_parameter_levels(
                        fim_f, fim_r, level_cutoffs, cfg.epsilon_stab
                    )
                )

    trace.wall_seconds = time.perf_counter() - t0
    return m, trace


def run_gradient_ascent(
    m: ModelState,
    schedule: BlockSchedule,
    examples_by_id: Mapping[int, Example],
    cfg: UnlearnConfig,
) -> Tuple[ModelState, RunTrace]:
    """Baseline: plain gradient ascent on the forget stream.

    No projection, no token weighting, no DP; retain batches are evaluated for
    the trace but never influence the update.
    """
    t0 = time.perf_counter()
    trace = RunTrace()
    step = 0
    for _ in range(cfg.epochs):
        for block_idx, (forget_ids, retain_ids) in enumerate(schedule.blocks):
            batch_f = [examples_by_id[i] for i in forget_ids]
            batch_r = [examples_by_id[i] for i in retain_ids]
            if not batch_f:
                raise EmptyBatch(f"block {block_idx} has no forget examples")
            for _ in range(cfg.steps_per_block):
                step += 1
                g_f, cache_f = _batch_bundle(m, batch_f)
                loss_r = float("nan")
                if batch_r:
                    g_r, _ = _batch_bundle(m, batch_r)
                    loss_r = g_r.loss_value
                norm = privacy_mod.global_norm(g_f.per_group)
                delta = {gid: cfg.eta_lr * arr for gid, arr in g_f.per_group.items()}
                m = apply_update(m, delta)
                trace.records.append(
                    StepRecord(
                        step=step,
                        block=block_idx,
                        loss_forget=g_f.loss_value,
                        loss_retain=loss_r,
                        level_losses={},
                        grad_norm_preclip=norm,
                        grad_norm_postclip=norm,
                    )
                )
                trace.updates.append(delta)
    trace.wall_seconds = time.perf_counter() - t0
    return m, trace
