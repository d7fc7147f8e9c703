"""Evaluation metrics, membership-inference attack, and report assembly.

Conventions: accuracies and rates are fractions in [0, 1] internally; percent
formatting happens only at the presentation layer. The attack is a
loss-threshold membership test scored by exact rank-statistic AUC with ties
counted one half.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from .corpus import Dataset, Example, example_level
from .hierarchy import ConceptMap, Level
from .model import EmptyDataset, ModelState, accuracy, per_example_losses, predictions


class MissingLevel(ValueError):
    """A required hierarchy level has no accuracy entry."""


class TooFewSubjects(ValueError):
    """Subdomain differentiation needs at least two subjects."""


def forgetting_rate(model_after: ModelState, forget_test: Dataset) -> float:
    """FR = 1 - accuracy on the forget test set."""
    if len(forget_test) == 0:
        raise EmptyDataset("forget test set is empty")
    return 1.0 - accuracy(model_after, forget_test)


def knowledge_preservation(model_after: ModelState, retain_test: Dataset) -> float:
    """KPR = accuracy on the retain test set."""
    if len(retain_test) == 0:
        raise EmptyDataset("retain test set is empty")
    return accuracy(model_after, retain_test)


def unlearning_score(fr: float, kpr: float) -> float:
    """US: arithmetic mean of forgetting rate and preservation."""
    return (fr + kpr) / 2.0


def hmta(fr: float, kpr: float) -> float:
    """Harmonic mean of FR and KPR; defined 0 when both vanish."""
    if fr + kpr <= 0.0:
        return 0.0
    return 2.0 * fr * kpr / (fr + kpr)


def mia_resistance(auc: float) -> float:
    """1 - 2|AUC - 0.5|: 1.0 means the attacker is at chance."""
    return 1.0 - 2.0 * abs(auc - 0.5)


def privacy_risk(auc: float) -> float:
    """2|AUC - 0.5|, the complement of MIA resistance."""
    return 2.0 * abs(auc - 0.5)


def rank_auc(member_scores: Sequence[float], nonmember_scores: Sequence[float]) -> float:
    """AUC via the Mann-Whitney rank statistic, ties counted one half.

    Rank sums over half-integer average ranks are exact in binary floating
    point, so this matches the O(n^2) pairwise count bit for bit.
    """
    members = np.asarray(member_scores, dtype=float)
    nonmembers = np.asarray(nonmember_scores, dtype=float)
    if members.size == 0 or nonmembers.size == 0:
        raise EmptyDataset("both score sets must be non-empty")
    combined = np.concatenate([members, nonmembers])
    uniq, inv, counts = np.unique(combined, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    lower = upper - counts + 1
    avg_rank = (lower + upper) / 2.0
    ranks = avg_rank[inv]
    n, m = members.size, nonmembers.size
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


@dataclass(frozen=True)
class AttackResult:
    member_scores: Tuple[float, ...]
    nonmember_scores: Tuple[float, ...]
    auc: float


def mia_attack(
    model_original: ModelState,
    model_after: ModelState,
    members: Dataset | Sequence[Example],
    nonmembers: Dataset | Sequence[Example],
) -> AttackResult:
    """Loss-threshold membership inference against ``model_after``.

    Scores are negative losses under the post-unlearning model (lower loss
    reads as more member-like); ``model_original`` fixes the attack's frame of
    reference and is what callers attack separately for the before/after AUC
    comparison.
    """
    del model_original
    mem = members.examples if isinstance(members, Dataset) else tuple(members)
    non = nonmembers.examples if isinstance(nonmembers, Dataset) else tuple(nonmembers)
    if len(mem) == 0 or len(non) == 0:
        raise EmptyDataset("member and non-member sets must be non-empty")
    member_scores = tuple(float(-x) for x in per_example_losses(model_after, mem))
    nonmember_scores = tuple(float(-x) for x in per_example_losses(model_after, non))
    return AttackResult(
        member_scores=member_scores,
        nonmember_scores=nonmember_scores,
        auc=rank_auc(member_scores, nonmember_scores),
    )


def concept_hierarchy_separation(acc_by_level: Mapping[Level, float]) -> float:
    """CHS: accuracy gap between L1 and L4, as fractions."""
    if Level.L1 not in acc_by_level or Level.L4 not in acc_by_level:
        raise MissingLevel("CHS needs accuracies for both L1 and L4")
    return acc_by_level[Level.L1] - acc_by_level[Level.L4]


def medical_subdomain_differentiation(acc_by_subject: Mapping[str, float]) -> float:
    """MSD: population standard deviation of non-target subject accuracies."""
    if len(acc_by_subject) < 2:
        raise TooFewSubjects("need accuracies for at least 2 subjects")
    values = np.array(list(acc_by_subject.values()), dtype=float)
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def efficiency_metrics(
    trainable: int,
    total: int,
    runtime_hours: float,
    baseline_runtime_hours: float,
    peak_mem: float,
    baseline_peak_mem: float,
) -> Tuple[float, float, float]:
    """(PER, TEM, MCR): parameter, time and memory ratios vs the baseline."""
    if total == 0:
        raise ZeroDivisionError("total parameter count is zero")
    if baseline_runtime_hours <= 0 or baseline_peak_mem <= 0:
        raise ZeroDivisionError("baseline runtime and memory must be positive")
    per = trainable / total
    tem = runtime_hours / baseline_runtime_hours
    mcr = peak_mem / baseline_peak_mem
    return per, tem, mcr


def accuracy_by_level(
    m: ModelState,
    d: Dataset,
    concept_map: ConceptMap,
) -> Dict[Level, float]:
    """Accuracy bucketed by example concept level (highest token level)."""
    if len(d) == 0:
        raise EmptyDataset("dataset is empty")
    hits = predictions(m, d.examples)
    sums: Dict[Level, int] = {}
    counts: Dict[Level, int] = {}
    for e, hit in zip(d.examples, hits):
        lv = example_level(e, concept_map)
        sums[lv] = sums.get(lv, 0) + int(hit)
        counts[lv] = counts.get(lv, 0) + 1
    return {lv: sums[lv] / counts[lv] for lv in sorted(sums)}


def accuracy_by_subject(m: ModelState, d: Dataset) -> Dict[str, float]:
    """Accuracy bucketed by subject label."""
    if len(d) == 0:
        raise EmptyDataset("dataset is empty")
    hits = predictions(m, d.examples)
    sums: Dict[str, int] = {}
    counts: Dict[str, int] = {}
    for e, hit in zip(d.examples, hits):
        sums[e.subject] = sums.get(e.subject, 0) + int(hit)
        counts[e.subject] = counts.get(e.subject, 0) + 1
    return {s: sums[s] / counts[s] for s in sorted(sums)}


REPORT_COLUMNS = (
    "fr",
    "kpr",
    "us",
    "hmta",
    "mia_auc",
    "mia_resist",
    "privacy_risk",
    "dp_strength",
    "acc_l1",
    "acc_l2",
    "acc_l3",
    "acc_l4",
    "chs",
    "msd",
    "per",
)


@dataclass(frozen=True)
class EvalReport:
    """All run metrics; tem/mcr are wall-clock dependent and live outside the
    deterministic CSV row (see :func:`deterministic_row`)."""

    fr: float
    kpr: float
    us: float
    hmta: float
    mia_auc: float
    mia_resist: float
    privacy_risk: float
    dp_strength: float
    acc_by_level: Mapping[Level, float]
    chs: float
    msd: float
    per: float
    mcr: float
    tem: float
    tem_hours: float = 0.0

    def validate(self) -> None:
        if abs(self.us - (self.fr + self.kpr) / 2.0) > 1e-12:
            raise ValueError("US is not the mean of FR and KPR")
        expected_hmta = hmta(self.fr, self.kpr)
        if abs(self.hmta - expected_hmta) > 1e-12:
            raise ValueError("HMTA does not match its definition")
        if abs(self.mia_resist - mia_resistance(self.mia_auc)) > 1e-12:
            raise ValueError("MIA resistance does not match its definition")

    def deterministic_row(self) -> Dict[str, float]:
        row = {
            "fr": self.fr,
            "kpr": self.kpr,
            "us": self.us,
            "hmta": self.hmta,
            "mia_auc": self.mia_auc,
            "mia_resist": self.mia_resist,
            "privacy_risk": self.privacy_risk,
            "dp_strength": self.dp_strength,
            "chs": self.chs,
            "msd": self.msd,
            "per": self.per,
        }
        for lv in Level:
            row[f"acc_l{int(lv)}"] = self.acc_by_level.get(lv, float("nan"))
        return {col: row[col] for col in REPORT_COLUMNS}

    def to_text(self) -> str:
        lines = [f"{k}={v:.12g}" for k, v in self.deterministic_row().items()]
        lines.append(f"tem_ratio={self.tem:.6g}")
        lines.append(f"tem_hours={self.tem_hours:.6g}")
        lines.append(f"mcr={self.mcr:.6g}")
        return "\n".join(lines) + "\n"


def build_report(
    fr: float,
    kpr: float,
    auc: float,
    epsilon: float,
    acc_by_level_map: Mapping[Level, float],
    acc_by_subject_map: Mapping[str, float],
    trainable: int,
    total: int,
    runtime_hours: float,
    baseline_runtime_hours: float,
    peak_mem: float,
    baseline_peak_mem: float,
) -> EvalReport:
    """Assemble a consistent EvalReport from raw measurements."""
    from .privacy import dp_strength as dp_strength_fn

    per, tem, mcr = efficiency_metrics(
        trainable,
        total,
        runtime_hours,
        baseline_runtime_hours,
        peak_mem,
        baseline_peak_mem,
    )
    report = EvalReport(
        fr=fr,
        kpr=kpr,
        us=unlearning_score(fr, kpr),
        hmta=hmta(fr, kpr),
        mia_auc=auc,
        mia_resist=mia_resistance(auc),
        privacy_risk=privacy_risk(auc),
        dp_strength=dp_strength_fn(epsilon),
        acc_by_level=dict(acc_by_level_map),
        chs=concept_hierarchy_separation(acc_by_level_map),
        msd=medical_subdomain_differentiation(acc_by_subject_map),
        per=per,
        mcr=mcr,
        tem=tem,
        tem_hours=runtime_hours,
    )
    report.validate()
    return report
