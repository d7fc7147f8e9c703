"""Four-level concept hierarchy with per-level modulation coefficients.

The hierarchy coordinates the two unlearning strategies: each level carries a
preservation coefficient (alpha, modulates gradient projection strength) and
an unlearning intensity (beta, modulates token importance weights). Levels run
from L1 (fundamental, maximally preserved) to L4 (target domain, maximally
unlearned).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, Tuple


class DuplicateAnnotation(ValueError):
    """A vocabulary id was annotated with more than one level."""


class MissingAnnotation(ValueError):
    """A vocabulary id has no level annotation."""


class NonFiniteFim(ValueError):
    """A Fisher-information scalar was NaN or infinite."""


class Level(enum.IntEnum):
    """Concept levels, totally ordered L1 < L2 < L3 < L4."""

    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4


@dataclass(frozen=True)
class LevelCoefficients:
    """Preservation/unlearning intensities attached to one level."""

    alpha_preserve: float
    beta_unlearn: float

    def __post_init__(self):
        if not (0.0 <= self.alpha_preserve <= 1.0):
            raise ValueError(f"alpha_preserve out of [0,1]: {self.alpha_preserve}")
        if not (0.0 <= self.beta_unlearn <= 1.0):
            raise ValueError(f"beta_unlearn out of [0,1]: {self.beta_unlearn}")


# Default ladder: alpha non-increasing, beta non-decreasing with level.
DEFAULT_COEFFICIENTS: Mapping[Level, LevelCoefficients] = {
    Level.L1: LevelCoefficients(alpha_preserve=1.0, beta_unlearn=0.1),
    Level.L2: LevelCoefficients(alpha_preserve=0.8, beta_unlearn=0.3),
    Level.L3: LevelCoefficients(alpha_preserve=0.6, beta_unlearn=0.7),
    Level.L4: LevelCoefficients(alpha_preserve=0.2, beta_unlearn=1.0),
}

DEFAULT_CUTOFFS: Tuple[float, float, float] = (0.5, 1.0, 2.0)

# Shared stabilizer reused wherever a retain-side quantity sits in a denominator.
EPSILON_STAB = 1e-5


def coefficients_for(
    level: Level,
    table: Mapping[Level, LevelCoefficients] | None = None,
) -> LevelCoefficients:
    """Return the (alpha_preserve, beta_unlearn) pair for a level.

    Pure lookup; ``table`` overrides the default ladder.
    """
    table = DEFAULT_COEFFICIENTS if table is None else table
    return table[Level(level)]


def validate_coefficient_table(table: Mapping[Level, LevelCoefficients]) -> None:
    """Check the ladder is total and monotone (alpha down, beta up)."""
    for lv in Level:
        if lv not in table:
            raise ValueError(f"coefficient table missing level {lv.name}")
    levels = sorted(Level)
    for lo, hi in zip(levels, levels[1:]):
        if table[lo].alpha_preserve < table[hi].alpha_preserve:
            raise ValueError("alpha_preserve must be non-increasing in level")
        if table[lo].beta_unlearn > table[hi].beta_unlearn:
            raise ValueError("beta_unlearn must be non-decreasing in level")


@dataclass(frozen=True)
class ConceptMap:
    """Level assignments for vocabulary ids and for parameter groups.

    Immutable after construction; refreshing parameter levels produces a new
    instance (see :func:`with_param_levels`).
    """

    token_level: Mapping[int, Level] = field(default_factory=dict)
    param_level: Mapping[str, Level] = field(default_factory=dict)

    def with_param_levels(self, param_level: Mapping[str, Level]) -> "ConceptMap":
        return replace(self, param_level=dict(param_level))


def assign_token_levels(
    vocab_annotations: Iterable[Tuple[int, Level]],
    vocab_size: int,
) -> ConceptMap:
    """Build the token part of a ConceptMap from (vocab-id, level) pairs.

    Every id in ``range(vocab_size)`` must be annotated exactly once.
    """
    token_level: dict[int, Level] = {}
    for vid, lv in vocab_annotations:
        if vid in token_level:
            raise DuplicateAnnotation(f"vocab id {vid} annotated twice")
        token_level[vid] = Level(lv)
    missing = [v for v in range(vocab_size) if v not in token_level]
    if missing:
        raise MissingAnnotation(f"unannotated vocab ids: {missing[:8]}")
    extra = [v for v in token_level if not (0 <= v < vocab_size)]
    if extra:
        raise MissingAnnotation(f"annotations outside vocabulary: {extra[:8]}")
    return ConceptMap(token_level=token_level)


def assign_parameter_levels(
    fim_forget: Mapping[str, float],
    fim_retain: Mapping[str, float],
    cutoffs: Sequence[float] = DEFAULT_CUTOFFS,
    epsilon_stab: float = EPSILON_STAB,
) -> Mapping[str, Level]:
    """Assign a level to each parameter group from its FIM forget/retain ratio.

    A group with ratio r = fim_forget / (fim_retain + epsilon_stab) lands in
    L1 below the first cutoff, L2 below the second, L3 below the third, else
    L4. Higher ratio means the group is more informative for forgetting than
    retaining, hence more eligible for modification.
    """
    c1, c2, c3 = cutoffs
    if not (c1 < c2 < c3):
        raise ValueError(f"cutoffs must be strictly ascending, got {cutoffs}")
    levels: dict[str, Level] = {}
    for group in fim_forget:
        ff = float(fim_forget[group])
        fr = float(fim_retain.get(group, 0.0))
        if not (math.isfinite(ff) and math.isfinite(fr)):
            raise NonFiniteFim(f"non-finite FIM for group {group!r}")
        if ff < 0.0 or fr < 0.0:
            raise NonFiniteFim(f"negative FIM for group {group!r}")
        ratio = ff / (fr + epsilon_stab)
        if ratio < c1:
            levels[group] = Level.L1
        elif ratio < c2:
            levels[group] = Level.L2
        elif ratio < c3:
            levels[group] = Level.L3
        else:
            levels[group] = Level.L4
    return levels


def flat_coefficients(
    table: Mapping[Level, LevelCoefficients] | None = None,
) -> LevelCoefficients:
    """Level-independent coefficients: the across-level mean of the ladder.

    Used by the hierarchy-free ablation so overall intensities are kept while
    level structure is removed.
    """
    table = DEFAULT_COEFFICIENTS if table is None else table
    alpha = sum(table[lv].alpha_preserve for lv in Level) / len(Level)
    beta = sum(table[lv].beta_unlearn for lv in Level) / len(Level)
    return LevelCoefficients(alpha_preserve=alpha, beta_unlearn=beta)
