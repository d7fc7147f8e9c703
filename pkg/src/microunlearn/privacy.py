"""Differential-privacy mechanism: clipping, calibrated Gaussian noise.

The noise multiplier follows sigma = q * sqrt(2 * ln(1.25/delta)) / epsilon
with q the sampling rate (batch size / dataset size). Clipping is global-norm
over all trainable groups jointly, matching a single Clip(g, C) on the whole
update. No accountant is kept across steps; a single static epsilon is
reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .model import GradientBundle


class InvalidPrivacyParams(ValueError):
    """Privacy parameters outside their legal ranges."""


def calibrate_sigma(q: float, epsilon: float, delta: float) -> float:
    """Noise multiplier for (epsilon, delta) at sampling rate q."""
    if not (0.0 < q <= 1.0):
        raise InvalidPrivacyParams(f"sampling rate q must be in (0, 1], got {q}")
    if not (epsilon > 0.0) or not math.isfinite(epsilon):
        raise InvalidPrivacyParams(f"epsilon must be finite and > 0, got {epsilon}")
    if not (0.0 < delta < 1.0):
        raise InvalidPrivacyParams(f"delta must be in (0, 1), got {delta}")
    return q * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def dp_strength(epsilon: float) -> float:
    """Privacy strength score in [0, 1]: 1/(1+epsilon), 0 for no DP."""
    if math.isinf(epsilon):
        return 0.0
    if epsilon <= 0:
        raise InvalidPrivacyParams(f"epsilon must be > 0 or infinite, got {epsilon}")
    return 1.0 / (1.0 + epsilon)


@dataclass(frozen=True)
class PrivacyParams:
    """Static privacy configuration for one run."""

    epsilon: float
    delta: float
    sampling_rate_q: float
    clip_norm_c: float
    sigma: float
    enabled: bool

    @classmethod
    def create(
        cls,
        epsilon: float,
        delta: float,
        sampling_rate_q: float,
        clip_norm_c: float,
        enabled: bool = True,
    ) -> "PrivacyParams":
        if clip_norm_c <= 0:
            raise InvalidPrivacyParams(f"clip norm must be > 0, got {clip_norm_c}")
        sigma = calibrate_sigma(sampling_rate_q, epsilon, delta) if enabled else 0.0
        return cls(
            epsilon=epsilon,
            delta=delta,
            sampling_rate_q=sampling_rate_q,
            clip_norm_c=clip_norm_c,
            sigma=sigma,
            enabled=enabled,
        )


@dataclass
class NoiseSource:
    """Seeded Gaussian stream; identical seed and draw order reproduce noise."""

    seed: int
    draws: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.default_rng(np.random.SeedSequence(self.seed))

    def normal(self, shape) -> np.ndarray:
        self.draws += 1
        return self._gen.normal(0.0, 1.0, size=shape)


def global_norm(per_group: Mapping[str, np.ndarray]) -> float:
    """L2 norm over all group tensors jointly."""
    total = 0.0
    for arr in per_group.values():
        total += float(np.sum(np.asarray(arr) ** 2))
    return math.sqrt(total)


def clip(g: GradientBundle, c: float) -> GradientBundle:
    """Scale the whole bundle down to global norm C when it exceeds C.

    Only trainable-group tensors are clipped; per-token embedding rows are a
    diagnostic view and are rescaled by the same factor for consistency.
    """
    if c <= 0:
        raise InvalidPrivacyParams(f"clip norm must be > 0, got {c}")
    norm = global_norm(g.per_group)
    if norm <= c:
        return g
    scale = c / norm
    return GradientBundle(
        per_group={k: v * scale for k, v in g.per_group.items()},
        per_token_embedding={t: v * scale for t, v in g.per_token_embedding.items()},
        loss_value=g.loss_value,
    )


def add_gaussian_noise(g: GradientBundle, sigma: float, src: NoiseSource) -> GradientBundle:
    """Add iid N(0, sigma^2) to every trainable coordinate; sigma=0 is identity."""
    if sigma < 0:
        raise InvalidPrivacyParams(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return g
    noised: Dict[str, np.ndarray] = {}
    for key in sorted(g.per_group):
        noised[key] = g.per_group[key] + sigma * src.normal(g.per_group[key].shape)
    return GradientBundle(
        per_group=noised,
        per_token_embedding=dict(g.per_token_embedding),
        loss_value=g.loss_value,
    )
