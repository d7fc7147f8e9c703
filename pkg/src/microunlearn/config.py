"""Run configuration: dataclass schema plus a strict JSON loader.

The config file is JSON with a required ``schema_version`` field. Unknown
keys are errors (named by their dotted path), not warnings, so config drift
fails fast. A RunConfig fully determines a run: identical config bytes give
identical reports.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Tuple

from .engine import UnlearnConfig, Variant
from .hierarchy import (
    DEFAULT_COEFFICIENTS,
    DEFAULT_CUTOFFS,
    Level,
    LevelCoefficients,
    validate_coefficient_table,
)

SCHEMA_VERSION = 1


class ConfigParseError(ValueError):
    """Config file malformed, with the offending key path in the message."""


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 256
    n_subjects: int = 4
    n_examples: int = 2000
    level_mix: Tuple[float, float, float, float] = (0.4, 0.3, 0.2, 0.1)
    question_len: int = 6
    answer_len: int = 1
    split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    target_subject: str = "surgery"
    target_general_share: float = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 48
    n_blocks: int = 2
    lora_rank: int = 4
    lora_scaling: float = 4.0
    fit_lr: float = 1.0
    fit_batch_size: int = 64
    fit_max_epochs: int = 400
    fit_min_epochs: int = 0
    fit_target_accuracy: float = 0.995


@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: float = 4.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    enabled: bool = True


@dataclass(frozen=True)
class HierarchyConfig:
    cutoffs: Tuple[float, float, float] = DEFAULT_CUTOFFS
    # Coefficient ladder, overridable per level: {"L1": [alpha, beta], ...}
    coefficients: Mapping[str, Tuple[float, float]] = field(
        default_factory=lambda: {
            lv.name: (c.alpha_preserve, c.beta_unlearn)
            for lv, c in DEFAULT_COEFFICIENTS.items()
        }
    )

    def table(self) -> Dict[Level, LevelCoefficients]:
        table = {
            Level[name]: LevelCoefficients(float(pair[0]), float(pair[1]))
            for name, pair in self.coefficients.items()
        }
        validate_coefficient_table(table)
        return table


@dataclass(frozen=True)
class ScheduleConfig:
    block_size: int = 32
    retain_ratio_m: int = 1


def _benchmark_unlearn() -> UnlearnConfig:
    """Desk-scale benchmark settings (calibrated on seeds 42/123/789).

    The stabilizer is raised from the generic 1e-5: private tokens here have
    exactly zero retain gradient, so the generic value makes importance
    ratios explode and the whole clipped update collapses onto a handful of
    rows. 0.01 keeps token weighting dominant without starving the
    projection.
    """
    return UnlearnConfig(
        lambda_forget=0.5,
        gamma_reg=1.5,
        eta_lr=0.07,
        alpha_retain_factor=12.0,
        clip_norm_c=5.0,
        epsilon_stab=0.01,
        steps_per_block=1,
        epochs=3,
    )


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    unlearn: UnlearnConfig = field(default_factory=_benchmark_unlearn)
    privacy: PrivacyConfig = field(
        default_factory=lambda: PrivacyConfig(clip_norm=5.0)
    )
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seeds: Tuple[int, ...] = (42, 123, 789)
    mia_nonmembers: int = 0  # 0 means: match the member count
    measure_memory: bool = True


_TUPLE_FIELDS = {
    "level_mix",
    "split_ratios",
    "cutoffs",
    "seeds",
}


def _coerce(value: Any, target_type: Any, path: str) -> Any:
    if target_type is Variant or target_type == Variant:
        try:
            return Variant(value)
        except ValueError as exc:
            raise ConfigParseError(f"{path}: unknown variant {value!r}") from exc
    if target_type is Level or target_type == Level:
        try:
            return Level[value] if isinstance(value, str) else Level(value)
        except (KeyError, ValueError) as exc:
            raise ConfigParseError(f"{path}: unknown level {value!r}") from exc
    return value


def _build_dataclass(cls, data: Mapping[str, Any], path: str):
    if not isinstance(data, Mapping):
        raise ConfigParseError(f"{path}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in data if k not in fields]
    if unknown:
        raise ConfigParseError(f"{path}.{unknown[0]}: unknown config key")
    kwargs: Dict[str, Any] = {}
    for name, f in fields.items():
        if name not in data:
            continue
        sub_path = f"{path}.{name}"
        value = data[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str)
            and f.type
            in {
                "CorpusConfig",
                "ModelConfig",
                "PrivacyConfig",
                "HierarchyConfig",
                "ScheduleConfig",
                "UnlearnConfig",
            }
        ):
            actual = {
                "CorpusConfig": CorpusConfig,
                "ModelConfig": ModelConfig,
                "PrivacyConfig": PrivacyConfig,
                "HierarchyConfig": HierarchyConfig,
                "ScheduleConfig": ScheduleConfig,
                "UnlearnConfig": UnlearnConfig,
            }.get(f.type if isinstance(f.type, str) else f.type.__name__)
            kwargs[name] = _build_dataclass(actual, value, sub_path)
            continue
        if name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigParseError(f"{sub_path}: expected a list")
            kwargs[name] = tuple(value)
            continue
        if name == "coefficients":
            if not isinstance(value, Mapping):
                raise ConfigParseError(f"{sub_path}: expected an object")
            bad = [k for k in value if k not in Level.__members__]
            if bad:
                raise ConfigParseError(f"{sub_path}.{bad[0]}: unknown level")
            kwargs[name] = {k: tuple(v) for k, v in value.items()}
            continue
        if name == "variant":
            kwargs[name] = _coerce(value, Variant, sub_path)
            continue
        if name == "initial_param_level":
            kwargs[name] = _coerce(value, Level, sub_path)
            continue
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigParseError("config root must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigParseError(
            f"schema_version: expected {SCHEMA_VERSION}, got {version!r}"
        )
    cfg = _build_dataclass(RunConfig, data, "config")
    try:
        cfg.hierarchy.table()  # validates ladder totality and monotonicity
    except (KeyError, ValueError) as exc:
        raise ConfigParseError(f"config.hierarchy.coefficients: {exc}") from exc
    cut = cfg.hierarchy.cutoffs
    if len(cut) != 3 or not (cut[0] < cut[1] < cut[2]):
        raise ConfigParseError(
            f"config.hierarchy.cutoffs: need 3 ascending values, got {list(cut)}"
        )
    if not cfg.seeds:
        raise ConfigParseError("config.seeds: need at least one seed")
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_to_json(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to canonical JSON (for provenance echoes)."""

    def convert(obj: Any) -> Any:
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {
                f.name: convert(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
            }
        if isinstance(obj, Variant):
            return obj.value
        if isinstance(obj, Level):
            return obj.name
        if isinstance(obj, tuple):
            return [convert(x) for x in obj]
        if isinstance(obj, Mapping):
            return {k: convert(v) for k, v in obj.items()}
        return obj

    return json.dumps(convert(cfg), indent=2, sort_keys=False) + "\n"
