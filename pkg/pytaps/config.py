import math
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .core_math import inverse_normal_cdf

try:
    from enum import StrEnum
except ImportError:
    from enum import Enum

    class StrEnum(str, Enum):
        """Custom StrEnum object for python3.10."""


class InputError(ValueError):
    """Invalid arguments from the caller, reported with exit code 2."""


class Mode(StrEnum):
    """Episode variants: the full method and its baselines/ablations.

    >>> Mode

    """

    taps: str = "taps"
    entropy_only: str = "entropy_only"
    skip_high_entropy: str = "skip_high_entropy"
    random_query: str = "random_query"
    random_evict: str = "random_evict"
    coarse_only: str = "coarse_only"


class ShiftKind(StrEnum):
    """Distribution shift applied to the test stream.

    >>> ShiftKind

    """

    none: str = "none"
    mean_shift: str = "mean_shift"
    class_conditional_shift: str = "class_conditional_shift"


class SweepAxis(StrEnum):
    """Ablation axes understood by ``run_sweep``.

    >>> SweepAxis

    """

    budget_alpha: str = "budget_alpha"
    buffer_capacity: str = "buffer_capacity"
    alpha_ce: str = "alpha_ce"
    selection_policy: str = "selection_policy"
    eviction_policy: str = "eviction_policy"
    alignment_granularity: str = "alignment_granularity"


class EvictionPolicy(StrEnum):
    """Victim selection used once the label buffer is full.

    >>> EvictionPolicy

    """

    class_balanced: str = "class_balanced"
    random: str = "random"


Z_SELECTION = inverse_normal_cdf(0.95)
Z_HIGH = inverse_normal_cdf(0.975)


class PolicyConfig(BaseModel):
    """Dynamic-threshold query policy parameters.

    >>> PolicyConfig

    """

    model_config = ConfigDict(frozen=True)

    tau0: float = 1.0
    t_min: int = Field(30, gt=0)
    alpha: float = Field(0.05, gt=0.0, lt=1.0)
    z_selection: float = Z_SELECTION
    z_high: float = Z_HIGH
    switch_ratio: Optional[float] = Field(None, gt=0.0, lt=1.0)
    hard_cap: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def validate_policy(self) -> "PolicyConfig":
        """Checks the ordering constraints between the z-scores and the ratios."""
        if self.z_high <= self.z_selection:
            raise ValueError(
                f"z_high ({self.z_high}) must exceed z_selection ({self.z_selection})"
            )
        if self.switch_ratio is not None and self.switch_ratio < self.alpha:
            raise ValueError(
                f"switch_ratio ({self.switch_ratio}) must not be below alpha ({self.alpha})"
            )
        return self

    @property
    def switch_level(self) -> float:
        """Running query ratio at which the strict z-score engages."""
        return self.alpha if self.switch_ratio is None else self.switch_ratio


class WorldConfig(BaseModel):
    """Synthetic source dataset and shifted test stream.

    >>> WorldConfig

    """

    model_config = ConfigDict(frozen=True)

    k_classes: int = Field(5, ge=2)
    dim: int = Field(16, ge=1)
    class_sep: float = Field(3.0, ge=0.0)
    source_noise: float = Field(1.0, ge=0.0)
    n_source: int = Field(200, ge=1)
    shift_kind: ShiftKind = ShiftKind.mean_shift
    shift_magnitude: float = Field(2.0, ge=0.0)
    stream_len: int = Field(1000, ge=1)
    class_mix: Optional[List[float]] = None
    seed: int = 0

    # noinspection PyMethodParameters
    @field_validator("class_mix", mode="before")
    def parse_class_mix(cls, value: Any) -> Any:
        """Accepts comma separated strings as they arrive from the CLI or a config file."""
        if isinstance(value, str):
            value = value.strip()
            if not value:
                return None
            return [float(part) for part in value.split(",")]
        return value

    @model_validator(mode="after")
    def validate_class_mix(self) -> "WorldConfig":
        """Class frequencies must be a distribution over ``k_classes`` entries."""
        if self.class_mix is not None:
            if len(self.class_mix) != self.k_classes:
                raise ValueError(
                    f"class_mix has {len(self.class_mix)} entries, expected {self.k_classes}"
                )
            if any(p < 0 for p in self.class_mix):
                raise ValueError("class_mix entries must be non-negative")
            if not math.isclose(sum(self.class_mix), 1.0, abs_tol=1e-6):
                raise ValueError("class_mix entries must sum to 1")
        return self

    @property
    def mix(self) -> List[float]:
        """Class frequencies, uniform when unset."""
        if self.class_mix is None:
            return [1.0 / self.k_classes] * self.k_classes
        return list(self.class_mix)


class LossWeights(BaseModel):
    """Weights of the supervised and alignment terms of the composite loss.

    >>> LossWeights

    """

    model_config = ConfigDict(frozen=True)

    alpha_ce: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    beta_coarse: float = Field(0.0, ge=0.0, allow_inf_nan=False)
    gamma_fine: float = Field(0.0, ge=0.0, allow_inf_nan=False)


class AdapterConfig(BaseModel):
    """Toy encoder and augmentation knobs.

    >>> AdapterConfig

    """

    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(2, ge=1)
    temperature: float = Field(0.1, gt=0.0)
    noise_scale: float = Field(0.5, ge=0.0)
    mask_frac: float = Field(0.1, ge=0.0, lt=1.0)
    weight_gain: float = Field(1.0, gt=0.0)


class RunConfig(BaseSettings):
    """Complete configuration of one episode.

    >>> RunConfig

    """

    world: WorldConfig = Field(default_factory=WorldConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    adapter: AdapterConfig = Field(default_factory=AdapterConfig)
    buffer_capacity: int = Field(50, ge=1)
    minibatch: int = Field(16, ge=1)
    views: int = Field(16, ge=1)
    rho: float = Field(0.25, gt=0.0, le=1.0)
    lr: float = Field(0.05, gt=0.0)
    mode: Mode = Mode.taps
    seed: int = 0
    skip_quantile: float = Field(0.99, gt=0.0, lt=1.0)
    entropy_window: int = Field(200, ge=0)
    record_timing: bool = False

    model_config = SettingsConfigDict(
        env_prefix="PYTAPS_", env_nested_delimiter="__", extra="ignore", frozen=True
    )

    @model_validator(mode="after")
    def validate_mode(self) -> "RunConfig":
        """Mode-specific coherence checks."""
        weights = self.weights
        if self.mode == Mode.coarse_only and weights.beta_coarse + weights.gamma_fine <= 0:
            raise ValueError(
                "mode 'coarse_only' requires weights.beta_coarse or weights.gamma_fine > 0"
            )
        if self.entropy_window == 1:
            raise ValueError("entropy_window is 0 for all history or at least 2")
        return self

    @property
    def queries(self) -> bool:
        """Whether this mode ever asks the oracle."""
        return self.mode not in (Mode.entropy_only, Mode.skip_high_entropy)

    @property
    def class_targets(self) -> bool:
        """Whether buffer samples align with class rather than global source moments."""
        return self.mode != Mode.coarse_only


def _normalize_key(key: str) -> str:
    """Maps ``policy.hard-cap`` style keys onto field paths."""
    return key.strip().lower().replace("-", "_")


def config_keys() -> List[str]:
    """Every flat, dotted key accepted by the loader."""
    keys = []
    for name, field in RunConfig.model_fields.items():
        annotation = field.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            keys.extend(f"{name}.{sub}" for sub in annotation.model_fields)
        else:
            keys.append(name)
    return keys


def unflatten(flat: Dict[str, Any]) -> Dict[str, Any]:
    """Turns ``{"policy.alpha": "0.05"}`` into ``{"policy": {"alpha": "0.05"}}``.

    Args:
        flat: Dotted keys mapped to raw values.

    Returns:
        Dict[str, Any]:
        Nested mapping ready for ``RunConfig`` validation.
    """
    known = set(config_keys())
    nested: Dict[str, Any] = {}
    for raw_key, value in flat.items():
        key = _normalize_key(raw_key)
        if key not in known:
            raise InputError(f"unknown configuration key {raw_key!r}")
        # blank values fall back to the field default
        if isinstance(value, str) and not value.strip():
            continue
        if "." in key:
            head, tail = key.split(".", 1)
            nested.setdefault(head, {})[tail] = value
        else:
            nested[key] = value
    return nested


def load_config(
    filepath: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Builds a ``RunConfig`` from a flat key=value file and CLI overrides.

    Args:
        filepath: Optional config file with one ``dotted.key=value`` per line.
        overrides: Dotted keys that take precedence over the file.

    Returns:
        RunConfig:
        Validated configuration.
    """
    flat: Dict[str, Any] = {}
    if filepath:
        flat.update(
            {k: v for k, v in dotenv_values(filepath).items() if v is not None}
        )
    for key, value in (overrides or {}).items():
        flat[key] = value
    nested = unflatten(flat)
    return RunConfig(**nested)


def with_overrides(cfg: RunConfig, flat: Dict[str, Any]) -> RunConfig:
    """Returns a copy of ``cfg`` with dotted keys replaced and re-validated."""
    merged = cfg.model_dump(mode="json")
    for section, values in unflatten(flat).items():
        if isinstance(values, dict):
            merged[section] = {**merged[section], **values}
        else:
            merged[section] = values
    return RunConfig(**merged)


def dump_flat(cfg: RunConfig) -> List[str]:
    """Serializes a config as ``key=value`` lines that ``load_config`` reads back."""
    lines = []
    dumped = cfg.model_dump(mode="json")
    for key in config_keys():
        if "." in key:
            head, tail = key.split(".", 1)
            value = dumped[head][tail]
        else:
            value = dumped[key]
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, list):
            value = ",".join(repr(float(v)) for v in value)
        lines.append(f"{key}={value}")
    return lines
