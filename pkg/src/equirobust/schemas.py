"""
Pydantic schemas for equirobust: declarative configs and report records.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from enum import Enum
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "equirobust.report/1"
CONFIG_SCHEMA = "equirobust.config/1"

DEFAULT_CHANNEL_PLANS = {
    4: [32, 64, 128, 128],
    10: [32, 32, 64, 64, 128, 128, 256, 256, 256, 256],
}


class Strict(BaseModel):
    """Base for config documents: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid", use_enum_values=True)


class ArchitectureId(str, Enum):
    """Model families that `models.build` knows how to construct"""
    BASELINE = "baseline"
    PARALLEL_ROT = "parallel_rot"
    PARALLEL_SCALE = "parallel_scale"
    PARALLEL_ROT_SCALE = "parallel_rot_scale"
    CASCADED = "cascaded"
    WEIGHTED_PARALLEL = "weighted_parallel"
    FULLY_EQUIVARIANT = "fully_equivariant"
    LINEAR = "linear"


class Aggregation(str, Enum):
    CONCAT = "concat"
    AVERAGE = "average"


class ScaleSet(Strict):
    """Discrete scale group G_s = {α_1, ..., α_k} and how its branches are combined"""
    factors: list[float] = Field(default_factory=lambda: [0.75, 1.0, 1.25],
                                 description="Resize factors, ascending, all positive")
    aggregation: Aggregation = Field(Aggregation.CONCAT.value, description="How branch outputs are combined")
    branch_weights: Optional[list[float]] = Field(
        None, description="Initial values of learnable per-branch weights w_s (one per factor)")

    @field_validator("factors")
    @classmethod
    def _check_factors(cls, factors: list[float]) -> list[float]:
        if not factors:
            raise ValueError("scale set needs at least one factor")
        if any(a <= 0 for a in factors):
            raise ValueError(f"scale factors must be positive, got {factors}")
        if any(b < a for a, b in zip(factors, factors[1:])):
            raise ValueError(f"scale factors must be sorted ascending, got {factors}")
        return factors

    @model_validator(mode="after")
    def _check_weights(self) -> "ScaleSet":
        if self.branch_weights is not None and len(self.branch_weights) != len(self.factors):
            raise ValueError(
                f"branch_weights has {len(self.branch_weights)} entries for {len(self.factors)} factors")
        return self


class ModelSpec(Strict):
    """Declarative architecture description"""
    architecture_id: ArchitectureId = Field(description="Which architecture family to build")
    depth: Literal[4, 10] = Field(4, description="Number of convolutional blocks")
    num_classes: int = Field(10, gt=0)
    in_channels: int = Field(3, gt=0)
    image_size: int = Field(32, gt=0, description="Square input side length")
    channel_plan: Optional[list[int]] = Field(None, description="Block widths; defaults depend on depth")
    kernel_size: int = Field(3, gt=0)
    padding_mode: Literal["zeros", "reflect"] = "zeros"
    scale_set: ScaleSet = Field(default_factory=ScaleSet)
    seed: int = 0

    @model_validator(mode="after")
    def _check_plan(self) -> "ModelSpec":
        if self.channel_plan is None:
            self.channel_plan = list(DEFAULT_CHANNEL_PLANS[self.depth])
        if len(self.channel_plan) != self.depth:
            raise ValueError(f"channel_plan has {len(self.channel_plan)} widths for depth {self.depth}")
        if any(w <= 0 for w in self.channel_plan):
            raise ValueError(f"channel widths must be positive, got {self.channel_plan}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd for same-size padding")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


class AttackKind(str, Enum):
    FGSM = "fgsm"
    PGD = "pgd"


class AttackConfig(Strict):
    """White-box ℓ∞ attack settings"""
    kind: AttackKind = AttackKind.PGD.value
    epsilon: float = Field(0.03, ge=0.0, le=1.0, description="ℓ∞ budget in pixel units")
    steps: int = Field(20, ge=1)
    step_size: Optional[float] = Field(None, gt=0.0, description="PGD step α; defaults to ε/8")
    random_start: bool = True
    norm: Literal["linf"] = "linf"
    seed: int = 0

    @model_validator(mode="after")
    def _fgsm_is_single_step(self) -> "AttackConfig":
        if self.kind == AttackKind.FGSM.value:
            self.steps = 1
            self.random_start = False
        alpha = self.alpha
        if self.kind == AttackKind.PGD.value and alpha > self.epsilon > 0:
            logger.warning("PGD step size %.4g exceeds epsilon %.4g", alpha, self.epsilon)
        return self

    @property
    def alpha(self) -> float:
        if self.kind == AttackKind.FGSM.value:
            return self.epsilon
        return self.step_size if self.step_size is not None else self.epsilon / 8.0

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return type(self)(**{**self.model_dump(), "epsilon": epsilon})


class AdversarialTrainingConfig(AttackConfig):
    """Inner PGD used when training on adversarial batches"""
    steps: int = Field(7, ge=1)

    @property
    def alpha(self) -> float:
        if self.kind == AttackKind.FGSM.value:
            return self.epsilon
        return self.step_size if self.step_size is not None else self.epsilon / 4.0


class NamedModelSpec(ModelSpec):
    """A ModelSpec plus the name it is reported under"""
    name: str
    adversarial_training: Optional[Union[bool, AdversarialTrainingConfig]] = Field(
        None, description="Per-model override of [train].adversarial_training: a config, true for the "
                          "defaults, false for standard training; unset inherits the run setting")

    @field_validator("adversarial_training")
    @classmethod
    def _expand_true(cls, value):
        if value is True:
            return AdversarialTrainingConfig()
        return value

    def to_spec(self) -> ModelSpec:
        return ModelSpec(**self.model_dump(exclude={"name", "adversarial_training"}))

    def training_attack(self, config: TrainConfig) -> Optional[AdversarialTrainingConfig]:
        """The inner attack this model trains against, or None for standard training."""
        if self.adversarial_training is None:
            return config.adversarial_training
        return self.adversarial_training or None


class Estimator(str, Enum):
    MAX_SAMPLE = "max_sample"
    WEIBULL_MLE = "weibull_mle"


class CertifyConfig(Strict):
    """CLEVER sampling protocol"""
    radius: float = Field(0.3, gt=0.0)
    n_batches: int = Field(50, ge=1)
    samples_per_batch: int = Field(128, ge=1)
    q: float = Field(1.0, description="Dual norm exponent: 1 for ℓ∞ budgets, 2 for ℓ2, inf for ℓ1")
    estimator: Estimator = Estimator.MAX_SAMPLE.value
    clip_to_box: bool = True
    seed: int = 0

    @field_validator("q")
    @classmethod
    def _check_q(cls, q: float) -> float:
        if q not in (1.0, 2.0) and not math.isinf(q):
            raise ValueError(f"q must be 1, 2 or inf, got {q}")
        return q


class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    SATURATE = "saturate"
    PIXELATE = "pixelate"
    DEFOCUS_BLUR = "defocus_blur"


class CorruptionSpec(Strict):
    kind: CorruptionKind
    severity: int = Field(ge=1, le=5)
    seed: int = 0


class OptimizerKind(str, Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"


class TrainConfig(Strict):
    """Training hyperparameters"""
    optimizer: OptimizerKind = OptimizerKind.SGD_MOMENTUM.value
    learning_rate: float = Field(0.05, ge=0.0)
    schedule: Literal["cosine", "constant"] = "cosine"
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(30, ge=1)
    weight_decay: float = Field(5e-4, ge=0.0)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    adversarial_training: Optional[AdversarialTrainingConfig] = None
    checkpoint_every: int = Field(0, ge=0, description="Epoch cadence for intermediate checkpoints; 0 = final only")
    precision: Literal["float64", "float32"] = "float64"


# --- report records -----------------------------------------------------------

class MarginValue(BaseModel):
    sample_id: int = 0
    predicted: int
    margins: dict[int, float] = Field(description="g_{c,j} = f_c - f_j for every j ≠ c")


class LipschitzEstimate(BaseModel):
    competitor: int
    value: float = Field(ge=0.0)
    q: float
    n_samples: int
    radius: float
    estimator: Estimator
    max_observed: float
    weibull_shape: Optional[float] = None
    weibull_pvalue: Optional[float] = None
    fell_back: bool = False

    model_config = ConfigDict(use_enum_values=True)


class CleverScore(BaseModel):
    sample_id: int = 0
    predicted: int
    score: float = Field(ge=0.0)
    per_class: dict[int, float]
    estimates: list[LipschitzEstimate]
    unbounded: bool = Field(False, description="Every competitor had a zero Lipschitz estimate")


class OrbitRow(BaseModel):
    rotation: int = Field(description="Number of quarter turns r in P4")
    predicted: int
    gradient_norms: dict[int, float]
    deviation: float


class DiagnosticsReport(BaseModel):
    sample_id: int = 0
    architecture_id: str
    q: float
    orbit_rows: list[OrbitRow]
    max_deviation: float = Field(ge=0.0)
    theorem1_passed: Optional[bool] = Field(None, description="Only set when the orbit-invariance hypothesis holds")
    orbit_average_norm: Optional[float] = None
    suppression_ratio: Optional[float] = Field(None, ge=0.0)
    on_orbit_change: Optional[float] = None
    off_orbit_change: Optional[float] = None
    tangent_kind: str = "bilinear-rotation surrogate"


class SuppressionResult(BaseModel):
    sample_id: int = 0
    predicted: int
    on_orbit_change: float = Field(ge=0.0)
    off_orbit_change: float = Field(ge=0.0)
    ratio: float = Field(ge=0.0)
    angle_deg: float
    step: float
    trials: int
    tangent_kind: str = "bilinear-rotation surrogate"


class MaxInvariantResult(BaseModel):
    sample_id: int = 0
    attack: str
    epsilon: float
    epsilon_hi: float
    tolerance: float
    evaluations: list[tuple[float, bool]] = Field(description="(epsilon, prediction preserved) per attack run")
    non_monotone: bool = False


class ReportRow(BaseModel):
    """One result row; the provenance keys identify where the number came from"""
    type: Literal["row"] = "row"
    model: str
    seed: int
    metric: str
    value: Optional[float]
    attack: Optional[str] = None
    epsilon: Optional[float] = None
    corruption: Optional[str] = None
    severity: Optional[int] = None
    sample_id: Optional[int] = None
    extra: dict = Field(default_factory=dict)


# --- run configuration document -------------------------------------------------

class RunSection(Strict):
    name: str = "run"
    seed: Optional[int] = Field(None, description="Overrides every seed in the document when set")
    threads: Optional[int] = Field(None, ge=1)
    out_dir: str = "runs/default"


class DatasetSection(Strict):
    source: Literal["cifar10", "cifar100", "synthetic"] = "cifar10"
    path: Optional[str] = Field(None, description="Directory of CIFAR binaries; falls back to EQUIROBUST_DATA")
    synthetic_kind: Literal["oriented_bars", "scaled_blobs"] = "oriented_bars"
    num_classes: int = Field(10, gt=0)
    image_size: int = Field(32, gt=0)
    channels: int = Field(3, gt=0)
    n_per_class: Optional[int] = Field(500, ge=1, description="Class-balanced training subsample")
    n_eval: int = Field(1000, ge=1)
    n_synthetic: int = Field(2000, ge=1, description="Training images generated for the synthetic source")
    seed: int = 0


class AttackSection(Strict):
    kinds: list[AttackKind] = Field(default_factory=lambda: [AttackKind.FGSM, AttackKind.PGD], min_length=1)
    epsilons: list[float] = Field(default_factory=lambda: [0.01, 0.02, 0.03, 0.04, 0.05, 0.10], min_length=1)
    steps: int = Field(20, ge=1)
    step_size: Optional[float] = Field(None, gt=0.0)
    random_start: bool = True
    seed: int = 0

    @field_validator("epsilons")
    @classmethod
    def _ascending(cls, eps: list[float]) -> list[float]:
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError(f"epsilon grid must be strictly ascending, got {eps}")
        if any(e < 0 or e > 1 for e in eps):
            raise ValueError(f"epsilons must lie in [0, 1], got {eps}")
        return eps

    def config_for(self, kind: str, epsilon: float) -> AttackConfig:
        return AttackConfig(kind=kind, epsilon=epsilon, steps=self.steps, step_size=self.step_size,
                            random_start=self.random_start, seed=self.seed)


class CertifySection(CertifyConfig):
    n_samples: int = Field(20, ge=0)
    max_invariant_attack: AttackKind = AttackKind.PGD.value
    epsilon_hi: float = Field(0.5, gt=0.0, le=1.0)
    tolerance: float = Field(1.0 / 512.0, gt=0.0)
    monotonicity_probes: int = Field(4, ge=0)


class DiagnoseSection(Strict):
    n_probes: int = Field(20, ge=0)
    angle_deg: float = Field(2.0, gt=0.0)
    trials: int = Field(10, ge=10)
    step: float = Field(1e-2, ge=0.0, description="Finite step h along the probe directions")
    tolerance: float = Field(1e-8, gt=0.0)
    q: float = 1.0


class CorruptionSection(Strict):
    kinds: list[CorruptionKind] = Field(default_factory=lambda: list(CorruptionKind), min_length=1)
    severities: list[int] = Field(default_factory=lambda: [3], min_length=1)
    epsilons: list[float] = Field(default_factory=lambda: [0.0, 0.01, 0.02, 0.03, 0.04], min_length=1)
    attack: AttackKind = Field(AttackKind.FGSM.value, description="Attack run on the corrupted images")
    seed: int = 0

    @field_validator("epsilons")
    @classmethod
    def _epsilons_ascending(cls, eps: list[float]) -> list[float]:
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError(f"epsilon grid must be strictly ascending, got {eps}")
        return eps

    @field_validator("severities")
    @classmethod
    def _severity_range(cls, severities: list[int]) -> list[int]:
        if any(s < 1 or s > 5 for s in severities):
            raise ValueError(f"severities must lie in 1..5, got {severities}")
        return severities


class RunConfig(Strict):
    """Whole run document as written in the TOML config file"""
    run: RunSection = Field(default_factory=RunSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    models: list[NamedModelSpec] = Field(default_factory=list)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attack: AttackSection = Field(default_factory=AttackSection)
    certify: CertifySection = Field(default_factory=CertifySection)
    diagnose: DiagnoseSection = Field(default_factory=DiagnoseSection)
    corruption: CorruptionSection = Field(default_factory=CorruptionSection)

    @field_validator("models")
    @classmethod
    def _unique_names(cls, models: list[NamedModelSpec]) -> list[NamedModelSpec]:
        names = [m.name for m in models]
        if len(set(names)) != len(names):
            raise ValueError(f"model names must be unique, got {names}")
        return models
