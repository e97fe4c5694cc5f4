from __future__ import annotations

from enum import Enum
from typing import Any, Optional

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    field_validator,
    model_validator,
)

from core.config import settings
from core.exceptions import ShapeError, SpecError


class DatasetFormat(str, Enum):
    CSV = "csv"
    CUB_ATTRIBUTES = "cub_attributes"


class HeadMode(str, Enum):
    STANDARD = "standard"
    EFFICIENT = "efficient"


class TrainingMode(str, Enum):
    JOINT = "joint"
    SEQUENTIAL = "sequential"
    INDEPENDENT = "independent"


class LevelSampling(str, Enum):
    ALL_LEVELS = "all_levels"
    RANDOM_LEVEL = "random_level"


class Phase(str, Enum):
    JOINT = "joint"
    CONCEPT = "concept"
    TASK = "task"


class HeadPolicy(str, Enum):
    MATCHED = "matched"
    FULL_HEAD = "full_head"


class Regime(str, Enum):
    EFFICIENT = "efficient"
    BALANCED = "balanced"
    HEAVY_TAILED = "heavy_tailed"


class ScalingAxis(str, Enum):
    CONSTANT = "constant"
    LOG = "log"
    POWER = "power"


class MiMode(str, Enum):
    EXACT = "exact"
    CHANNEL = "channel"
    EMPIRICAL = "empirical"


# ── Data ───────────────────────────────────────────────────────


class Dataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray = Field(..., description="N x F real matrix (the input x)")
    concepts: np.ndarray = Field(..., description="N x K binary matrix (c_GT)")
    labels: np.ndarray = Field(..., description="N class ids in [0, C)")
    concept_names: list[str]
    class_count: int = Field(..., ge=1)
    planted_levels: Optional[np.ndarray] = Field(
        None, description="Synthetic only: planted minimal sufficient level per row (1-based)"
    )

    @field_validator("features", mode="before")
    @classmethod
    def _as_feature_matrix(cls, value: Any) -> np.ndarray:
        arr: np.ndarray = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("features must be a 2-D matrix", context={"ndim": arr.ndim})
        return arr

    @field_validator("concepts", mode="before")
    @classmethod
    def _as_concept_matrix(cls, value: Any) -> np.ndarray:
        arr: np.ndarray = np.asarray(value)
        if arr.ndim != 2:
            raise ShapeError("concepts must be a 2-D matrix", context={"ndim": arr.ndim})
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise SpecError("concept entries must be 0 or 1")
        return arr.astype(np.int8)

    @field_validator("labels", mode="before")
    @classmethod
    def _as_label_vector(cls, value: Any) -> np.ndarray:
        arr: np.ndarray = np.asarray(value)
        if arr.ndim != 1:
            raise ShapeError("labels must be a vector", context={"ndim": arr.ndim})
        if arr.size and not np.array_equal(arr, np.round(arr)):
            raise SpecError("labels must be integers")
        return arr.astype(np.int64)

    @field_validator("planted_levels", mode="before")
    @classmethod
    def _as_level_vector(cls, value: Any) -> Optional[np.ndarray]:
        return None if value is None else np.asarray(value, dtype=np.int64)

    @model_validator(mode="after")
    def _check_invariants(self) -> Dataset:
        n: int = self.labels.shape[0]
        if self.features.shape[0] != n or self.concepts.shape[0] != n:
            raise ShapeError(
                "features, concepts and labels must have the same number of rows",
                context={
                    "features": self.features.shape[0],
                    "concepts": self.concepts.shape[0],
                    "labels": n,
                },
            )
        if len(self.concept_names) != self.concepts.shape[1]:
            raise ShapeError(
                "concept_names must have one entry per concept column",
                context={"names": len(self.concept_names), "K": self.concepts.shape[1]},
            )
        if len(set(self.concept_names)) != len(self.concept_names):
            raise SpecError("concept_names must be unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise SpecError(
                "labels must lie in [0, C)",
                context={"C": self.class_count, "min": int(self.labels.min()), "max": int(self.labels.max())},
            )
        if self.planted_levels is not None and self.planted_levels.shape != (n,):
            raise ShapeError("planted_levels must have one entry per row")
        return self

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_concepts(self) -> int:
        return int(self.concepts.shape[1])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray | list[int]) -> Dataset:
        idx: np.ndarray = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            concepts=self.concepts[idx],
            labels=self.labels[idx],
            concept_names=list(self.concept_names),
            class_count=self.class_count,
            planted_levels=None if self.planted_levels is None else self.planted_levels[idx],
        )


class SyntheticSpec(BaseModel):
    levels: int = Field(..., ge=1, description="L, number of geometric levels")
    base_size: int = Field(..., ge=1, description="k1, size of the first level")
    growth_rate: float = Field(..., description="r > 1")
    decay_rate: float = Field(..., description="gamma in (0, 1)")
    classes: int = Field(..., ge=2)
    samples: int = Field(..., ge=1)
    redundancy_copies: int = Field(0, ge=0)
    noise: float = Field(0.0, ge=0.0, lt=0.5, description="Flip probability on observed concepts")
    seed: int = 0
    feature_dim: Optional[int] = Field(None, ge=1, description="Defaults to 2K")
    feature_noise: float = Field(default_factory=lambda: settings.FEATURE_NOISE, ge=0.0)

    @property
    def level_sizes(self) -> list[int]:
        return [
            max(1, int(round(self.base_size * self.growth_rate ** i)))
            for i in range(self.levels)
        ]

    @property
    def base_concepts(self) -> int:
        return sum(self.level_sizes)

    @property
    def concept_count(self) -> int:
        return self.base_concepts + self.redundancy_copies * self.level_sizes[0]


# ── Information ────────────────────────────────────────────────


class MiEstimate(BaseModel):
    value: float = Field(..., ge=0.0, description="Mutual information in nats")
    support_x: int = Field(..., ge=1)
    support_y: int = Field(..., ge=1)


class RankingStep(BaseModel):
    concept_index: int = Field(..., ge=0)
    relevance: float
    redundancy: float = Field(..., ge=0.0)
    score: float


class ConceptRanking(BaseModel):
    order: list[int]
    steps: list[RankingStep] = Field(default_factory=list)
    concept_names: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_bijection(self) -> ConceptRanking:
        if sorted(self.order) != list(range(len(self.order))):
            raise SpecError("ranking order must be a permutation of [0, K)", context={"order": self.order})
        if self.steps and [s.concept_index for s in self.steps] != self.order:
            raise SpecError("ranking steps must follow the ranking order")
        if self.steps and self.steps[0].redundancy != 0.0:
            raise SpecError("the first ranking step must carry zero redundancy")
        return self

    @property
    def size(self) -> int:
        return len(self.order)

    def top(self, k: int) -> list[int]:
        return self.order[:k]

    def positions(self) -> np.ndarray:
        """Inverse permutation: rank position of every concept index."""
        pos: np.ndarray = np.empty(len(self.order), dtype=np.int64)
        pos[np.asarray(self.order, dtype=np.int64)] = np.arange(len(self.order))
        return pos


class StabilityReport(BaseModel):
    seeds: list[int]
    prefix_sizes: list[int]
    resample_fraction: float
    iou: list[list[float]] = Field(..., description="Rows follow seeds, columns follow prefix_sizes")


class RankCorrelation(BaseModel):
    spearman: float
    kendall_tau: float


# ── Model ──────────────────────────────────────────────────────


class NestingSchedule(BaseModel):
    levels: list[int]

    @model_validator(mode="after")
    def _check_levels(self) -> NestingSchedule:
        if not self.levels:
            raise SpecError("nesting schedule must not be empty")
        if self.levels[0] < 1:
            raise SpecError("nesting levels must be >= 1", context={"levels": self.levels})
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise SpecError("nesting levels must be strictly increasing", context={"levels": self.levels})
        return self

    @property
    def widest(self) -> int:
        return self.levels[-1]

    def check_capacity(self, concept_count: int) -> None:
        if self.widest > concept_count:
            raise SpecError(
                "nesting level exceeds concept count",
                context={"d_n": self.widest, "K": concept_count},
            )


class LossConfig(BaseModel):
    alpha: float = Field(default_factory=lambda: settings.ALPHA)
    lambdas: Optional[list[float]] = Field(None, description="Per-level task weights, default all 1")
    epochs: int = Field(default_factory=lambda: settings.EPOCHS, ge=1)
    learning_rate: float = Field(default_factory=lambda: settings.LEARNING_RATE)
    batch_size: int = Field(default_factory=lambda: settings.BATCH_SIZE, ge=1)
    efficient_training: LevelSampling = LevelSampling.ALL_LEVELS
    training: TrainingMode = TrainingMode.JOINT
    seed: int = Field(default_factory=lambda: settings.SEED)

    @model_validator(mode="after")
    def _check_domain(self) -> LossConfig:
        if self.alpha < 0:
            raise SpecError("alpha must be >= 0", context={"alpha": self.alpha})
        if self.learning_rate <= 0:
            raise SpecError("learning_rate must be > 0", context={"learning_rate": self.learning_rate})
        if self.lambdas is not None and any(lam < 0 for lam in self.lambdas):
            raise SpecError("lambdas must be >= 0", context={"lambdas": self.lambdas})
        return self

    def level_weights(self, schedule: NestingSchedule) -> dict[int, float]:
        if self.lambdas is None:
            return {d: 1.0 for d in schedule.levels}
        if len(self.lambdas) != len(schedule.levels):
            raise ShapeError(
                "one lambda per nesting level is required",
                context={"lambdas": len(self.lambdas), "levels": len(schedule.levels)},
            )
        return dict(zip(schedule.levels, self.lambdas))


class HeadWeights(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: np.ndarray = Field(..., description="C x d matrix")
    bias: np.ndarray = Field(..., description="C vector")


class MatryoshkaModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    encoder_weights: np.ndarray = Field(..., description="F x K matrix of g_theta")
    encoder_bias: np.ndarray = Field(..., description="K concept-logit biases")
    permutation: list[int] = Field(..., description="Concept index at each ordered position")
    schedule: NestingSchedule
    mode: HeadMode
    training: TrainingMode = TrainingMode.JOINT
    class_count: int = Field(..., ge=1)
    heads: dict[int, HeadWeights] = Field(default_factory=dict, description="Standard mode only")
    shared: Optional[HeadWeights] = Field(None, description="Efficient mode only")

    @model_validator(mode="after")
    def _check_structure(self) -> MatryoshkaModel:
        k: int = self.encoder_weights.shape[1]
        if sorted(self.permutation) != list(range(k)):
            raise SpecError("permutation must be a bijection on [0, K)")
        self.schedule.check_capacity(k)
        if self.mode is HeadMode.STANDARD:
            if sorted(self.heads) != self.schedule.levels or self.shared is not None:
                raise SpecError("standard mode needs exactly one head per nesting level")
            for d, head in self.heads.items():
                if head.weights.shape != (self.class_count, d):
                    raise ShapeError(
                        "standard head width must equal its level",
                        context={"level": d, "shape": head.weights.shape},
                    )
        else:
            if self.shared is None or self.heads:
                raise SpecError("efficient mode needs exactly one shared head")
            if self.shared.weights.shape != (self.class_count, k):
                raise ShapeError("shared head must be C x K", context={"shape": self.shared.weights.shape})
        return self

    @property
    def n_features(self) -> int:
        return int(self.encoder_weights.shape[0])

    @property
    def n_concepts(self) -> int:
        return int(self.encoder_weights.shape[1])

    def weight_matrices(self) -> list[np.ndarray]:
        if self.mode is HeadMode.EFFICIENT:
            assert self.shared is not None
            return [self.shared.weights]
        return [self.heads[d].weights for d in self.schedule.levels]


class HistoryRecord(BaseModel):
    epoch: int
    level: int
    split: str
    loss: float
    accuracy: float


class EvaluationResult(BaseModel):
    level: int
    accuracy: float = Field(..., ge=0.0, le=1.0)
    macro_f1: float = Field(..., ge=0.0, le=1.0)


# ── Intervention ───────────────────────────────────────────────


class InterventionTrace(BaseModel):
    sample_id: int
    label: int
    base_prediction: int
    per_k_predictions: dict[int, int] = Field(default_factory=dict)
    minimal_sufficient_level: Optional[int] = Field(
        None, description="1-based schedule level index, None when never corrected"
    )
    head_policy: HeadPolicy


class CurvePoint(BaseModel):
    k: int
    accuracy: float


class InterventionCurve(BaseModel):
    policy: HeadPolicy
    ordering: str
    points: list[CurvePoint] = Field(default_factory=list)

    def accuracies(self) -> np.ndarray:
        return np.array([p.accuracy for p in self.points], dtype=np.float64)

    def ks(self) -> list[int]:
        return [p.k for p in self.points]


class LevelHistogram(BaseModel):
    levels: list[int] = Field(..., description="Schedule values, one bucket each")
    counts: list[int]
    never: int = 0
    empty: bool = False

    @computed_field
    @property
    def total(self) -> int:
        return sum(self.counts) + self.never


class RecoveryCurve(BaseModel):
    levels: list[int]
    cumulative: list[float]
    marginal: list[float]


class DecayFit(BaseModel):
    gamma: float
    r_squared: float
    norm_const: float
    levels_used: int


# ── Theory ─────────────────────────────────────────────────────


class RegimeParams(BaseModel):
    growth_rate: float = Field(..., description="r > 1")
    decay_rate: float = Field(..., description="gamma in (0, 1)")
    base_size: float = Field(1.0, gt=0.0)
    levels: int = Field(1, ge=1)
    norm_const: float = Field(1.0, gt=0.0, description="Normalization constant of the level law")

    @computed_field
    @property
    def spectral_ratio(self) -> float:
        return self.growth_rate * self.decay_rate

    @computed_field
    @property
    def alpha(self) -> Optional[float]:
        if self.spectral_ratio <= 1.0:
            return None
        return 1.0 + float(np.log(self.decay_rate) / np.log(self.growth_rate))


class RegimeClassification(BaseModel):
    regime: Regime
    alpha: Optional[float] = None


class ScalingFit(BaseModel):
    axis: ScalingAxis
    slope: float
    intercept: float
    r_squared: float


class RegimeRow(BaseModel):
    levels: int
    concepts: int
    e_empirical: float
    e_exact: float
    e_bound: float
    regime: Regime
    alpha_fit: float


class RegimeTable(BaseModel):
    params: RegimeParams
    rows: list[RegimeRow]
    fit: ScalingFit


class EpsilonEstimate(BaseModel):
    k: int
    value: float = Field(..., ge=0.0, description="KL(P_int || P_train) in nats")
    total_variation: float
    floored_points: int
    bins: list[float]


class BoundReport(BaseModel):
    k: int
    label_entropy: float
    mutual_info: float
    epsilon: float
    bound_value: float
    conservative_bound: float
    empirical_error: float
    holds: bool
    mode: MiMode
    floored_points: int
    bins: list[float]


class InterventionJoint(BaseModel):
    """Enumerable joint of (Y, C*, C_hat) where every soft concept is an independent channel of its truth."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    label_concept: np.ndarray = Field(..., description="P(y, c*), shape (C, 2, ..., 2)")
    channels: np.ndarray = Field(..., description="P(c_hat_j = b | c*_j), shape (K, 2, B)")
    soft_values: list[float]

    @model_validator(mode="after")
    def _check_tables(self) -> InterventionJoint:
        k: int = self.label_concept.ndim - 1
        if self.channels.shape != (k, 2, len(self.soft_values)):
            raise ShapeError(
                "channels must have shape (K, 2, B)",
                context={"shape": self.channels.shape, "K": k, "B": len(self.soft_values)},
            )
        if not np.isclose(self.label_concept.sum(), 1.0, atol=1e-9):
            raise SpecError("label/concept joint must sum to 1")
        if not np.allclose(self.channels.sum(axis=2), 1.0, atol=1e-9):
            raise SpecError("every channel row must sum to 1")
        return self

    @property
    def n_concepts(self) -> int:
        return self.label_concept.ndim - 1

    @property
    def class_count(self) -> int:
        return int(self.label_concept.shape[0])


# ── Runs ───────────────────────────────────────────────────────


class RunConfig(BaseModel):
    command: str
    inputs: dict[str, str] = Field(default_factory=dict)
    output: str
    seed: int
    params: dict[str, Any] = Field(default_factory=dict)


class Manifest(BaseModel):
    tool_version: str
    command: str
    resolved_config: dict[str, Any]
    input_hashes: dict[str, str] = Field(default_factory=dict)
    output_files: dict[str, str] = Field(default_factory=dict)
