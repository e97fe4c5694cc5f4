from core.exceptions import (
    AnalysisException,
    AppException,
    CapacityError,
    ConceptParseError,
    DataException,
    EmptyDatasetError,
    FitError,
    ModelException,
    ShapeError,
    SpecError,
    StorageError,
    TrainingDivergedError,
    UnsupportedLevelError,
)
from core.models import (
    ConceptRanking,
    Dataset,
    DatasetFormat,
    HeadMode,
    HeadPolicy,
    InterventionTrace,
    LossConfig,
    MatryoshkaModel,
    NestingSchedule,
    RegimeParams,
    SyntheticSpec,
    TrainingMode,
)

__all__: list[str] = [
    "ConceptRanking",
    "Dataset",
    "DatasetFormat",
    "HeadMode",
    "HeadPolicy",
    "InterventionTrace",
    "LossConfig",
    "MatryoshkaModel",
    "NestingSchedule",
    "RegimeParams",
    "SyntheticSpec",
    "TrainingMode",
    "AppException",
    "AnalysisException",
    "CapacityError",
    "ConceptParseError",
    "DataException",
    "EmptyDatasetError",
    "FitError",
    "ModelException",
    "ShapeError",
    "SpecError",
    "StorageError",
    "TrainingDivergedError",
    "UnsupportedLevelError",
]
