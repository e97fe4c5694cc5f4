from __future__ import annotations

import pytest

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


class TestHierarchy:

    @pytest.mark.parametrize(
        "leaf, family",
        [
            (ConceptParseError, DataException),
            (EmptyDatasetError, DataException),
            (StorageError, DataException),
            (UnsupportedLevelError, ModelException),
            (TrainingDivergedError, ModelException),
            (FitError, AnalysisException),
            (CapacityError, AnalysisException),
            (SpecError, AppException),
            (ShapeError, AppException),
        ],
    )
    def test_leaf_belongs_to_family(self, leaf: type, family: type) -> None:
        assert issubclass(leaf, family)
        assert issubclass(leaf, AppException)

    def test_spec_and_shape_are_not_data_errors(self) -> None:
        assert not issubclass(SpecError, DataException)
        assert not issubclass(ShapeError, DataException)


class TestRepr:

    def test_message_only(self) -> None:
        assert repr(FitError("too few levels")) == "FitError('too few levels')"

    def test_detail_and_context(self) -> None:
        exc: ConceptParseError = ConceptParseError(
            "Concept cell is not binary", detail="cell '2'", context={"row": 2, "column": "a"},
        )
        text: str = repr(exc)
        assert text.startswith("ConceptParseError('Concept cell is not binary')")
        assert "detail='cell '2''" in text
        assert "context={'row': 2, 'column': 'a'}" in text

    def test_context_defaults_to_empty_dict(self) -> None:
        exc: SpecError = SpecError("bad")
        assert exc.context == {}
        assert exc.detail is None
        assert str(exc) == "bad"
