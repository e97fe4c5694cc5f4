from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Any, NoReturn, Optional

import numpy as np
import pandas as pd

from core.exceptions import ConceptParseError, EmptyDatasetError
from core.models import Dataset, DatasetFormat
from tools.base import BaseLoader

logger: logging.Logger = logging.getLogger(__name__)

LABEL_COLUMN: str = "label"
FEATURE_PREFIX: str = "f_"

_FIELDS_RE: re.Pattern[str] = re.compile(r"Expected (\d+) fields in line (\d+), saw (\d+)")
_INT_PATTERN: str = r"^-?\d+$"


def _cell_error(message: str, source: Path, row: int, column: str, value: Any = None) -> NoReturn:
    context: dict[str, Any] = {"path": str(source), "row": row, "column": column}
    if value is not None:
        context["value"] = value
    raise ConceptParseError(f"{message} at row {row}, column '{column}'", context=context)


class CsvLoader(BaseLoader):
    """Header `label,<concepts...>[,f_1,...]`, one sample per line, concepts as literal 0/1."""

    format = DatasetFormat.CSV

    def _read(self, source: Path) -> Dataset:
        try:
            frame: pd.DataFrame = pd.read_csv(
                source, dtype=str, keep_default_na=False, skipinitialspace=True,
            )
        except pd.errors.EmptyDataError as exc:
            raise EmptyDatasetError("CSV file is empty", context={"path": str(source)}) from exc
        except pd.errors.ParserError as exc:
            fields: Optional[re.Match[str]] = _FIELDS_RE.search(str(exc))
            context: dict[str, Any] = {"path": str(source), "row": None}
            if fields:
                expected, line, got = (int(g) for g in fields.groups())
                context.update(row=line - 1, column=f"#{expected + 1}", expected=expected, got=got)
            raise ConceptParseError(
                f"Malformed CSV row {context['row']} (expected {context.get('expected')} fields, "
                f"got {context.get('got')})",
                detail=str(exc),
                context=context,
            ) from exc

        columns: list[str] = [str(c).strip() for c in frame.columns]
        if not columns or columns[0] != LABEL_COLUMN:
            _cell_error(f"First column must be '{LABEL_COLUMN}'", source, 0, columns[0] if columns else "")
        frame.columns = columns
        if frame.empty:
            raise EmptyDatasetError("CSV file has a header but no rows", context={"path": str(source)})

        feature_cols: list[str] = [c for c in columns[1:] if c.startswith(FEATURE_PREFIX)]
        concept_cols: list[str] = [c for c in columns[1:] if not c.startswith(FEATURE_PREFIX)]

        cells: pd.DataFrame = frame.apply(lambda col: col.str.strip())
        self._reject_missing(cells, source)

        labels: np.ndarray = self._parse_labels(cells[LABEL_COLUMN], source)
        class_count: int = self._resolve_class_count(labels, source)
        out_of_range: np.ndarray = np.flatnonzero((labels < 0) | (labels >= class_count))
        if out_of_range.size:
            row_idx: int = int(out_of_range[0])
            _cell_error(f"Label outside [0, {class_count})", source, row_idx + 1, LABEL_COLUMN, int(labels[row_idx]))

        concepts: np.ndarray = self._parse_concepts(cells[concept_cols], source)
        features: np.ndarray = self._parse_features(cells[feature_cols], source)

        return Dataset(
            features=features,
            concepts=concepts,
            labels=labels,
            concept_names=concept_cols,
            class_count=class_count,
        )

    # ── Cell validation ────────────────────────────────────────

    @staticmethod
    def _reject_missing(cells: pd.DataFrame, source: Path) -> None:
        blank: np.ndarray = (cells.isna() | (cells == "")).to_numpy()
        if blank.any():
            row_idx, col_idx = np.argwhere(blank)[0]
            _cell_error("Missing cell (wrong column count)", source, int(row_idx) + 1, cells.columns[col_idx])

    @staticmethod
    def _parse_labels(column: pd.Series, source: Path) -> np.ndarray:
        bad: np.ndarray = (~column.str.match(_INT_PATTERN)).to_numpy()
        if bad.any():
            row_idx: int = int(np.flatnonzero(bad)[0])
            _cell_error("Label is not an integer", source, row_idx + 1, LABEL_COLUMN, column.iloc[row_idx])
        return column.astype(np.int64).to_numpy()

    @staticmethod
    def _parse_concepts(block: pd.DataFrame, source: Path) -> np.ndarray:
        values: np.ndarray = block.to_numpy(dtype=str).reshape(len(block), len(block.columns))
        binary: np.ndarray = np.isin(values, ("0", "1"))
        if not binary.all():
            row_idx, col_idx = np.argwhere(~binary)[0]
            _cell_error(
                "Concept cell is not binary", source, int(row_idx) + 1,
                block.columns[col_idx], values[row_idx, col_idx],
            )
        return (values == "1").astype(np.int8)

    @staticmethod
    def _parse_features(block: pd.DataFrame, source: Path) -> np.ndarray:
        values: np.ndarray = block.to_numpy(dtype=str).reshape(len(block), len(block.columns))
        parsed: np.ndarray = np.empty(values.shape, dtype=np.float64)
        for (row_idx, col_idx), cell in np.ndenumerate(values):
            try:
                parsed[row_idx, col_idx] = float(cell)
            except ValueError:
                _cell_error(
                    "Feature cell is not a number", source, row_idx + 1,
                    block.columns[col_idx], cell,
                )
        return parsed
