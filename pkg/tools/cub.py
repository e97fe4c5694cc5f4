from __future__ import annotations

import logging
from pathlib import Path
from typing import Final, Optional

import numpy as np
import pandas as pd

from core.exceptions import ConceptParseError, EmptyDatasetError, SpecError
from core.models import Dataset, DatasetFormat
from tools.base import BaseLoader

logger: logging.Logger = logging.getLogger(__name__)

CLASS_SIDECARS: Final[tuple[str, ...]] = ("image_class.txt", "image_class_labels.txt")
NAMES_SIDECAR: Final[str] = "attributes.txt"

_ATTRIBUTE_FIELDS: Final[list[str]] = ["image_id", "attribute_id", "is_present", "certainty", "time"]


class CubAttributeLoader(BaseLoader):
    """
    Whitespace-separated `image_id attribute_id is_present certainty` rows plus an
    `image_class.txt` sidecar (`image_id class_id`, 1-based classes).

    Certainty is ignored. Presence is majority-voted per (class, attribute) and every
    image inherits its class-level vector. An optional `attributes.txt` (`id name`)
    supplies concept names in attribute-id order. There are no input features (F = 0).
    """

    format = DatasetFormat.CUB_ATTRIBUTES

    def _read(self, source: Path) -> Dataset:
        records: pd.DataFrame = self._read_attributes(source)
        classes: pd.DataFrame = self._read_classes(source)

        image_ids: np.ndarray = pd.unique(records["image_id"])
        class_of: pd.Series = classes.set_index("image_id")["class_id"]
        missing: np.ndarray = np.setdiff1d(image_ids, class_of.index.to_numpy())
        if missing.size:
            raise ConceptParseError(
                f"Image {int(missing[0])} has no class in the sidecar",
                context={"path": str(source), "image_id": int(missing[0])},
            )

        names: list[str] = self._read_names(source, int(records["attribute_id"].max()))
        k: int = len(names)
        if records["attribute_id"].min() < 1 or records["attribute_id"].max() > k:
            raise ConceptParseError(
                "attribute_id outside the named attribute range",
                context={"path": str(source), "K": k},
            )

        labels: np.ndarray = class_of.loc[image_ids].to_numpy(dtype=np.int64) - 1
        if labels.min() < 0:
            raise ConceptParseError("class ids must be 1-based", context={"path": str(source)})

        row_of: dict[int, int] = {int(img): i for i, img in enumerate(image_ids)}
        presence: np.ndarray = np.zeros((len(image_ids), k), dtype=np.float64)
        rows: np.ndarray = records["image_id"].map(row_of).to_numpy()
        presence[rows, records["attribute_id"].to_numpy() - 1] = records["is_present"].to_numpy()

        class_count: int = self._resolve_class_count(labels, source)
        class_vectors: np.ndarray = np.zeros((class_count, k), dtype=np.int8)
        for cls in np.unique(labels):
            class_vectors[cls] = (presence[labels == cls].mean(axis=0) > 0.5).astype(np.int8)
        logger.info(
            "[CUB] Majority-voted %d attributes over %d classes from %d images",
            k, len(np.unique(labels)), len(image_ids),
        )

        return Dataset(
            features=np.zeros((len(image_ids), 0), dtype=np.float64),
            concepts=class_vectors[labels],
            labels=labels,
            concept_names=names,
            class_count=class_count,
        )

    # ── Readers ────────────────────────────────────────────────

    @staticmethod
    def _read_attributes(source: Path) -> pd.DataFrame:
        try:
            raw: pd.DataFrame = pd.read_csv(
                source, sep=r"\s+", header=None, names=_ATTRIBUTE_FIELDS, dtype=str,
            )
        except pd.errors.EmptyDataError as exc:
            raise EmptyDatasetError("Attribute file is empty", context={"path": str(source)}) from exc
        except pd.errors.ParserError as exc:
            raise ConceptParseError(
                "Malformed attribute row", detail=str(exc), context={"path": str(source)},
            ) from exc
        if raw.empty:
            raise EmptyDatasetError("Attribute file is empty", context={"path": str(source)})

        head: pd.DataFrame = raw[["image_id", "attribute_id", "is_present"]]
        numeric: pd.DataFrame = head.apply(pd.to_numeric, errors="coerce")
        bad: np.ndarray = numeric.isna().to_numpy() | (numeric.to_numpy() != np.round(numeric.to_numpy()))
        if bad.any():
            row_idx, col_idx = np.argwhere(bad)[0]
            raise ConceptParseError(
                f"Non-integer attribute field at row {int(row_idx) + 1}, column '{head.columns[col_idx]}'",
                context={"path": str(source), "row": int(row_idx) + 1, "column": head.columns[col_idx]},
            )
        records: pd.DataFrame = numeric.astype(np.int64)
        non_binary: np.ndarray = ~records["is_present"].isin((0, 1)).to_numpy()
        if non_binary.any():
            row_idx = int(np.flatnonzero(non_binary)[0])
            raise ConceptParseError(
                f"is_present is not binary at row {row_idx + 1}, column 'is_present'",
                context={"path": str(source), "row": row_idx + 1, "column": "is_present"},
            )
        return records

    def sidecars(self, source: Path) -> list[Path]:
        names: tuple[str, ...] = (*CLASS_SIDECARS, NAMES_SIDECAR)
        return [source.parent / name for name in names if (source.parent / name).is_file()]

    @staticmethod
    def _read_classes(source: Path) -> pd.DataFrame:
        sidecar: Optional[Path] = next(
            (source.parent / name for name in CLASS_SIDECARS if (source.parent / name).is_file()),
            None,
        )
        if sidecar is None:
            raise SpecError(
                "Class sidecar not found next to the attribute file",
                context={"path": str(source), "expected": list(CLASS_SIDECARS)},
            )
        try:
            classes: pd.DataFrame = pd.read_csv(
                sidecar, sep=r"\s+", header=None, names=["image_id", "class_id"], dtype=np.int64,
            )
        except (ValueError, pd.errors.ParserError) as exc:
            raise ConceptParseError("Malformed class sidecar", detail=str(exc), context={"path": str(sidecar)}) from exc
        return classes

    @staticmethod
    def _read_names(source: Path, max_attribute_id: int) -> list[str]:
        names_path: Path = source.parent / NAMES_SIDECAR
        if not names_path.is_file():
            return [f"attr_{i}" for i in range(1, max_attribute_id + 1)]
        table: pd.DataFrame = pd.read_csv(
            names_path, sep=r"\s+", header=None, names=["attribute_id", "name"], dtype=str,
        )
        return table.sort_values("attribute_id", key=lambda s: s.astype(np.int64))["name"].tolist()
