from __future__ import annotations

import abc
import logging
from pathlib import Path
from typing import Any

from core.exceptions import EmptyDatasetError, SpecError
from core.models import Dataset, DatasetFormat

logger: logging.Logger = logging.getLogger(__name__)

_REGISTRY: dict[DatasetFormat, type[BaseLoader]] = {}


class BaseLoader(abc.ABC):

    format: DatasetFormat

    def __init_subclass__(cls, **kwargs: Any) -> None:
        super().__init_subclass__(**kwargs)
        if not getattr(cls, "__abstractmethods__", None):
            if not isinstance(cls.__dict__.get("format"), DatasetFormat):
                raise TypeError(
                    f"{cls.__name__} must define a class-level "
                    f"'format' attribute of type DatasetFormat"
                )
            _REGISTRY[cls.format] = cls

    def __init__(self, class_count: int | None = None) -> None:
        self.class_count: int | None = class_count

    def load(self, path: str | Path) -> Dataset:
        source: Path = Path(path)
        if not source.is_file():
            raise SpecError(
                f"Dataset file not found: {source}",
                context={"format": self.format.value, "path": str(source)},
            )
        dataset: Dataset = self._read(source)
        logger.info(
            "[%s] Loaded %s: N=%d K=%d F=%d C=%d",
            self.format.value, source.name, dataset.n_samples,
            dataset.n_concepts, dataset.n_features, dataset.class_count,
        )
        return dataset

    def _resolve_class_count(self, labels: Any, source: Path) -> int:
        if len(labels) == 0:
            raise EmptyDatasetError(
                "Dataset has no rows",
                context={"format": self.format.value, "path": str(source)},
            )
        observed: int = int(max(labels)) + 1
        return self.class_count if self.class_count is not None else observed

    def sidecars(self, source: Path) -> list[Path]:
        """Companion files read alongside `source`."""
        return []

    @abc.abstractmethod
    def _read(self, source: Path) -> Dataset:
        ...


def get_loader(fmt: DatasetFormat | str, class_count: int | None = None) -> BaseLoader:
    try:
        loader_cls: type[BaseLoader] = _REGISTRY[DatasetFormat(fmt)]
    except (KeyError, ValueError) as exc:
        raise SpecError(
            f"No loader registered for format '{fmt}'",
            context={"known": [f.value for f in _REGISTRY]},
        ) from exc
    return loader_cls(class_count=class_count)
