from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from core.exceptions import ConceptParseError, EmptyDatasetError, SpecError
from core.models import Dataset, DatasetFormat
from tools import CsvLoader, CubAttributeLoader, get_loader


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


class TestRegistry:

    def test_formats_resolve_to_loaders(self) -> None:
        assert isinstance(get_loader("csv"), CsvLoader)
        assert isinstance(get_loader(DatasetFormat.CUB_ATTRIBUTES), CubAttributeLoader)

    def test_unknown_format(self) -> None:
        with pytest.raises(SpecError):
            get_loader("parquet")

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(SpecError):
            get_loader("csv").load(tmp_path / "absent.csv")


class TestCsvLoader:

    def test_concepts_and_features(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "label,wing,beak,f_1\n0,1,0,0.5\n2,0,1,-1.25\n")
        dataset: Dataset = CsvLoader().load(source)
        assert dataset.concept_names == ["wing", "beak"]
        assert dataset.concepts.tolist() == [[1, 0], [0, 1]]
        assert dataset.labels.tolist() == [0, 2]
        assert dataset.features.tolist() == [[0.5], [-1.25]]
        assert dataset.class_count == 3

    def test_explicit_class_count(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "label,a\n0,1\n1,0\n")
        assert CsvLoader(class_count=5).load(source).class_count == 5

    def test_non_binary_concept_cell(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "label,a,b\n0,1,0\n1,0,2\n")
        with pytest.raises(ConceptParseError) as info:
            CsvLoader().load(source)
        assert info.value.context["row"] == 2
        assert info.value.context["column"] == "b"

    def test_label_must_be_integer(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "label,a\n0,1\nx,0\n")
        with pytest.raises(ConceptParseError, match="Label is not an integer"):
            CsvLoader().load(source)

    def test_label_outside_class_range(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "label,a\n0,1\n3,0\n")
        with pytest.raises(ConceptParseError, match="Label outside"):
            CsvLoader(class_count=2).load(source)

    def test_short_row(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "label,a,b\n0,1,0\n1,0\n")
        with pytest.raises(ConceptParseError, match="Missing cell"):
            CsvLoader().load(source)

    def test_long_row(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "label,a,b\n0,1,0\n1,0,1,1\n")
        with pytest.raises(ConceptParseError) as info:
            CsvLoader().load(source)
        assert info.value.context["row"] == 2
        assert info.value.context["expected"] == 3
        assert info.value.context["got"] == 4
        assert info.value.context["column"] == "#4"

    def test_first_column_must_be_label(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "a,label\n1,0\n")
        with pytest.raises(ConceptParseError):
            CsvLoader().load(source)

    def test_header_without_rows(self, tmp_path: Path) -> None:
        with pytest.raises(EmptyDatasetError):
            CsvLoader().load(_write(tmp_path / "d.csv", "label,a\n"))

    def test_empty_file(self, tmp_path: Path) -> None:
        with pytest.raises(EmptyDatasetError):
            CsvLoader().load(_write(tmp_path / "d.csv", ""))

    def test_feature_cell_must_be_numeric(self, tmp_path: Path) -> None:
        source: Path = _write(tmp_path / "d.csv", "label,a,f_1\n0,1,0.5\n1,0,abc\n")
        with pytest.raises(ConceptParseError, match="Feature cell is not a number"):
            CsvLoader().load(source)


class TestCubAttributeLoader:

    @pytest.fixture
    def cub_dir(self, tmp_path: Path) -> Path:
        rows: list[str] = [
            "1 1 1 3 1.0", "1 2 1 3 1.0",
            "2 1 1 2 0.5", "2 2 0 2 0.5",
            "3 1 0 4 2.0", "3 2 1 4 2.0",
            "4 1 0 1 1.0", "4 2 1 1 1.0",
        ]
        _write(tmp_path / "image_attribute_labels.txt", "\n".join(rows) + "\n")
        _write(tmp_path / "image_class.txt", "1 1\n2 1\n3 2\n4 2\n")
        _write(tmp_path / "attributes.txt", "1 has_shape::perching-like\n2 has_wing_color::blue\n")
        return tmp_path

    def test_majority_vote_per_class(self, cub_dir: Path) -> None:
        dataset: Dataset = CubAttributeLoader().load(cub_dir / "image_attribute_labels.txt")
        assert dataset.labels.tolist() == [0, 0, 1, 1]
        assert dataset.concepts.tolist() == [[1, 0], [1, 0], [0, 1], [0, 1]]
        assert dataset.concept_names == ["has_shape::perching-like", "has_wing_color::blue"]
        assert dataset.n_features == 0

    def test_names_default_without_sidecar(self, cub_dir: Path) -> None:
        (cub_dir / "attributes.txt").unlink()
        dataset: Dataset = CubAttributeLoader().load(cub_dir / "image_attribute_labels.txt")
        assert dataset.concept_names == ["attr_1", "attr_2"]

    def test_sidecars_listed_for_hashing(self, cub_dir: Path) -> None:
        found: list[Path] = CubAttributeLoader().sidecars(cub_dir / "image_attribute_labels.txt")
        assert sorted(p.name for p in found) == ["attributes.txt", "image_class.txt"]

    def test_missing_class_sidecar(self, cub_dir: Path) -> None:
        (cub_dir / "image_class.txt").unlink()
        with pytest.raises(SpecError):
            CubAttributeLoader().load(cub_dir / "image_attribute_labels.txt")

    def test_image_without_class(self, cub_dir: Path) -> None:
        _write(cub_dir / "image_class.txt", "1 1\n2 1\n3 2\n")
        with pytest.raises(ConceptParseError):
            CubAttributeLoader().load(cub_dir / "image_attribute_labels.txt")

    def test_non_binary_presence(self, cub_dir: Path) -> None:
        _write(cub_dir / "image_attribute_labels.txt", "1 1 1 3\n2 1 2 3\n")
        with pytest.raises(ConceptParseError) as info:
            CubAttributeLoader().load(cub_dir / "image_attribute_labels.txt")
        assert info.value.context["row"] == 2

    def test_concepts_are_constant_within_class(self, cub_dir: Path) -> None:
        dataset: Dataset = CubAttributeLoader().load(cub_dir / "image_attribute_labels.txt")
        for cls in np.unique(dataset.labels):
            block: np.ndarray = dataset.concepts[dataset.labels == cls]
            assert (block == block[0]).all()
