from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from core.data import (
    dataset_to_csv,
    generate_synthetic,
    level_law,
    load_concept_dataset,
    make_rng,
    split,
    split_indices,
    write_csv,
)
from core.exceptions import SpecError
from core.models import Dataset, SyntheticSpec


@pytest.fixture
def spec() -> SyntheticSpec:
    return SyntheticSpec(levels=3, base_size=2, growth_rate=2.0, decay_rate=0.5, classes=4, samples=1000, seed=7)


class TestSyntheticGenerator:

    def test_concept_count(self, spec: SyntheticSpec) -> None:
        dataset: Dataset = generate_synthetic(spec)
        assert dataset.n_concepts == 14
        assert dataset.n_features == 28
        assert dataset.n_samples == 1000
        assert dataset.class_count == 4

    def test_deterministic_per_seed(self, spec: SyntheticSpec) -> None:
        first: Dataset = generate_synthetic(spec)
        second: Dataset = generate_synthetic(spec)
        assert np.array_equal(first.concepts, second.concepts)
        assert np.array_equal(first.labels, second.labels)
        assert np.array_equal(first.features, second.features)
        other: Dataset = generate_synthetic(spec.model_copy(update={"seed": 8}))
        assert not np.array_equal(first.concepts, other.concepts)

    def test_planted_levels_follow_geometric_law(self) -> None:
        spec: SyntheticSpec = SyntheticSpec(
            levels=3, base_size=2, growth_rate=2.0, decay_rate=0.5, classes=4, samples=5000, seed=7,
        )
        dataset: Dataset = generate_synthetic(spec)
        observed: np.ndarray = np.bincount(dataset.planted_levels - 1, minlength=3)
        expected: np.ndarray = level_law(0.5, 3) * spec.samples
        assert np.allclose(expected / spec.samples, [4 / 7, 2 / 7, 1 / 7])
        assert stats.chisquare(observed, expected).pvalue > 0.001

    def test_vanishing_decay_plants_everything_at_level_one(self) -> None:
        spec: SyntheticSpec = SyntheticSpec(
            levels=3, base_size=2, growth_rate=2.0, decay_rate=1e-6, classes=4, samples=200, seed=1,
        )
        assert set(generate_synthetic(spec).planted_levels.tolist()) == {1}

    def test_noiseless_prefix_determines_label(self, spec: SyntheticSpec) -> None:
        dataset: Dataset = generate_synthetic(spec)
        sizes: list[int] = spec.level_sizes
        ends: np.ndarray = np.cumsum(sizes)
        labels_by_prefix: dict[tuple[int, ...], set[int]] = defaultdict(set)
        for row, label, level in zip(dataset.concepts, dataset.labels, dataset.planted_levels):
            active: np.ndarray = np.flatnonzero(row)
            assert active.size == 1
            assert ends[level - 1] - sizes[level - 1] <= active[0] < ends[level - 1]
            labels_by_prefix[tuple(row[: ends[level - 1]])].add(int(label))
        assert all(len(labels) == 1 for labels in labels_by_prefix.values())

    def test_clones_track_first_level(self) -> None:
        spec: SyntheticSpec = SyntheticSpec(
            levels=3, base_size=2, growth_rate=2.0, decay_rate=0.5, classes=4, samples=2000,
            redundancy_copies=2, seed=3,
        )
        dataset: Dataset = generate_synthetic(spec)
        assert dataset.n_concepts == 18
        assert dataset.concept_names[:2] == ["L1_c0", "L1_c1"]
        assert dataset.concept_names[14:] == ["L1_c0_copy1", "L1_c1_copy1", "L1_c0_copy2", "L1_c1_copy2"]
        agreement: float = float((dataset.concepts[:, 14] == dataset.concepts[:, 0]).mean())
        assert agreement > 0.95

    def test_observation_noise_flips_concepts(self) -> None:
        spec: SyntheticSpec = SyntheticSpec(
            levels=2, base_size=2, growth_rate=2.0, decay_rate=0.5, classes=2, samples=2000, noise=0.2, seed=5,
        )
        dataset: Dataset = generate_synthetic(spec)
        active_per_row: np.ndarray = dataset.concepts.sum(axis=1)
        assert (active_per_row != 1).mean() > 0.3

    @pytest.mark.parametrize("update", [{"growth_rate": 1.0}, {"decay_rate": 1.0}, {"decay_rate": 0.0}])
    def test_domain_errors(self, spec: SyntheticSpec, update: dict[str, float]) -> None:
        with pytest.raises(SpecError):
            generate_synthetic(spec.model_copy(update=update))


class TestSplit:

    @pytest.fixture
    def labels(self) -> np.ndarray:
        return np.array([0, 1] * 5)

    def test_sizes(self, labels: np.ndarray) -> None:
        train, val, test = split_indices(labels, (0.6, 0.2, 0.2), seed=0)
        assert (train.size, val.size, test.size) == (6, 2, 2)

    def test_fractions_must_sum_to_one(self, labels: np.ndarray) -> None:
        with pytest.raises(SpecError):
            split_indices(labels, (0.5, 0.5, 0.5), seed=0)

    def test_needs_three_rows(self) -> None:
        with pytest.raises(SpecError):
            split_indices(np.array([0, 1]), (0.6, 0.2, 0.2), seed=0)

    def test_random_splits_partition_rows(self) -> None:
        rng: np.random.Generator = make_rng(11)
        for _ in range(100):
            n: int = int(rng.integers(3, 200))
            f_train: float = float(rng.uniform(0.3, 0.8))
            f_val: float = float(rng.uniform(0.05, 1.0 - f_train - 0.05))
            fractions: tuple[float, float, float] = (f_train, f_val, 1.0 - f_train - f_val)
            labels: np.ndarray = rng.integers(0, int(rng.integers(1, 5)), size=n)
            parts: tuple[np.ndarray, ...] = split_indices(labels, fractions, seed=int(rng.integers(0, 1000)))
            joined: np.ndarray = np.concatenate(parts)
            assert np.array_equal(np.sort(joined), np.arange(n))
            assert all(part.size >= 1 for part in parts)

    def test_same_seed_same_split(self, spec: SyntheticSpec) -> None:
        dataset: Dataset = generate_synthetic(spec)
        a: tuple[Dataset, ...] = split(dataset, seed=4)
        b: tuple[Dataset, ...] = split(dataset, seed=4)
        for left, right in zip(a, b):
            assert np.array_equal(left.labels, right.labels)
            assert np.array_equal(left.features, right.features)


class TestCsvRoundTrip:

    def test_written_dataset_loads_back(self, spec: SyntheticSpec, tmp_path: Path) -> None:
        dataset: Dataset = generate_synthetic(spec.model_copy(update={"samples": 50}))
        target: Path = write_csv(dataset, tmp_path / "data.csv")
        loaded: Dataset = load_concept_dataset(target, class_count=dataset.class_count)
        assert loaded.concept_names == dataset.concept_names
        assert np.array_equal(loaded.concepts, dataset.concepts)
        assert np.array_equal(loaded.labels, dataset.labels)
        assert np.array_equal(loaded.features, dataset.features)
        assert dataset_to_csv(loaded) == target.read_text(encoding="utf-8")

    def test_reload_keeps_every_digit(self, tmp_path: Path) -> None:
        source: Path = tmp_path / "digits.csv"
        source.write_text(
            "label,a,f_1,f_2\n0,1,0.14247170990673486,-1e-300\n1,0,0.10059895416491065,3.0\n",
            encoding="utf-8",
        )
        loaded: Dataset = load_concept_dataset(source)
        assert loaded.features[0, 0] == 0.14247170990673486
        assert dataset_to_csv(loaded) == source.read_text(encoding="utf-8")
