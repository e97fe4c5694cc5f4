from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from core.config import settings
from core.exceptions import SpecError
from core.models import Dataset, DatasetFormat, SyntheticSpec
from core.storage import atomic_write_text
from tools import get_loader

logger: logging.Logger = logging.getLogger(__name__)

_FRACTION_TOL: float = 1e-9
_MIN_STRATUM: int = 3


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical streams on every platform for a given seed."""
    return np.random.Generator(np.random.Philox(seed))


# ── Loading / writing ─────────────────────────────────────────


def load_concept_dataset(
    path: str | Path,
    fmt: DatasetFormat | str = DatasetFormat.CSV,
    class_count: Optional[int] = None,
) -> Dataset:
    return get_loader(fmt, class_count=class_count).load(path)


def dataset_to_csv(dataset: Dataset) -> str:
    frame: pd.DataFrame = pd.DataFrame({"label": dataset.labels})
    for j, name in enumerate(dataset.concept_names):
        frame[name] = dataset.concepts[:, j]
    for f in range(dataset.n_features):
        frame[f"f_{f + 1}"] = [repr(float(v)) for v in dataset.features[:, f]]
    return frame.to_csv(index=False, lineterminator="\n")


def write_csv(dataset: Dataset, path: str | Path) -> Path:
    return atomic_write_text(path, dataset_to_csv(dataset))


# ── Synthetic generator ───────────────────────────────────────


def level_law(decay_rate: float, levels: int) -> np.ndarray:
    """Truncated geometric law P(l* = i) proportional to gamma^(i-1), i = 1..L."""
    weights: np.ndarray = decay_rate ** np.arange(levels, dtype=np.float64)
    return weights / weights.sum()


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """
    Plant the nested information structure.

    Every sample draws a planted level l* from the truncated geometric law and
    activates exactly one concept inside the block of that level; all other
    noiseless concepts are zero. The class is `(offset[l*] + position) mod C`, so
    the concept prefix through level l* determines the label and any shorter
    prefix carries nothing about it.
    """
    if spec.growth_rate <= 1.0:
        raise SpecError("growth_rate must be > 1", context={"growth_rate": spec.growth_rate})
    if not 0.0 < spec.decay_rate < 1.0:
        raise SpecError("decay_rate must lie in (0, 1)", context={"decay_rate": spec.decay_rate})

    rng: np.random.Generator = make_rng(spec.seed)
    sizes: np.ndarray = np.asarray(spec.level_sizes, dtype=np.int64)
    starts: np.ndarray = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    k_base: int = int(sizes.sum())
    n: int = spec.samples

    planted: np.ndarray = rng.choice(spec.levels, size=n, p=level_law(spec.decay_rate, spec.levels))
    position: np.ndarray = rng.integers(0, sizes[planted])
    offsets: np.ndarray = rng.integers(0, spec.classes, size=spec.levels)
    labels: np.ndarray = (offsets[planted] + position) % spec.classes

    clean: np.ndarray = np.zeros((n, k_base), dtype=np.int8)
    clean[np.arange(n), starts[planted] + position] = 1

    observed: np.ndarray = clean ^ (rng.random((n, k_base)) < spec.noise).astype(np.int8)
    names: list[str] = [
        f"L{level + 1}_c{j}" for level, size in enumerate(sizes) for j in range(size)
    ]

    first_block: np.ndarray = clean[:, : sizes[0]]
    clones: list[np.ndarray] = []
    for copy in range(1, spec.redundancy_copies + 1):
        flips: np.ndarray = (rng.random(first_block.shape) < settings.CLONE_FLIP_RATE).astype(np.int8)
        clones.append(first_block ^ flips)
        names.extend(f"L1_c{j}_copy{copy}" for j in range(sizes[0]))
    concepts: np.ndarray = np.hstack([observed, *clones]) if clones else observed

    feature_dim: int = spec.feature_dim or 2 * concepts.shape[1]
    embedding: np.ndarray = rng.standard_normal((k_base, feature_dim)) / np.sqrt(k_base)
    features: np.ndarray = clean @ embedding + spec.feature_noise * rng.standard_normal((n, feature_dim))

    logger.info(
        "[Synth] N=%d K=%d (levels %s, %d clones) F=%d C=%d seed=%d",
        n, concepts.shape[1], sizes.tolist(), spec.redundancy_copies,
        feature_dim, spec.classes, spec.seed,
    )
    return Dataset(
        features=features,
        concepts=concepts,
        labels=labels,
        concept_names=names,
        class_count=spec.classes,
        planted_levels=planted + 1,
    )


# ── Splitting ─────────────────────────────────────────────────


def _stratify_on(labels: np.ndarray, holdout: int, min_count: int) -> Optional[np.ndarray]:
    counts: np.ndarray = np.unique(labels, return_counts=True)[1]
    n_classes: int = counts.size
    if counts.min() < min_count or holdout < n_classes or labels.size - holdout < n_classes:
        return None
    return labels


def split_indices(
    labels: np.ndarray,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n: int = int(labels.shape[0])
    if len(fractions) != 3 or any(not 0.0 < f < 1.0 for f in fractions):
        raise SpecError("split fractions must be three values in (0, 1)", context={"fractions": list(fractions)})
    if abs(sum(fractions) - 1.0) > _FRACTION_TOL:
        raise SpecError("split fractions must sum to 1", context={"fractions": list(fractions)})
    if n < 3:
        raise SpecError("split needs at least 3 rows", context={"N": n})

    _, f_val, f_test = fractions
    n_test: int = min(max(1, int(round(n * f_test))), n - 2)
    n_val: int = min(max(1, int(round(n * f_val))), n - n_test - 1)

    everything: np.ndarray = np.arange(n)
    stratified: bool = _stratify_on(labels, n_test, _MIN_STRATUM) is not None
    rest, test = train_test_split(
        everything,
        test_size=n_test,
        random_state=seed,
        stratify=labels if stratified else None,
    )
    rest_labels: np.ndarray = labels[rest]
    train, val = train_test_split(
        rest,
        test_size=n_val,
        random_state=seed,
        stratify=_stratify_on(rest_labels, n_val, 2) if stratified else None,
    )
    return np.sort(train), np.sort(val), np.sort(test)


def split(
    dataset: Dataset,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    train, val, test = split_indices(dataset.labels, fractions, seed)
    logger.debug("[Split] sizes train=%d val=%d test=%d seed=%d", train.size, val.size, test.size, seed)
    return dataset.subset(train), dataset.subset(val), dataset.subset(test)
