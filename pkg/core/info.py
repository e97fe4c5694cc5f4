from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import mutual_info_score

from core.data import make_rng
from core.exceptions import ShapeError, SpecError
from core.models import (
    ConceptRanking,
    Dataset,
    MiEstimate,
    RankCorrelation,
    RankingStep,
    StabilityReport,
)
from core.storage import atomic_write_text

logger: logging.Logger = logging.getLogger(__name__)

RANKING_COLUMNS: list[str] = ["rank", "concept_index", "concept_name", "score", "relevance", "redundancy"]


# ── Mutual information ────────────────────────────────────────


def encode_symbols(values: np.ndarray | Sequence) -> np.ndarray:
    """Map a discrete series (or a series of discrete vectors, one per row) to integer codes."""
    arr: np.ndarray = np.asarray(values)
    if arr.ndim == 1:
        return np.unique(arr, return_inverse=True)[1].reshape(-1)
    if arr.ndim == 2:
        if arr.shape[1] == 0:
            return np.zeros(arr.shape[0], dtype=np.int64)
        return np.unique(arr, axis=0, return_inverse=True)[1].reshape(-1)
    raise ShapeError("discrete series must be 1-D or 2-D", context={"ndim": arr.ndim})


def mutual_information(x: np.ndarray | Sequence, y: np.ndarray | Sequence) -> MiEstimate:
    """Plug-in I(X;Y) in nats over empirical joint frequencies; 0 log 0 := 0."""
    x_codes: np.ndarray = encode_symbols(x)
    y_codes: np.ndarray = encode_symbols(y)
    if x_codes.shape[0] != y_codes.shape[0]:
        raise ShapeError(
            "mutual information needs series of equal length",
            context={"len_x": int(x_codes.shape[0]), "len_y": int(y_codes.shape[0])},
        )
    if x_codes.shape[0] == 0:
        raise ShapeError("mutual information needs at least one observation")
    value: float = float(mutual_info_score(x_codes, y_codes))
    return MiEstimate(
        value=max(value, 0.0),
        support_x=int(x_codes.max()) + 1,
        support_y=int(y_codes.max()) + 1,
    )


def entropy_of(values: np.ndarray | Sequence) -> float:
    """Plug-in Shannon entropy in nats."""
    counts: np.ndarray = np.bincount(encode_symbols(values))
    return float(stats.entropy(counts))


def relevance_vector(concepts: np.ndarray, labels: np.ndarray) -> np.ndarray:
    concepts = np.asarray(concepts)
    if concepts.ndim != 2:
        raise ShapeError("concepts must be an N x K matrix", context={"ndim": concepts.ndim})
    return np.array(
        [mutual_information(concepts[:, j], labels).value for j in range(concepts.shape[1])],
        dtype=np.float64,
    )


# ── mRMR ──────────────────────────────────────────────────────


def mrmr_rank(
    concepts: np.ndarray,
    labels: np.ndarray,
    exclude: Optional[Sequence[int]] = None,
    concept_names: Optional[Sequence[str]] = None,
) -> ConceptRanking:
    """
    Greedy minimum-redundancy maximum-relevance ordering of every concept.

    Step t picks the remaining concept maximizing relevance minus its mean pairwise MI
    to the already selected set (0 for the empty set). Ties go to the lowest index.
    Excluded concepts are appended after the greedy order in index order.
    """
    concepts = np.asarray(concepts)
    labels = np.asarray(labels)
    if concepts.ndim != 2 or concepts.shape[1] == 0 or concepts.shape[0] == 0:
        raise SpecError("mRMR needs a non-empty N x K concept matrix", context={"shape": list(concepts.shape)})
    if concepts.shape[0] != labels.shape[0]:
        raise ShapeError(
            "concepts and labels must have the same number of rows",
            context={"concepts": concepts.shape[0], "labels": labels.shape[0]},
        )
    k: int = concepts.shape[1]
    excluded: set[int] = set(exclude or ())
    if any(not 0 <= j < k for j in excluded):
        raise SpecError("exclude lists an unknown concept index", context={"exclude": sorted(excluded), "K": k})

    relevance: np.ndarray = relevance_vector(concepts, labels)
    redundancy_sum: np.ndarray = np.zeros(k, dtype=np.float64)
    remaining: list[int] = [j for j in range(k) if j not in excluded]
    selected: list[int] = []
    steps: list[RankingStep] = []

    def _redundancy(j: int) -> float:
        return float(redundancy_sum[j] / len(selected)) if selected else 0.0

    while remaining:
        candidates: np.ndarray = np.asarray(remaining)
        scores: np.ndarray = np.array([relevance[j] - _redundancy(j) for j in remaining])
        best: int = int(candidates[int(np.argmax(scores))])
        steps.append(RankingStep(
            concept_index=best,
            relevance=float(relevance[best]),
            redundancy=_redundancy(best),
            score=float(relevance[best]) - _redundancy(best),
        ))
        selected.append(best)
        remaining.remove(best)
        for j in remaining:
            redundancy_sum[j] += mutual_information(concepts[:, j], concepts[:, best]).value
        for j in excluded:
            redundancy_sum[j] += mutual_information(concepts[:, j], concepts[:, best]).value
        logger.debug("[mRMR] step %d picked concept %d (score %.4f)", len(steps), best, steps[-1].score)

    for j in sorted(excluded):
        steps.append(RankingStep(
            concept_index=j,
            relevance=float(relevance[j]),
            redundancy=_redundancy(j),
            score=float(relevance[j]) - _redundancy(j),
        ))

    order: list[int] = [s.concept_index for s in steps]
    logger.info("[mRMR] Ranked %d concepts (%d excluded); top-5 %s", k, len(excluded), order[:5])
    return ConceptRanking(order=order, steps=steps, concept_names=list(concept_names or []))


def annotate_order(
    concepts: np.ndarray,
    labels: np.ndarray,
    order: Sequence[int],
    concept_names: Optional[Sequence[str]] = None,
) -> ConceptRanking:
    """Relevance / redundancy / score bookkeeping along an arbitrary fixed order."""
    concepts = np.asarray(concepts)
    relevance: np.ndarray = relevance_vector(concepts, labels)
    steps: list[RankingStep] = []
    for t, j in enumerate(order):
        pair_mi: list[float] = [mutual_information(concepts[:, j], concepts[:, s]).value for s in order[:t]]
        redundancy: float = sum(pair_mi) / len(pair_mi) if pair_mi else 0.0
        steps.append(RankingStep(
            concept_index=int(j),
            relevance=float(relevance[j]),
            redundancy=redundancy,
            score=float(relevance[j]) - redundancy,
        ))
    return ConceptRanking(order=[int(j) for j in order], steps=steps, concept_names=list(concept_names or []))


def random_ranking(k: int, seed: int) -> ConceptRanking:
    if k < 1:
        raise SpecError("random ranking needs K >= 1", context={"K": k})
    return ConceptRanking(order=[int(j) for j in make_rng(seed).permutation(k)])


def identity_ranking(k: int) -> ConceptRanking:
    return ConceptRanking(order=list(range(k)))


# ── Stability ─────────────────────────────────────────────────


def prefix_iou(order_a: Sequence[int], order_b: Sequence[int], k: int) -> float:
    top_a: set[int] = set(order_a[:k])
    top_b: set[int] = set(order_b[:k])
    union: set[int] = top_a | top_b
    return len(top_a & top_b) / len(union) if union else 1.0


def ranking_stability(
    dataset: Dataset,
    seeds: Sequence[int],
    resample_fraction: float,
    prefix_sizes: Sequence[int],
    exclude: Optional[Sequence[int]] = None,
) -> StabilityReport:
    k: int = dataset.n_concepts
    if any(size < 1 or size > k for size in prefix_sizes):
        raise SpecError("prefix sizes must lie in [1, K]", context={"prefix_sizes": list(prefix_sizes), "K": k})
    if not 0.0 < resample_fraction <= 1.0:
        raise SpecError("resample_fraction must lie in (0, 1]", context={"resample_fraction": resample_fraction})

    reference: ConceptRanking = mrmr_rank(dataset.concepts, dataset.labels, exclude)
    n: int = dataset.n_samples
    rows: list[list[float]] = []
    for seed in seeds:
        if resample_fraction >= 1.0:
            sample: Dataset = dataset
        else:
            m: int = max(1, int(round(resample_fraction * n)))
            sample = dataset.subset(np.sort(make_rng(seed).choice(n, size=m, replace=False)))
        rerun: ConceptRanking = mrmr_rank(sample.concepts, sample.labels, exclude)
        rows.append([prefix_iou(reference.order, rerun.order, size) for size in prefix_sizes])
        logger.info("[Stability] seed=%d IoU %s", seed, ["%.3f" % v for v in rows[-1]])

    return StabilityReport(
        seeds=list(seeds),
        prefix_sizes=list(prefix_sizes),
        resample_fraction=resample_fraction,
        iou=rows,
    )


def rank_correlation(order_a: Sequence[int], order_b: Sequence[int]) -> RankCorrelation:
    if len(order_a) != len(order_b):
        raise ShapeError("orders must have the same length", context={"len_a": len(order_a), "len_b": len(order_b)})
    rank_a: np.ndarray = ConceptRanking(order=list(order_a)).positions()
    rank_b: np.ndarray = ConceptRanking(order=list(order_b)).positions()
    if rank_a.size < 2:
        return RankCorrelation(spearman=1.0, kendall_tau=1.0)
    return RankCorrelation(
        spearman=float(stats.spearmanr(rank_a, rank_b).statistic),
        kendall_tau=float(stats.kendalltau(rank_a, rank_b).statistic),
    )


# ── Serialization ─────────────────────────────────────────────


def ranking_to_csv(ranking: ConceptRanking) -> str:
    names: list[str] = ranking.concept_names or [f"c{j}" for j in range(ranking.size)]
    frame: pd.DataFrame = pd.DataFrame(
        [
            {
                "rank": t + 1,
                "concept_index": step.concept_index,
                "concept_name": names[step.concept_index],
                "score": repr(step.score),
                "relevance": repr(step.relevance),
                "redundancy": repr(step.redundancy),
            }
            for t, step in enumerate(ranking.steps)
        ],
        columns=RANKING_COLUMNS,
    )
    return frame.to_csv(index=False, lineterminator="\n")


def write_ranking(ranking: ConceptRanking, path: str | Path) -> Path:
    if not ranking.steps:
        raise SpecError("only annotated rankings can be written; use annotate_order first")
    return atomic_write_text(path, ranking_to_csv(ranking))


def read_ranking(path: str | Path) -> ConceptRanking:
    try:
        frame: pd.DataFrame = pd.read_csv(path, keep_default_na=False)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise SpecError("Unreadable ranking file", detail=str(exc), context={"path": str(path)}) from exc
    missing: list[str] = [c for c in RANKING_COLUMNS if c not in frame.columns]
    if missing:
        raise SpecError("Ranking file is missing columns", context={"path": str(path), "missing": missing})
    frame = frame.sort_values("rank")
    steps: list[RankingStep] = [
        RankingStep(
            concept_index=int(row.concept_index),
            relevance=float(row.relevance),
            redundancy=float(row.redundancy),
            score=float(row.score),
        )
        for row in frame.itertuples(index=False)
    ]
    by_index: pd.DataFrame = frame.sort_values("concept_index")
    return ConceptRanking(
        order=[s.concept_index for s in steps],
        steps=steps,
        concept_names=[str(n) for n in by_index["concept_name"]],
    )
