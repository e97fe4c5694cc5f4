from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from core.exceptions import FitError, ShapeError, SpecError
from core.matryoshka import ordered_concepts, predict_at
from core.models import (
    ConceptRanking,
    CurvePoint,
    Dataset,
    DecayFit,
    HeadMode,
    HeadPolicy,
    InterventionCurve,
    InterventionTrace,
    LevelHistogram,
    MatryoshkaModel,
    RecoveryCurve,
)
from core.storage import atomic_write_text

logger: logging.Logger = logging.getLogger(__name__)

TRACE_COLUMNS: list[str] = ["sample_id", "policy", "k", "prediction", "correct"]
CURVE_COLUMNS: list[str] = ["k", "accuracy", "policy", "ordering"]


def intervene_prefix(concept_probs_ordered: np.ndarray, ground_truth_ordered: np.ndarray, k: int) -> np.ndarray:
    """Replace the first k ordered coordinates by hard ground truth; the rest stay soft."""
    probs: np.ndarray = np.asarray(concept_probs_ordered, dtype=np.float64)
    truth: np.ndarray = np.asarray(ground_truth_ordered, dtype=np.float64)
    if probs.shape != truth.shape:
        raise ShapeError("probabilities and ground truth must have the same shape",
                         context={"probs": list(probs.shape), "truth": list(truth.shape)})
    width: int = probs.shape[-1]
    if not 0 <= k <= width:
        raise SpecError("intervention count must lie in [0, K]", context={"k": k, "K": width})
    out: np.ndarray = probs.copy()
    out[..., :k] = truth[..., :k]
    return out


# ── Simulation ─────────────────────────────────────────────────


def full_level(model: MatryoshkaModel) -> int:
    """Width of the widest available head."""
    return model.n_concepts if model.mode is HeadMode.EFFICIENT else model.schedule.widest


def _head_level(model: MatryoshkaModel, k: int, policy: HeadPolicy) -> int:
    if policy is HeadPolicy.FULL_HEAD or k == 0:
        return full_level(model)
    return k


class InterventionSimulator:
    """Soft concepts and ground truth of one dataset, arranged in the model's concept order."""

    def __init__(self, model: MatryoshkaModel, dataset: Dataset, ranking: ConceptRanking) -> None:
        if ranking.size != model.n_concepts:
            raise ShapeError("ranking must cover every concept", context={"ranking": ranking.size, "K": model.n_concepts})
        self.model: MatryoshkaModel = model
        self.labels: np.ndarray = dataset.labels
        perm: np.ndarray = np.asarray(model.permutation, dtype=np.int64)
        self.c_ord: np.ndarray = ordered_concepts(model, dataset.features)
        self.truth_ord: np.ndarray = dataset.concepts[:, perm].astype(np.float64)
        model_position: np.ndarray = np.empty_like(perm)
        model_position[perm] = np.arange(perm.size)
        self.positions: np.ndarray = model_position[np.asarray(ranking.order, dtype=np.int64)]

    def intervened(self, k: int) -> np.ndarray:
        """Model-ordered vectors with the top-k ranked concepts replaced by hard truth."""
        if not 0 <= k <= self.model.n_concepts:
            raise SpecError("intervention count must lie in [0, K]", context={"k": k, "K": self.model.n_concepts})
        cols: np.ndarray = self.positions[:k]
        c: np.ndarray = self.c_ord.copy()
        c[:, cols] = self.truth_ord[:, cols]
        return c

    def predictions(self, k: int, policy: HeadPolicy) -> np.ndarray:
        return predict_at(self.model, self.intervened(k), _head_level(self.model, k, policy)).argmax(axis=1)


def accuracy_at_k(
    model: MatryoshkaModel,
    dataset: Dataset,
    ranking: ConceptRanking,
    k_grid: Sequence[int],
    head_policy: HeadPolicy = HeadPolicy.MATCHED,
    ordering: str = "mrmr",
) -> InterventionCurve:
    """Accuracy after hard-correcting the top-k concepts of `ranking`, for each k."""
    sim: InterventionSimulator = InterventionSimulator(model, dataset, ranking)
    points: list[CurvePoint] = [
        CurvePoint(k=int(k), accuracy=float((sim.predictions(int(k), head_policy) == sim.labels).mean()))
        for k in k_grid
    ]
    logger.info(
        "[Intervene] %s/%s accuracy@k %s",
        head_policy.value, ordering, ["%d:%.3f" % (p.k, p.accuracy) for p in points],
    )
    return InterventionCurve(policy=head_policy, ordering=ordering, points=points)


def simulate_interventions(
    model: MatryoshkaModel,
    dataset: Dataset,
    ranking: ConceptRanking,
    k_grid: Optional[Sequence[int]] = None,
    head_policy: HeadPolicy = HeadPolicy.MATCHED,
    levels: Optional[Sequence[int]] = None,
) -> list[InterventionTrace]:
    """
    Per-sample traces. Predictions are recorded for every k in the grid plus every
    schedule level; l* is the first schedule level whose intervened prediction is right.
    """
    schedule: list[int] = list(levels) if levels is not None else model.schedule.levels
    ks: list[int] = sorted(set(k_grid or ()) | set(schedule) | {0})
    sim: InterventionSimulator = InterventionSimulator(model, dataset, ranking)
    per_k: dict[int, np.ndarray] = {k: sim.predictions(k, head_policy) for k in ks}

    correct_at_level: np.ndarray = np.stack([per_k[d] == sim.labels for d in schedule], axis=1)
    any_correct: np.ndarray = correct_at_level.any(axis=1)
    first: np.ndarray = correct_at_level.argmax(axis=1)

    traces: list[InterventionTrace] = []
    for i in range(dataset.n_samples):
        traces.append(InterventionTrace(
            sample_id=i,
            label=int(sim.labels[i]),
            base_prediction=int(per_k[0][i]),
            per_k_predictions={k: int(pred[i]) for k, pred in per_k.items()},
            minimal_sufficient_level=int(first[i]) + 1 if any_correct[i] else None,
            head_policy=head_policy,
        ))
    return traces


def minimal_sufficient_levels(
    model: MatryoshkaModel,
    dataset: Dataset,
    ranking: ConceptRanking,
    schedule: Optional[Sequence[int]] = None,
    misclassified_only: bool = True,
    head_policy: HeadPolicy = HeadPolicy.MATCHED,
) -> LevelHistogram:
    """Histogram of l* over schedule levels plus a `never` bucket."""
    levels: list[int] = list(schedule) if schedule is not None else model.schedule.levels
    subset: Dataset = dataset
    if misclassified_only:
        base: np.ndarray = InterventionSimulator(model, dataset, ranking).predictions(0, head_policy)
        subset = dataset.subset(np.flatnonzero(base != dataset.labels))
    if subset.n_samples == 0:
        logger.warning("[Intervene] No samples to analyse for l*; returning an empty histogram")
        return LevelHistogram(levels=levels, counts=[0] * len(levels), never=0, empty=True)

    traces: list[InterventionTrace] = simulate_interventions(model, subset, ranking, None, head_policy, levels)
    found: list[int] = [t.minimal_sufficient_level for t in traces if t.minimal_sufficient_level is not None]
    counts: np.ndarray = np.bincount(np.asarray(found, dtype=np.int64), minlength=len(levels) + 1)[1:]
    histogram: LevelHistogram = LevelHistogram(
        levels=levels,
        counts=[int(c) for c in counts],
        never=len(traces) - len(found),
    )
    logger.info("[Intervene] l* histogram %s never=%d over %d samples", histogram.counts, histogram.never, len(traces))
    return histogram


def compare_head_policies(
    model: MatryoshkaModel,
    dataset: Dataset,
    ranking: ConceptRanking,
    k_grid: Sequence[int],
) -> tuple[InterventionCurve, InterventionCurve, np.ndarray]:
    """Matched and full-head curves over the same grid, with the matched-minus-full gap per k."""
    matched: InterventionCurve = accuracy_at_k(model, dataset, ranking, k_grid, HeadPolicy.MATCHED)
    full: InterventionCurve = accuracy_at_k(model, dataset, ranking, k_grid, HeadPolicy.FULL_HEAD)
    return matched, full, matched.accuracies() - full.accuracies()


def curve_auc(curve: InterventionCurve) -> float:
    """Mean accuracy over the curve's grid points."""
    return float(curve.accuracies().mean()) if curve.points else 0.0


# ── Cost analysis ──────────────────────────────────────────────


def fit_geometric_decay(counts: Sequence[float] | LevelHistogram) -> DecayFit:
    """Least-squares fit of log count against level index; slope is ln gamma."""
    values: np.ndarray = np.asarray(
        counts.counts if isinstance(counts, LevelHistogram) else counts, dtype=np.float64,
    )
    index: np.ndarray = np.arange(values.size, dtype=np.float64)
    used: np.ndarray = values > 0
    if used.sum() < 2:
        raise FitError("geometric decay fit needs at least 2 non-empty levels", context={"counts": values.tolist()})
    fit = stats.linregress(index[used], np.log(values[used]))
    r_squared: float = float(fit.rvalue ** 2)
    return DecayFit(
        gamma=float(np.exp(fit.slope)),
        r_squared=r_squared,
        norm_const=float(np.exp(fit.intercept) / values.sum()),
        levels_used=int(used.sum()),
    )


def expected_cost(
    histogram: LevelHistogram,
    level_sizes: Optional[Sequence[float]] = None,
    never_cost: Optional[float] = None,
) -> float:
    """
    E = sum_i k_i * P(l* = i), with the never bucket charged `never_cost`
    (default: the largest schedule level, a full inspection).
    """
    sizes: np.ndarray = np.asarray(level_sizes if level_sizes is not None else histogram.levels, dtype=np.float64)
    counts: np.ndarray = np.asarray(histogram.counts, dtype=np.float64)
    if sizes.shape != counts.shape:
        raise ShapeError("one level size per histogram bucket", context={"sizes": sizes.size, "buckets": counts.size})
    if np.any(sizes <= 0):
        raise SpecError("level sizes must be positive", context={"sizes": sizes.tolist()})
    total: float = float(counts.sum()) + histogram.never
    if total <= 0:
        raise FitError("cannot price an empty histogram")
    charge: float = float(never_cost) if never_cost is not None else float(max(histogram.levels))
    return float((sizes * counts).sum() + charge * histogram.never) / total


def recovery_curve(histogram: LevelHistogram) -> RecoveryCurve:
    counts: np.ndarray = np.asarray(histogram.counts, dtype=np.float64)
    total: float = float(counts.sum()) + histogram.never
    if total <= 0:
        raise FitError("cannot build a recovery curve from an empty histogram")
    marginal: np.ndarray = counts / total
    return RecoveryCurve(
        levels=list(histogram.levels),
        cumulative=np.cumsum(marginal).tolist(),
        marginal=marginal.tolist(),
    )


# ── Serialization ──────────────────────────────────────────────


def traces_to_csv(traces: Sequence[InterventionTrace]) -> str:
    rows: list[dict[str, object]] = [
        {
            "sample_id": t.sample_id,
            "policy": t.head_policy.value,
            "k": k,
            "prediction": pred,
            "correct": int(pred == t.label),
        }
        for t in traces
        for k, pred in sorted(t.per_k_predictions.items())
    ]
    return pd.DataFrame(rows, columns=TRACE_COLUMNS).to_csv(index=False, lineterminator="\n")


def curves_to_csv(curves: Sequence[InterventionCurve]) -> str:
    rows: list[dict[str, object]] = [
        {"k": p.k, "accuracy": p.accuracy, "policy": c.policy.value, "ordering": c.ordering}
        for c in curves
        for p in c.points
    ]
    return pd.DataFrame(rows, columns=CURVE_COLUMNS).to_csv(index=False, lineterminator="\n")


def write_traces(traces: Sequence[InterventionTrace], path: str | Path) -> Path:
    return atomic_write_text(path, traces_to_csv(traces))


def write_curves(curves: Sequence[InterventionCurve], path: str | Path) -> Path:
    return atomic_write_text(path, curves_to_csv(curves))
