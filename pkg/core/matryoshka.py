from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Final, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, log_softmax, softmax
from sklearn.metrics import f1_score

from core.data import make_rng
from core.exceptions import (
    ShapeError,
    SpecError,
    TrainingDivergedError,
    UnsupportedLevelError,
)
from core.models import (
    ConceptRanking,
    Dataset,
    EvaluationResult,
    HeadMode,
    HeadWeights,
    HistoryRecord,
    LevelSampling,
    LossConfig,
    MatryoshkaModel,
    NestingSchedule,
    Phase,
    TrainingMode,
)
from core.storage import atomic_write_text

logger: logging.Logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION: Final[int] = 1
HISTORY_COLUMNS: Final[list[str]] = ["epoch", "level", "split", "loss", "accuracy"]

Params = dict[str, np.ndarray]


# ── Construction ───────────────────────────────────────────────


def mask_for_level(d: int, k: int) -> np.ndarray:
    if not 0 <= d <= k:
        raise SpecError("mask level must lie in [0, K]", context={"d": d, "K": k})
    mask: np.ndarray = np.zeros(k, dtype=np.float64)
    mask[:d] = 1.0
    return mask


def init_model(
    n_features: int,
    n_concepts: int,
    class_count: int,
    schedule: NestingSchedule,
    mode: HeadMode,
    ranking: ConceptRanking,
    seed: int,
) -> MatryoshkaModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, deterministic per seed."""
    schedule.check_capacity(n_concepts)
    if ranking.size != n_concepts:
        raise ShapeError("ranking must cover every concept", context={"ranking": ranking.size, "K": n_concepts})

    rng: np.random.Generator = make_rng(seed)
    enc_bound: float = 1.0 / np.sqrt(max(n_features, 1))
    encoder_weights: np.ndarray = rng.uniform(-enc_bound, enc_bound, size=(n_features, n_concepts))
    encoder_bias: np.ndarray = rng.uniform(-enc_bound, enc_bound, size=n_concepts)

    def _head(width: int) -> HeadWeights:
        bound: float = 1.0 / np.sqrt(width)
        return HeadWeights(
            weights=rng.uniform(-bound, bound, size=(class_count, width)),
            bias=rng.uniform(-bound, bound, size=class_count),
        )

    heads: dict[int, HeadWeights] = {}
    shared: Optional[HeadWeights] = None
    if mode is HeadMode.STANDARD:
        heads = {d: _head(d) for d in schedule.levels}
    else:
        shared = _head(n_concepts)

    logger.info(
        "[Model] init %s F=%d K=%d C=%d levels=%s seed=%d",
        mode.value, n_features, n_concepts, class_count, schedule.levels, seed,
    )
    return MatryoshkaModel(
        encoder_weights=encoder_weights,
        encoder_bias=encoder_bias,
        permutation=list(ranking.order),
        schedule=schedule,
        mode=mode,
        class_count=class_count,
        heads=heads,
        shared=shared,
    )


def model_parameters(model: MatryoshkaModel) -> Params:
    """Private copies of every trainable array, keyed by name."""
    params: Params = {
        "encoder_weights": model.encoder_weights.copy(),
        "encoder_bias": model.encoder_bias.copy(),
    }
    if model.mode is HeadMode.STANDARD:
        for d, head in model.heads.items():
            params[f"head_weights@{d}"] = head.weights.copy()
            params[f"head_bias@{d}"] = head.bias.copy()
    else:
        assert model.shared is not None
        params["shared_weights"] = model.shared.weights.copy()
        params["shared_bias"] = model.shared.bias.copy()
    return params


def with_parameters(model: MatryoshkaModel, params: Params) -> MatryoshkaModel:
    """A model sharing the given arrays; in-place updates to `params` show through."""
    update: dict[str, Any] = {
        "encoder_weights": params["encoder_weights"],
        "encoder_bias": params["encoder_bias"],
    }
    if model.mode is HeadMode.STANDARD:
        update["heads"] = {
            d: HeadWeights(weights=params[f"head_weights@{d}"], bias=params[f"head_bias@{d}"])
            for d in model.schedule.levels
        }
    else:
        update["shared"] = HeadWeights(weights=params["shared_weights"], bias=params["shared_bias"])
    return model.model_copy(update=update)


# ── Forward pass ───────────────────────────────────────────────


def prefix_scores(c_prefix: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    W @ c + b with strictly sequential accumulation over concept positions.
    Zero-weight trailing positions leave the sums unchanged, so masked and truncated
    heads agree bit for bit.
    """
    if weights.shape[1] == 0:
        return np.tile(bias, (c_prefix.shape[0], 1))
    terms: np.ndarray = c_prefix[:, None, :] * weights[None, :, :]
    return np.cumsum(terms, axis=2)[:, :, -1] + bias


def ordered_concepts(model: MatryoshkaModel, features: np.ndarray) -> np.ndarray:
    """Sigmoid concept probabilities, columns permuted into ranking order."""
    x: np.ndarray = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.n_features:
        raise ShapeError(
            "feature length does not match the encoder",
            context={"expected": model.n_features, "got": int(x.shape[1])},
        )
    probs: np.ndarray = expit(x @ model.encoder_weights + model.encoder_bias)
    return probs[:, np.asarray(model.permutation, dtype=np.int64)]


def head_for_level(model: MatryoshkaModel, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Effective (W, b) of the level-d head, W of width d."""
    if model.mode is HeadMode.STANDARD:
        if d not in model.heads:
            raise UnsupportedLevelError(
                f"Standard model has no head at level {d}",
                context={"d": d, "levels": model.schedule.levels},
            )
        head: HeadWeights = model.heads[d]
        return head.weights, head.bias
    if not 1 <= d <= model.n_concepts:
        raise UnsupportedLevelError(
            f"Efficient model supports levels in [1, {model.n_concepts}]",
            context={"d": d, "K": model.n_concepts},
        )
    assert model.shared is not None
    return model.shared.weights[:, :d], model.shared.bias


def level_scores(model: MatryoshkaModel, c_ord: np.ndarray, d: int) -> np.ndarray:
    c: np.ndarray = np.atleast_2d(np.asarray(c_ord, dtype=np.float64))
    if c.shape[1] != model.n_concepts:
        raise ShapeError("ordered concept vector must have length K", context={"K": model.n_concepts, "got": int(c.shape[1])})
    weights, bias = head_for_level(model, d)
    if model.mode is HeadMode.EFFICIENT:
        assert model.shared is not None
        masked: np.ndarray = model.shared.weights * mask_for_level(d, model.n_concepts)
        return prefix_scores(c, masked, bias)
    return prefix_scores(c[:, :d], weights, bias)


def forward(model: MatryoshkaModel, features_row: np.ndarray) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    row: np.ndarray = np.asarray(features_row, dtype=np.float64)
    if row.ndim != 1:
        raise ShapeError("forward takes a single feature row", context={"ndim": row.ndim})
    c_ord: np.ndarray = ordered_concepts(model, row)
    scores: dict[int, np.ndarray] = {d: level_scores(model, c_ord, d)[0] for d in model.schedule.levels}
    return c_ord[0], scores


def predict_at(model: MatryoshkaModel, concept_probs_ordered: np.ndarray, d: int) -> np.ndarray:
    """Softmax class distribution of the level-d head; accepts one vector or a batch."""
    c: np.ndarray = np.asarray(concept_probs_ordered, dtype=np.float64)
    dist: np.ndarray = softmax(level_scores(model, c, d), axis=1)
    return dist[0] if c.ndim == 1 else dist


def predict_labels(model: MatryoshkaModel, dataset: Dataset, d: int) -> np.ndarray:
    return predict_at(model, ordered_concepts(model, dataset.features), d).argmax(axis=1)


# ── Objective ──────────────────────────────────────────────────


def _task_terms(
    model: MatryoshkaModel,
    c_ord: np.ndarray,
    labels: np.ndarray,
    lambdas: dict[int, float],
    active: Sequence[int],
) -> tuple[float, Params, np.ndarray]:
    n: int = c_ord.shape[0]
    onehot: np.ndarray = np.eye(model.class_count)[labels]
    rows: np.ndarray = np.arange(n)
    loss: float = 0.0
    grads: Params = {}
    if model.mode is HeadMode.STANDARD:
        for d in model.schedule.levels:
            grads[f"head_weights@{d}"] = np.zeros_like(model.heads[d].weights)
            grads[f"head_bias@{d}"] = np.zeros_like(model.heads[d].bias)
    else:
        assert model.shared is not None
        grads["shared_weights"] = np.zeros_like(model.shared.weights)
        grads["shared_bias"] = np.zeros_like(model.shared.bias)
    d_c_ord: np.ndarray = np.zeros_like(c_ord)

    for d in active:
        lam: float = lambdas[d]
        weights, bias = head_for_level(model, d)
        log_q: np.ndarray = log_softmax(prefix_scores(c_ord[:, :d], weights, bias), axis=1)
        loss += lam * float(-log_q[rows, labels].mean())
        g: np.ndarray = lam * (np.exp(log_q) - onehot) / n
        if model.mode is HeadMode.STANDARD:
            grads[f"head_weights@{d}"] += g.T @ c_ord[:, :d]
            grads[f"head_bias@{d}"] += g.sum(axis=0)
        else:
            grads["shared_weights"][:, :d] += g.T @ c_ord[:, :d]
            grads["shared_bias"] += g.sum(axis=0)
        d_c_ord[:, :d] += g @ weights
    return loss, grads, d_c_ord


def objective(
    model: MatryoshkaModel,
    features: np.ndarray,
    concepts: np.ndarray,
    labels: np.ndarray,
    config: LossConfig,
    phase: Phase = Phase.JOINT,
    levels: Optional[Sequence[int]] = None,
    hard_concepts: bool = False,
) -> tuple[float, Params]:
    """
    Loss and analytic gradients for one batch.

    joint:   alpha * BCE(concept logits, c) + sum_d lambda_d * CE(level-d scores, y)
    concept: BCE only, encoder gradients only
    task:    task loss only, head gradients only (encoder frozen)

    BCE is summed over concepts and averaged over the batch; CE is batch-averaged.
    `levels` restricts the task sum to a subset of the schedule. With `hard_concepts` the
    task phase feeds the heads ground-truth concepts instead of encoder probabilities.
    """
    x: np.ndarray = np.asarray(features, dtype=np.float64)
    c_gt: np.ndarray = np.asarray(concepts, dtype=np.float64)
    y: np.ndarray = np.asarray(labels, dtype=np.int64)
    n: int = x.shape[0]

    logits: np.ndarray = x @ model.encoder_weights + model.encoder_bias
    probs: np.ndarray = expit(logits)
    perm: np.ndarray = np.asarray(model.permutation, dtype=np.int64)
    loss: float = 0.0
    grads: Params = {}
    d_logits: np.ndarray = np.zeros_like(logits)

    if phase is not Phase.TASK:
        weight: float = config.alpha if phase is Phase.JOINT else 1.0
        bce: np.ndarray = np.logaddexp(0.0, logits) - logits * c_gt
        loss += weight * float(bce.sum()) / n
        d_logits += weight * (probs - c_gt) / n

    if phase is not Phase.CONCEPT:
        active: Sequence[int] = levels if levels is not None else model.schedule.levels
        if hard_concepts and phase is not Phase.TASK:
            raise SpecError("ground-truth head inputs only apply to the task phase", context={"phase": phase.value})
        inputs: np.ndarray = c_gt if hard_concepts else probs
        task_loss, head_grads, d_c_ord = _task_terms(
            model, inputs[:, perm], y, config.level_weights(model.schedule), active,
        )
        loss += task_loss
        grads.update(head_grads)
        if phase is Phase.JOINT:
            d_probs: np.ndarray = np.empty_like(d_c_ord)
            d_probs[:, perm] = d_c_ord
            d_logits += d_probs * probs * (1.0 - probs)

    if phase is not Phase.TASK:
        grads["encoder_weights"] = x.T @ d_logits
        grads["encoder_bias"] = d_logits.sum(axis=0)
    return loss, grads


def concept_gradient_pressure(
    model: MatryoshkaModel,
    dataset: Dataset,
    config: LossConfig,
    batch_size: Optional[int] = None,
) -> np.ndarray:
    """
    Squared task-loss gradient on each ordered concept coordinate, accumulated over one
    pass of fixed consecutive batches. Coordinates inside more prefixes collect more.
    """
    size: int = batch_size or config.batch_size
    lambdas: dict[int, float] = config.level_weights(model.schedule)
    pressure: np.ndarray = np.zeros(model.n_concepts, dtype=np.float64)
    c_ord_all: np.ndarray = ordered_concepts(model, dataset.features)
    for start in range(0, dataset.n_samples, size):
        batch: slice = slice(start, start + size)
        _, _, d_c_ord = _task_terms(model, c_ord_all[batch], dataset.labels[batch], lambdas, model.schedule.levels)
        pressure += (d_c_ord ** 2).sum(axis=0)
    return pressure


# ── Training ───────────────────────────────────────────────────


def check_compatible(model: MatryoshkaModel, dataset: Dataset, role: str) -> None:
    if dataset.n_features != model.n_features or dataset.n_concepts != model.n_concepts:
        raise ShapeError(
            f"{role} set dimensions do not match the model",
            context={
                "F": (dataset.n_features, model.n_features),
                "K": (dataset.n_concepts, model.n_concepts),
            },
        )
    if dataset.class_count > model.class_count:
        raise ShapeError(
            f"{role} set has more classes than the model",
            context={"C": (dataset.class_count, model.class_count)},
        )


def _epoch_records(
    model: MatryoshkaModel,
    splits: Sequence[tuple[str, Optional[Dataset]]],
    epoch: int,
) -> list[HistoryRecord]:
    records: list[HistoryRecord] = []
    for name, ds in splits:
        if ds is None or ds.n_samples == 0:
            continue
        c_ord: np.ndarray = ordered_concepts(model, ds.features)
        rows: np.ndarray = np.arange(ds.n_samples)
        for d in model.schedule.levels:
            log_q: np.ndarray = log_softmax(level_scores(model, c_ord, d), axis=1)
            records.append(HistoryRecord(
                epoch=epoch,
                level=d,
                split=name,
                loss=float(-log_q[rows, ds.labels].mean()),
                accuracy=float((log_q.argmax(axis=1) == ds.labels).mean()),
            ))
    return records


def run_phase(
    model: MatryoshkaModel,
    train_set: Dataset,
    val_set: Optional[Dataset],
    config: LossConfig,
    phase: Phase,
    rng: np.random.Generator,
    epoch_offset: int = 0,
    hard_concepts: bool = False,
) -> tuple[MatryoshkaModel, list[HistoryRecord]]:
    """Mini-batch gradient descent for one phase on a private copy of the model."""
    params: Params = model_parameters(model)
    current: MatryoshkaModel = with_parameters(model, params)
    sample_level: bool = (
        config.efficient_training is LevelSampling.RANDOM_LEVEL
        and model.mode is HeadMode.EFFICIENT
        and phase is not Phase.CONCEPT
    )
    levels: list[int] = model.schedule.levels
    n: int = train_set.n_samples
    history: list[HistoryRecord] = []

    for epoch in range(1, config.epochs + 1):
        order: np.ndarray = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch: np.ndarray = order[start:start + config.batch_size]
            active: Optional[list[int]] = [int(rng.choice(levels))] if sample_level else None
            loss, grads = objective(
                current,
                train_set.features[batch],
                train_set.concepts[batch],
                train_set.labels[batch],
                config,
                phase,
                active,
                hard_concepts,
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"Loss became {loss} at epoch {epoch_offset + epoch}",
                    context={
                        "epoch": epoch_offset + epoch,
                        "phase": phase.value,
                        "batch_start": start,
                        "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.items()},
                    },
                )
            for key, grad in grads.items():
                params[key] -= config.learning_rate * grad

        records: list[HistoryRecord] = _epoch_records(
            current, (("train", train_set), ("val", val_set)), epoch_offset + epoch,
        )
        history.extend(records)
        val_acc: list[str] = ["%d:%.3f" % (r.level, r.accuracy) for r in records if r.split == "val"]
        logger.debug("[Train] %s epoch %d val %s", phase.value, epoch_offset + epoch, val_acc)

    return current, history


def train(
    model: MatryoshkaModel,
    train_set: Dataset,
    val_set: Optional[Dataset],
    config: LossConfig,
) -> tuple[MatryoshkaModel, list[HistoryRecord]]:
    check_compatible(model, train_set, "train")
    if val_set is not None:
        check_compatible(model, val_set, "validation")
    if config.efficient_training is LevelSampling.RANDOM_LEVEL and model.mode is HeadMode.STANDARD:
        logger.warning("[Train] random_level sampling only applies to efficient mode; training all levels")

    rng: np.random.Generator = make_rng(config.seed)
    if config.training is TrainingMode.JOINT:
        trained, history = run_phase(model, train_set, val_set, config, Phase.JOINT, rng)
    else:
        encoded, history = run_phase(model, train_set, val_set, config, Phase.CONCEPT, rng)
        trained, head_history = run_phase(
            encoded, train_set, val_set, config, Phase.TASK, rng,
            epoch_offset=config.epochs, hard_concepts=config.training is TrainingMode.INDEPENDENT,
        )
        history.extend(head_history)

    final: list[str] = ["%d:%.3f" % (r.level, r.accuracy) for r in history[-len(model.schedule.levels):]]
    logger.info("[Train] %s/%s done after %d epochs; last %s", model.mode.value, config.training.value,
                history[-1].epoch if history else 0, final)
    return trained.model_copy(update={"training": config.training}), history


# ── Evaluation ─────────────────────────────────────────────────


def evaluate(model: MatryoshkaModel, dataset: Dataset, d: int) -> EvaluationResult:
    if dataset.n_samples == 0:
        raise SpecError("cannot evaluate on an empty dataset")
    predictions: np.ndarray = predict_labels(model, dataset, d)
    return EvaluationResult(
        level=d,
        accuracy=float((predictions == dataset.labels).mean()),
        macro_f1=float(f1_score(
            dataset.labels,
            predictions,
            labels=list(range(model.class_count)),
            average="macro",
            zero_division=0,
        )),
    )


def concept_accuracy(model: MatryoshkaModel, dataset: Dataset, d: int) -> float:
    """Accuracy of thresholded concept predictions on the first d ordered concepts."""
    if not 1 <= d <= model.n_concepts:
        raise SpecError("concept prefix must lie in [1, K]", context={"d": d, "K": model.n_concepts})
    if dataset.n_samples == 0:
        raise SpecError("cannot evaluate on an empty dataset")
    c_ord: np.ndarray = ordered_concepts(model, dataset.features)[:, :d]
    truth: np.ndarray = dataset.concepts[:, np.asarray(model.permutation[:d], dtype=np.int64)]
    return float(((c_ord >= 0.5) == (truth == 1)).mean())


def widest_head(model: MatryoshkaModel) -> np.ndarray:
    if model.mode is HeadMode.EFFICIENT:
        assert model.shared is not None
        return model.shared.weights
    if model.schedule.widest != model.n_concepts:
        raise SpecError(
            "weight-based ordering needs a head of width K",
            context={"widest": model.schedule.widest, "K": model.n_concepts},
        )
    return model.heads[model.schedule.widest].weights


def weight_based_order(model: MatryoshkaModel) -> list[int]:
    """Concept indices by descending column mass sum_c |W[c, i]| of the widest head; ties by index."""
    mass_by_position: np.ndarray = np.abs(widest_head(model)).sum(axis=0)
    mass: np.ndarray = np.empty_like(mass_by_position)
    mass[np.asarray(model.permutation, dtype=np.int64)] = mass_by_position
    return [int(j) for j in np.lexsort((np.arange(mass.size), -mass))]


# ── Serialization ──────────────────────────────────────────────


def _head_payload(level: int | str, head: HeadWeights) -> dict[str, Any]:
    return {"level": level, "weights": head.weights.tolist(), "bias": head.bias.tolist()}


def model_to_json(model: MatryoshkaModel) -> str:
    heads: list[dict[str, Any]]
    if model.mode is HeadMode.STANDARD:
        heads = [_head_payload(d, model.heads[d]) for d in model.schedule.levels]
    else:
        assert model.shared is not None
        heads = [_head_payload("shared", model.shared)]
    payload: dict[str, Any] = {
        "format_version": MODEL_FORMAT_VERSION,
        "mode": model.mode.value,
        "training": model.training.value,
        "class_count": model.class_count,
        "schedule": model.schedule.levels,
        "permutation": model.permutation,
        "encoder": {
            "shape": [model.n_features, model.n_concepts],
            "weights": model.encoder_weights.tolist(),
            "bias": model.encoder_bias.tolist(),
        },
        "heads": heads,
    }
    return json.dumps(payload, indent=1) + "\n"


def model_from_json(text: str) -> MatryoshkaModel:
    try:
        payload: dict[str, Any] = json.loads(text)
        if payload.get("format_version") != MODEL_FORMAT_VERSION:
            raise SpecError(
                "Unsupported model file version",
                context={"found": payload.get("format_version"), "expected": MODEL_FORMAT_VERSION},
            )
        n_features, n_concepts = payload["encoder"]["shape"]
        mode: HeadMode = HeadMode(payload["mode"])
        heads: dict[int, HeadWeights] = {}
        shared: Optional[HeadWeights] = None
        for entry in payload["heads"]:
            head: HeadWeights = HeadWeights(
                weights=np.asarray(entry["weights"], dtype=np.float64).reshape(payload["class_count"], -1),
                bias=np.asarray(entry["bias"], dtype=np.float64),
            )
            if entry["level"] == "shared":
                shared = head
            else:
                heads[int(entry["level"])] = head
        return MatryoshkaModel(
            encoder_weights=np.asarray(payload["encoder"]["weights"], dtype=np.float64).reshape(n_features, n_concepts),
            encoder_bias=np.asarray(payload["encoder"]["bias"], dtype=np.float64),
            permutation=[int(j) for j in payload["permutation"]],
            schedule=NestingSchedule(levels=payload["schedule"]),
            mode=mode,
            training=TrainingMode(payload["training"]),
            class_count=int(payload["class_count"]),
            heads=heads,
            shared=shared,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError("Malformed model file", detail=str(exc)) from exc


def save_model(model: MatryoshkaModel, path: str | Path) -> Path:
    return atomic_write_text(path, model_to_json(model))


def load_model(path: str | Path) -> MatryoshkaModel:
    return model_from_json(Path(path).read_text(encoding="utf-8"))


def history_to_csv(history: Sequence[HistoryRecord]) -> str:
    frame: pd.DataFrame = pd.DataFrame([r.model_dump() for r in history], columns=HISTORY_COLUMNS)
    return frame.to_csv(index=False, lineterminator="\n")


def write_history(history: Sequence[HistoryRecord], path: str | Path) -> Path:
    return atomic_write_text(path, history_to_csv(history))
