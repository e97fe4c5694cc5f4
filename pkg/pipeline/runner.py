from __future__ import annotations

import json
import logging
import time
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar

import numpy as np
import pandas as pd
from pydantic import ValidationError

from core.config import settings
from core.data import dataset_to_csv, generate_synthetic, split
from core.exceptions import FitError, SpecError
from core.info import (
    mrmr_rank,
    random_ranking,
    rank_correlation,
    ranking_stability,
    ranking_to_csv,
    read_ranking,
)
from core.intervene import (
    accuracy_at_k,
    curve_auc,
    curves_to_csv,
    expected_cost,
    fit_geometric_decay,
    minimal_sufficient_levels,
    recovery_curve,
    simulate_interventions,
    traces_to_csv,
)
from core.matryoshka import (
    check_compatible,
    concept_accuracy,
    evaluate,
    history_to_csv,
    init_model,
    load_model,
    model_to_json,
    train,
    weight_based_order,
)
from core.models import (
    ConceptRanking,
    Dataset,
    DatasetFormat,
    DecayFit,
    HeadMode,
    HeadPolicy,
    InterventionCurve,
    LevelHistogram,
    LevelSampling,
    LossConfig,
    MatryoshkaModel,
    NestingSchedule,
    RegimeParams,
    RegimeTable,
    RunConfig,
    SyntheticSpec,
    TrainingMode,
)
from core.theory import (
    expected_cost_bound,
    hellman_raviv_report,
    regime_classify,
    regime_table_to_csv,
    simulate_regimes,
)
from pipeline.artifacts import RunArtifacts
from tools import get_loader

logger: logging.Logger = logging.getLogger(__name__)

E = TypeVar("E", bound=Enum)

INPUT_KEYS: tuple[str, ...] = ("data", "model", "ranking", "against", "histogram")

_DATA: dict[str, Any] = {"data": None, "format": DatasetFormat.CSV.value, "classes": None}
_TRAINING: dict[str, Any] = {
    "exclude": [],
    "schedule": None,
    "mode": HeadMode.STANDARD.value,
    "training": TrainingMode.JOINT.value,
    "sampling": LevelSampling.ALL_LEVELS.value,
    "alpha": settings.ALPHA,
    "lambdas": None,
    "epochs": settings.EPOCHS,
    "lr": settings.LEARNING_RATE,
    "batch_size": settings.BATCH_SIZE,
    "fractions": [0.6, 0.2, 0.2],
}

COMMAND_DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {
        "levels": 3, "base": 2, "r": 2.0, "gamma": 0.5, "classes": 4, "n": 1000,
        "copies": 0, "noise": 0.0, "feature_dim": None, "feature_noise": settings.FEATURE_NOISE,
    },
    "load": {**_DATA},
    "rank": {**_DATA, "exclude": []},
    "stability": {**_DATA, "exclude": [], "seeds": [0, 1, 2, 3, 4], "fraction": 0.8, "prefix": None, "against": None},
    "train": {**_DATA, **_TRAINING, "ranking": None},
    "evaluate": {**_DATA, "model": None, "levels": None},
    "intervene": {
        **_DATA, "model": None, "ranking": None, "ordering": "mrmr",
        "k_grid": None, "policy": "both", "all_samples": False,
    },
    "decay-fit": {"counts": None, "histogram": None, "level_sizes": None},
    "regimes": {"r": 2.0, "gamma": 0.5, "base": 2.0, "levels_grid": list(range(1, 13)), "samples": 100_000},
    "bound": {**_DATA, "model": None, "ranking": None, "k_grid": None, "bins": list(settings.EPSILON_BINS)},
    "pipeline": {**_DATA, **_TRAINING, "k_grid": None, "bins": list(settings.EPSILON_BINS), "all_samples": False},
}

REQUIRED: dict[str, tuple[str, ...]] = {
    "load": ("data",),
    "rank": ("data",),
    "stability": ("data",),
    "train": ("data",),
    "evaluate": ("data", "model"),
    "intervene": ("data", "model"),
    "bound": ("data", "model"),
    "pipeline": ("data",),
}

PRIMARY_OUTPUT: dict[str, str] = {
    "synth": "dataset.csv",
    "load": "dataset.csv",
    "rank": "ranking.csv",
    "stability": "stability.json",
    "train": "model.json",
    "evaluate": "evaluation.json",
    "intervene": "curves.csv",
    "decay-fit": "decay.json",
    "regimes": "regimes.csv",
    "bound": "bound.json",
    "pipeline": "model.json",
}


def resolve_config(command: str, file_values: dict[str, Any], flag_values: dict[str, Any]) -> dict[str, Any]:
    """Flags over config file over defaults; keys the command does not know are dropped."""
    defaults: dict[str, Any] = {**COMMAND_DEFAULTS[command], "seed": settings.SEED, "output": f"runs/{command}"}
    resolved: dict[str, Any] = dict(defaults)
    for source in (file_values, flag_values):
        for key, value in source.items():
            if key in defaults:
                resolved[key] = value
            else:
                logger.debug("[Runner] Ignoring key '%s' for %s", key, command)
    return dict(sorted(resolved.items()))


def missing_required(command: str, resolved: dict[str, Any]) -> list[str]:
    return [key for key in REQUIRED.get(command, ()) if resolved.get(key) is None]


def default_schedule(n_concepts: int) -> list[int]:
    """Doubling prefix lengths below K, closed by K itself."""
    levels: list[int] = []
    d: int = 1
    while d < n_concepts:
        levels.append(d)
        d *= 2
    return levels + [n_concepts]


def _enum(cls: type[E], value: Any, key: str) -> E:
    try:
        return cls(value)
    except ValueError as exc:
        raise SpecError(
            f"Unknown value for '{key}'",
            context={"value": value, "allowed": [m.value for m in cls]},
        ) from exc


class ExperimentRunner:
    """One method per CLI command; each writes its outputs and a manifest."""

    def __init__(self, command: str, resolved: dict[str, Any]) -> None:
        self.command: str = command
        self.cfg: dict[str, Any] = resolved
        self.config: RunConfig = RunConfig(
            command=command,
            inputs={k: str(resolved[k]) for k in INPUT_KEYS if resolved.get(k) is not None},
            output=str(resolved["output"]),
            seed=int(resolved["seed"]),
            params={k: v for k, v in resolved.items() if k not in INPUT_KEYS and k not in ("output", "seed")},
        )
        self.artifacts: RunArtifacts = RunArtifacts(self.config, resolved, PRIMARY_OUTPUT[command])

    def run(self) -> Path:
        handler: Callable[[], None] = getattr(self, "_" + self.command.replace("-", "_"))
        t0: float = time.perf_counter()
        logger.info("[Runner] %s -> %s", self.command, self.artifacts.directory)
        try:
            handler()
        except ValidationError as exc:
            raise SpecError("Invalid parameters", detail=str(exc), context={"command": self.command}) from exc
        manifest: Path = self.artifacts.finalize()
        logger.info("[Runner] %s done in %.1fs", self.command, time.perf_counter() - t0)
        return manifest

    # ── Shared steps ───────────────────────────────────────────

    def _read_dataset(self, class_count: Optional[int] = None) -> Dataset:
        loader = get_loader(_enum(DatasetFormat, self.cfg["format"], "format"), class_count=self.cfg["classes"] or class_count)
        source: Path = Path(self.cfg["data"])
        self.artifacts.record_input("data", self.cfg["data"], loader.sidecars(source))
        return loader.load(source)

    def _load_model(self) -> MatryoshkaModel:
        self.artifacts.record_input("model", self.cfg["model"])
        return load_model(self.cfg["model"])

    def _model_and_data(self) -> tuple[MatryoshkaModel, Dataset]:
        model: MatryoshkaModel = self._load_model()
        dataset: Dataset = self._read_dataset(class_count=model.class_count)
        check_compatible(model, dataset, "input")
        return model, dataset

    def _ranking_for(self, model: MatryoshkaModel, ordering: str = "mrmr") -> ConceptRanking:
        """Explicit ranking file first, then the model's own order, a seeded random order, or head-weight mass."""
        if self.cfg.get("ranking") is not None:
            self.artifacts.record_input("ranking", self.cfg["ranking"])
            return read_ranking(self.cfg["ranking"])
        if ordering == "mrmr":
            return ConceptRanking(order=list(model.permutation))
        if ordering == "random":
            return random_ranking(model.n_concepts, self.config.seed)
        if ordering == "weight":
            return ConceptRanking(order=weight_based_order(model))
        raise SpecError("Unknown ordering", context={"ordering": ordering, "allowed": ["mrmr", "random", "weight"]})

    def _k_grid(self, model: MatryoshkaModel) -> list[int]:
        if self.cfg.get("k_grid") is not None:
            return [int(k) for k in self.cfg["k_grid"]]
        return [0, *model.schedule.levels]

    def _loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.cfg["alpha"],
            lambdas=self.cfg["lambdas"],
            epochs=self.cfg["epochs"],
            learning_rate=self.cfg["lr"],
            batch_size=self.cfg["batch_size"],
            efficient_training=_enum(LevelSampling, self.cfg["sampling"], "sampling"),
            training=_enum(TrainingMode, self.cfg["training"], "training"),
            seed=self.config.seed,
        )

    def _fit_model(self, train_set: Dataset, val_set: Dataset, ranking: ConceptRanking) -> MatryoshkaModel:
        schedule: NestingSchedule = NestingSchedule(
            levels=self.cfg["schedule"] or default_schedule(train_set.n_concepts),
        )
        model: MatryoshkaModel = init_model(
            train_set.n_features,
            train_set.n_concepts,
            train_set.class_count,
            schedule,
            _enum(HeadMode, self.cfg["mode"], "mode"),
            ranking,
            self.config.seed,
        )
        trained, history = train(model, train_set, val_set, self._loss_config())
        self.artifacts.write_text(model_to_json(trained), "model.json")
        self.artifacts.write_text(history_to_csv(history), "history.csv")
        return trained

    def _evaluation(self, model: MatryoshkaModel, dataset: Dataset, levels: list[int]) -> None:
        results = [evaluate(model, dataset, d).model_dump(mode="json") for d in levels]
        concept_acc: dict[str, float] = {str(d): concept_accuracy(model, dataset, d) for d in levels}
        for r in results:
            logger.info("[Eval] d=%d accuracy=%.4f macro_f1=%.4f", r["level"], r["accuracy"], r["macro_f1"])
        self.artifacts.write_json({"levels": results, "concept_accuracy": concept_acc}, "evaluation.json")

    def _level_report(self, model: MatryoshkaModel, dataset: Dataset, ranking: ConceptRanking) -> dict[str, Any]:
        histogram: LevelHistogram = minimal_sufficient_levels(
            model, dataset, ranking, misclassified_only=not self.cfg["all_samples"],
        )
        report: dict[str, Any] = {"histogram": histogram.model_dump(mode="json")}
        if histogram.empty:
            return report
        report["recovery"] = recovery_curve(histogram).model_dump(mode="json")
        report["expected_cost"] = expected_cost(histogram)
        try:
            report["decay_fit"] = fit_geometric_decay(histogram).model_dump(mode="json")
        except FitError as exc:
            logger.warning("[Runner] Decay fit skipped: %s", exc.message)
            report["decay_fit"] = None
        return report

    # ── Commands ───────────────────────────────────────────────

    def _synth(self) -> None:
        spec: SyntheticSpec = SyntheticSpec(
            levels=self.cfg["levels"],
            base_size=self.cfg["base"],
            growth_rate=self.cfg["r"],
            decay_rate=self.cfg["gamma"],
            classes=self.cfg["classes"],
            samples=self.cfg["n"],
            redundancy_copies=self.cfg["copies"],
            noise=self.cfg["noise"],
            seed=self.config.seed,
            feature_dim=self.cfg["feature_dim"],
            feature_noise=self.cfg["feature_noise"],
        )
        dataset: Dataset = generate_synthetic(spec)
        self.artifacts.write_text(dataset_to_csv(dataset))
        assert dataset.planted_levels is not None
        planted: pd.DataFrame = pd.DataFrame({
            "sample_id": np.arange(dataset.n_samples),
            "planted_level": dataset.planted_levels,
        })
        self.artifacts.write_text(planted.to_csv(index=False, lineterminator="\n"), "planted_levels.csv")

    def _load(self) -> None:
        dataset: Dataset = self._read_dataset()
        self.artifacts.write_text(dataset_to_csv(dataset))
        self.artifacts.write_json({
            "N": dataset.n_samples,
            "K": dataset.n_concepts,
            "F": dataset.n_features,
            "C": dataset.class_count,
            "class_counts": np.bincount(dataset.labels, minlength=dataset.class_count).tolist(),
            "concept_names": list(dataset.concept_names),
        }, "summary.json")

    def _rank(self) -> None:
        dataset: Dataset = self._read_dataset()
        ranking: ConceptRanking = mrmr_rank(dataset.concepts, dataset.labels, self.cfg["exclude"], dataset.concept_names)
        self.artifacts.write_text(ranking_to_csv(ranking))

    def _stability(self) -> None:
        dataset: Dataset = self._read_dataset()
        prefix: list[int] = self.cfg["prefix"] or [min(8, dataset.n_concepts)]
        report = ranking_stability(dataset, self.cfg["seeds"], self.cfg["fraction"], prefix, self.cfg["exclude"])
        payload: dict[str, Any] = {"stability": report.model_dump(mode="json")}
        if self.cfg["against"] is not None:
            reference: ConceptRanking = mrmr_rank(dataset.concepts, dataset.labels, self.cfg["exclude"])
            self.artifacts.record_input("against", self.cfg["against"])
            other: ConceptRanking = read_ranking(self.cfg["against"])
            payload["rank_correlation"] = rank_correlation(reference.order, other.order).model_dump(mode="json")
        self.artifacts.write_json(payload)

    def _train(self) -> None:
        dataset: Dataset = self._read_dataset()
        train_set, val_set, test_set = split(dataset, tuple(self.cfg["fractions"]), self.config.seed)
        if self.cfg["ranking"] is not None:
            self.artifacts.record_input("ranking", self.cfg["ranking"])
            ranking: ConceptRanking = read_ranking(self.cfg["ranking"])
        else:
            ranking = mrmr_rank(train_set.concepts, train_set.labels, self.cfg["exclude"], dataset.concept_names)
            self.artifacts.write_text(ranking_to_csv(ranking), "ranking.csv")
        model: MatryoshkaModel = self._fit_model(train_set, val_set, ranking)
        self.artifacts.write_text(dataset_to_csv(test_set), "test.csv")
        self._evaluation(model, test_set, model.schedule.levels)

    def _evaluate(self) -> None:
        model, dataset = self._model_and_data()
        self._evaluation(model, dataset, self.cfg["levels"] or model.schedule.levels)

    def _intervene(self) -> None:
        model, dataset = self._model_and_data()
        ranking: ConceptRanking = self._ranking_for(model, self.cfg["ordering"])
        ordering: str = "file" if self.cfg["ranking"] is not None else self.cfg["ordering"]
        policies: list[HeadPolicy] = (
            [HeadPolicy.MATCHED, HeadPolicy.FULL_HEAD] if self.cfg["policy"] == "both"
            else [_enum(HeadPolicy, self.cfg["policy"], "policy")]
        )
        k_grid: list[int] = self._k_grid(model)
        curves: list[InterventionCurve] = [
            accuracy_at_k(model, dataset, ranking, k_grid, policy, ordering) for policy in policies
        ]
        self.artifacts.write_text(curves_to_csv(curves))
        traces = simulate_interventions(model, dataset, ranking, k_grid, policies[0])
        self.artifacts.write_text(traces_to_csv(traces), "traces.csv")
        self.artifacts.write_json(self._level_report(model, dataset, ranking), "levels.json")

    def _decay_fit(self) -> None:
        histogram: Optional[LevelHistogram] = None
        if self.cfg["histogram"] is not None:
            self.artifacts.record_input("histogram", self.cfg["histogram"])
            payload: dict[str, Any] = _read_json(Path(self.cfg["histogram"]))
            histogram = LevelHistogram.model_validate(payload.get("histogram", payload))
            counts: list[float] = [float(c) for c in histogram.counts]
        elif self.cfg["counts"] is not None:
            counts = [float(c) for c in self.cfg["counts"]]
        else:
            raise SpecError("decay-fit needs --counts or --histogram")

        fit: DecayFit = fit_geometric_decay(counts)
        logger.info("[Decay] gamma=%.4f R2=%.4f over %d levels", fit.gamma, fit.r_squared, fit.levels_used)
        result: dict[str, Any] = {"fit": fit.model_dump(mode="json")}
        sizes: Optional[list[float]] = self.cfg["level_sizes"]
        if histogram is None and sizes is not None:
            histogram = LevelHistogram(levels=[int(s) for s in sizes], counts=[int(round(c)) for c in counts])
        if histogram is not None and not histogram.empty:
            result["expected_cost"] = expected_cost(histogram, sizes)
            result["recovery"] = recovery_curve(histogram).model_dump(mode="json")
        self.artifacts.write_json(result)

    def _regimes(self) -> None:
        table: RegimeTable = simulate_regimes(
            self.cfg["r"], self.cfg["gamma"], self.cfg["base"], self.cfg["levels_grid"],
            self.cfg["samples"], self.config.seed,
        )
        self.artifacts.write_text(regime_table_to_csv(table))
        self.artifacts.write_json({
            "classification": regime_classify(self.cfg["r"], self.cfg["gamma"]).model_dump(mode="json"),
            "params": table.params.model_dump(mode="json"),
            "bound": expected_cost_bound(table.params),
            "fit": table.fit.model_dump(mode="json"),
            "rows": [row.model_dump(mode="json") for row in table.rows],
        }, "regimes.json")

    def _bound(self) -> None:
        model, dataset = self._model_and_data()
        ranking: ConceptRanking = self._ranking_for(model)
        reports = hellman_raviv_report(model, dataset, ranking, self._k_grid(model), self.cfg["bins"])
        self.artifacts.write_json([r.model_dump(mode="json") for r in reports])

    def _pipeline(self) -> None:
        dataset: Dataset = self._read_dataset()
        train_set, val_set, test_set = split(dataset, tuple(self.cfg["fractions"]), self.config.seed)

        ranking: ConceptRanking = mrmr_rank(train_set.concepts, train_set.labels, self.cfg["exclude"], dataset.concept_names)
        self.artifacts.write_text(ranking_to_csv(ranking), "ranking.csv")
        model: MatryoshkaModel = self._fit_model(train_set, val_set, ranking)
        self._evaluation(model, test_set, model.schedule.levels)

        k_grid: list[int] = self._k_grid(model)
        curves: list[InterventionCurve] = [
            accuracy_at_k(model, test_set, ranking, k_grid, HeadPolicy.MATCHED, "mrmr"),
            accuracy_at_k(model, test_set, ranking, k_grid, HeadPolicy.FULL_HEAD, "mrmr"),
        ]
        for ordering in ("random", "weight"):
            try:
                baseline: ConceptRanking = self._ranking_for(model, ordering)
            except SpecError as exc:
                logger.warning("[Runner] %s ordering skipped: %s", ordering, exc.message)
                continue
            curves.append(accuracy_at_k(model, test_set, baseline, k_grid, HeadPolicy.FULL_HEAD, ordering))
        for curve in curves:
            logger.info("[Runner] AUC %s/%s = %.4f", curve.policy.value, curve.ordering, curve_auc(curve))
        self.artifacts.write_text(curves_to_csv(curves), "curves.csv")

        traces = simulate_interventions(model, test_set, ranking, k_grid, HeadPolicy.MATCHED)
        self.artifacts.write_text(traces_to_csv(traces), "traces.csv")
        levels: dict[str, Any] = self._level_report(model, test_set, ranking)
        self.artifacts.write_json(levels, "levels.json")
        self.artifacts.write_json(self._regime_report(model, levels), "regime.json")

        reports = hellman_raviv_report(model, test_set, ranking, k_grid, self.cfg["bins"])
        self.artifacts.write_json([r.model_dump(mode="json") for r in reports], "bound.json")

    def _regime_report(self, model: MatryoshkaModel, levels: dict[str, Any]) -> dict[str, Any]:
        """Regime reading of a trained model: schedule growth against the fitted l* decay."""
        schedule: np.ndarray = np.asarray(model.schedule.levels, dtype=np.float64)
        report: dict[str, Any] = {"growth_rate": None, "decay_rate": None, "classification": None, "bound": None}
        if schedule.size >= 2:
            report["growth_rate"] = float(np.exp(np.mean(np.diff(np.log(schedule)))))
        fit: Optional[dict[str, Any]] = levels.get("decay_fit")
        if fit is not None:
            report["decay_rate"] = fit["gamma"]
        report["expected_cost"] = levels.get("expected_cost")
        if report["growth_rate"] is None or report["decay_rate"] is None:
            return report
        try:
            classification = regime_classify(report["growth_rate"], report["decay_rate"])
        except SpecError as exc:
            logger.warning("[Runner] Regime classification skipped: %s", exc.message)
            return report
        report["classification"] = classification.model_dump(mode="json")
        report["bound"] = expected_cost_bound(RegimeParams(
            growth_rate=report["growth_rate"],
            decay_rate=report["decay_rate"],
            base_size=float(schedule[0]),
            levels=int(schedule.size),
            norm_const=float(fit["norm_const"]),
        ))
        return report


def _read_json(path: Path) -> dict[str, Any]:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise SpecError("Unreadable JSON file", detail=str(exc), context={"path": str(path)}) from exc
