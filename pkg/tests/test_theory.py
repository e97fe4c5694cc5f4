from __future__ import annotations

import numpy as np
import pytest

from core.config import settings
from core.data import generate_synthetic, make_rng
from core.exceptions import CapacityError, SpecError
from core.info import identity_ranking, mutual_information
from core.matryoshka import init_model
from core.models import (
    BoundReport,
    Dataset,
    HeadMode,
    InterventionJoint,
    MiMode,
    NestingSchedule,
    Regime,
    RegimeParams,
    RegimeTable,
    ScalingAxis,
    SyntheticSpec,
)
from core.theory import (
    REGIME_COLUMNS,
    bayes_error,
    channel_model_from_samples,
    check_capacity,
    estimate_epsilon,
    exact_mutual_info_intervened,
    expected_cost_bound,
    geometric_sum,
    hellman_raviv_bound,
    hellman_raviv_report,
    intervened_frequency_table,
    joint_bound_report,
    joint_epsilon,
    joint_label_entropy,
    kl_with_floor,
    random_joint,
    regime_classify,
    regime_table_to_csv,
    simulate_regimes,
    snap_to_bins,
    table_mutual_info,
)

_SOFT: list[float] = [0.0, 0.5, 1.0]


def _blind_channels(k: int) -> np.ndarray:
    channels: np.ndarray = np.zeros((k, 2, 3))
    channels[:, :, 1] = 1.0
    return channels


class TestRegimeClassification:

    def test_efficient(self) -> None:
        assert regime_classify(2.0, 0.25).regime is Regime.EFFICIENT

    def test_balanced(self) -> None:
        assert regime_classify(2.0, 0.5).regime is Regime.BALANCED

    def test_heavy_tailed_exponent(self) -> None:
        result = regime_classify(2.0, 0.8)
        assert result.regime is Regime.HEAVY_TAILED
        assert result.alpha == pytest.approx(1.0 + np.log2(0.8))
        assert result.alpha == pytest.approx(0.678, abs=1e-3)

    @pytest.mark.parametrize("r, gamma", [(1.0, 0.5), (0.5, 0.5), (2.0, 0.0), (2.0, 1.0)])
    def test_domain_errors(self, r: float, gamma: float) -> None:
        with pytest.raises(SpecError):
            regime_classify(r, gamma)


class TestCostBound:

    def test_heavy_tailed_example(self) -> None:
        params: RegimeParams = RegimeParams(growth_rate=2.0, decay_rate=0.6, base_size=1.0, levels=5, norm_const=1.0)
        assert expected_cost_bound(params) == pytest.approx(7.4416)

    def test_balanced_is_linear_in_levels(self) -> None:
        params: RegimeParams = RegimeParams(growth_rate=2.0, decay_rate=0.5, levels=5)
        assert expected_cost_bound(params) == 5.0
        assert geometric_sum(1.0, 7) == 7.0

    def test_continuous_across_balance(self) -> None:
        below: float = expected_cost_bound(RegimeParams(growth_rate=2.0, decay_rate=0.5 - 1e-9, levels=5))
        above: float = expected_cost_bound(RegimeParams(growth_rate=2.0, decay_rate=0.5 + 1e-9, levels=5))
        assert below == pytest.approx(5.0, rel=1e-6)
        assert above == pytest.approx(5.0, rel=1e-6)

    @pytest.mark.parametrize("levels", [1, 3, 10, 40])
    def test_efficient_bound_is_level_free(self, levels: int) -> None:
        params: RegimeParams = RegimeParams(
            growth_rate=3.0, decay_rate=0.2, base_size=2.0, levels=levels, norm_const=0.8,
        )
        assert expected_cost_bound(params) <= 0.8 * 2.0 / (1.0 - params.spectral_ratio) + 1e-12


class TestSimulateRegimes:

    _GRID: list[int] = list(range(1, 13))

    def test_efficient_costs_stay_bounded(self) -> None:
        table: RegimeTable = simulate_regimes(2.0, 0.25, 2.0, self._GRID, 100_000, seed=0)
        assert table.fit.axis is ScalingAxis.CONSTANT
        for row in table.rows:
            assert row.regime is Regime.EFFICIENT
            assert row.e_empirical == pytest.approx(row.e_exact, rel=0.02)
            assert row.e_exact == pytest.approx(row.e_bound, rel=1e-9)
            assert row.e_exact <= 0.75 * 2.0 / (1.0 - 0.5) + 1e-12
        assert [row.concepts for row in table.rows] == [2 * (2 ** L - 1) for L in self._GRID]

    def test_balanced_grows_logarithmically(self) -> None:
        table: RegimeTable = simulate_regimes(2.0, 0.5, 1.0, self._GRID, 100_000, seed=1)
        assert table.fit.axis is ScalingAxis.LOG
        assert table.fit.r_squared > 0.98
        assert 0.5 < table.fit.slope < 1.0

    def test_heavy_tail_fits_power_law(self) -> None:
        table: RegimeTable = simulate_regimes(2.0, 0.8, 1.0, self._GRID, 100_000, seed=2)
        assert table.fit.axis is ScalingAxis.POWER
        assert abs(table.fit.slope - 0.678) < 0.1
        assert all(row.alpha_fit == table.fit.slope for row in table.rows)

    def test_same_seed_same_table(self) -> None:
        first: RegimeTable = simulate_regimes(2.0, 0.7, 1.0, [2, 4, 6], 2000, seed=9)
        second: RegimeTable = simulate_regimes(2.0, 0.7, 1.0, [6, 2, 4], 2000, seed=9)
        assert [r.e_empirical for r in first.rows] == [r.e_empirical for r in second.rows]

    def test_too_few_samples(self) -> None:
        with pytest.raises(SpecError):
            simulate_regimes(2.0, 0.5, 1.0, [1, 2], 10, seed=0)

    def test_csv_header(self) -> None:
        table: RegimeTable = simulate_regimes(2.0, 0.25, 1.0, [1, 2, 3], 1000, seed=0)
        lines: list[str] = regime_table_to_csv(table).splitlines()
        assert lines[0] == ",".join(REGIME_COLUMNS)
        assert len(lines) == 4
        assert lines[1].split(",")[4] == "efficient"


class TestEnumerableJoints:

    def test_information_never_drops_with_more_corrections(self) -> None:
        rng: np.random.Generator = make_rng(21)
        for _ in range(100):
            k: int = int(rng.integers(1, 11))
            c: int = int(rng.integers(2, 4))
            joint: InterventionJoint = random_joint(k, c, _SOFT, rng)
            values: list[float] = [exact_mutual_info_intervened(joint, j) for j in range(k + 1)]
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
            assert all(v <= joint_label_entropy(joint) + 1e-12 for v in values)

    def test_bayes_error_under_entropy_bound(self) -> None:
        rng: np.random.Generator = make_rng(22)
        for _ in range(50):
            k: int = int(rng.integers(1, 7))
            joint: InterventionJoint = random_joint(k, int(rng.integers(2, 4)), _SOFT, rng)
            h_y: float = joint_label_entropy(joint)
            for j in range(k + 1):
                conditional: float = h_y - exact_mutual_info_intervened(joint, j)
                assert bayes_error(joint, j) <= 0.5 * conditional / np.log(2.0) + 1e-12

    def test_bound_report_holds(self) -> None:
        rng: np.random.Generator = make_rng(23)
        for _ in range(50):
            k: int = int(rng.integers(1, 6))
            joint: InterventionJoint = random_joint(k, 3, _SOFT, rng)
            reports: list[BoundReport] = joint_bound_report(joint, range(k + 1))
            assert all(r.holds and r.mode is MiMode.EXACT for r in reports)
            assert reports[0].epsilon == pytest.approx(0.0, abs=1e-12)
            assert all(r.conservative_bound >= r.bound_value - 1e-12 for r in reports)

    def test_xor_needs_both_concepts(self) -> None:
        label_concept: np.ndarray = np.zeros((2, 2, 2))
        for a in (0, 1):
            for b in (0, 1):
                label_concept[a ^ b, a, b] = 0.25
        joint: InterventionJoint = InterventionJoint(
            label_concept=label_concept, channels=_blind_channels(2), soft_values=_SOFT,
        )
        assert exact_mutual_info_intervened(joint, 0) == pytest.approx(0.0, abs=1e-12)
        assert exact_mutual_info_intervened(joint, 1) == pytest.approx(0.0, abs=1e-12)
        assert exact_mutual_info_intervened(joint, 2) == pytest.approx(np.log(2.0))
        assert bayes_error(joint, 2) == pytest.approx(0.0, abs=1e-12)
        assert bayes_error(joint, 0) == pytest.approx(0.5)

    def test_independent_label_carries_nothing(self) -> None:
        label_concept: np.ndarray = np.full((2, 2, 2), 1 / 8)
        joint: InterventionJoint = InterventionJoint(
            label_concept=label_concept, channels=_blind_channels(2), soft_values=_SOFT,
        )
        assert all(exact_mutual_info_intervened(joint, k) == pytest.approx(0.0, abs=1e-12) for k in range(3))

    def test_intervention_count_out_of_range(self) -> None:
        joint: InterventionJoint = random_joint(2, 2, _SOFT, make_rng(0))
        with pytest.raises(SpecError):
            exact_mutual_info_intervened(joint, 3)

    def test_capacity_guard(self) -> None:
        with pytest.raises(CapacityError):
            check_capacity(17, 2, 5)
        with pytest.raises(CapacityError):
            check_capacity(4, 9, 5)
        check_capacity(4, 2, 5)


class TestShiftPenalty:

    def test_kl_point_mass(self) -> None:
        kl, floored, tv = kl_with_floor(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert kl == pytest.approx(np.log(2.0))
        assert floored == 0
        assert tv == pytest.approx(0.5)

    def test_floor_applies_to_missing_support(self) -> None:
        kl, floored, _ = kl_with_floor(np.array([0.5, 0.5]), np.array([1.0, 0.0]), floor=1e-6)
        assert floored == 1
        assert kl == pytest.approx(0.5 * np.log(0.5) + 0.5 * np.log(0.5 / 1e-6))

    def test_identical_samples_have_no_shift(self) -> None:
        soft: np.ndarray = make_rng(3).random((50, 4))
        estimate = estimate_epsilon(soft, soft, 0)
        assert estimate.value == 0.0
        assert estimate.floored_points == 0

    def test_snap(self) -> None:
        assert snap_to_bins(np.array([0.1, 0.4, 0.9]), [0.0, 0.5, 1.0]).tolist() == [0.0, 0.5, 1.0]

    def test_pinsker(self) -> None:
        rng: np.random.Generator = make_rng(24)
        for _ in range(20):
            k: int = int(rng.integers(1, 5))
            joint: InterventionJoint = random_joint(k, 2, _SOFT, rng)
            for j in range(k + 1):
                estimate = joint_epsilon(joint, j)
                assert estimate.total_variation <= np.sqrt(estimate.value / 2.0) + 1e-12

    def test_bound_formula(self) -> None:
        assert hellman_raviv_bound(np.log(2.0), 0.0, 0.0) == pytest.approx(0.5)
        assert hellman_raviv_bound(np.log(2.0), np.log(2.0), 0.08) == pytest.approx(0.2)


class TestModelBoundReport:

    @pytest.fixture
    def dataset(self) -> Dataset:
        return generate_synthetic(SyntheticSpec(
            levels=2, base_size=1, growth_rate=2.0, decay_rate=0.5, classes=2, samples=200, seed=4,
        ))

    def _report(self, dataset: Dataset) -> list[BoundReport]:
        model = init_model(
            dataset.n_features, dataset.n_concepts, dataset.class_count,
            NestingSchedule(levels=[1, 3]), HeadMode.EFFICIENT, identity_ranking(dataset.n_concepts), seed=0,
        )
        return hellman_raviv_report(model, dataset, identity_ranking(dataset.n_concepts), [0, 1, 2, 3])

    def test_exact_mode(self, dataset: Dataset) -> None:
        assert dataset.n_concepts == 3
        reports: list[BoundReport] = self._report(dataset)
        assert [r.k for r in reports] == [0, 1, 2, 3]
        assert all(r.mode is MiMode.EXACT for r in reports)
        assert reports[0].epsilon == 0.0
        conservative: list[float] = [r.conservative_bound for r in reports]
        assert all(b <= a + 1e-12 for a, b in zip(conservative, conservative[1:]))

    def test_falls_back_to_empirical(self, dataset: Dataset, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setattr(settings, "EXACT_MAX_CONCEPTS", 2)
        reports: list[BoundReport] = self._report(dataset)
        assert all(r.mode is MiMode.EMPIRICAL for r in reports)
        assert all(0.0 <= r.empirical_error <= 1.0 for r in reports)

    def test_channel_variant_is_labelled(self, dataset: Dataset) -> None:
        model = init_model(
            dataset.n_features, dataset.n_concepts, dataset.class_count,
            NestingSchedule(levels=[1, 3]), HeadMode.EFFICIENT, identity_ranking(dataset.n_concepts), seed=0,
        )
        reports: list[BoundReport] = hellman_raviv_report(
            model, dataset, identity_ranking(dataset.n_concepts), [0, 3], channel_model=True,
        )
        assert all(r.mode is MiMode.CHANNEL for r in reports)


class TestEmpiricalJoint:

    _BINS: list[float] = [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_matches_plug_in_estimate(self) -> None:
        rng: np.random.Generator = make_rng(31)
        for _ in range(20):
            n: int = int(rng.integers(20, 300))
            k: int = int(rng.integers(1, 6))
            labels: np.ndarray = rng.integers(0, 3, size=n)
            vectors: np.ndarray = rng.random((n, k))
            vectors[:, : int(rng.integers(0, k + 1))] = rng.integers(0, 2, size=(n, 1))
            table: np.ndarray = intervened_frequency_table(labels, vectors, 3, self._BINS)
            assert table.sum() == pytest.approx(1.0)
            expected: float = mutual_information(snap_to_bins(vectors, self._BINS), labels).value
            assert table_mutual_info(table) == pytest.approx(expected, abs=1e-9)

    def test_sees_dependence_the_channel_model_misses(self) -> None:
        labels: np.ndarray = np.repeat([0, 1], 50)
        truth: np.ndarray = np.zeros((100, 2), dtype=np.int8)
        soft: np.ndarray = np.where(labels[:, None] == 1, 0.5, 0.0) * np.ones((1, 2))
        empirical: float = table_mutual_info(intervened_frequency_table(labels, soft, 2, self._BINS))
        channel: InterventionJoint = channel_model_from_samples(labels, truth, soft, 2, self._BINS)
        assert empirical == pytest.approx(np.log(2.0))
        assert exact_mutual_info_intervened(channel, 0) == pytest.approx(0.0, abs=1e-12)

    def test_full_correction_is_label_concept_information(self) -> None:
        dataset: Dataset = generate_synthetic(SyntheticSpec(
            levels=2, base_size=1, growth_rate=2.0, decay_rate=0.5, classes=2, samples=300, seed=6,
        ))
        table: np.ndarray = intervened_frequency_table(
            dataset.labels, dataset.concepts.astype(np.float64), 2, self._BINS,
        )
        assert table_mutual_info(table) == pytest.approx(
            mutual_information(dataset.concepts, dataset.labels).value, abs=1e-9,
        )

    def test_support_guard(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setattr(settings, "EXACT_MAX_SUPPORT", 3)
        vectors: np.ndarray = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        with pytest.raises(CapacityError):
            intervened_frequency_table(np.array([0, 1, 0, 1]), vectors, 2, self._BINS)
