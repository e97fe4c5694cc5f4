from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from core.config import settings
from core.data import level_law
from core.exceptions import CapacityError, FitError, ShapeError, SpecError
from core.info import encode_symbols, entropy_of, mutual_information
from core.intervene import InterventionSimulator, full_level
from core.matryoshka import predict_at
from core.models import (
    BoundReport,
    ConceptRanking,
    Dataset,
    EpsilonEstimate,
    InterventionJoint,
    MatryoshkaModel,
    MiMode,
    Regime,
    RegimeClassification,
    RegimeParams,
    RegimeRow,
    RegimeTable,
    ScalingAxis,
    ScalingFit,
)

logger: logging.Logger = logging.getLogger(__name__)

_BALANCED_TOL: float = 1e-12
_MIN_SAMPLES: int = 1000

REGIME_COLUMNS: list[str] = ["L", "K", "E_empirical", "E_bound", "regime", "alpha_fit"]


def _check_domain(growth_rate: float, decay_rate: float) -> None:
    if growth_rate <= 1.0:
        raise SpecError("growth rate r must be > 1", context={"r": growth_rate})
    if not 0.0 < decay_rate < 1.0:
        raise SpecError("decay rate gamma must lie in (0, 1)", context={"gamma": decay_rate})


# ── Cost regimes ───────────────────────────────────────────────


def regime_classify(growth_rate: float, decay_rate: float) -> RegimeClassification:
    _check_domain(growth_rate, decay_rate)
    threshold: float = 1.0 / growth_rate
    if abs(decay_rate - threshold) < _BALANCED_TOL:
        return RegimeClassification(regime=Regime.BALANCED)
    if decay_rate < threshold:
        return RegimeClassification(regime=Regime.EFFICIENT)
    return RegimeClassification(
        regime=Regime.HEAVY_TAILED,
        alpha=1.0 + float(np.log(decay_rate) / np.log(growth_rate)),
    )


def geometric_sum(ratio: float, terms: int) -> float:
    """sum_{i=1}^{L} ratio^(i-1), continuous across ratio = 1."""
    if ratio == 1.0:
        return float(terms)
    return float(np.expm1(terms * np.log(ratio)) / (ratio - 1.0))


def expected_cost_bound(params: RegimeParams) -> float:
    """C * k1 * sum_{i=1}^{L} (r gamma)^(i-1)."""
    _check_domain(params.growth_rate, params.decay_rate)
    return params.norm_const * params.base_size * geometric_sum(params.spectral_ratio, params.levels)


def exact_expected_cost(growth_rate: float, decay_rate: float, base_size: float, levels: int) -> float:
    """E = sum_i k1 r^(i-1) P(l* = i) under the truncated normalized geometric law."""
    _check_domain(growth_rate, decay_rate)
    sizes: np.ndarray = base_size * growth_rate ** np.arange(levels, dtype=np.float64)
    return float(sizes @ level_law(decay_rate, levels))


def total_concepts(growth_rate: float, base_size: float, levels: int) -> float:
    return base_size * geometric_sum(growth_rate, levels)


def _fit_scaling(regime: Regime, concepts: np.ndarray, costs: np.ndarray) -> ScalingFit:
    axis: ScalingAxis
    if regime is Regime.HEAVY_TAILED:
        half: int = concepts.size // 2
        x, y = np.log(concepts[half:]), np.log(costs[half:])
        axis = ScalingAxis.POWER
    else:
        x, y = np.log(concepts), costs
        axis = ScalingAxis.LOG if regime is Regime.BALANCED else ScalingAxis.CONSTANT
    if x.size < 2 or np.ptp(x) == 0:
        raise FitError("scaling fit needs at least 2 distinct grid points", context={"points": int(x.size)})
    fit = stats.linregress(x, y)
    return ScalingFit(axis=axis, slope=float(fit.slope), intercept=float(fit.intercept), r_squared=float(fit.rvalue ** 2))


def simulate_regimes(
    growth_rate: float,
    decay_rate: float,
    base_size: float,
    level_grid: Sequence[int],
    samples: int,
    seed: int,
) -> RegimeTable:
    """
    Monte Carlo E per L with l* drawn from the truncated law, one Philox substream per L.

    Power-law fits use the upper half of the grid; log and constant fits use all of it.
    """
    _check_domain(growth_rate, decay_rate)
    if samples < _MIN_SAMPLES:
        raise SpecError(f"simulate_regimes needs at least {_MIN_SAMPLES} samples", context={"samples": samples})
    grid: list[int] = sorted(int(L) for L in level_grid)
    if not grid or grid[0] < 1:
        raise SpecError("level grid must contain positive integers", context={"grid": list(level_grid)})

    classification: RegimeClassification = regime_classify(growth_rate, decay_rate)
    streams: list[np.random.SeedSequence] = np.random.SeedSequence(seed).spawn(len(grid))
    concepts: list[float] = []
    empirical: list[float] = []
    exact: list[float] = []
    bounds: list[float] = []
    for levels, stream in zip(grid, streams):
        rng: np.random.Generator = np.random.Generator(np.random.Philox(stream))
        law: np.ndarray = level_law(decay_rate, levels)
        drawn: np.ndarray = rng.choice(levels, size=samples, p=law)
        concepts.append(total_concepts(growth_rate, base_size, levels))
        empirical.append(float(np.mean(base_size * growth_rate ** drawn.astype(np.float64))))
        exact.append(exact_expected_cost(growth_rate, decay_rate, base_size, levels))
        bounds.append(expected_cost_bound(RegimeParams(
            growth_rate=growth_rate,
            decay_rate=decay_rate,
            base_size=base_size,
            levels=levels,
            norm_const=float(law[0]),
        )))

    fit: ScalingFit = _fit_scaling(classification.regime, np.asarray(concepts), np.asarray(empirical))
    rows: list[RegimeRow] = [
        RegimeRow(
            levels=L,
            concepts=int(round(K)),
            e_empirical=e_emp,
            e_exact=e_ex,
            e_bound=e_b,
            regime=classification.regime,
            alpha_fit=fit.slope,
        )
        for L, K, e_emp, e_ex, e_b in zip(grid, concepts, empirical, exact, bounds)
    ]
    logger.info(
        "[Regimes] r=%.3g gamma=%.3g -> %s, %s slope %.4f (R2 %.4f)",
        growth_rate, decay_rate, classification.regime.value, fit.axis.value, fit.slope, fit.r_squared,
    )
    return RegimeTable(
        params=RegimeParams(
            growth_rate=growth_rate,
            decay_rate=decay_rate,
            base_size=base_size,
            levels=grid[-1],
            norm_const=float(level_law(decay_rate, grid[-1])[0]),
        ),
        rows=rows,
        fit=fit,
    )


def regime_table_to_csv(table: RegimeTable) -> str:
    frame: pd.DataFrame = pd.DataFrame(
        [
            {
                "L": row.levels,
                "K": row.concepts,
                "E_empirical": row.e_empirical,
                "E_bound": row.e_bound,
                "regime": row.regime.value,
                "alpha_fit": row.alpha_fit,
            }
            for row in table.rows
        ],
        columns=REGIME_COLUMNS,
    )
    return frame.to_csv(index=False, lineterminator="\n")


# ── Enumerable intervention joints ─────────────────────────────


def _hard_channel(soft_values: Sequence[float]) -> np.ndarray:
    values: np.ndarray = np.asarray(soft_values, dtype=np.float64)
    if not (np.any(values == 0.0) and np.any(values == 1.0)):
        raise SpecError("soft value grid must contain 0 and 1", context={"soft_values": list(soft_values)})
    channel: np.ndarray = np.zeros((2, values.size), dtype=np.float64)
    channel[0, int(np.flatnonzero(values == 0.0)[0])] = 1.0
    channel[1, int(np.flatnonzero(values == 1.0)[0])] = 1.0
    return channel


def check_capacity(n_concepts: int, class_count: int, n_values: int) -> None:
    if n_concepts > settings.EXACT_MAX_CONCEPTS or class_count > settings.EXACT_MAX_CLASSES:
        raise CapacityError(
            "instance too large for exact enumeration; use empirical mode",
            context={"K": n_concepts, "C": class_count},
        )
    support: int = class_count * n_values ** n_concepts
    if support > settings.EXACT_MAX_SUPPORT:
        raise CapacityError(
            "support too large for exact enumeration; use empirical mode",
            context={"support": support, "limit": settings.EXACT_MAX_SUPPORT},
        )


def _pushforward(joint: InterventionJoint, k: int, soft_only: bool = False) -> np.ndarray:
    """P(y, z) over the shared value grid; z takes hard truth on the first k positions."""
    if not 0 <= k <= joint.n_concepts:
        raise SpecError("intervention count must lie in [0, K]", context={"k": k, "K": joint.n_concepts})
    check_capacity(joint.n_concepts, joint.class_count, len(joint.soft_values))
    hard: np.ndarray = _hard_channel(joint.soft_values)
    table: np.ndarray = joint.label_concept
    for j in range(joint.n_concepts):
        channel: np.ndarray = joint.channels[j] if soft_only or j >= k else hard
        table = np.moveaxis(np.tensordot(table, channel, axes=([j + 1], [0])), -1, j + 1)
    return table


def exact_mutual_info_intervened(joint: InterventionJoint, k: int) -> float:
    """I(Y; C_tilde^(k)) = H(Y) + H(Z) - H(Y, Z), summed over the enumerated support."""
    table: np.ndarray = _pushforward(joint, k)
    h_y: float = float(stats.entropy(table.reshape(table.shape[0], -1).sum(axis=1)))
    h_z: float = float(stats.entropy(table.sum(axis=0).ravel()))
    h_yz: float = float(stats.entropy(table.ravel()))
    return max(h_y + h_z - h_yz, 0.0)


def joint_label_entropy(joint: InterventionJoint) -> float:
    return float(stats.entropy(joint.label_concept.reshape(joint.class_count, -1).sum(axis=1)))


def bayes_error(joint: InterventionJoint, k: int) -> float:
    """Error of the Bayes-optimal classifier that sees C_tilde^(k)."""
    table: np.ndarray = _pushforward(joint, k).reshape(joint.class_count, -1)
    return float(1.0 - table.max(axis=0).sum())


def random_joint(
    n_concepts: int,
    class_count: int,
    soft_values: Sequence[float],
    rng: np.random.Generator,
    concentration: float = 0.5,
) -> InterventionJoint:
    """Dirichlet-drawn label/concept joint with independent Dirichlet channels per concept."""
    cells: int = class_count * 2 ** n_concepts
    label_concept: np.ndarray = rng.dirichlet(np.full(cells, concentration)).reshape(
        (class_count,) + (2,) * n_concepts
    )
    channels: np.ndarray = rng.dirichlet(np.ones(len(soft_values)), size=(n_concepts, 2))
    return InterventionJoint(label_concept=label_concept, channels=channels, soft_values=list(soft_values))


# ── Shift penalty ──────────────────────────────────────────────


def kl_with_floor(p_int: np.ndarray, p_train: np.ndarray, floor: Optional[float] = None) -> tuple[float, int, float]:
    """
    KL(P_int || P_train) in nats. Support points with P_int > 0 and P_train = 0 use the
    additive floor. Returns (kl, floored point count, total variation).
    """
    p: np.ndarray = np.asarray(p_int, dtype=np.float64).ravel()
    q: np.ndarray = np.asarray(p_train, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ShapeError("distributions must share a support", context={"p": p.size, "q": q.size})
    if p.size == 0:
        raise SpecError("cannot compare distributions over an empty support")
    eps: float = settings.KL_FLOOR if floor is None else floor
    floored: np.ndarray = (p > 0) & (q == 0)
    q_safe: np.ndarray = np.where(floored, q + eps, q)
    live: np.ndarray = p > 0
    kl: float = float(np.sum(p[live] * np.log(p[live] / q_safe[live])))
    return max(kl, 0.0), int(floored.sum()), float(0.5 * np.abs(p - q).sum())


def snap_to_bins(values: np.ndarray, bins: Sequence[float]) -> np.ndarray:
    grid: np.ndarray = np.asarray(bins, dtype=np.float64)
    idx: np.ndarray = np.abs(np.asarray(values, dtype=np.float64)[..., None] - grid).argmin(axis=-1)
    return grid[idx]


def estimate_epsilon(
    soft_vectors: np.ndarray,
    intervened_vectors: np.ndarray,
    k: int,
    bins: Optional[Sequence[float]] = None,
) -> EpsilonEstimate:
    """Plug-in KL between discretized intervened and soft concept-vector distributions."""
    grid: list[float] = list(bins if bins is not None else settings.EPSILON_BINS)
    soft: np.ndarray = snap_to_bins(np.atleast_2d(soft_vectors), grid)
    hard: np.ndarray = snap_to_bins(np.atleast_2d(intervened_vectors), grid)
    if soft.shape[0] == 0 or hard.shape[0] == 0:
        raise SpecError("epsilon estimation needs at least one vector on each side")
    if soft.shape[1] != hard.shape[1]:
        raise ShapeError("vector widths differ", context={"soft": soft.shape[1], "intervened": hard.shape[1]})

    codes: np.ndarray = encode_symbols(np.vstack([soft, hard]))
    support: int = int(codes.max()) + 1
    p_train: np.ndarray = np.bincount(codes[: soft.shape[0]], minlength=support) / soft.shape[0]
    p_int: np.ndarray = np.bincount(codes[soft.shape[0]:], minlength=support) / hard.shape[0]
    kl, floored, tv = kl_with_floor(p_int, p_train)
    return EpsilonEstimate(k=k, value=kl, total_variation=tv, floored_points=floored, bins=grid)


def joint_epsilon(joint: InterventionJoint, k: int) -> EpsilonEstimate:
    p_int: np.ndarray = _pushforward(joint, k).sum(axis=0)
    p_train: np.ndarray = _pushforward(joint, k, soft_only=True).sum(axis=0)
    kl, floored, tv = kl_with_floor(p_int, p_train)
    return EpsilonEstimate(k=k, value=kl, total_variation=tv, floored_points=floored, bins=list(joint.soft_values))


# ── Error bounds ───────────────────────────────────────────────


def hellman_raviv_bound(label_entropy: float, mutual_info: float, epsilon: float) -> float:
    """1/2 H(Y | C_tilde) + sqrt(eps / 2), the conditional entropy taken in bits."""
    conditional_bits: float = max(label_entropy - mutual_info, 0.0) / np.log(2.0)
    return 0.5 * conditional_bits + float(np.sqrt(epsilon / 2.0))


def _with_conservative(reports: list[BoundReport]) -> list[BoundReport]:
    if not reports:
        return reports
    worst: float = max(r.epsilon for r in reports)
    return [
        r.model_copy(update={"conservative_bound": hellman_raviv_bound(r.label_entropy, r.mutual_info, worst)})
        for r in reports
    ]


def joint_bound_report(joint: InterventionJoint, k_grid: Sequence[int]) -> list[BoundReport]:
    """Bound against the Bayes-optimal error of an enumerable instance."""
    h_y: float = joint_label_entropy(joint)
    reports: list[BoundReport] = []
    for k in k_grid:
        mi: float = exact_mutual_info_intervened(joint, k)
        eps: EpsilonEstimate = joint_epsilon(joint, k)
        bound: float = hellman_raviv_bound(h_y, mi, eps.value)
        error: float = bayes_error(joint, k)
        reports.append(BoundReport(
            k=k,
            label_entropy=h_y,
            mutual_info=mi,
            epsilon=eps.value,
            bound_value=bound,
            conservative_bound=bound,
            empirical_error=error,
            holds=error <= bound + 1e-12,
            mode=MiMode.EXACT,
            floored_points=eps.floored_points,
            bins=eps.bins,
        ))
    return _with_conservative(reports)


def check_capacity_support(cells: int) -> None:
    if cells > settings.EXACT_MAX_SUPPORT:
        raise CapacityError(
            "observed support too large for exact summation; use empirical mode",
            context={"support": cells, "limit": settings.EXACT_MAX_SUPPORT},
        )


def intervened_frequency_table(
    labels: np.ndarray,
    intervened: np.ndarray,
    class_count: int,
    soft_values: Sequence[float],
) -> np.ndarray:
    """
    Empirical P(y, z) over the observed discretized vectors z, shape (C, distinct z).

    Hard-corrected positions already sit on the grid; soft positions snap to their nearest bin.
    """
    snapped: np.ndarray = snap_to_bins(np.atleast_2d(intervened), soft_values)
    codes: np.ndarray = encode_symbols(snapped)
    support: int = int(codes.max()) + 1
    check_capacity_support(class_count * support)
    table: np.ndarray = np.zeros((class_count, support), dtype=np.float64)
    np.add.at(table, (np.asarray(labels, dtype=np.int64), codes), 1.0 / codes.size)
    return table


def table_mutual_info(table: np.ndarray) -> float:
    """I(Y; Z) = H(Y) + H(Z) - H(Y, Z) summed over the support of a (C, S) joint table."""
    h_y: float = float(stats.entropy(table.sum(axis=1)))
    h_z: float = float(stats.entropy(table.sum(axis=0)))
    h_yz: float = float(stats.entropy(table.ravel()))
    return max(h_y + h_z - h_yz, 0.0)


def channel_model_from_samples(
    labels: np.ndarray,
    truth: np.ndarray,
    soft: np.ndarray,
    class_count: int,
    soft_values: Sequence[float],
) -> InterventionJoint:
    """
    Empirical P(y, c*) tensor plus per-concept channels P(bin(c_hat_j) | c*_j), all columns
    already in intervention order. Treats the soft bins as independent given the truth,
    so its MI matches the data only when that holds.
    """
    n, k = truth.shape
    grid: np.ndarray = np.asarray(soft_values, dtype=np.float64)
    label_concept: np.ndarray = np.zeros((class_count,) + (2,) * k, dtype=np.float64)
    np.add.at(label_concept, (labels,) + tuple(truth[:, j].astype(np.int64) for j in range(k)), 1.0 / n)

    bin_idx: np.ndarray = np.abs(soft[..., None] - grid).argmin(axis=-1)
    hard: np.ndarray = _hard_channel(soft_values)
    channels: np.ndarray = np.zeros((k, 2, grid.size), dtype=np.float64)
    for j in range(k):
        for v in (0, 1):
            rows: np.ndarray = truth[:, j] == v
            if rows.any():
                channels[j, v] = np.bincount(bin_idx[rows, j], minlength=grid.size) / rows.sum()
            else:
                channels[j, v] = hard[v]
    return InterventionJoint(label_concept=label_concept, channels=channels, soft_values=list(soft_values))


def hellman_raviv_report(
    model: MatryoshkaModel,
    dataset: Dataset,
    ranking: ConceptRanking,
    k_grid: Sequence[int],
    bins: Optional[Sequence[float]] = None,
    channel_model: bool = False,
) -> list[BoundReport]:
    """
    Per-k bound report for a trained model.

    I(Y; C_tilde) is summed exactly over the empirical joint of labels and discretized
    intervened vectors (hard prefix, binned soft suffix) when K <= 16, C <= 8 and the
    observed support fits; otherwise it falls back to the plug-in estimator (flagged as
    empirical). `channel_model` swaps in the per-concept channel model instead, which
    assumes the soft bins are independent given the truth. The measured error uses the
    widest head on the hard-corrected vectors.
    """
    grid: list[float] = list(bins if bins is not None else settings.EPSILON_BINS)
    sim: InterventionSimulator = InterventionSimulator(model, dataset, ranking)
    h_y: float = entropy_of(dataset.labels)

    exact: bool = True
    try:
        check_capacity(model.n_concepts, model.class_count, 1)
    except CapacityError as exc:
        exact = False
        logger.warning("[Bound] exact MI unavailable (%s); using empirical plug-in estimates", exc.message)

    joint: Optional[InterventionJoint] = None
    if exact and channel_model:
        try:
            check_capacity(model.n_concepts, model.class_count, len(grid))
            joint = channel_model_from_samples(
                dataset.labels, sim.truth_ord[:, sim.positions], sim.c_ord[:, sim.positions],
                model.class_count, grid,
            )
        except CapacityError as exc:
            exact = False
            logger.warning("[Bound] channel model unavailable (%s); using empirical plug-in estimates", exc.message)

    reports: list[BoundReport] = []
    for k in k_grid:
        intervened: np.ndarray = sim.intervened(k)
        eps: EpsilonEstimate = estimate_epsilon(sim.c_ord, intervened, k, grid)
        mode: MiMode = MiMode.EMPIRICAL
        mi: Optional[float] = None
        if joint is not None:
            mi, mode = exact_mutual_info_intervened(joint, k), MiMode.CHANNEL
        elif exact:
            try:
                table: np.ndarray = intervened_frequency_table(dataset.labels, intervened, model.class_count, grid)
                mi, mode = table_mutual_info(table), MiMode.EXACT
            except CapacityError as exc:
                logger.warning("[Bound] k=%d exact sum skipped (%s)", k, exc.message)
        if mi is None:
            mi = mutual_information(snap_to_bins(intervened, grid), dataset.labels).value
        predictions: np.ndarray = predict_at(model, intervened, full_level(model)).argmax(axis=1)
        error: float = float((predictions != dataset.labels).mean())
        bound: float = hellman_raviv_bound(h_y, min(mi, h_y), eps.value)
        reports.append(BoundReport(
            k=k,
            label_entropy=h_y,
            mutual_info=mi,
            epsilon=eps.value,
            bound_value=bound,
            conservative_bound=bound,
            empirical_error=error,
            holds=error <= bound,
            mode=mode,
            floored_points=eps.floored_points,
            bins=grid,
        ))
        logger.info("[Bound] k=%d %s I=%.4f eps=%.4f bound=%.4f error=%.4f",
                    k, mode.value, mi, eps.value, bound, error)
    return _with_conservative(reports)
