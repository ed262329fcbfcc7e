"""Index construction, RMSE scoring, and model diagnostics.

Indices are normalized so the first quarter equals 1 exactly.  The
shared evaluation harness splits a panel, fits whichever estimators are
requested on the training part, predicts the held-out sales, and scores
each model by root mean squared error in dollars.  Three diagnostics
mirror the assumptions the estimators disagree on:

* correlation by gap: the sample correlation of quarter- and
  ZIP-adjusted log prices across sale pairs at each gap time, which
  should decay like phi**gap under the AR model;
* residual variance by gap: per-gap empirical variance of training
  residuals next to each model's implied curve (AR:
  sigma2_eps*(1-phi**(2h))/(1-phi^2); mixed: a constant; pair-based:
  alpha0 + alpha1*h on the price scale);
* normal quantile table of fitted random effects, with group sizes
  attached because small groups produce the apparent outliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import stats

from . import armodel, caseshiller, mixedmodel
from .armodel import ARFitConfig, ARParams, FittedARModel
from .caseshiller import CSFit
from .data import PanelDataset, TrainTestSplit
from .errors import DomainError, HousePriceError
from .ingest import split_train_test
from .mixedmodel import FittedMixedModel, MixedFitConfig, MixedParams

__all__ = [
    "IndexSeries",
    "index_from_log_levels",
    "ar_index",
    "mixed_index",
    "cs_index",
    "mean_index",
    "rmse",
    "GapCorrelationRow",
    "correlation_by_gap",
    "GapVarianceRow",
    "expected_variance_fn",
    "residual_variance_by_gap",
    "QuantileRow",
    "normal_quantile_table",
    "EvalReport",
    "EvalOutcome",
    "run_evaluation",
]


# ---------------------------------------------------------------------------
# indices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexSeries:
    """Per-quarter price index rescaled to 1 in the base quarter."""

    values: np.ndarray
    label: str
    base_quarter: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values[0] != 1.0:
            raise DomainError(f"index {self.label!r} does not start at 1")
        if (self.values <= 0).any():
            raise DomainError(f"index {self.label!r} has non-positive values")

    @property
    def T(self) -> int:
        return len(self.values)


def index_from_log_levels(beta: np.ndarray, label: str) -> IndexSeries:
    """exp(beta_t - beta_1): price-scale index from log quarter effects."""
    beta = np.asarray(beta, dtype=np.float64)
    return IndexSeries(values=np.exp(beta - beta[0]), label=label)


def ar_index(model: FittedARModel) -> IndexSeries:
    return index_from_log_levels(model.params.beta, "ar")


def mixed_index(model: FittedMixedModel) -> IndexSeries:
    return index_from_log_levels(model.params.beta, "mixed")


def cs_index(fit_: CSFit) -> IndexSeries:
    return IndexSeries(values=fit_.B.copy(), label="cs")


def mean_index(train: PanelDataset) -> IndexSeries:
    """Average sale price per quarter, rescaled so quarter 1 equals 1."""
    sums = np.zeros(train.T)
    counts = np.zeros(train.T)
    for sale in train.iter_sales():
        sums[sale.quarter - 1] += sale.price
        counts[sale.quarter - 1] += 1
    empty = np.nonzero(counts == 0)[0]
    if len(empty):
        raise DomainError(f"quarters with no sales: {[int(q) + 1 for q in empty]}")
    means = sums / counts
    return IndexSeries(values=means / means[0], label="mean")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def rmse(predictions: np.ndarray, actuals: np.ndarray) -> float:
    """Root mean squared error in dollars."""
    predictions = np.asarray(predictions, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if predictions.shape != actuals.shape:
        raise DomainError(
            f"length mismatch: {predictions.shape} vs {actuals.shape}"
        )
    if predictions.size == 0:
        raise DomainError("rmse of zero observations")
    return float(np.sqrt(np.mean((predictions - actuals) ** 2)))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GapCorrelationRow:
    gap: int
    correlation: float
    n_pairs: int


def correlation_by_gap(
    model: FittedARModel, train: PanelDataset | armodel.TrainingArrays
) -> list[GapCorrelationRow]:
    """Sample correlation of adjusted log prices across sale pairs per gap.

    The adjustment removes the fitted quarter effect and ZIP effect; each
    pair (previous sale, next sale) contributes at its gap time.  Cells
    with fewer than two pairs are omitted; counts are reported so small
    cells can be flagged downstream.
    """
    tr = train if isinstance(train, armodel.TrainingArrays) else armodel.prepare_training(train)
    tau = np.array([model.tau_hat.get(z, 0.0) for z in tr.zip_codes])
    u_hat = tr.y - model.params.beta[tr.quarter0] - tau[tr.zip_index]
    nf = ~tr.is_first
    u_prev = u_hat[tr.prev[nf]]
    u_next = u_hat[nf]
    gaps = tr.gap[nf].astype(np.int64)
    rows = []
    for gap in np.unique(gaps):
        mask = gaps == gap
        n = int(mask.sum())
        if n < 2:
            continue
        corr = np.corrcoef(u_prev[mask], u_next[mask])[0, 1]
        if not np.isfinite(corr):
            continue
        rows.append(GapCorrelationRow(gap=int(gap), correlation=float(corr), n_pairs=n))
    return rows


@dataclass(frozen=True)
class GapVarianceRow:
    gap: int
    empirical: float
    expected: float
    n: int


def expected_variance_fn(params: ARParams | MixedParams | CSFit) -> Callable[[float], float]:
    """The model-implied residual variance as a function of gap time."""
    if isinstance(params, ARParams):
        s2e, phi = params.sigma2_eps, params.phi
        return lambda h: s2e * (1.0 - phi ** (2.0 * h)) / (1.0 - phi**2)
    if isinstance(params, MixedParams):
        s2e = params.sigma2_eps
        return lambda h: s2e
    if isinstance(params, CSFit):
        a0, a1 = params.alpha0, params.alpha1
        return lambda h: a0 + a1 * h
    raise DomainError(f"no variance curve for {type(params).__name__}")


def residual_variance_by_gap(
    residuals: np.ndarray,
    gaps: np.ndarray,
    params: ARParams | MixedParams | CSFit | Callable[[float], float],
) -> list[GapVarianceRow]:
    """Per-gap empirical residual variance next to the model's curve.

    ``residuals``/``gaps`` must already exclude first sales (which have
    no gap).  Cells with fewer than two observations are omitted.
    """
    expected = params if callable(params) else expected_variance_fn(params)
    residuals = np.asarray(residuals, dtype=np.float64)
    gaps_int = np.asarray(gaps).astype(np.int64)
    if residuals.shape != gaps_int.shape:
        raise DomainError("residuals and gaps must align")
    rows = []
    for gap in np.unique(gaps_int):
        mask = gaps_int == gap
        n = int(mask.sum())
        if n < 2:
            continue
        rows.append(
            GapVarianceRow(
                gap=int(gap),
                empirical=float(residuals[mask].var(ddof=1)),
                expected=float(expected(float(gap))),
                n=n,
            )
        )
    return rows


@dataclass(frozen=True)
class QuantileRow:
    group_id: str
    quantile: float
    effect: float
    group_size: int


def normal_quantile_table(
    effects: Mapping[str, float], sizes: Mapping[str, int] | None = None
) -> list[QuantileRow]:
    """Sorted effects against standard normal quantiles at (k-1/2)/n.

    Group sizes ride along so that apparent outliers from tiny groups
    can be identified.  Requires at least 3 effects.
    """
    n = len(effects)
    if n < 3:
        raise DomainError(f"need >= 3 effects for a quantile table, got {n}")
    ordered = sorted(effects.items(), key=lambda kv: (kv[1], kv[0]))
    quantiles = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    return [
        QuantileRow(
            group_id=gid,
            quantile=float(q),
            effect=float(value),
            group_size=int(sizes.get(gid, 0)) if sizes else 0,
        )
        for (gid, value), q in zip(ordered, quantiles)
    ]


# ---------------------------------------------------------------------------
# shared evaluation harness
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    n_test: int
    seed: int
    rmse_dollars: dict[str, float] = field(default_factory=dict)
    converged: dict[str, bool] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": "eval-report/1",
            "n_test": self.n_test,
            "seed": self.seed,
            "rmse_dollars": {k: self.rmse_dollars[k] for k in sorted(self.rmse_dollars)},
            "converged": {k: self.converged[k] for k in sorted(self.converged)},
            "failures": {k: self.failures[k] for k in sorted(self.failures)},
        }


@dataclass
class EvalOutcome:
    report: EvalReport
    split: TrainTestSplit
    models: dict[str, object] = field(default_factory=dict)
    indices: dict[str, IndexSeries] = field(default_factory=dict)
    correlation: list[GapCorrelationRow] = field(default_factory=list)
    variance_by_gap: dict[str, list[GapVarianceRow]] = field(default_factory=dict)
    zip_effect_quantiles: dict[str, list[QuantileRow]] = field(default_factory=dict)


def _zip_sizes(panel: PanelDataset) -> dict[str, int]:
    return {z: sum(len(hs) for hs in houses.values()) for z, houses in panel.zips.items()}


def run_evaluation(
    panel: PanelDataset,
    seed: int,
    models: tuple[str, ...] = ("ar", "mixed", "cs"),
    ar_config: ARFitConfig | None = None,
    mixed_config: MixedFitConfig | None = None,
) -> EvalOutcome:
    """Split, fit, predict, score, and diagnose in one pass.

    A model that raises while fitting is recorded under ``failures``
    with its reason; the others still run.  Test predictions always
    condition on the held-out sale's previous sale, which stays in the
    training set by construction of the split.
    """
    split = split_train_test(panel, seed)
    train = split.train
    actual = np.array([rec.sale.price for rec in split.test])
    report = EvalReport(n_test=len(split.test), seed=seed)
    outcome = EvalOutcome(report=report, split=split)
    outcome.indices["mean"] = mean_index(train)

    if "ar" in models:
        try:
            model = armodel.fit(train, ar_config)
            outcome.models["ar"] = model
            report.converged["ar"] = model.converged
            preds = np.array(
                [
                    armodel.predict(model, rec.prev, rec.sale.zip_code, rec.sale.quarter)
                    for rec in split.test
                ]
            )
            report.rmse_dollars["ar"] = rmse(preds, actual)
            outcome.indices["ar"] = ar_index(model)
            outcome.correlation = correlation_by_gap(model, train)
            resid, gaps, is_first = armodel.training_residuals(model, train)
            outcome.variance_by_gap["ar"] = residual_variance_by_gap(
                resid[~is_first], gaps[~is_first], model.params
            )
            if len(model.tau_hat) >= 3:
                outcome.zip_effect_quantiles["ar"] = normal_quantile_table(
                    model.tau_hat, _zip_sizes(train)
                )
        except HousePriceError as exc:
            report.failures["ar"] = f"{type(exc).__name__}: {exc}"

    if "mixed" in models:
        try:
            model = mixedmodel.fit(train, mixed_config)
            outcome.models["mixed"] = model
            report.converged["mixed"] = model.converged
            preds = np.array(
                [
                    mixedmodel.predict(
                        model, rec.sale.house_id, rec.sale.zip_code, rec.sale.quarter
                    )
                    for rec in split.test
                ]
            )
            report.rmse_dollars["mixed"] = rmse(preds, actual)
            outcome.indices["mixed"] = mixed_index(model)
            resid, gaps, is_first = mixedmodel.training_residuals(model, train)
            outcome.variance_by_gap["mixed"] = residual_variance_by_gap(
                resid[~is_first], gaps[~is_first], model.params
            )
            if len(model.tau_hat) >= 3:
                outcome.zip_effect_quantiles["mixed"] = normal_quantile_table(
                    model.tau_hat, _zip_sizes(train)
                )
        except HousePriceError as exc:
            report.failures["mixed"] = f"{type(exc).__name__}: {exc}"

    if "cs" in models:
        try:
            pairs = caseshiller.build_sale_pairs(train)
            fit_ = caseshiller.fit(pairs, train.T)
            outcome.models["cs"] = fit_
            report.converged["cs"] = True
            preds = np.array(
                [
                    caseshiller.predict(fit_, rec.prev, rec.sale.quarter)
                    for rec in split.test
                ]
            )
            report.rmse_dollars["cs"] = rmse(preds, actual)
            outcome.indices["cs"] = cs_index(fit_)
            resid, gaps = caseshiller.stage_residuals(fit_, pairs, train.T)
            outcome.variance_by_gap["cs"] = residual_variance_by_gap(resid, gaps, fit_)
        except HousePriceError as exc:
            report.failures["cs"] = f"{type(exc).__name__}: {exc}"

    return outcome
