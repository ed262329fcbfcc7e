"""Autoregressive repeat-sales model: likelihood, fitting, and prediction.

Log sale prices are modeled as an overall mean plus a fixed quarter
effect (the log price index), a random ZIP-code effect, and a latent
stationary AR(1) series sampled at the sale times of each house:

    y[i,1,z] = mu + beta[t(i,1,z)] + tau[z] + eps[i,1,z]
    y[i,j,z] = mu + beta[t(i,j,z)] + tau[z]
               + phi**gap * (y[i,j-1,z] - mu - beta[t(i,j-1,z)] - tau[z])
               + eps[i,j,z],                                      j > 1

where gap = t(i,j,z) - t(i,j-1,z) is the gap time in quarters,
tau[z] ~ N(0, sigma2_tau) i.i.d., the first-sale error has the marginal
variance sigma2_eps / (1 - phi^2), and later sales have the conditional
variance sigma2_eps * (1 - phi**(2*gap)) / (1 - phi^2).  The quarter
effects satisfy sum_t n_t * beta_t = 0 (n_t = sales in quarter t), so mu
is interpretable as an overall mean and beta_T is determined by the
constraint.

Estimation is maximum likelihood by coordinate ascent.  A per-house
differencing transform ``T`` (unit diagonal, one sub-diagonal entry
-phi**gap linking each sale to its predecessor) whitens the AR component,
after which each ZIP's covariance block is diagonal-plus-rank-one:

    V_z = c * diag(r_z) + sigma2_tau * (T_z 1)(T_z 1)',
    c   = sigma2_eps / (1 - phi^2),

with r = 1 for first sales and 1 - phi**(2*gap) otherwise.  Determinants
and solves use the rank-one update identities, so every likelihood or
score evaluation is linear in the number of sales.  The quarter effects
solve generalized least squares normal equations; each variance and phi
solves its score equation by safeguarded bracketed root finding.  ZIP
effects are predicted afterwards by scalar shrinkage (BLUP-style), and
predictions are mapped back to dollars with the usual lognormal
half-variance correction based on the training mean squared residual.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize

from .data import PanelDataset, Sale
from .errors import (
    ConvergenceError,
    DomainError,
    IdentifiabilityError,
    MalformedSeriesError,
    SchemaVersionError,
)

__all__ = [
    "ARParams",
    "ARFitConfig",
    "FittedARModel",
    "TransformBlock",
    "TrainingArrays",
    "prepare_training",
    "build_transform",
    "log_likelihood",
    "update_beta",
    "update_sigma_eps",
    "update_sigma_tau",
    "update_phi",
    "fit",
    "estimate_tau",
    "predict",
    "training_residuals",
    "to_dict",
    "from_dict",
    "save",
    "load",
]

logger = logging.getLogger(__name__)

FORMAT = "ar-model/1"
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ARParams:
    """Model parameters; ``beta`` is the full length-T vector including
    the constrained final entry."""

    mu: float
    beta: np.ndarray
    phi: float
    sigma2_eps: float
    sigma2_tau: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        if not (0.0 <= self.phi < 1.0):
            raise DomainError(f"phi={self.phi} outside [0, 1)")
        if self.sigma2_eps <= 0.0:
            raise DomainError(f"sigma2_eps={self.sigma2_eps} must be > 0")
        if self.sigma2_tau < 0.0:
            raise DomainError(f"sigma2_tau={self.sigma2_tau} must be >= 0")

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_constraint(self, n_t: np.ndarray, rtol: float = 1e-8) -> bool:
        """sum_t n_t beta_t = 0 within rtol relative to sum_t n_t |beta_t|."""
        scale = float(n_t @ np.abs(self.beta))
        if scale == 0.0:
            return True
        return abs(float(n_t @ self.beta)) <= rtol * scale


@dataclass(frozen=True)
class ARFitConfig:
    tol_phi: float = 1e-6
    tol_var: float = 1e-8
    tol_beta: float = 1e-6
    max_iters: int = 200
    init_phi: float = 0.95
    # Literal constant multiplying sigma2_eps/sigma2_tau in the ZIP-effect
    # shrinkage denominator.  2.0 reproduces the published formula; 1.0 is
    # the value a joint Henderson mixed-model-equations solve implies.
    blup_prior_factor: float = 2.0


@dataclass
class FittedARModel:
    params: ARParams
    tau_hat: dict[str, float]
    msr: float
    iterations: int
    converged: bool
    loglik_trace: list[float] = field(default_factory=list)
    n_t: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.params.T


# ---------------------------------------------------------------------------
# flattened training data
# ---------------------------------------------------------------------------


@dataclass
class TrainingArrays:
    """Training panel flattened to arrays in canonical order.

    Sales are ordered ZIP-major (ZIPs sorted), house-major within ZIP,
    by quarter within house, so each ZIP occupies one contiguous
    segment and each non-first sale's predecessor sits directly before
    it.  ``X`` is the fixed-effect design for [mu, beta_1..beta_{T-1}]
    with the constraint sum_t n_t beta_t = 0 substituted into rows of
    quarter-T sales.
    """

    y: np.ndarray
    quarter0: np.ndarray  # 0-based quarter per sale
    gap: np.ndarray  # float; 0.0 for first sales
    is_first: np.ndarray
    prev: np.ndarray  # global index of previous sale; self for first sales
    zip_index: np.ndarray
    zip_starts: np.ndarray
    zip_codes: list[str]
    n_t: np.ndarray
    T: int
    X: np.ndarray

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def Z(self) -> int:
        return len(self.zip_codes)

    @property
    def n_pairs(self) -> int:
        return int((~self.is_first).sum())


def prepare_training(panel: PanelDataset) -> TrainingArrays:
    y, quarter0, gap, is_first, prev, zip_index = [], [], [], [], [], []
    zip_starts, zip_codes = [], []
    idx = 0
    for zi, z in enumerate(sorted(panel.zips)):
        zip_starts.append(idx)
        zip_codes.append(z)
        houses = panel.zips[z]
        for h in sorted(houses):
            sales = houses[h]
            for j, sale in enumerate(sales):
                y.append(sale.log_price)
                quarter0.append(sale.quarter - 1)
                zip_index.append(zi)
                if j == 0:
                    gap.append(0.0)
                    is_first.append(True)
                    prev.append(idx)
                else:
                    g = sale.quarter - sales[j - 1].quarter
                    if g <= 0:
                        raise MalformedSeriesError(
                            f"house {h!r}: non-increasing quarters"
                        )
                    gap.append(float(g))
                    is_first.append(False)
                    prev.append(idx - 1)
                idx += 1
    T = panel.T
    quarter0_arr = np.array(quarter0, dtype=np.int64)
    n_t = np.bincount(quarter0_arr, minlength=T).astype(np.float64)
    X = _constrained_design(quarter0_arr, n_t, T)
    return TrainingArrays(
        y=np.array(y, dtype=np.float64),
        quarter0=quarter0_arr,
        gap=np.array(gap, dtype=np.float64),
        is_first=np.array(is_first, dtype=bool),
        prev=np.array(prev, dtype=np.int64),
        zip_index=np.array(zip_index, dtype=np.int64),
        zip_starts=np.array(zip_starts, dtype=np.int64),
        zip_codes=zip_codes,
        n_t=n_t,
        T=T,
        X=X,
    )


def _constrained_design(quarter0: np.ndarray, n_t: np.ndarray, T: int) -> np.ndarray:
    n = len(quarter0)
    X = np.zeros((n, T))
    X[:, 0] = 1.0
    before_last = quarter0 < T - 1
    X[np.nonzero(before_last)[0], quarter0[before_last] + 1] = 1.0
    if T > 1 and n_t[T - 1] > 0:
        X[~before_last, 1:] = -n_t[: T - 1] / n_t[T - 1]
    return X


def _as_arrays(train: PanelDataset | TrainingArrays) -> TrainingArrays:
    if isinstance(train, TrainingArrays):
        return train
    return prepare_training(train)


def _zipsum(tr: TrainingArrays, values: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, tr.zip_starts)


# ---------------------------------------------------------------------------
# transform and covariance kit
# ---------------------------------------------------------------------------


class _PhiPieces:
    """phi-dependent vectors: sub-diagonal magnitudes, conditional-variance
    scalings r, and the transform's image of the ones vector a = T·1."""

    __slots__ = ("phig", "r", "a")

    def __init__(self, tr: TrainingArrays, phi: float):
        nf = ~tr.is_first
        phig = np.zeros(tr.N)
        phig[nf] = phi ** tr.gap[nf]
        r = np.ones(tr.N)
        r[nf] = 1.0 - phig[nf] ** 2
        a = np.ones(tr.N)
        a[nf] = 1.0 - phig[nf]
        self.phig, self.r, self.a = phig, r, a


def _apply_T(tr: TrainingArrays, phig: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Whitening transform: first sales unchanged, later sales minus
    phi**gap times the previous sale's value."""
    out = x.astype(np.float64, copy=True)
    nf = ~tr.is_first
    out[nf] -= phig[nf] * x[tr.prev[nf]]
    return out


class _CovKit:
    """Per-ZIP diagonal-plus-rank-one covariance V = c*diag(r) + s2t*aa'.

    Solves, log-determinants, and traces cost O(N) via the rank-one
    update identities; per-ZIP scalars are broadcast back to sales.
    """

    def __init__(self, tr: TrainingArrays, r: np.ndarray, a: np.ndarray, c: float, s2_tau: float):
        self.tr = tr
        self.a = a
        self.d = c * r
        self.ad = a / self.d
        self.q = _zipsum(tr, a * self.ad)
        self.k = s2_tau / (1.0 + s2_tau * self.q)
        self.s2_tau = s2_tau

    def logdet(self) -> float:
        return float(np.log(self.d).sum() + np.log1p(self.s2_tau * self.q).sum())

    def solve(self, x: np.ndarray) -> np.ndarray:
        s = _zipsum(self.tr, self.ad * x)
        return x / self.d - (self.k * s)[self.tr.zip_index] * self.ad

    def quad(self, x: np.ndarray) -> float:
        return float(x @ self.solve(x))

    def trace_diag(self, v: np.ndarray) -> float:
        """tr(V^{-1} diag(v))."""
        return float((v / self.d).sum() - (self.k * _zipsum(self.tr, self.ad**2 * v)).sum())


def _residual(tr: TrainingArrays, params: ARParams) -> np.ndarray:
    return tr.y - params.mu - params.beta[tr.quarter0]


# ---------------------------------------------------------------------------
# public transform builder (single-ZIP view, used by diagnostics and tests)
# ---------------------------------------------------------------------------


@dataclass
class TransformBlock:
    """Sparse whitening transform for one ZIP's sales (house-major order).

    The matrix has a unit diagonal and one sub-diagonal entry per
    non-first sale equal to -phi**gap at (row, prev).  ``r`` holds the
    conditional-variance scalings and ``t_ones`` the image of the ones
    vector, needed by the rank-one covariance kit.
    """

    size: int
    sub_rows: np.ndarray
    sub_prev: np.ndarray
    sub_values: np.ndarray  # -phi**gap
    r: np.ndarray
    t_ones: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64).copy()
        out[self.sub_rows] += self.sub_values * x[self.sub_prev]
        return out

    def dense(self) -> np.ndarray:
        mat = np.eye(self.size)
        mat[self.sub_rows, self.sub_prev] = self.sub_values
        return mat


def build_transform(sales: Sequence[Sale], phi: float) -> TransformBlock:
    """Build the whitening transform for one ZIP's sales.

    ``sales`` must be ordered house-major with each house's sales
    ordered by quarter.  Raises MalformedSeriesError for non-positive
    gaps.
    """
    if not (0.0 <= phi < 1.0):
        raise DomainError(f"phi={phi} outside [0, 1)")
    n = len(sales)
    rows, prevs, vals = [], [], []
    r = np.ones(n)
    for i, sale in enumerate(sales):
        if i == 0 or sale.house_id != sales[i - 1].house_id:
            continue
        g = sale.quarter - sales[i - 1].quarter
        if g <= 0:
            raise MalformedSeriesError(
                f"house {sale.house_id!r}: gap {g} <= 0 at quarter {sale.quarter}"
            )
        rows.append(i)
        prevs.append(i - 1)
        vals.append(-(phi**g))
        r[i] = 1.0 - phi ** (2 * g)
    block = TransformBlock(
        size=n,
        sub_rows=np.array(rows, dtype=np.int64),
        sub_prev=np.array(prevs, dtype=np.int64),
        sub_values=np.array(vals, dtype=np.float64),
        r=r,
        t_ones=np.ones(n),
    )
    block.t_ones = block.apply(np.ones(n))
    return block


# ---------------------------------------------------------------------------
# likelihood and coordinate updates
# ---------------------------------------------------------------------------


def log_likelihood(params: ARParams, train: PanelDataset | TrainingArrays) -> float:
    """Exact Gaussian log likelihood, evaluated blockwise per ZIP."""
    tr = _as_arrays(train)
    if tr.N == 0:
        raise DomainError("empty training data")
    pieces = _PhiPieces(tr, params.phi)
    c = params.sigma2_eps / (1.0 - params.phi**2)
    cov = _CovKit(tr, pieces.r, pieces.a, c, params.sigma2_tau)
    w = _residual(tr, params)
    tw = _apply_T(tr, pieces.phig, w)
    return -0.5 * (tr.N * LOG_2PI + cov.logdet() + cov.quad(tw))


def update_beta(params: ARParams, train: PanelDataset | TrainingArrays) -> ARParams:
    """Generalized-least-squares update of (mu, beta_1..beta_{T-1}).

    beta_T is not a free coordinate; the constraint is substituted into
    the design, and the full beta vector of the returned params carries
    the implied final entry.
    """
    tr = _as_arrays(train)
    empty = np.nonzero(tr.n_t == 0)[0]
    if len(empty):
        raise IdentifiabilityError(
            f"quarters with zero training sales: {[int(q) + 1 for q in empty]}"
        )
    pieces = _PhiPieces(tr, params.phi)
    c = params.sigma2_eps / (1.0 - params.phi**2)
    cov = _CovKit(tr, pieces.r, pieces.a, c, params.sigma2_tau)

    tx = tr.X - (pieces.phig[:, None] * tr.X[tr.prev])
    ty = _apply_T(tr, pieces.phig, tr.y)
    dinv_tx = tx / cov.d[:, None]
    M = tx.T @ dinv_tx
    G = np.add.reduceat(cov.ad[:, None] * tx, tr.zip_starts, axis=0)
    M -= (cov.k[:, None] * G).T @ G
    rhs = dinv_tx.T @ ty - G.T @ (cov.k * _zipsum(tr, cov.ad * ty))
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise IdentifiabilityError(f"singular normal equations: {exc}") from exc

    beta = np.zeros(tr.T)
    beta[: tr.T - 1] = sol[1:]
    if tr.n_t[tr.T - 1] > 0:
        beta[tr.T - 1] = -float(tr.n_t[: tr.T - 1] @ sol[1:]) / tr.n_t[tr.T - 1]
    return replace(params, mu=float(sol[0]), beta=beta)


def _score_sigma_eps(s2_eps, tr, pieces, tw, phi, s2_tau) -> float:
    c = s2_eps / (1.0 - phi**2)
    cov = _CovKit(tr, pieces.r, pieces.a, c, s2_tau)
    v = cov.solve(tw)
    return -cov.trace_diag(pieces.r) + float(pieces.r @ (v * v))


def _score_sigma_tau(s2_tau, tr, pieces, tw, phi, s2_eps) -> float:
    c = s2_eps / (1.0 - phi**2)
    cov = _CovKit(tr, pieces.r, pieces.a, c, s2_tau)
    u = _zipsum(tr, cov.ad * tw)
    one_kq = 1.0 - cov.k * cov.q
    trace = float((cov.q * one_kq).sum())  # a' V^{-1} a summed over ZIPs
    quad = float(((u * one_kq) ** 2).sum())  # (a' V^{-1} Tw)^2 per ZIP
    return -trace + quad


def _score_phi(phi, tr, w, s2_eps, s2_tau) -> float:
    nf = ~tr.is_first
    g = tr.gap
    phig = np.zeros(tr.N)
    phig[nf] = phi ** g[nf]
    r = np.ones(tr.N)
    r[nf] = 1.0 - phig[nf] ** 2
    a = np.ones(tr.N)
    a[nf] = 1.0 - phig[nf]
    da = np.zeros(tr.N)
    da[nf] = -g[nf] * phi ** (g[nf] - 1.0)
    dr = np.zeros(tr.N)
    dr[nf] = -2.0 * g[nf] * phi ** (2.0 * g[nf] - 1.0)
    tw = _apply_T(tr, phig, w)
    dtw = np.zeros(tr.N)
    dtw[nf] = da[nf] * w[tr.prev[nf]]

    c = s2_eps / (1.0 - phi**2)
    cov = _CovKit(tr, r, a, c, s2_tau)
    v = cov.solve(tw)
    ccoef = 2.0 * phi * c / (1.0 - phi**2)  # d c/d phi

    trace = (
        2.0 * s2_tau * float(da @ cov.solve(a))
        + ccoef * cov.trace_diag(r)
        + c * cov.trace_diag(dr)
    )
    cross = -2.0 * float(dtw @ v)
    # rank-one pieces contract per ZIP, not globally
    s_vda = _zipsum(tr, v * da)
    s_va = _zipsum(tr, v * a)
    quad = (
        2.0 * s2_tau * float((s_vda * s_va).sum())
        + ccoef * float(r @ (v * v))
        + c * float(dr @ (v * v))
    )
    return -trace + cross + quad


def _bracketed_root(score, lo: float, hi: float, expand: int = 3, what: str = "") -> float:
    """Safeguarded scalar root finding on [lo, hi].

    The bracket's upper end is doubled up to ``expand`` times if the
    score does not change sign; failing that, a ConvergenceError is
    raised.  Brent's bracketing method guarantees convergence once a
    sign change exists.
    """
    f_lo = score(lo)
    f_hi = score(hi)
    tries = 0
    while f_lo * f_hi > 0 and tries < expand:
        hi *= 2.0
        f_hi = score(hi)
        tries += 1
    if f_lo * f_hi > 0:
        raise ConvergenceError(
            f"no sign change for {what} score on [{lo:g}, {hi:g}] "
            f"(score {f_lo:.3e} .. {f_hi:.3e})"
        )
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    return float(optimize.brentq(score, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=200))


def update_sigma_eps(params: ARParams, train: PanelDataset | TrainingArrays) -> float:
    """Root of the sigma2_eps score equation, bracketed within
    [1e-12, 10 * var(residuals)] with up to three bracket doublings."""
    tr = _as_arrays(train)
    pieces = _PhiPieces(tr, params.phi)
    w = _residual(tr, params)
    tw = _apply_T(tr, pieces.phig, w)
    lo = 1e-12
    hi = max(10.0 * float(w.var()), 10.0 * lo)

    def score(s2e: float) -> float:
        return _score_sigma_eps(s2e, tr, pieces, tw, params.phi, params.sigma2_tau)

    if score(lo) <= 0.0:
        # likelihood still rising as the variance shrinks to the bracket
        # edge: an (essentially) exact fit
        logger.warning("sigma2_eps update degenerate: residuals near zero")
        return lo
    return _bracketed_root(score, lo, hi, what="sigma2_eps")


def update_sigma_tau(params: ARParams, train: PanelDataset | TrainingArrays) -> float:
    """Root of the sigma2_tau score equation; 0.0 is a permitted boundary
    solution when the score is non-positive there."""
    tr = _as_arrays(train)
    pieces = _PhiPieces(tr, params.phi)
    w = _residual(tr, params)
    tw = _apply_T(tr, pieces.phig, w)

    def score(s2t: float) -> float:
        return _score_sigma_tau(s2t, tr, pieces, tw, params.phi, params.sigma2_eps)

    if score(0.0) <= 0.0:
        return 0.0
    hi = max(10.0 * float(w.var()), 10.0 * max(params.sigma2_tau, 1e-12))
    return _bracketed_root(score, 0.0, hi, what="sigma2_tau")


def update_phi(params: ARParams, train: PanelDataset | TrainingArrays) -> float:
    """Root of the phi score equation inside (1e-6, 1 - 1e-6).

    Raises IdentifiabilityError when the data carry no repeat sales (no
    gap information), and ConvergenceError with a likelihood-slice dump
    when no root exists in (0, 1).
    """
    tr = _as_arrays(train)
    if tr.n_pairs == 0:
        raise IdentifiabilityError(
            "no repeat-sale pairs in training data; phi is not identifiable"
        )
    w = _residual(tr, params)

    def score(phi: float) -> float:
        return _score_phi(phi, tr, w, params.sigma2_eps, params.sigma2_tau)

    lo, hi = 1e-6, 1.0 - 1e-6
    f_lo, f_hi = score(lo), score(hi)
    if f_lo * f_hi > 0:
        grid = np.linspace(0.01, 0.99, 25)
        slice_dump = [
            (float(p), log_likelihood(replace(params, phi=float(p)), tr)) for p in grid
        ]
        err = ConvergenceError(
            "phi score has no root in (0, 1); likelihood slice attached"
        )
        err.likelihood_slice = slice_dump
        raise err
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    return float(optimize.brentq(score, lo, hi, xtol=1e-12, rtol=1e-15, maxiter=200))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _initial_params(tr: TrainingArrays, config: ARFitConfig) -> ARParams:
    quarter_means = np.zeros(tr.T)
    np.add.at(quarter_means, tr.quarter0, tr.y)
    quarter_means /= tr.n_t
    mu0 = float(tr.n_t @ quarter_means) / tr.N
    beta0 = quarter_means - mu0
    resid = tr.y - quarter_means[tr.quarter0]
    var0 = float(resid.var())
    s2e0 = max(var0 / 2.0, 1e-10)
    zip_means = _zipsum(tr, resid) / _zipsum(tr, np.ones(tr.N))
    s2t0 = float(zip_means.var()) if tr.Z > 1 else 0.0
    return ARParams(
        mu=mu0, beta=beta0, phi=config.init_phi, sigma2_eps=s2e0, sigma2_tau=s2t0
    )


def fit(
    train: PanelDataset | TrainingArrays, config: ARFitConfig | None = None
) -> FittedARModel:
    """Maximum likelihood fit by coordinate ascent.

    Each iteration updates beta (GLS), then sigma2_eps, sigma2_tau, and
    phi by scoring, in that order; the loop stops when every parameter
    moves less than its tolerance or ``max_iters`` is reached (the model
    is then returned with ``converged=False``).  Afterwards beta_T is
    materialized from the constraint, ZIP effects are predicted for
    every training ZIP, and the training mean squared residual on the
    log scale is recorded.
    """
    config = config or ARFitConfig()
    tr = _as_arrays(train)
    if tr.N == 0:
        raise IdentifiabilityError("empty training data")
    empty = np.nonzero(tr.n_t == 0)[0]
    if len(empty):
        raise IdentifiabilityError(
            f"quarters with zero training sales: {[int(q) + 1 for q in empty]}"
        )
    if tr.n_pairs == 0:
        raise IdentifiabilityError("no repeat-sale pairs; phi is not identifiable")

    params = _initial_params(tr, config)
    trace = [log_likelihood(params, tr)]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        prev = params
        params = update_beta(params, tr)
        params = replace(params, sigma2_eps=update_sigma_eps(params, tr))
        params = replace(params, sigma2_tau=update_sigma_tau(params, tr))
        params = replace(params, phi=update_phi(params, tr))
        trace.append(log_likelihood(params, tr))
        d_beta = max(
            abs(params.mu - prev.mu), float(np.abs(params.beta - prev.beta).max())
        )
        if (
            abs(params.phi - prev.phi) < config.tol_phi
            and abs(params.sigma2_eps - prev.sigma2_eps) < config.tol_var
            and abs(params.sigma2_tau - prev.sigma2_tau) < config.tol_var
            and d_beta < config.tol_beta
        ):
            converged = True
            break
    if not converged:
        logger.warning("coordinate ascent did not converge in %d iterations", iterations)

    tau = estimate_tau(params, tr, prior_factor=config.blup_prior_factor)
    tau_hat = dict(zip(tr.zip_codes, tau.tolist()))
    resid = _training_residual_vector(tr, params, tau)
    msr = float(np.mean(resid**2))
    return FittedARModel(
        params=params,
        tau_hat=tau_hat,
        msr=msr,
        iterations=iterations,
        converged=converged,
        loglik_trace=trace,
        n_t=tr.n_t.copy(),
    )


def estimate_tau(
    params: ARParams,
    train: PanelDataset | TrainingArrays,
    prior_factor: float = 2.0,
) -> np.ndarray:
    """Shrinkage predictions of the ZIP effects, one per training ZIP.

    tau_z = [(factor * s2_eps / s2_tau) + (1-phi^2) a' diag(r)^{-1} a]^{-1}
            * (1-phi^2) a' diag(r)^{-1} (T w_z)

    with a = T·1.  ``prior_factor`` defaults to the published constant 2;
    a joint Henderson solve of the mixed-model equations corresponds to
    factor 1 (see ARFitConfig).  Returns zeros when sigma2_tau == 0.
    """
    tr = _as_arrays(train)
    if params.sigma2_tau == 0.0:
        return np.zeros(tr.Z)
    pieces = _PhiPieces(tr, params.phi)
    w = _residual(tr, params)
    tw = _apply_T(tr, pieces.phig, w)
    one_m_phi2 = 1.0 - params.phi**2
    num = one_m_phi2 * _zipsum(tr, pieces.a * tw / pieces.r)
    den = prior_factor * params.sigma2_eps / params.sigma2_tau + one_m_phi2 * _zipsum(
        tr, pieces.a**2 / pieces.r
    )
    return num / den


def _training_residual_vector(
    tr: TrainingArrays, params: ARParams, tau: np.ndarray
) -> np.ndarray:
    """y - yhat where yhat is the one-step conditional prediction; equals
    T(y - X beta) - tau * (T 1) elementwise."""
    pieces = _PhiPieces(tr, params.phi)
    w = _residual(tr, params)
    tw = _apply_T(tr, pieces.phig, w)
    return tw - tau[tr.zip_index] * pieces.a


def training_residuals(
    model: FittedARModel, train: PanelDataset | TrainingArrays
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(residuals, gaps, is_first) over the training sales in canonical order."""
    tr = _as_arrays(train)
    tau = np.array([model.tau_hat.get(z, 0.0) for z in tr.zip_codes])
    resid = _training_residual_vector(tr, model.params, tau)
    return resid, tr.gap.copy(), tr.is_first.copy()


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict(
    model: FittedARModel,
    prev_sale: Sale | None,
    zip_code: str,
    quarter: int,
) -> float:
    """Predicted sale price in dollars.

    With a previous sale the AR component shrinks toward it with weight
    phi**gap; without one the prediction is the marginal mean.  ZIPs
    absent from training get a zero ZIP effect.  The log-scale value is
    converted to dollars as exp(yhat + MSR/2).
    """
    p = model.params
    if not (1 <= quarter <= p.T):
        raise DomainError(f"quarter {quarter} outside 1..{p.T}")
    tau = model.tau_hat.get(zip_code, 0.0)
    yhat = p.mu + p.beta[quarter - 1] + tau
    if prev_sale is not None:
        if not (1 <= prev_sale.quarter <= p.T):
            raise DomainError(f"previous quarter {prev_sale.quarter} outside 1..{p.T}")
        gap = quarter - prev_sale.quarter
        if gap <= 0:
            raise DomainError(f"gap {gap} <= 0: previous sale must precede the target")
        weight = p.phi**gap
        yhat += weight * (
            prev_sale.log_price - p.mu - p.beta[prev_sale.quarter - 1] - tau
        )
    return math.exp(yhat + model.msr / 2.0)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def to_dict(model: FittedARModel) -> dict:
    return {
        "format": FORMAT,
        "params": {
            "mu": model.params.mu,
            "beta": model.params.beta.tolist(),
            "phi": model.params.phi,
            "sigma2_eps": model.params.sigma2_eps,
            "sigma2_tau": model.params.sigma2_tau,
        },
        "tau_hat": {z: model.tau_hat[z] for z in sorted(model.tau_hat)},
        "msr": model.msr,
        "iterations": model.iterations,
        "converged": model.converged,
        "loglik_trace": list(model.loglik_trace),
        "n_t": model.n_t.tolist() if model.n_t is not None else None,
    }


def from_dict(doc: dict) -> FittedARModel:
    if doc.get("format") != FORMAT:
        raise SchemaVersionError(
            f"expected format {FORMAT!r}, found {doc.get('format')!r}"
        )
    p = doc["params"]
    return FittedARModel(
        params=ARParams(
            mu=p["mu"],
            beta=np.array(p["beta"], dtype=np.float64),
            phi=p["phi"],
            sigma2_eps=p["sigma2_eps"],
            sigma2_tau=p["sigma2_tau"],
        ),
        tau_hat=dict(doc["tau_hat"]),
        msr=doc["msr"],
        iterations=doc["iterations"],
        converged=doc["converged"],
        loglik_trace=list(doc["loglik_trace"]),
        n_t=np.array(doc["n_t"], dtype=np.float64) if doc.get("n_t") else None,
    )


def save(model: FittedARModel, path) -> None:
    from .persist import save_json

    save_json(to_dict(model), path)


def load(path) -> FittedARModel:
    from .persist import load_json

    return from_dict(load_json(path))
