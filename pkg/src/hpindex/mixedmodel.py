"""Conventional mixed effects comparison model.

Log prices are an overall mean plus fixed quarter effects and random
house and ZIP effects with homoscedastic errors:

    y[i,j,z] = mu + beta[t(i,j,z)] + alpha[i] + tau[z] + eps[i,j,z],

alpha ~ N(0, sigma2_alpha), tau ~ N(0, sigma2_tau), eps ~ N(0, sigma2_eps),
all independent.  There is no time-series component, so the model's
predictions do not depend on the gap time since the previous sale; that
contrast is exactly what the residual-variance diagnostic exposes.

The marginal covariance within one ZIP is

    V_z = sigma2_eps * I + sigma2_alpha * (house blocks of ones)
          + sigma2_tau * 11',

i.e. nested diagonal-plus-rank-one structure (houses within ZIP), so
every likelihood evaluation is linear in the number of sales.  Fitting
is maximum likelihood by coordinate ascent: a GLS step for (mu, beta)
followed by bounded scalar maximization of each variance's likelihood
slice.  The same sum_t n_t beta_t = 0 convention as the autoregressive
model keeps the indices comparable.  Random effects are then predicted
by iterating the two shrinkage equations

    alpha = (sigma2_eps/sigma2_alpha I + W'W)^{-1} W'(y - X beta - Z tau)
    tau   = (sigma2_eps/sigma2_tau  I + Z'Z)^{-1} Z'(y - X beta - W alpha)

to a fixed point (they are the blocks of Henderson's mixed-model
equations, so the fixed point is the joint BLUP solution).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .data import PanelDataset
from .errors import DomainError, IdentifiabilityError, MalformedSeriesError, SchemaVersionError

__all__ = [
    "MixedParams",
    "MixedFitConfig",
    "FittedMixedModel",
    "MixedArrays",
    "prepare_training",
    "log_likelihood",
    "fit",
    "predict",
    "training_residuals",
    "to_dict",
    "from_dict",
    "save",
    "load",
]

logger = logging.getLogger(__name__)

FORMAT = "mixed-model/1"
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixedParams:
    mu: float
    beta: np.ndarray
    sigma2_alpha: float
    sigma2_tau: float
    sigma2_eps: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        if self.sigma2_eps <= 0.0:
            raise DomainError("sigma2_eps must be > 0")
        if self.sigma2_alpha < 0.0 or self.sigma2_tau < 0.0:
            raise DomainError("variance components must be >= 0")

    @property
    def T(self) -> int:
        return len(self.beta)


@dataclass(frozen=True)
class MixedFitConfig:
    tol_var: float = 1e-8
    tol_beta: float = 1e-6
    max_iters: int = 200
    blup_tol: float = 1e-8
    blup_max_sweeps: int = 500


@dataclass
class FittedMixedModel:
    params: MixedParams
    alpha_hat: dict[str, float]
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
class MixedArrays:
    """Panel flattened in canonical order with house and ZIP segments.

    Houses are contiguous runs of sales; ZIPs are contiguous runs of
    houses, so both levels reduce with ``np.add.reduceat``.
    """

    y: np.ndarray
    quarter0: np.ndarray
    gap: np.ndarray
    is_first: np.ndarray
    house_index: np.ndarray  # (N,) -> house ordinal
    house_starts: np.ndarray  # (H,)
    house_sizes: np.ndarray  # (H,)
    house_ids: list[str]
    house_zip: np.ndarray  # (H,) -> zip ordinal
    zip_index: np.ndarray  # (N,)
    zip_starts: np.ndarray  # (Z,) sale index of first sale in zip
    zip_house_starts: np.ndarray  # (Z,) house ordinal of first house in zip
    zip_codes: list[str]
    n_t: np.ndarray
    T: int
    X: np.ndarray

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def H(self) -> int:
        return len(self.house_ids)

    @property
    def Z(self) -> int:
        return len(self.zip_codes)


def prepare_training(panel: PanelDataset) -> MixedArrays:
    from .armodel import _constrained_design  # same fixed-effect design

    y, quarter0, gap, is_first = [], [], [], []
    house_index, zip_index = [], []
    house_starts, house_sizes, house_ids, house_zip = [], [], [], []
    zip_starts, zip_house_starts, zip_codes = [], [], []
    idx = 0
    for zi, z in enumerate(sorted(panel.zips)):
        zip_starts.append(idx)
        zip_house_starts.append(len(house_ids))
        zip_codes.append(z)
        houses = panel.zips[z]
        for h in sorted(houses):
            sales = houses[h]
            hi = len(house_ids)
            house_starts.append(idx)
            house_sizes.append(len(sales))
            house_ids.append(h)
            house_zip.append(zi)
            for j, sale in enumerate(sales):
                y.append(sale.log_price)
                quarter0.append(sale.quarter - 1)
                house_index.append(hi)
                zip_index.append(zi)
                if j == 0:
                    gap.append(0.0)
                    is_first.append(True)
                else:
                    g = sale.quarter - sales[j - 1].quarter
                    if g <= 0:
                        raise MalformedSeriesError(f"house {h!r}: non-increasing quarters")
                    gap.append(float(g))
                    is_first.append(False)
                idx += 1
    T = panel.T
    quarter0_arr = np.array(quarter0, dtype=np.int64)
    n_t = np.bincount(quarter0_arr, minlength=T).astype(np.float64)
    return MixedArrays(
        y=np.array(y, dtype=np.float64),
        quarter0=quarter0_arr,
        gap=np.array(gap, dtype=np.float64),
        is_first=np.array(is_first, dtype=bool),
        house_index=np.array(house_index, dtype=np.int64),
        house_starts=np.array(house_starts, dtype=np.int64),
        house_sizes=np.array(house_sizes, dtype=np.float64),
        house_ids=house_ids,
        house_zip=np.array(house_zip, dtype=np.int64),
        zip_index=np.array(zip_index, dtype=np.int64),
        zip_starts=np.array(zip_starts, dtype=np.int64),
        zip_house_starts=np.array(zip_house_starts, dtype=np.int64),
        zip_codes=zip_codes,
        n_t=n_t,
        T=T,
        X=_constrained_design(quarter0_arr, n_t, T),
    )


def _as_arrays(train: PanelDataset | MixedArrays) -> MixedArrays:
    if isinstance(train, MixedArrays):
        return train
    return prepare_training(train)


class _CovKit:
    """Nested rank-one solve kit for sigma2_eps*I + sigma2_alpha*(house
    blocks) + sigma2_tau*(ZIP block)."""

    def __init__(self, ma: MixedArrays, s2a: float, s2t: float, s2e: float):
        self.ma = ma
        self.s2a, self.s2t, self.s2e = s2a, s2t, s2e
        self.den_h = s2e + ma.house_sizes * s2a  # (H,)
        self.coef_h = s2a / (s2e * self.den_h)
        # row sums of A^{-1} per sale, A = eps + house blocks
        self.ainv_one = 1.0 / self.den_h[ma.house_index]
        s_house = ma.house_sizes / self.den_h  # 1' A^{-1} 1 per house
        self.s_z = np.add.reduceat(s_house, ma.zip_house_starts)
        self.k_z = s2t / (1.0 + s2t * self.s_z)

    def a_solve(self, x: np.ndarray) -> np.ndarray:
        hs = np.add.reduceat(x, self.ma.house_starts)
        return x / self.s2e - (self.coef_h * hs)[self.ma.house_index]

    def solve(self, x: np.ndarray) -> np.ndarray:
        ax = self.a_solve(x)
        zu = np.add.reduceat(ax, self.ma.zip_starts)
        return ax - (self.k_z * zu)[self.ma.zip_index] * self.ainv_one

    def quad(self, x: np.ndarray) -> float:
        ax = self.a_solve(x)
        zu = np.add.reduceat(ax, self.ma.zip_starts)
        return float(x @ ax - (self.k_z * zu * zu).sum())

    def logdet(self) -> float:
        ma = self.ma
        ld = float(
            ((ma.house_sizes - 1.0) * math.log(self.s2e)).sum()
            + np.log(self.den_h).sum()
            + np.log1p(self.s2t * self.s_z).sum()
        )
        return ld


def _residual(ma: MixedArrays, mu: float, beta: np.ndarray) -> np.ndarray:
    return ma.y - mu - beta[ma.quarter0]


def log_likelihood(params: MixedParams, train: PanelDataset | MixedArrays) -> float:
    ma = _as_arrays(train)
    kit = _CovKit(ma, params.sigma2_alpha, params.sigma2_tau, params.sigma2_eps)
    w = _residual(ma, params.mu, params.beta)
    return -0.5 * (ma.N * LOG_2PI + kit.logdet() + kit.quad(w))


def _gls(ma: MixedArrays, s2a: float, s2t: float, s2e: float) -> tuple[float, np.ndarray]:
    kit = _CovKit(ma, s2a, s2t, s2e)
    X = ma.X
    hsX = np.add.reduceat(X, ma.house_starts, axis=0)
    ainv_X = X / s2e - (kit.coef_h[:, None] * hsX)[ma.house_index]
    M = X.T @ ainv_X
    G = np.add.reduceat(kit.ainv_one[:, None] * X, ma.zip_starts, axis=0)
    M -= (kit.k_z[:, None] * G).T @ G
    ainv_y = kit.a_solve(ma.y)
    zu = np.add.reduceat(ainv_y, ma.zip_starts)
    rhs = X.T @ ainv_y - G.T @ (kit.k_z * zu)
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise IdentifiabilityError(f"singular normal equations: {exc}") from exc
    beta = np.zeros(ma.T)
    beta[: ma.T - 1] = sol[1:]
    if ma.n_t[ma.T - 1] > 0:
        beta[ma.T - 1] = -float(ma.n_t[: ma.T - 1] @ sol[1:]) / ma.n_t[ma.T - 1]
    return float(sol[0]), beta


def _maximize_slice(loglik, current: float, lo: float, hi: float) -> float:
    """Bounded scalar maximization of a likelihood slice; never returns a
    value with lower likelihood than the current one."""
    res = optimize.minimize_scalar(
        lambda v: -loglik(v), bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-12},
    )
    candidate = float(res.x)
    if loglik(candidate) >= loglik(current):
        return candidate
    return current


def fit(
    train: PanelDataset | MixedArrays, config: MixedFitConfig | None = None
) -> FittedMixedModel:
    """Maximum likelihood by coordinate ascent, then BLUPs by fixed-point
    iteration of the two shrinkage equations.

    Non-convergence of either stage returns the best iterate with
    ``converged=False`` rather than raising.
    """
    config = config or MixedFitConfig()
    ma = _as_arrays(train)
    if ma.N == 0:
        raise IdentifiabilityError("empty training data")
    empty = np.nonzero(ma.n_t == 0)[0]
    if len(empty):
        raise IdentifiabilityError(
            f"quarters with zero training sales: {[int(q) + 1 for q in empty]}"
        )

    quarter_means = np.zeros(ma.T)
    np.add.at(quarter_means, ma.quarter0, ma.y)
    quarter_means /= ma.n_t
    mu = float(ma.n_t @ quarter_means) / ma.N
    beta = quarter_means - mu
    resid0 = ma.y - quarter_means[ma.quarter0]
    var0 = max(float(resid0.var()), 1e-10)
    s2e = var0 / 2.0
    s2a = var0 / 4.0
    zip_means = np.add.reduceat(resid0, ma.zip_starts) / np.add.reduceat(
        np.ones(ma.N), ma.zip_starts
    )
    s2t = max(float(zip_means.var()) if ma.Z > 1 else 0.0, 1e-8)
    hi = 10.0 * var0

    def ll(mu_, beta_, s2a_, s2t_, s2e_):
        kit = _CovKit(ma, s2a_, s2t_, s2e_)
        w = ma.y - mu_ - beta_[ma.quarter0]
        return -0.5 * (ma.N * LOG_2PI + kit.logdet() + kit.quad(w))

    trace = [ll(mu, beta, s2a, s2t, s2e)]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        prev = (mu, beta, s2a, s2t, s2e)
        mu, beta = _gls(ma, s2a, s2t, s2e)
        s2e = _maximize_slice(lambda v: ll(mu, beta, s2a, s2t, v), s2e, 1e-12, hi)
        s2t = _maximize_slice(lambda v: ll(mu, beta, s2a, v, s2e), s2t, 0.0, hi)
        s2a = _maximize_slice(lambda v: ll(mu, beta, v, s2t, s2e), s2a, 0.0, hi)
        trace.append(ll(mu, beta, s2a, s2t, s2e))
        d_beta = max(abs(mu - prev[0]), float(np.abs(beta - prev[1]).max()))
        if (
            abs(s2a - prev[2]) < config.tol_var
            and abs(s2t - prev[3]) < config.tol_var
            and abs(s2e - prev[4]) < config.tol_var
            and d_beta < config.tol_beta
        ):
            converged = True
            break
    if not converged:
        logger.warning("mixed-model ascent did not converge in %d iterations", iterations)

    params = MixedParams(mu=mu, beta=beta, sigma2_alpha=s2a, sigma2_tau=s2t, sigma2_eps=s2e)
    alpha, tau, blup_ok = blup_fixed_point(
        ma, params, tol=config.blup_tol, max_sweeps=config.blup_max_sweeps
    )
    resid = _residual(ma, mu, beta) - alpha[ma.house_index] - tau[ma.zip_index]
    return FittedMixedModel(
        params=params,
        alpha_hat=dict(zip(ma.house_ids, alpha.tolist())),
        tau_hat=dict(zip(ma.zip_codes, tau.tolist())),
        msr=float(np.mean(resid**2)),
        iterations=iterations,
        converged=converged and blup_ok,
        loglik_trace=trace,
        n_t=ma.n_t.copy(),
    )


def blup_fixed_point(
    train: PanelDataset | MixedArrays,
    params: MixedParams,
    tol: float = 1e-8,
    max_sweeps: int = 500,
    order: str = "alpha_first",
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Iterate the house/ZIP shrinkage equations to a fixed point.

    Returns (alpha, tau, converged).  The fixed point does not depend on
    which block goes first (the sweeps are block Gauss-Seidel on the
    mixed-model equations); ``order`` exists so that invariance can be
    verified.
    """
    ma = _as_arrays(train)
    s2a, s2t, s2e = params.sigma2_alpha, params.sigma2_tau, params.sigma2_eps
    base = _residual(ma, params.mu, params.beta)
    alpha = np.zeros(ma.H)
    tau = np.zeros(ma.Z)
    n_z = np.add.reduceat(np.ones(ma.N), ma.zip_starts)

    def update_alpha():
        if s2a == 0.0:
            return np.zeros(ma.H)
        hs = np.add.reduceat(base - tau[ma.zip_index], ma.house_starts)
        return hs / (s2e / s2a + ma.house_sizes)

    def update_tau():
        if s2t == 0.0:
            return np.zeros(ma.Z)
        zs = np.add.reduceat(base - alpha[ma.house_index], ma.zip_starts)
        return zs / (s2e / s2t + n_z)

    for _ in range(max_sweeps):
        alpha_old, tau_old = alpha, tau
        if order == "alpha_first":
            alpha = update_alpha()
            tau = update_tau()
        else:
            tau = update_tau()
            alpha = update_alpha()
        delta = max(
            float(np.abs(alpha - alpha_old).max(initial=0.0)),
            float(np.abs(tau - tau_old).max(initial=0.0)),
        )
        if delta < tol:
            return alpha, tau, True
    logger.warning("BLUP iteration did not converge in %d sweeps", max_sweeps)
    return alpha, tau, False


def training_residuals(
    model: FittedMixedModel, train: PanelDataset | MixedArrays
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(residuals, gaps, is_first) with fitted random effects subtracted."""
    ma = _as_arrays(train)
    alpha = np.array([model.alpha_hat.get(h, 0.0) for h in ma.house_ids])
    tau = np.array([model.tau_hat.get(z, 0.0) for z in ma.zip_codes])
    resid = (
        _residual(ma, model.params.mu, model.params.beta)
        - alpha[ma.house_index]
        - tau[ma.zip_index]
    )
    return resid, ma.gap.copy(), ma.is_first.copy()


def predict(
    model: FittedMixedModel, house_id: str, zip_code: str, quarter: int
) -> float:
    """Predicted price in dollars; unseen houses and ZIPs contribute zero
    effects.  Constant in the gap time by construction."""
    p = model.params
    if not (1 <= quarter <= p.T):
        raise DomainError(f"quarter {quarter} outside 1..{p.T}")
    yhat = (
        p.mu
        + p.beta[quarter - 1]
        + model.alpha_hat.get(house_id, 0.0)
        + model.tau_hat.get(zip_code, 0.0)
    )
    return math.exp(yhat + model.msr / 2.0)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def to_dict(model: FittedMixedModel) -> dict:
    return {
        "format": FORMAT,
        "params": {
            "mu": model.params.mu,
            "beta": model.params.beta.tolist(),
            "sigma2_alpha": model.params.sigma2_alpha,
            "sigma2_tau": model.params.sigma2_tau,
            "sigma2_eps": model.params.sigma2_eps,
        },
        "alpha_hat": {h: model.alpha_hat[h] for h in sorted(model.alpha_hat)},
        "tau_hat": {z: model.tau_hat[z] for z in sorted(model.tau_hat)},
        "msr": model.msr,
        "iterations": model.iterations,
        "converged": model.converged,
        "loglik_trace": list(model.loglik_trace),
        "n_t": model.n_t.tolist() if model.n_t is not None else None,
    }


def from_dict(doc: dict) -> FittedMixedModel:
    if doc.get("format") != FORMAT:
        raise SchemaVersionError(
            f"expected format {FORMAT!r}, found {doc.get('format')!r}"
        )
    p = doc["params"]
    return FittedMixedModel(
        params=MixedParams(
            mu=p["mu"],
            beta=np.array(p["beta"], dtype=np.float64),
            sigma2_alpha=p["sigma2_alpha"],
            sigma2_tau=p["sigma2_tau"],
            sigma2_eps=p["sigma2_eps"],
        ),
        alpha_hat=dict(doc["alpha_hat"]),
        tau_hat=dict(doc["tau_hat"]),
        msr=doc["msr"],
        iterations=doc["iterations"],
        converged=doc["converged"],
        loglik_trace=list(doc["loglik_trace"]),
        n_t=np.array(doc["n_t"], dtype=np.float64) if doc.get("n_t") else None,
    )


def save(model: FittedMixedModel, path) -> None:
    from .persist import save_json

    save_json(to_dict(model), path)


def load(path) -> FittedMixedModel:
    from .persist import load_json

    return from_dict(load_json(path))
