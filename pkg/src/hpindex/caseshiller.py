"""Arithmetic repeat-sales index fit by three-step instrumental variables.

Only consecutive sale pairs of the same house enter.  On the price
scale, with S pairs and T quarters, the system is

    w = X b + error,

where b holds the reciprocal indices for quarters 2..T (the index is
B_t = 1/b_t with B_1 = 1 by construction), X carries -price at the
first-sale quarter (when it is past quarter 1) and +price at the
second-sale quarter, the instrument matrix Zin has -1/+1 in the same
cells, and w equals the first-sale price for pairs whose first sale
falls in quarter 1 (zero otherwise).

The three steps:

1. instrumental variables: b = (Zin'X)^{-1} Zin'w;
2. regress the squared stage-1 residuals on the gap time,
   e^2 ~ alpha0 + alpha1 * gap, giving each pair the weight
   1/sqrt(fitted); the regression's intercept estimates twice the
   sale-specific error variance and its slope the per-quarter
   random-walk step variance of the implied price process;
3. refit with the weights: b = (Zin' Om^{-1} X)^{-1} Zin' Om^{-1} w,
   Om^{-1} = diag(1/fitted).

Any non-positive stage-2 fitted value halts the fit (the weights would
be undefined); near-singular instrument cross-products are an error
rather than a silent pseudo-inverse.

Prediction multiplies the previous sale price by the index ratio
B_target / B_previous, so a rising index raises the predicted price.
(The formula is sometimes printed with the reciprocal ratio
B_previous / B_target; on noise-free data constructed from a known
index path only the orientation used here reproduces the prices, which
is how it was validated.)  Prices are predicted directly on the dollar
scale, so no lognormal correction applies.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from scipy import sparse

from .data import PanelDataset, Sale, SalePair
from .errors import (
    DomainError,
    EmptyInputError,
    IdentifiabilityError,
    NegativeWeightError,
    SchemaVersionError,
    UnsupportedPredictionError,
)

__all__ = [
    "CSSystem",
    "CSFit",
    "build_sale_pairs",
    "build_system",
    "fit",
    "predict",
    "stage_residuals",
    "to_dict",
    "from_dict",
    "save",
    "load",
]

FORMAT = "cs-fit/1"
COND_LIMIT = 1e12


def build_sale_pairs(train: PanelDataset) -> list[SalePair]:
    """Consecutive within-house pairs; single-sale houses contribute none."""
    return train.sale_pairs()


@dataclass
class CSSystem:
    """Assembled design, instruments, response, and gap times."""

    x: sparse.csr_matrix  # (S, T-1)
    z: sparse.csr_matrix  # (S, T-1)
    w: np.ndarray  # (S,)
    gaps: np.ndarray  # (S,)
    t_first: np.ndarray
    t_second: np.ndarray
    house_ids: list[str]
    T: int

    @property
    def S(self) -> int:
        return len(self.w)


def build_system(pairs: list[SalePair], T: int) -> CSSystem:
    if not pairs:
        raise EmptyInputError("no repeat-sale pairs")
    S = len(pairs)
    rows, cols, x_vals, z_vals = [], [], [], []
    w = np.zeros(S)
    gaps = np.zeros(S)
    t_first = np.zeros(S, dtype=np.int64)
    t_second = np.zeros(S, dtype=np.int64)
    house_ids = []
    for s, pair in enumerate(pairs):
        t, t2 = pair.first_quarter, pair.second_quarter
        if not (1 <= t < t2 <= T):
            raise DomainError(f"pair quarters ({t}, {t2}) outside 1..{T}")
        house_ids.append(pair.house_id)
        gaps[s] = pair.gap
        t_first[s] = t
        t_second[s] = t2
        # column j holds quarter j+2
        rows.append(s)
        cols.append(t2 - 2)
        x_vals.append(pair.second_price)
        z_vals.append(1.0)
        if t > 1:
            rows.append(s)
            cols.append(t - 2)
            x_vals.append(-pair.first_price)
            z_vals.append(-1.0)
        else:
            w[s] = pair.first_price
    shape = (S, T - 1)
    x = sparse.csr_matrix((x_vals, (rows, cols)), shape=shape)
    z = sparse.csr_matrix((z_vals, (rows, cols)), shape=shape)
    return CSSystem(
        x=x, z=z, w=w, gaps=gaps, t_first=t_first, t_second=t_second,
        house_ids=house_ids, T=T,
    )


@dataclass
class CSFit:
    b: np.ndarray  # (T-1,) reciprocal indices for quarters 2..T
    B: np.ndarray  # (T,) price index, B[0] = 1
    alpha0: float
    alpha1: float
    weights: np.ndarray  # (S,) reciprocal square roots of stage-2 fitted values

    @property
    def T(self) -> int:
        return len(self.B)


def _solve_iv(z: sparse.csr_matrix, x: sparse.csr_matrix, w: np.ndarray, stage: str) -> np.ndarray:
    ztx = np.asarray((z.T @ x).todense())
    cond = np.linalg.cond(ztx)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IdentifiabilityError(
            f"{stage}: instrument cross-product is near-singular (cond={cond:.3e})"
        )
    return np.linalg.solve(ztx, z.T @ w)


def fit(pairs: list[SalePair] | PanelDataset, T: int | None = None) -> CSFit:
    """Three-step weighted instrumental-variables fit.

    Accepts either a pair list with an explicit ``T`` or a panel (pairs
    and T are derived).  Every quarter 2..T must be touched by at least
    one pair, else the system is singular.
    """
    if isinstance(pairs, PanelDataset):
        T = pairs.T
        pairs = build_sale_pairs(pairs)
    if T is None:
        raise ValueError("T required when passing a raw pair list")
    system = build_system(pairs, T)

    touched = np.zeros(T + 1, dtype=bool)
    touched[system.t_second] = True
    touched[system.t_first[system.t_first > 1]] = True
    untouched = [t for t in range(2, T + 1) if not touched[t]]
    if untouched:
        raise IdentifiabilityError(f"quarters untouched by any sale pair: {untouched}")

    b1 = _solve_iv(system.z, system.x, system.w, "stage 1")
    resid = system.w - system.x @ b1

    # stage 2: squared residuals against gap time
    A = np.column_stack([np.ones(system.S), system.gaps])
    coef, *_ = np.linalg.lstsq(A, resid**2, rcond=None)
    alpha0, alpha1 = float(coef[0]), float(coef[1])
    fitted = alpha0 + alpha1 * system.gaps
    bad = np.nonzero(fitted <= 0.0)[0]
    if len(bad):
        named = [(system.house_ids[i], int(system.gaps[i])) for i in bad[:10]]
        raise NegativeWeightError(
            f"{len(bad)} sale pairs have non-positive stage-2 fitted values; "
            f"first offenders (house, gap): {named}"
        )

    om_inv = 1.0 / fitted
    zw = system.z.multiply(om_inv[:, None]).tocsr()  # rows of Zin' Om^{-1}
    b3 = _solve_iv(zw, system.x, system.w, "stage 3")

    B = np.empty(T)
    B[0] = 1.0
    B[1:] = 1.0 / b3
    return CSFit(b=b3, B=B, alpha0=alpha0, alpha1=alpha1, weights=1.0 / np.sqrt(fitted))


def stage_residuals(fit_: CSFit, pairs: list[SalePair], T: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted residuals w - X b of the final fit, with gap times.

    These are the price-scale residuals whose per-gap variance the
    stage-2 regression models as alpha0 + alpha1 * gap.
    """
    system = build_system(pairs, T or fit_.T)
    resid = system.w - system.x @ fit_.b
    return resid, system.gaps.copy()


def predict(fit_: CSFit, prev_sale: Sale | None, quarter: int) -> float:
    """Index-ratio prediction: previous price times B[quarter]/B[prev quarter]."""
    if prev_sale is None:
        raise UnsupportedPredictionError(
            "repeat-sales prediction requires a previous sale"
        )
    T = fit_.T
    if not (1 <= quarter <= T):
        raise DomainError(f"quarter {quarter} outside 1..{T}")
    if not (1 <= prev_sale.quarter <= T):
        raise DomainError(f"previous quarter {prev_sale.quarter} outside 1..{T}")
    return float(fit_.B[quarter - 1] / fit_.B[prev_sale.quarter - 1] * prev_sale.price)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def to_dict(fit_: CSFit) -> dict:
    return {
        "format": FORMAT,
        "b": fit_.b.tolist(),
        "B": fit_.B.tolist(),
        "alpha0": fit_.alpha0,
        "alpha1": fit_.alpha1,
        "weights": fit_.weights.tolist(),
    }


def from_dict(doc: dict) -> CSFit:
    if doc.get("format") != FORMAT:
        raise SchemaVersionError(
            f"expected format {FORMAT!r}, found {doc.get('format')!r}"
        )
    return CSFit(
        b=np.array(doc["b"], dtype=np.float64),
        B=np.array(doc["B"], dtype=np.float64),
        alpha0=doc["alpha0"],
        alpha1=doc["alpha1"],
        weights=np.array(doc["weights"], dtype=np.float64),
    )


def save(fit_: CSFit, path) -> None:
    from .persist import save_json

    save_json(to_dict(fit_), path)


def load(path) -> CSFit:
    from .persist import load_json

    return from_dict(load_json(path))
