"""Generative samplers for the three data-generating processes.

Every acceptance and recovery test runs against simulated panels with
known truth, since no real transaction data ships with the package.
Three samplers mirror the three estimators:

* AR: log price = mu + beta_t + tau_z + u, with u a latent stationary
  AR(1) observed at sale times (first-sale error has the marginal
  variance sigma2_eps/(1-phi^2), later sales the conditional variance
  sigma2_eps*(1-phi**(2*gap))/(1-phi^2)).
* mixed: log price = mu + beta_t + alpha_house + tau_zip + iid error;
  no gap-time dependence at all.
* random-walk pairs: the deflated price (price divided by the index
  level) of a house is a base value plus a Gaussian random walk across
  calendar quarters plus an iid sale-specific error, so the variance of
  a deflated price difference over a pair with gap h is
  2*sigma2_u + h*sigma2_v.  The walk lives on the deflated dollar
  scale: that is the process under which the arithmetic three-step
  estimator's stage-2 regression recovers (2*sigma2_u, sigma2_v)
  exactly, which the acceptance suite checks.

Sale counts per house are drawn from a configurable distribution over
{1, 2, 3, 4} whose default roughly matches observed sale-frequency
mixes (66% / 27% / 6% / 1%); sale quarters are uniform without
replacement (a geometric-gap mode exists for gap-sensitivity tests).
Randomness is fully deterministic given the seed: each house gets its
own derived RNG stream keyed by (seed, stream tag, zip index, house
index), so generation is order-independent and parallelizable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .armodel import ARParams
from .data import PanelDataset, Sale
from .errors import DomainError
from .mixedmodel import MixedParams

__all__ = [
    "SimConfig",
    "ARTruth",
    "MixedTruth",
    "CSTruth",
    "simulate_ar_panel",
    "simulate_mixed_panel",
    "simulate_cs_panel",
    "simulate_from_config",
    "config_to_dict",
    "config_from_dict",
]

CONFIG_FORMAT = "sim-config/1"

# stream tags for per-entity RNG derivation
_TAG_ZIP = 0
_TAG_QUARTERS = 1
_TAG_PRICES = 2
_TAG_BETA = 9


@dataclass(frozen=True)
class SimConfig:
    T: int = 40
    Z: int = 20
    houses_per_zip: int = 100
    sale_count_probs: tuple[float, ...] = (0.66, 0.27, 0.06, 0.01)
    seed: int = 0
    gap_mode: str = "uniform"  # or "geometric"
    mean_gap: float = 8.0

    def __post_init__(self) -> None:
        probs = np.asarray(self.sale_count_probs, dtype=np.float64)
        if abs(float(probs.sum()) - 1.0) > 1e-9 or (probs < 0).any():
            raise DomainError("sale_count_probs must be a probability vector")
        max_count = int(np.nonzero(probs > 0)[0].max()) + 1
        if max_count > self.T:
            raise DomainError(
                f"sale counts up to {max_count} infeasible with T={self.T}"
            )
        if self.gap_mode not in ("uniform", "geometric"):
            raise DomainError(f"unknown gap_mode {self.gap_mode!r}")


@dataclass(frozen=True)
class ARTruth:
    mu: float = 11.7
    phi: float = 0.99
    sigma2_eps: float = 0.0015
    sigma2_tau: float = 0.10
    beta: np.ndarray | None = None  # sampled when None
    beta_step_sd: float = 0.02


@dataclass(frozen=True)
class MixedTruth:
    mu: float = 11.7
    sigma2_alpha: float = 0.05
    sigma2_tau: float = 0.10
    sigma2_eps: float = 0.01
    beta: np.ndarray | None = None
    beta_step_sd: float = 0.02


@dataclass(frozen=True)
class CSTruth:
    sigma2_u: float = 2.5e7  # deflated-dollar scale
    sigma2_v: float = 4.0e6
    index: np.ndarray | None = None  # flat when None
    base_price: float = 150000.0
    base_sd_log: float = 0.4


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng((seed,) + key)


def _zip_name(z: int) -> str:
    return f"Z{z:03d}"


def _house_name(z: int, h: int) -> str:
    return f"Z{z:03d}-H{h:05d}"


def _draw_quarters(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    count = int(rng.choice(len(config.sale_count_probs), p=config.sale_count_probs)) + 1
    count = min(count, config.T)
    if config.gap_mode == "uniform":
        quarters = np.sort(rng.choice(config.T, size=count, replace=False)) + 1
        return quarters.astype(np.int64)
    quarters = [int(rng.integers(1, config.T + 1))]
    while len(quarters) < count:
        step = int(rng.geometric(min(1.0, 1.0 / config.mean_gap)))
        nxt = quarters[-1] + step
        if nxt > config.T:
            break
        quarters.append(nxt)
    return np.array(quarters, dtype=np.int64)


def _all_quarters(config: SimConfig) -> Iterator[tuple[int, int, np.ndarray]]:
    for z in range(config.Z):
        for h in range(config.houses_per_zip):
            yield z, h, _draw_quarters(config, _rng(config.seed, _TAG_QUARTERS, z, h))


def _center_beta(
    mu: float, beta: np.ndarray | None, step_sd: float, n_t: np.ndarray, seed: int
) -> tuple[float, np.ndarray]:
    """Center beta to sum_t n_t beta_t = 0, folding the shift into mu so
    the generated mean levels are unchanged.  Samples a random-walk path
    when beta is not supplied."""
    T = len(n_t)
    if beta is None:
        steps = _rng(seed, _TAG_BETA).normal(0.0, step_sd, size=T)
        beta = np.cumsum(steps)
    beta = np.asarray(beta, dtype=np.float64)
    if len(beta) != T:
        raise DomainError(f"beta has length {len(beta)}, expected {T}")
    total = float(n_t.sum())
    shift = float(n_t @ beta) / total if total else 0.0
    return mu + shift, beta - shift


def _make_sale(house_id: str, zip_code: str, quarter: int, log_price: float, ordinal: int) -> Sale:
    price = math.exp(log_price)
    return Sale(
        house_id=house_id,
        zip_code=zip_code,
        quarter=int(quarter),
        price=price,
        log_price=math.log(price),
        sale_ordinal=ordinal,
    )


def simulate_ar_panel(
    config: SimConfig, truth: ARTruth | None = None
) -> tuple[PanelDataset, ARParams, dict[str, np.ndarray]]:
    """Draw a panel from the AR process.

    Returns the panel, the exact parameters used (beta centered against
    the realized quarter counts), and the latent AR values per house for
    covariance checks.
    """
    truth = truth or ARTruth()
    if not (0.0 <= truth.phi < 1.0):
        raise DomainError(f"phi={truth.phi} outside [0, 1)")
    drawn = list(_all_quarters(config))
    n_t = np.zeros(config.T, dtype=np.float64)
    for _, _, quarters in drawn:
        for q in quarters:
            n_t[q - 1] += 1
    mu, beta = _center_beta(truth.mu, truth.beta, truth.beta_step_sd, n_t, config.seed)
    params = ARParams(
        mu=mu, beta=beta, phi=truth.phi,
        sigma2_eps=truth.sigma2_eps, sigma2_tau=truth.sigma2_tau,
    )

    marginal_sd = math.sqrt(truth.sigma2_eps / (1.0 - truth.phi**2))
    tau_sd = math.sqrt(truth.sigma2_tau)
    sales: list[Sale] = []
    latents: dict[str, np.ndarray] = {}
    for z in range(config.Z):
        tau = float(_rng(config.seed, _TAG_ZIP, z).standard_normal()) * tau_sd
        zip_code = _zip_name(z)
        for h in range(config.houses_per_zip):
            quarters = drawn[z * config.houses_per_zip + h][2]
            rng = _rng(config.seed, _TAG_PRICES, z, h)
            house_id = _house_name(z, h)
            u = np.empty(len(quarters))
            u[0] = rng.standard_normal() * marginal_sd
            for j in range(1, len(quarters)):
                gap = quarters[j] - quarters[j - 1]
                cond_sd = math.sqrt(
                    truth.sigma2_eps * (1.0 - truth.phi ** (2 * gap)) / (1.0 - truth.phi**2)
                )
                u[j] = truth.phi**gap * u[j - 1] + rng.standard_normal() * cond_sd
            latents[house_id] = u
            for j, q in enumerate(quarters):
                log_price = mu + beta[q - 1] + tau + u[j]
                sales.append(_make_sale(house_id, zip_code, q, log_price, j + 1))
    return PanelDataset.from_sales(sales, T=config.T), params, latents


def simulate_mixed_panel(
    config: SimConfig, truth: MixedTruth | None = None
) -> tuple[PanelDataset, MixedParams]:
    """Draw a panel with iid errors and random house/ZIP intercepts."""
    truth = truth or MixedTruth()
    drawn = list(_all_quarters(config))
    n_t = np.zeros(config.T, dtype=np.float64)
    for _, _, quarters in drawn:
        for q in quarters:
            n_t[q - 1] += 1
    mu, beta = _center_beta(truth.mu, truth.beta, truth.beta_step_sd, n_t, config.seed)
    params = MixedParams(
        mu=mu, beta=beta, sigma2_alpha=truth.sigma2_alpha,
        sigma2_tau=truth.sigma2_tau, sigma2_eps=truth.sigma2_eps,
    )

    alpha_sd = math.sqrt(truth.sigma2_alpha)
    tau_sd = math.sqrt(truth.sigma2_tau)
    eps_sd = math.sqrt(truth.sigma2_eps)
    sales: list[Sale] = []
    for z in range(config.Z):
        tau = float(_rng(config.seed, _TAG_ZIP, z).standard_normal()) * tau_sd
        zip_code = _zip_name(z)
        for h in range(config.houses_per_zip):
            quarters = drawn[z * config.houses_per_zip + h][2]
            rng = _rng(config.seed, _TAG_PRICES, z, h)
            house_id = _house_name(z, h)
            alpha = float(rng.standard_normal()) * alpha_sd
            for j, q in enumerate(quarters):
                log_price = mu + beta[q - 1] + alpha + tau + float(rng.standard_normal()) * eps_sd
                sales.append(_make_sale(house_id, zip_code, q, log_price, j + 1))
    return PanelDataset.from_sales(sales, T=config.T), params


def simulate_cs_panel(
    config: SimConfig, truth: CSTruth | None = None
) -> tuple[PanelDataset, CSTruth]:
    """Draw a panel whose deflated prices follow base + random walk + noise.

    Prices are index[t] * (base + walk + noise) in dollars; a house is
    redrawn (same stream) in the rare event a path goes non-positive.
    """
    truth = truth or CSTruth()
    index = (
        np.ones(config.T)
        if truth.index is None
        else np.asarray(truth.index, dtype=np.float64)
    )
    if len(index) != config.T or (index <= 0).any():
        raise DomainError("index path must have length T with positive values")
    truth = replace(truth, index=index)

    u_sd = math.sqrt(truth.sigma2_u)
    v_sd = math.sqrt(truth.sigma2_v)
    sales: list[Sale] = []
    for z in range(config.Z):
        zip_code = _zip_name(z)
        for h in range(config.houses_per_zip):
            quarters = _draw_quarters(config, _rng(config.seed, _TAG_QUARTERS, z, h))
            rng = _rng(config.seed, _TAG_PRICES, z, h)
            house_id = _house_name(z, h)
            for _attempt in range(100):
                base = truth.base_price * math.exp(
                    float(rng.standard_normal()) * truth.base_sd_log
                )
                gaps = np.diff(quarters).astype(np.float64)
                walk = np.concatenate(
                    [[0.0], np.cumsum(rng.standard_normal(len(gaps)) * np.sqrt(gaps) * v_sd)]
                )
                noise = rng.standard_normal(len(quarters)) * u_sd
                deflated = base + walk + noise
                if (deflated > 0).all():
                    break
            else:
                raise DomainError(
                    "could not draw a positive price path; reduce sigma2_u/sigma2_v "
                    "relative to base_price"
                )
            for j, q in enumerate(quarters):
                price = index[q - 1] * deflated[j]
                sales.append(
                    Sale(
                        house_id=house_id,
                        zip_code=zip_code,
                        quarter=int(q),
                        price=price,
                        log_price=math.log(price),
                        sale_ordinal=j + 1,
                    )
                )
    return PanelDataset.from_sales(sales, T=config.T), truth


# ---------------------------------------------------------------------------
# JSON config (CLI surface)
# ---------------------------------------------------------------------------


def config_to_dict(config: SimConfig, kind: str, truth) -> dict:
    doc = {
        "format": CONFIG_FORMAT,
        "kind": kind,
        "T": config.T,
        "Z": config.Z,
        "houses_per_zip": config.houses_per_zip,
        "sale_count_probs": list(config.sale_count_probs),
        "seed": config.seed,
        "gap_mode": config.gap_mode,
        "mean_gap": config.mean_gap,
    }
    if kind == "ar":
        doc["truth"] = {
            "mu": truth.mu,
            "phi": truth.phi,
            "sigma2_eps": truth.sigma2_eps,
            "sigma2_tau": truth.sigma2_tau,
            "beta": None if truth.beta is None else np.asarray(truth.beta).tolist(),
            "beta_step_sd": truth.beta_step_sd,
        }
    elif kind == "mixed":
        doc["truth"] = {
            "mu": truth.mu,
            "sigma2_alpha": truth.sigma2_alpha,
            "sigma2_tau": truth.sigma2_tau,
            "sigma2_eps": truth.sigma2_eps,
            "beta": None if truth.beta is None else np.asarray(truth.beta).tolist(),
            "beta_step_sd": truth.beta_step_sd,
        }
    elif kind == "cs":
        doc["truth"] = {
            "sigma2_u": truth.sigma2_u,
            "sigma2_v": truth.sigma2_v,
            "index": None if truth.index is None else np.asarray(truth.index).tolist(),
            "base_price": truth.base_price,
            "base_sd_log": truth.base_sd_log,
        }
    else:
        raise DomainError(f"unknown simulation kind {kind!r}")
    return doc


def config_from_dict(doc: dict) -> tuple[SimConfig, str, ARTruth | MixedTruth | CSTruth]:
    from .errors import SchemaVersionError

    if doc.get("format") != CONFIG_FORMAT:
        raise SchemaVersionError(
            f"expected format {CONFIG_FORMAT!r}, found {doc.get('format')!r}"
        )
    config = SimConfig(
        T=int(doc["T"]),
        Z=int(doc["Z"]),
        houses_per_zip=int(doc["houses_per_zip"]),
        sale_count_probs=tuple(doc.get("sale_count_probs", (0.66, 0.27, 0.06, 0.01))),
        seed=int(doc.get("seed", 0)),
        gap_mode=doc.get("gap_mode", "uniform"),
        mean_gap=float(doc.get("mean_gap", 8.0)),
    )
    kind = doc["kind"]
    t = doc.get("truth", {})
    beta = t.get("beta")
    if kind == "ar":
        truth = ARTruth(
            mu=t.get("mu", 11.7),
            phi=t.get("phi", 0.99),
            sigma2_eps=t.get("sigma2_eps", 0.0015),
            sigma2_tau=t.get("sigma2_tau", 0.10),
            beta=None if beta is None else np.asarray(beta, dtype=np.float64),
            beta_step_sd=t.get("beta_step_sd", 0.02),
        )
    elif kind == "mixed":
        truth = MixedTruth(
            mu=t.get("mu", 11.7),
            sigma2_alpha=t.get("sigma2_alpha", 0.05),
            sigma2_tau=t.get("sigma2_tau", 0.10),
            sigma2_eps=t.get("sigma2_eps", 0.01),
            beta=None if beta is None else np.asarray(beta, dtype=np.float64),
            beta_step_sd=t.get("beta_step_sd", 0.02),
        )
    elif kind == "cs":
        index = t.get("index")
        truth = CSTruth(
            sigma2_u=t.get("sigma2_u", 2.5e7),
            sigma2_v=t.get("sigma2_v", 4.0e6),
            index=None if index is None else np.asarray(index, dtype=np.float64),
            base_price=t.get("base_price", 150000.0),
            base_sd_log=t.get("base_sd_log", 0.4),
        )
    else:
        raise DomainError(f"unknown simulation kind {kind!r}")
    return config, kind, truth


def simulate_from_config(doc: dict):
    """Dispatch on the config's kind; returns (panel, truth_used)."""
    config, kind, truth = config_from_dict(doc)
    if kind == "ar":
        panel, params, _ = simulate_ar_panel(config, truth)
        return panel, params
    if kind == "mixed":
        return simulate_mixed_panel(config, truth)
    return simulate_cs_panel(config, truth)
