"""Shared fixtures and panel-building helpers."""

from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hpindex.data import PanelDataset, Sale


def panel_from_rows(rows, T=None) -> PanelDataset:
    """Build a panel from (house_id, zip_code, quarter, price) tuples."""
    by_house: dict[str, list] = {}
    for house, zip_code, quarter, price in rows:
        by_house.setdefault(house, []).append((zip_code, quarter, price))
    sales = []
    for house, items in by_house.items():
        items.sort(key=lambda it: it[1])
        for j, (zip_code, quarter, price) in enumerate(items, start=1):
            sales.append(
                Sale(
                    house_id=house,
                    zip_code=zip_code,
                    quarter=quarter,
                    price=float(price),
                    log_price=math.log(price),
                    sale_ordinal=j,
                )
            )
    return PanelDataset.from_sales(sales, T=T)


def scale_panel(panel: PanelDataset, c: float) -> PanelDataset:
    """Multiply every price by c > 0."""
    sales = []
    for sale in panel.iter_sales():
        price = sale.price * c
        sales.append(
            Sale(
                house_id=sale.house_id,
                zip_code=sale.zip_code,
                quarter=sale.quarter,
                price=price,
                log_price=math.log(price),
                sale_ordinal=sale.sale_ordinal,
            )
        )
    return PanelDataset.from_sales(sales, T=panel.T)


@pytest.fixture(scope="session")
def small_ar_panel():
    """A modest AR panel with known truth, reused by several test modules."""
    from hpindex.simulate import ARTruth, SimConfig, simulate_ar_panel

    config = SimConfig(T=12, Z=5, houses_per_zip=40, seed=1234)
    truth = ARTruth(mu=11.5, phi=0.95, sigma2_eps=0.01, sigma2_tau=0.05)
    panel, params, latents = simulate_ar_panel(config, truth)
    return panel, params, latents


def random_params(rng: np.random.Generator, T: int):
    """Admissible AR parameters away from boundaries, for oracle checks."""
    from hpindex.armodel import ARParams

    beta = rng.normal(0.0, 0.1, size=T)
    return ARParams(
        mu=float(rng.normal(11.0, 0.5)),
        beta=beta,
        phi=float(rng.uniform(0.5, 0.97)),
        sigma2_eps=float(rng.uniform(0.002, 0.05)),
        sigma2_tau=float(rng.uniform(0.005, 0.1)),
    )
