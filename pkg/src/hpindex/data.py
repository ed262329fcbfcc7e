"""Core value types shared by every estimator.

A :class:`Sale` is one transaction of one house: the house and ZIP are
opaque identifiers, the quarter is a 1-based position on a fixed timeline
of ``T`` periods, and prices are stored both in dollars and as natural
logs.  A :class:`PanelDataset` groups sales by ZIP then house in a
canonical sorted order; that order is also the fixed reduction order used
by the fitting code so results are reproducible.

All types here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import MalformedSeriesError

__all__ = [
    "Sale",
    "SalePair",
    "PanelDataset",
    "TestRecord",
    "TrainTestSplit",
    "gap_times",
]


@dataclass(frozen=True, slots=True)
class Sale:
    """One sale of one house.

    ``sale_ordinal`` is the 1-based position of this sale within the
    house's observed series, ordered by quarter.
    """

    house_id: str
    zip_code: str
    quarter: int
    price: float
    log_price: float
    sale_ordinal: int


@dataclass(frozen=True, slots=True)
class SalePair:
    """Two consecutive sales of the same house."""

    house_id: str
    zip_code: str
    first_quarter: int
    second_quarter: int
    first_price: float
    second_price: float

    @property
    def gap(self) -> int:
        return self.second_quarter - self.first_quarter


def gap_times(sales: Sequence[Sale]) -> list[int]:
    """Gaps (in quarters) between consecutive sales of one house.

    Returns an empty list for a single sale.  Raises
    :class:`MalformedSeriesError` if quarters are not strictly increasing.
    """
    quarters = [s.quarter for s in sales]
    gaps = []
    for prev, cur in zip(quarters, quarters[1:]):
        if cur <= prev:
            raise MalformedSeriesError(
                f"sale quarters not strictly increasing: {quarters}"
            )
        gaps.append(cur - prev)
    return gaps


@dataclass(frozen=True)
class PanelDataset:
    """Cleaned, quarter-binned sale records grouped by ZIP then house.

    ``zips`` maps ZIP code -> house id -> tuple of sales ordered by
    quarter.  ``T`` is the number of quarters on the timeline; every
    sale's quarter lies in ``1..T``.  Iteration order everywhere is
    ZIPs sorted lexicographically, houses sorted within ZIP, sales by
    quarter; per-ZIP partial results are accumulated in that order.
    """

    zips: Mapping[str, Mapping[str, tuple[Sale, ...]]]
    T: int

    @classmethod
    def from_sales(cls, sales: Iterable[Sale], T: int | None = None) -> "PanelDataset":
        grouped: dict[str, dict[str, list[Sale]]] = {}
        max_q = 0
        for sale in sales:
            grouped.setdefault(sale.zip_code, {}).setdefault(sale.house_id, []).append(sale)
            max_q = max(max_q, sale.quarter)
        zips = {
            z: {
                h: tuple(sorted(hs, key=lambda s: s.quarter))
                for h, hs in sorted(houses.items())
            }
            for z, houses in sorted(grouped.items())
        }
        return cls(zips=zips, T=T if T is not None else max_q)

    # -- counts ---------------------------------------------------------

    @property
    def N(self) -> int:
        return sum(len(hs) for houses in self.zips.values() for hs in houses.values())

    @property
    def Z(self) -> int:
        return len(self.zips)

    @property
    def n_houses(self) -> int:
        return sum(len(houses) for houses in self.zips.values())

    def n_t(self) -> np.ndarray:
        """Sale counts per quarter, shape (T,)."""
        counts = np.zeros(self.T, dtype=np.int64)
        for sale in self.iter_sales():
            counts[sale.quarter - 1] += 1
        return counts

    # -- iteration (canonical order) -------------------------------------

    def iter_houses(self) -> Iterator[tuple[str, str, tuple[Sale, ...]]]:
        for z in sorted(self.zips):
            houses = self.zips[z]
            for h in sorted(houses):
                yield z, h, houses[h]

    def iter_sales(self) -> Iterator[Sale]:
        for _, _, sales in self.iter_houses():
            yield from sales

    def sale_pairs(self) -> list[SalePair]:
        """All consecutive within-house pairs, in canonical order."""
        pairs = []
        for z, h, sales in self.iter_houses():
            for prev, cur in zip(sales, sales[1:]):
                pairs.append(
                    SalePair(
                        house_id=h,
                        zip_code=z,
                        first_quarter=prev.quarter,
                        second_quarter=cur.quarter,
                        first_price=prev.price,
                        second_price=cur.price,
                    )
                )
        return pairs

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        """Check every structural invariant; raises on the first violation."""
        seen_houses: dict[str, str] = {}
        for z, h, sales in self.iter_houses():
            if h in seen_houses:
                raise MalformedSeriesError(
                    f"house {h!r} appears in ZIPs {seen_houses[h]!r} and {z!r}"
                )
            seen_houses[h] = z
            if not sales:
                raise MalformedSeriesError(f"house {h!r} has no sales")
            for j, sale in enumerate(sales, start=1):
                if sale.sale_ordinal != j:
                    raise MalformedSeriesError(
                        f"house {h!r}: ordinal {sale.sale_ordinal} at position {j}"
                    )
                if not (1 <= sale.quarter <= self.T):
                    raise MalformedSeriesError(
                        f"house {h!r}: quarter {sale.quarter} outside 1..{self.T}"
                    )
                if sale.price <= 0:
                    raise MalformedSeriesError(f"house {h!r}: price {sale.price} <= 0")
                if abs(sale.log_price - math.log(sale.price)) > 1e-12:
                    raise MalformedSeriesError(
                        f"house {h!r}: log_price inconsistent with price"
                    )
            gap_times(sales)  # raises if quarters are not strictly increasing


@dataclass(frozen=True, slots=True)
class TestRecord:
    """A held-out sale plus the immediately preceding sale (kept in train)."""

    sale: Sale
    prev: Sale


@dataclass(frozen=True)
class TrainTestSplit:
    train: PanelDataset
    test: tuple[TestRecord, ...] = field(default_factory=tuple)
    seed: int = 0

    @property
    def test_fraction(self) -> float:
        n_test = len(self.test)
        return n_test / (self.train.N + n_test)
