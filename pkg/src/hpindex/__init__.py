"""House price indices and sale-price prediction from repeat sales.

Three estimators behind one data model and evaluation harness:

* :mod:`hpindex.armodel` -- gap-time autoregressive mixed model fit by
  coordinate-ascent maximum likelihood (the primary estimator);
* :mod:`hpindex.mixedmodel` -- conventional mixed effects comparison;
* :mod:`hpindex.caseshiller` -- arithmetic repeat-sales index fit by
  three-step weighted instrumental variables.

:mod:`hpindex.ingest` parses and cleans sales CSVs and produces the
train/test split; :mod:`hpindex.simulate` draws synthetic panels with
known truth; :mod:`hpindex.evaluate` builds indices, scores predictions,
and runs the diagnostics; :mod:`hpindex.cli` ties it all together.
"""

from . import armodel, caseshiller, evaluate, ingest, mixedmodel, plots, simulate
from .data import PanelDataset, Sale, SalePair, TestRecord, TrainTestSplit, gap_times
from .errors import (
    ConvergenceError,
    DataError,
    DomainError,
    EmptyInputError,
    HousePriceError,
    IdentifiabilityError,
    MalformedSeriesError,
    NegativeWeightError,
    NumericalError,
    SchemaVersionError,
    UnsupportedPredictionError,
)
from .ingest import IngestConfig, bin_and_filter, parse_sales_csv, split_train_test

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "armodel",
    "caseshiller",
    "evaluate",
    "ingest",
    "mixedmodel",
    "plots",
    "simulate",
    "Sale",
    "SalePair",
    "PanelDataset",
    "TestRecord",
    "TrainTestSplit",
    "gap_times",
    "IngestConfig",
    "parse_sales_csv",
    "bin_and_filter",
    "split_train_test",
    "HousePriceError",
    "DataError",
    "DomainError",
    "EmptyInputError",
    "MalformedSeriesError",
    "SchemaVersionError",
    "UnsupportedPredictionError",
    "NumericalError",
    "IdentifiabilityError",
    "ConvergenceError",
    "NegativeWeightError",
]
