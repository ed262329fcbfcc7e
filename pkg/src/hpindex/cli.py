"""Batch command-line front end.

Subcommands: ``fit``, ``evaluate``, ``index``, ``predict``,
``simulate``, ``diagnose``.  Every run writes a manifest JSON capturing
the command, configuration snapshot, inputs, outputs, and seed, so any
run can be reproduced exactly.  Report-producing commands write CSV
tables and render matching PNG figures alongside them (suppress with
``--no-plots``).

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical or
convergence error.  Failures are also emitted as machine-readable JSON
on stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, armodel, caseshiller, evaluate, mixedmodel, plots, simulate
from .armodel import ARFitConfig, FittedARModel
from .caseshiller import CSFit
from .data import PanelDataset
from .errors import DataError, HousePriceError, NumericalError, UnsupportedPredictionError
from .ingest import IngestConfig, read_panel_csv, write_panel_csv
from .mixedmodel import FittedMixedModel, MixedFitConfig
from .persist import load_json, load_model, save_json
from .rng import derive_seed

MANIFEST_FORMAT = "run-manifest/1"
ARTIFACT_VERSIONS = {
    "ar-model": armodel.FORMAT,
    "mixed-model": mixedmodel.FORMAT,
    "cs-fit": caseshiller.FORMAT,
    "sim-config": simulate.CONFIG_FORMAT,
    "run-manifest": MANIFEST_FORMAT,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the contract is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_ingest_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--period-months", type=int, default=3)
    parser.add_argument("--epoch", default="1985-07", help="year-month of period 1")
    parser.add_argument("--price-min", type=float, default=0.0)
    parser.add_argument(
        "--drop-whole-house",
        action="store_true",
        help="same-period rule removes the entire house, not just the period",
    )


def _ingest_config(args, seed: int = 0) -> IngestConfig:
    year, month = (int(p) for p in args.epoch.split("-"))
    return IngestConfig(
        period_months=args.period_months,
        epoch=(year, month),
        seed=seed,
        price_min=args.price_min,
        drop_whole_house=args.drop_whole_house,
    )


def _emit_error(exc: Exception, exit_code: int) -> None:
    doc = {
        "error": {
            "type": type(exc).__name__,
            "message": str(exc),
            "exit_code": exit_code,
        }
    }
    print(json.dumps(doc, sort_keys=True))


def _write_manifest(
    path: Path, command: str, config: dict, inputs: dict, outputs: list, seed, t0: float
) -> None:
    save_json(
        {
            "format": MANIFEST_FORMAT,
            "command": command,
            "config": config,
            "inputs": inputs,
            "outputs": [str(p) for p in outputs],
            "seed": seed,
            "wall_time_s": round(time.time() - t0, 3),
            "artifact_versions": ARTIFACT_VERSIONS,
            "package_version": __version__,
        },
        path,
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _write_index_csv(path: Path, series: evaluate.IndexSeries) -> Path:
    return _write_csv(
        path,
        ["quarter", "index"],
        [[q + 1, repr(float(v))] for q, v in enumerate(series.values)],
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_fit(args) -> int:
    t0 = time.time()
    config = _ingest_config(args)
    panel, rejections, filtered = read_panel_csv(args.input, config)
    out = Path(args.out)
    outputs = [out]

    converged = True
    if args.model == "ar":
        fit_config = ARFitConfig(
            max_iters=args.max_iters, blup_prior_factor=args.blup_prior_factor
        )
        model = armodel.fit(panel, fit_config)
        armodel.save(model, out)
        converged = model.converged
    elif args.model == "mixed":
        model = mixedmodel.fit(panel, MixedFitConfig(max_iters=args.max_iters))
        mixedmodel.save(model, out)
        converged = model.converged
    else:
        fit_ = caseshiller.fit(panel)
        caseshiller.save(fit_, out)

    report_path = out.with_suffix(out.suffix + ".ingest.json")
    save_json(
        {"rejections": rejections.to_dict(), "filtered": filtered.to_dict()},
        report_path,
    )
    outputs.append(report_path)
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "fit",
        {"model": args.model, "ingest": _config_snapshot(config), "max_iters": args.max_iters},
        {"input": str(args.input)},
        outputs,
        None,
        t0,
    )
    if not converged:
        raise NumericalError(f"{args.model} fit did not converge; model written to {out}")
    return 0


def _config_snapshot(config: IngestConfig) -> dict:
    return {
        "period_months": config.period_months,
        "epoch": f"{config.epoch[0]:04d}-{config.epoch[1]:02d}",
        "price_min": config.price_min,
        "drop_whole_house": config.drop_whole_house,
    }


def _cmd_evaluate(args) -> int:
    t0 = time.time()
    config = _ingest_config(args, seed=args.seed)
    panel, rejections, filtered = read_panel_csv(args.input, config)
    models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    unknown = set(models) - {"ar", "mixed", "cs"}
    if unknown:
        raise DataError(f"unknown models: {sorted(unknown)}")

    outcome = evaluate.run_evaluation(
        panel, seed=derive_seed(args.seed, "split"), models=models
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    eval_doc = outcome.report.to_dict()
    eval_doc["ingest"] = {
        "rejections": rejections.to_dict(),
        "filtered": filtered.to_dict(),
    }
    eval_path = out_dir / "eval.json"
    save_json(eval_doc, eval_path)
    outputs.append(eval_path)

    combined_rows = []
    labels = sorted(outcome.indices)
    for q in range(panel.T):
        combined_rows.append(
            [q + 1] + [repr(float(outcome.indices[lb].values[q])) for lb in labels]
        )
    outputs.append(_write_csv(out_dir / "indices.csv", ["quarter"] + labels, combined_rows))
    for label, series in outcome.indices.items():
        outputs.append(_write_index_csv(out_dir / f"index_{label}.csv", series))

    if outcome.correlation:
        outputs.append(
            _write_csv(
                out_dir / "correlation_by_gap.csv",
                ["gap", "correlation", "n"],
                [[r.gap, repr(r.correlation), r.n_pairs] for r in outcome.correlation],
            )
        )
    for label, rows in outcome.variance_by_gap.items():
        outputs.append(
            _write_csv(
                out_dir / f"variance_by_gap_{label}.csv",
                ["gap", "empirical_variance", "expected_variance", "n"],
                [[r.gap, repr(r.empirical), repr(r.expected), r.n] for r in rows],
            )
        )
    for label, rows in outcome.zip_effect_quantiles.items():
        outputs.append(
            _write_csv(
                out_dir / f"zip_effect_quantiles_{label}.csv",
                ["zip", "quantile", "effect", "n_sales"],
                [[r.group_id, repr(r.quantile), repr(r.effect), r.group_size] for r in rows],
            )
        )

    if not args.no_plots:
        outputs.append(plots.plot_indices(outcome.indices, out_dir / "indices.png"))
        if outcome.correlation:
            ar_model = outcome.models.get("ar")
            phi = ar_model.params.phi if ar_model is not None else None
            outputs.append(
                plots.plot_correlation_by_gap(
                    outcome.correlation, phi, out_dir / "correlation_by_gap.png"
                )
            )
        for label, rows in outcome.variance_by_gap.items():
            outputs.append(
                plots.plot_variance_by_gap(rows, label, out_dir / f"variance_by_gap_{label}.png")
            )
        for label, rows in outcome.zip_effect_quantiles.items():
            outputs.append(
                plots.plot_effect_quantiles(
                    rows, label, out_dir / f"zip_effect_quantiles_{label}.png"
                )
            )

    _write_manifest(
        out_dir / "manifest.json",
        "evaluate",
        {"models": list(models), "ingest": _config_snapshot(config)},
        {"input": str(args.input)},
        outputs,
        args.seed,
        t0,
    )
    if outcome.report.failures:
        for label, reason in sorted(outcome.report.failures.items()):
            print(f"note: {label} failed to fit: {reason}", file=sys.stderr)
    if not outcome.report.rmse_dollars:
        raise NumericalError("all requested models failed to fit")
    return 0


def _model_index(model) -> evaluate.IndexSeries:
    if isinstance(model, FittedARModel):
        return evaluate.ar_index(model)
    if isinstance(model, FittedMixedModel):
        return evaluate.mixed_index(model)
    return evaluate.cs_index(model)


def _cmd_index(args) -> int:
    t0 = time.time()
    model = load_model(args.model)
    series = _model_index(model)
    out = Path(args.out)
    outputs = [_write_index_csv(out, series)]
    if args.plot:
        outputs.append(plots.plot_indices({series.label: series}, out.with_suffix(".png")))
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "index",
        {},
        {"model": str(args.model)},
        outputs,
        None,
        t0,
    )
    return 0


def _cmd_predict(args) -> int:
    t0 = time.time()
    config = _ingest_config(args)
    model = load_model(args.model)
    panel, _, _ = read_panel_csv(args.sales, config)
    rows = []
    for _, house_id, sales in panel.iter_houses():
        for j, sale in enumerate(sales):
            prev = sales[j - 1] if j > 0 else None
            note = ""
            try:
                if isinstance(model, FittedARModel):
                    pred = armodel.predict(model, prev, sale.zip_code, sale.quarter)
                    if sale.zip_code not in model.tau_hat:
                        note = "unseen-zip"
                elif isinstance(model, FittedMixedModel):
                    pred = mixedmodel.predict(model, house_id, sale.zip_code, sale.quarter)
                    flags = []
                    if house_id not in model.alpha_hat:
                        flags.append("unseen-house")
                    if sale.zip_code not in model.tau_hat:
                        flags.append("unseen-zip")
                    note = "+".join(flags)
                else:
                    pred = caseshiller.predict(model, prev, sale.quarter)
            except UnsupportedPredictionError:
                pred = None
                note = "no-previous-sale"
            rows.append(
                [
                    house_id,
                    sale.zip_code,
                    sale.quarter,
                    repr(sale.price),
                    "" if pred is None else repr(pred),
                    note,
                ]
            )
    out = Path(args.out)
    _write_csv(
        out,
        ["house_id", "zip", "quarter", "actual_price", "predicted_price", "note"],
        rows,
    )
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "predict",
        {"ingest": _config_snapshot(config)},
        {"model": str(args.model), "sales": str(args.sales)},
        [out],
        None,
        t0,
    )
    return 0


def _cmd_simulate(args) -> int:
    t0 = time.time()
    doc = load_json(args.config)
    panel, truth = simulate.simulate_from_config(doc)
    out = Path(args.out)
    write_panel_csv(panel, out)
    truth_doc = {
        "format": "sim-truth/1",
        "kind": doc["kind"],
        "params": {
            k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in vars(truth).items()
        },
    }
    truth_path = out.with_suffix(out.suffix + ".truth.json")
    save_json(truth_doc, truth_path)
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "simulate",
        doc,
        {"config": str(args.config)},
        [out, truth_path],
        doc.get("seed"),
        t0,
    )
    return 0


def _cmd_diagnose(args) -> int:
    t0 = time.time()
    config = _ingest_config(args)
    model = load_model(args.model)
    panel, _, _ = read_panel_csv(args.train, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    if isinstance(model, FittedARModel):
        corr = evaluate.correlation_by_gap(model, panel)
        outputs.append(
            _write_csv(
                out_dir / "correlation_by_gap.csv",
                ["gap", "correlation", "n"],
                [[r.gap, repr(r.correlation), r.n_pairs] for r in corr],
            )
        )
        resid, gaps, is_first = armodel.training_residuals(model, panel)
        var_rows = evaluate.residual_variance_by_gap(
            resid[~is_first], gaps[~is_first], model.params
        )
        label = "ar"
        quantiles = (
            evaluate.normal_quantile_table(model.tau_hat, evaluate._zip_sizes(panel))
            if len(model.tau_hat) >= 3
            else []
        )
        if not args.no_plots:
            outputs.append(
                plots.plot_correlation_by_gap(
                    corr, model.params.phi, out_dir / "correlation_by_gap.png"
                )
            )
    elif isinstance(model, FittedMixedModel):
        resid, gaps, is_first = mixedmodel.training_residuals(model, panel)
        var_rows = evaluate.residual_variance_by_gap(
            resid[~is_first], gaps[~is_first], model.params
        )
        label = "mixed"
        quantiles = (
            evaluate.normal_quantile_table(model.tau_hat, evaluate._zip_sizes(panel))
            if len(model.tau_hat) >= 3
            else []
        )
    else:
        pairs = caseshiller.build_sale_pairs(panel)
        resid, gaps = caseshiller.stage_residuals(model, pairs, model.T)
        var_rows = evaluate.residual_variance_by_gap(resid, gaps, model)
        label = "cs"
        quantiles = []

    outputs.append(
        _write_csv(
            out_dir / f"variance_by_gap_{label}.csv",
            ["gap", "empirical_variance", "expected_variance", "n"],
            [[r.gap, repr(r.empirical), repr(r.expected), r.n] for r in var_rows],
        )
    )
    if quantiles:
        outputs.append(
            _write_csv(
                out_dir / f"zip_effect_quantiles_{label}.csv",
                ["zip", "quantile", "effect", "n_sales"],
                [[r.group_id, repr(r.quantile), repr(r.effect), r.group_size] for r in quantiles],
            )
        )
    if not args.no_plots:
        outputs.append(
            plots.plot_variance_by_gap(var_rows, label, out_dir / f"variance_by_gap_{label}.png")
        )
        if quantiles:
            outputs.append(
                plots.plot_effect_quantiles(
                    quantiles, label, out_dir / f"zip_effect_quantiles_{label}.png"
                )
            )

    _write_manifest(
        out_dir / "manifest.json",
        "diagnose",
        {"ingest": _config_snapshot(config)},
        {"model": str(args.model), "train": str(args.train)},
        outputs,
        None,
        t0,
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hpindex", description=__doc__)
    parser.add_argument("--version", action="version", version=f"hpindex {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model on a sales CSV")
    p.add_argument("input")
    p.add_argument("--model", choices=("ar", "mixed", "cs"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--blup-prior-factor", type=float, default=2.0)
    _add_ingest_flags(p)
    p.set_defaults(handler=_cmd_fit)

    p = sub.add_parser("evaluate", help="split, fit, predict, and score models")
    p.add_argument("input")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--models", default="ar,mixed,cs")
    p.add_argument("--no-plots", action="store_true")
    _add_ingest_flags(p)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("index", help="write a fitted model's price index")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(handler=_cmd_index)

    p = sub.add_parser("predict", help="predict prices for a sales CSV")
    p.add_argument("model")
    p.add_argument("sales")
    p.add_argument("--out", required=True)
    _add_ingest_flags(p)
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("simulate", help="draw a synthetic panel from a config JSON")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("diagnose", help="diagnostic tables/figures for a fitted model")
    p.add_argument("model")
    p.add_argument("train")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-plots", action="store_true")
    _add_ingest_flags(p)
    p.set_defaults(handler=_cmd_diagnose)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except HousePriceError as exc:
        _emit_error(exc, exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        _emit_error(exc, DataError.exit_code)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
