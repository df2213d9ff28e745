"""Command-line entry points: simulate | fit | predict | evaluate | summarize.

Every command takes ``--out`` for its artifact directory and exits 0 on
success; failures print one machine-parsable ``error: <kind>: <message>`` line
to stderr and exit nonzero (2 for a non-converged fit without
``--allow-nonconverged``, 1 otherwise). Progress goes to stderr and is
silenced by setting ``SPARSEDEMAND_QUIET``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from sparsedemand import evaluation as ev
from sparsedemand.config import (
    ConfigError,
    RunConfig,
    ScenarioConfig,
    format_kv,
    quiet,
    read_kv,
)
from sparsedemand.covariates import MissingPriceError
from sparsedemand.inference import (
    InitializationError,
    PosteriorDraws,
    diagnostics,
    nonconverged,
    run_mcmc,
    write_diagnostics_csv,
)
from sparsedemand.model import (
    ModelData,
    VariantMismatchError,
    build_posterior,
    param_layout,
    variant_structure,
)
from sparsedemand.panel import PanelError, emit_csv, ingest_csv, summarize, write_summary_csv
from sparsedemand.simulation import ScenarioSpec, simulate_hierarchical, simulate_panel


def _progress(label: str):
    if quiet():
        return None

    def report(it, total):
        print(f"  [{label}] iteration {it}/{total}", file=sys.stderr)

    return report


def _say(message: str) -> None:
    if not quiet():
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# simulate


def _write_truth(result, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["product", "parameter", "value"])
        for product, pp in zip(result.panel.products, result.params):
            if pp.theta_z is not None:
                for j, v in enumerate(np.atleast_1d(pp.theta_z), start=1):
                    writer.writerow([product, f"theta_z[{j}]", format(v, ".17g")])
            for attr, tag in (("shot_z", "z"), ("cross_shot_z", "xz"), ("shot_c", "c")):
                sp = getattr(pp, attr)
                if sp is not None:
                    writer.writerow([product, f"kappa_{tag}", format(sp.kappa, ".17g")])
                    writer.writerow([product, f"mu_{tag}", format(sp.mu, ".17g")])
                    writer.writerow([product, f"tau_{tag}", format(sp.tau, ".17g")])
            if pp.theta_c is not None:
                for j, v in enumerate(np.atleast_1d(pp.theta_c), start=1):
                    writer.writerow([product, f"theta_c[{j}]", format(v, ".17g")])


def _write_latent(result, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["product", "date", "p", "lambda"])
        panel = result.panel
        for i, product in enumerate(panel.products):
            for t, day in enumerate(panel.dates):
                writer.writerow(
                    [
                        product,
                        day.isoformat(),
                        format(result.p[i, t], ".12g"),
                        format(result.lam[i, t], ".12g"),
                    ]
                )


def cmd_simulate(args) -> int:
    scen = ScenarioConfig.from_file(args.scenario)
    if args.seed is not None:
        scen.seed = args.seed
    spec = ScenarioSpec(
        products=scen.products,
        brands=scen.brands,
        start_date=scen.start_date,
        horizon=scen.horizon,
        prices=scen.prices,
        zero_variant=scen.zero_variant,
        count_variant=scen.count_variant,
        product_params=scen.product_params,
        hierarchy_zero=scen.hierarchy_zero,
        hierarchy_count=scen.hierarchy_count,
        truncation=scen.truncation,
        phi=scen.phi,
        seed=scen.seed,
    )
    result = simulate_hierarchical(spec) if scen.mode == "hierarchical" else simulate_panel(spec)
    os.makedirs(args.out, exist_ok=True)
    emit_csv(result.panel, os.path.join(args.out, "panel.csv"))
    _write_truth(result, os.path.join(args.out, "truth.csv"))
    _write_latent(result, os.path.join(args.out, "latent.csv"))
    _say(f"simulated {len(scen.products)} products x {scen.horizon} days -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# fit


def _meta_items(cfg: RunConfig, panel, processes) -> dict[str, str]:
    items = {
        "fit.processes": ",".join(processes),
        "fit.zero_variant": cfg.zero_variant,
        "fit.count_variant": cfg.count_variant,
        "fit.products": ",".join(panel.products),
        "fit.phi": format(cfg.phi, "g"),
        "fit.truncation": str(cfg.truncation),
        "fit.count_mean_map": cfg.count_mean_map,
        "fit.seed": str(cfg.sampler.seed),
    }
    if cfg.split_date is not None:
        items["fit.split_date"] = cfg.split_date.isoformat()
    return items


def cmd_fit(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.sampler = dataclasses.replace(cfg.sampler, seed=args.seed)
    panel = ingest_csv(args.data)
    if cfg.split_date is not None:
        cut = panel.date_index(cfg.split_date) + 1  # KeyError if outside range
        train = panel.slice_days(0, cut)
    else:
        train = panel
    processes = ["zero", "count"] if args.process == "both" else [args.process]
    data = ModelData.from_panel(
        train, cfg.seasonal, cfg.truncation, cfg.phi, cfg.count_mean_map
    )
    os.makedirs(args.out, exist_ok=True)
    meta = _meta_items(cfg, panel, processes)
    bad = []
    for process in processes:
        variant = cfg.zero_variant if process == "zero" else cfg.count_variant
        _say(f"fitting {process} process variant {variant!r} ({cfg.sampler.chains} chains)")
        bundle = build_posterior(data, process, variant, cfg.prior_spec(process))
        draws = run_mcmc(bundle, cfg.sampler, progress=_progress(f"{process}:{variant}"))
        draws.to_csv(os.path.join(args.out, f"draws_{process}.csv"))
        diag = diagnostics(draws)
        write_diagnostics_csv(diag, os.path.join(args.out, f"diagnostics_{process}.csv"))
        failing = nonconverged(diag)
        meta[f"fit.{process}_converged"] = "0" if failing else "1"
        if failing:
            bad.extend(f"{process}:{name}" for name in failing)
    with open(os.path.join(args.out, "meta.cfg"), "w") as fh:
        fh.write(format_kv(meta))
    if bad and not args.allow_nonconverged:
        print(
            f"error: nonconverged: split R-hat > 1.05 for {len(bad)} parameter(s), "
            f"first {bad[0]}",
            file=sys.stderr,
        )
        return 2
    return 0


# ---------------------------------------------------------------------------
# predict / evaluate


def _check_fit(meta: dict[str, str], cfg: RunConfig, panel) -> list[str]:
    problems = []
    if meta.get("fit.zero_variant") != cfg.zero_variant:
        problems.append(
            f"zero variant {meta.get('fit.zero_variant')!r} != config {cfg.zero_variant!r}"
        )
    if meta.get("fit.count_variant") != cfg.count_variant:
        problems.append(
            f"count variant {meta.get('fit.count_variant')!r} != config {cfg.count_variant!r}"
        )
    if meta.get("fit.products") != ",".join(panel.products):
        problems.append("fit products differ from the panel")
    if cfg.split_date is not None and meta.get("fit.split_date") != cfg.split_date.isoformat():
        problems.append("fit split date differs from config")
    return problems


def _load_fit(fit_dir: str, cfg: RunConfig, panel):
    meta = read_kv(os.path.join(fit_dir, "meta.cfg"))
    problems = _check_fit(meta, cfg, panel)
    if problems:
        raise VariantMismatchError(f"fit {fit_dir!r}: " + "; ".join(problems))
    out = {}
    for process in meta["fit.processes"].split(","):
        path = os.path.join(fit_dir, f"draws_{process}.csv")
        out[process] = PosteriorDraws.from_csv(path)
    return meta, out


def _windows(cfg: RunConfig, panel):
    if cfg.split_date is None:
        raise ConfigError("split.date is required for predict/evaluate")
    cut = panel.date_index(cfg.split_date) + 1
    if cut >= panel.n_days:
        raise ConfigError("split.date leaves no test days")
    return (0, cut), (cut, panel.n_days)


def _write_trace(path, panel, window, observed, summary: ev.TraceSummary, value_name: str):
    t0, t1 = window
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["product", "date", "observed", f"{value_name}_mean", f"{value_name}_lo", f"{value_name}_hi"]
        )
        for i, product in enumerate(panel.products):
            for t in range(t0, t1):
                writer.writerow(
                    [
                        product,
                        panel.dates[t].isoformat(),
                        observed[i, t],
                        format(summary.mean[i, t - t0], ".8g"),
                        format(summary.lower[i, t - t0], ".8g"),
                        format(summary.upper[i, t - t0], ".8g"),
                    ]
                )


def _predictions(cfg, data, fits, window):
    """p_its / lambda_its per process for one fit's draws over a window."""
    out = {}
    for process, draws in fits.items():
        variant = cfg.zero_variant if process == "zero" else cfg.count_variant
        out[process] = ev.sequential_predict(data, process, variant, draws, window)
    return out


def cmd_predict(args) -> int:
    cfg = RunConfig.from_file(args.config)
    panel = ingest_csv(args.data)
    _, test = _windows(cfg, panel)
    data = ModelData.from_panel(panel, cfg.seasonal, cfg.truncation, cfg.phi, cfg.count_mean_map)
    _, fits = _load_fit(args.fit, cfg, panel)
    preds = _predictions(cfg, data, fits, test)
    os.makedirs(args.out, exist_ok=True)
    events = data.histories.self_events
    if "zero" in preds:
        _write_trace(
            os.path.join(args.out, "predict_zero.csv"),
            panel,
            test,
            events,
            ev.TraceSummary.from_draws(preds["zero"]),
            "p",
        )
    if "count" in preds:
        _write_trace(
            os.path.join(args.out, "predict_count.csv"),
            panel,
            test,
            panel.units,
            ev.TraceSummary.from_draws(preds["count"]),
            "lambda",
        )
    _say(f"one-step-ahead predictions over {test[1] - test[0]} test days -> {args.out}")
    return 0


def _write_combined(path, panel, window, lo, hi):
    t0, t1 = window
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["product", "date", "units", "lo95", "hi95"])
        for i, product in enumerate(panel.products):
            for t in range(t0, t1):
                writer.writerow(
                    [
                        product,
                        panel.dates[t].isoformat(),
                        int(panel.units[i, t]),
                        int(lo[i, t - t0]),
                        int(hi[i, t - t0]),
                    ]
                )


def cmd_evaluate(args) -> int:
    cfg = RunConfig.from_file(args.config)
    panel = ingest_csv(args.data)
    train, test = _windows(cfg, panel)
    data = ModelData.from_panel(panel, cfg.seasonal, cfg.truncation, cfg.phi, cfg.count_mean_map)
    os.makedirs(args.out, exist_ok=True)
    report = ev.EvalReport(products=list(panel.products))
    events = data.histories.self_events
    avail = panel.avail

    for fit_dir in args.fit:
        meta, fits = _load_fit(fit_dir, cfg, panel)
        for window_name, window in (("test", test), ("train", train)):
            preds = _predictions(cfg, data, fits, window)
            t0, t1 = window
            if "zero" in preds:
                label = meta["fit.zero_variant"]
                scores = ev.lppd_zero(preds["zero"], events[:, t0:t1], avail[:, t0:t1])
                report.add_scores("zero", label, window_name, scores)
            if "count" in preds:
                label = meta["fit.count_variant"]
                scores = ev.lppd_count(
                    preds["count"], panel.units[:, t0:t1], cfg.phi, avail[:, t0:t1]
                )
                report.add_scores("count", label, window_name, scores)
            if window_name == "test":
                if "zero" in preds:
                    _write_trace(
                        os.path.join(args.out, f"trace_zero_{meta['fit.zero_variant']}.csv"),
                        panel,
                        window,
                        events,
                        ev.TraceSummary.from_draws(preds["zero"]),
                        "p",
                    )
                if "count" in preds:
                    _write_trace(
                        os.path.join(args.out, f"trace_count_{meta['fit.count_variant']}.csv"),
                        panel,
                        window,
                        panel.units,
                        ev.TraceSummary.from_draws(preds["count"]),
                        "lambda",
                    )
                if "zero" in preds and "count" in preds:
                    p = preds["zero"]
                    lam = preds["count"]
                    if p.shape[0] == lam.shape[0]:
                        lo, hi = ev.combined_forecast(p, lam, cfg.phi)
                        label = f"{meta['fit.zero_variant']}_{meta['fit.count_variant']}"
                        _write_combined(
                            os.path.join(args.out, f"combined_{label}.csv"), panel, window, lo, hi
                        )

    if report.zero_scores:
        report.write_lppd_csv("zero", os.path.join(args.out, "lppd_zero.csv"))
    if report.count_scores:
        report.write_lppd_csv("count", os.path.join(args.out, "lppd_count.csv"))
    _say(f"evaluation tables -> {args.out}")
    return 0


def cmd_summarize(args) -> int:
    panel = ingest_csv(args.data)
    if args.split is not None:
        import datetime as dt

        split = dt.date.fromisoformat(args.split)
    elif args.config is not None:
        cfg = RunConfig.from_file(args.config)
        split = cfg.split_date or panel.dates[-1]
    else:
        split = panel.dates[-1]
    rows = summarize(panel, split)
    os.makedirs(args.out, exist_ok=True)
    write_summary_csv(rows, os.path.join(args.out, "summary.csv"))
    for product, brand, total, pct in rows:
        print(f"{product},{brand},{total},{pct}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsedemand",
        description="Hurdle models with self- and cross-excitation for sparse daily sales.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic panel from a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run HMC for the configured variants")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--process", choices=["zero", "count", "both"], default="both")
    p.add_argument("--allow-nonconverged", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="one-step-ahead posterior predictions over the test window")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="lppd tables, traces and combined forecasts")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True, action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("summarize", help="per-product training-window summary table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_summarize)

    return parser


_ERROR_KINDS = [
    (ConfigError, "config"),
    (PanelError, "data"),
    (MissingPriceError, "data"),
    (VariantMismatchError, "config-mismatch"),
    (InitializationError, "initialization"),
    (KeyError, "config"),
    (FileNotFoundError, "io"),
    (ValueError, "invalid"),
]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(k for k, _ in _ERROR_KINDS) as exc:
        for kind, label in _ERROR_KINDS:
            if isinstance(exc, kind):
                message = str(exc).replace("\n", " ")
                print(f"error: {label}: {message}", file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
