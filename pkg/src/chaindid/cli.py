"""Command-line front end with reproducible machine-readable outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys

import click
import numpy as np

import matplotlib

matplotlib.use("Agg")

from chaindid import __version__
from chaindid.blocks import ControlSpec, cross_section_att, long_did, placebo_delta
from chaindid.chain import NonIdentifiedError, fit_chained
from chaindid.inference import multiplier_bootstrap, pretrend_test
from chaindid.panel import PanelError, load_panel
from chaindid.propensity import IdentificationError, fit_sampling_model
from chaindid.simlab import DgpConfig, monte_carlo, simulate_dgp
from chaindid.summaries import theta_calendar, theta_dynamic, theta_selective

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_DATA = 1
EXIT_ARGS = 2


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _fingerprint(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _default_threads() -> int:
    return int(os.environ.get("CHAINDID_THREADS", "1"))


def _fail(message, code=EXIT_DATA, as_json=False):
    if as_json:
        click.echo(json.dumps({"error": message, "schema_version": SCHEMA_VERSION}))
    else:
        click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.version_option(version=__version__, prog_name="chaindid")
def main():
    """Long-term treatment effect estimation for unbalanced panels."""


@main.command()
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--schema", type=click.Path(exists=True), default=None,
              help="JSON column-name mapping.")
@click.option("--json-errors", is_flag=True, help="Machine-readable error output.")
def validate(input_path, schema, json_errors):
    """Check a panel CSV for structural problems."""
    try:
        data = load_panel(input_path, schema)
    except PanelError as e:
        _fail(str(e), EXIT_DATA, json_errors)
    report = data.validate()
    click.echo(json.dumps({"schema_version": SCHEMA_VERSION, **report.to_dict()},
                          indent=2, sort_keys=True))
    sys.exit(EXIT_OK if report.ok else EXIT_DATA)


def _event_study(result, data):
    """Collapse ATT(g,t) estimates to event-time rows with influence."""
    rows = []
    atts = [result.att(g, t) for j, (g, t) in enumerate(result.targets)
            if result.identified[j]]
    for e in range(data.T - 2 + 1):
        try:
            s = theta_dynamic(atts, data, e=e)
        except Exception:
            continue
        rows.append((e, s))
    return rows


@main.command()
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--schema", type=click.Path(exists=True), default=None)
@click.option("--method", type=click.Choice(["chained", "chained-gmm", "cross-section", "long"]),
              default="chained")
@click.option("--control", type=click.Choice(["never", "notyet"]), default="never")
@click.option("--links", type=click.Choice(["minimal", "all"]), default="minimal")
@click.option("--attrition", type=click.Choice(["none", "mar-x", "smar"]), default="none")
@click.option("--attrition-features", default="", help="Comma-separated feature spec.")
@click.option("--bootstrap", "bootstrap_b", type=int, default=1000, show_default=True)
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--out", "out_prefix", default="chaindid_estimate", show_default=True,
              help="Output path prefix.")
@click.option("--json-errors", is_flag=True)
def estimate(input_path, schema, method, control, links, attrition,
             attrition_features, bootstrap_b, alpha, seed, threads, out_prefix,
             json_errors):
    """Estimate ATT(g,t) with bootstrap bands and an event-study report."""
    threads = threads if threads is not None else _default_threads()
    config = {
        "command": "estimate",
        "input": os.path.basename(input_path),
        "method": method,
        "control": control,
        "links": links,
        "attrition": attrition,
        "attrition_features": attrition_features,
        "bootstrap": bootstrap_b,
        "alpha": alpha,
        "seed": seed,
    }
    try:
        data = load_panel(input_path, schema)
        report = data.validate()
        if not report.ok:
            _fail("; ".join(i.message for i in report.errors), EXIT_DATA, json_errors)
        cspec = ControlSpec(control)
        sfit = None
        if attrition != "none":
            feats = [s for s in attrition_features.split(",") if s]
            sfit = fit_sampling_model(data, attrition, feats)
        if method in ("chained", "chained-gmm"):
            weighting = "identity" if method == "chained" else "optimal"
            use_links = links if method == "chained" else ("all" if links == "all" else links)
            result = fit_chained(data, cspec, weighting=weighting, links=use_links,
                                 sfit=sfit)
            targets = [result.targets[j] for j in range(len(result.targets))
                       if result.identified[j]]
            estimates = np.array([result.estimates[j] for j in range(len(result.targets))
                                  if result.identified[j]])
            Phi = np.vstack([result.Phi[j] for j in range(len(result.targets))
                             if result.identified[j]])
            non_identified = [list(gt) for gt in result.system.non_identified]
        else:
            fn = long_did if method == "long" else cross_section_att
            targets, rows_est, rows_phi, non_identified = [], [], [], []
            for g in data.cohorts():
                g = int(g)
                for t in range(g, data.T + 1):
                    try:
                        a = fn(data, g, t)
                    except IdentificationError as e:
                        if method == "long" and "MISSING_LONG_PAIR" in str(e):
                            _fail(str(e), EXIT_DATA, json_errors)
                        non_identified.append([g, t])
                        continue
                    targets.append((g, t))
                    rows_est.append(a.estimate)
                    rows_phi.append(a.influence)
            if not targets:
                _fail("no identified ATT cell", EXIT_DATA, json_errors)
            estimates = np.array(rows_est)
            Phi = np.vstack(rows_phi)
            result = None
        bands = multiplier_bootstrap(Phi, estimates, bootstrap_b, alpha, seed,
                                     cells=targets, n_threads=threads)
        # pre-trend row where placebo cells exist
        placebos = []
        for g in data.cohorts():
            g = int(g)
            for t in range(2, g):
                try:
                    placebos.append(placebo_delta(data, g, t, ControlSpec(control)))
                except IdentificationError:
                    continue
        pretrend = None
        if placebos:
            est_p, bands_p, reject = pretrend_test(placebos, bootstrap_b, alpha, seed)
            pretrend = {
                "estimate": est_p,
                "lower": float(bands_p.lower[0]),
                "upper": float(bands_p.upper[0]),
                "reject": bool(reject),
            }
    except (PanelError, IdentificationError, NonIdentifiedError) as e:
        _fail(str(e), EXIT_DATA, json_errors)

    fingerprint = _fingerprint(config)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "config_fingerprint": fingerprint,
        "seed": seed,
        "cells": [
            {
                "g": int(g),
                "t": int(t),
                "estimate": float(estimates[j]),
                "sigma_hat": float(bands.sigma_hat[j]),
                "lower": float(bands.lower[j]),
                "upper": float(bands.upper[j]),
            }
            for j, (g, t) in enumerate(targets)
        ],
        "non_identified": non_identified,
        "critical_value": bands.c_crit,
        "pretrend": pretrend,
    }
    _write_json(out_prefix + ".json", payload)

    # event-study table and figure
    if method in ("chained", "chained-gmm"):
        atts = [result.att(g, t) for j, (g, t) in enumerate(result.targets)
                if result.identified[j]]
    else:
        from chaindid.blocks import AttEstimate

        atts = [AttEstimate(g, t, float(estimates[j]), Phi[j], method)
                for j, (g, t) in enumerate(targets)]
    ev_rows = []
    ev_cells, ev_est, ev_phi = [], [], []
    for e in range(data.T - 1):
        try:
            s = theta_dynamic(atts, data, e=e)
        except Exception:
            continue
        ev_cells.append(e)
        ev_est.append(s.estimate)
        ev_phi.append(s.influence)
    if ev_cells:
        ev_bands = multiplier_bootstrap(np.vstack(ev_phi), np.array(ev_est),
                                        bootstrap_b, alpha, seed, cells=ev_cells)
        for j, e in enumerate(ev_cells):
            ev_rows.append((e, _fmt(ev_est[j]), _fmt(ev_bands.lower[j]),
                            _fmt(ev_bands.upper[j])))
    _write_csv(out_prefix + "_event_study.csv",
               ["event_time", "estimate", "lower", "upper"], ev_rows)
    if ev_rows:
        _plot_event_study(ev_rows, out_prefix + "_event_study.png")
    click.echo(json.dumps({"written": [out_prefix + ".json",
                                       out_prefix + "_event_study.csv"],
                           "config_fingerprint": fingerprint}))
    sys.exit(EXIT_OK)


def _plot_event_study(rows, path):
    import matplotlib.pyplot as plt

    e = [r[0] for r in rows]
    est = [float(r[1]) for r in rows]
    lo = [float(r[2]) for r in rows]
    hi = [float(r[3]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.fill_between(e, lo, hi, alpha=0.25, color="tab:blue", label="simultaneous band")
    ax.plot(e, est, marker="o", color="tab:blue", label="estimate")
    ax.set_xlabel("event time")
    ax.set_ylabel("effect")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@main.command()
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--schema", type=click.Path(exists=True), default=None)
@click.option("--kind", type=click.Choice(["selective", "dynamic", "calendar"]),
              default="dynamic", show_default=True)
@click.option("--control", type=click.Choice(["never", "notyet"]), default="never")
@click.option("--shares-file", type=click.Path(exists=True), default=None,
              help="CSV of cohort,probability external shares.")
@click.option("--event-start", type=int, default=0, show_default=True)
@click.option("--bootstrap", "bootstrap_b", type=int, default=1000, show_default=True)
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_prefix", default="chaindid_aggregate", show_default=True)
@click.option("--json-errors", is_flag=True)
def aggregate(input_path, schema, kind, control, shares_file, event_start,
              bootstrap_b, alpha, seed, out_prefix, json_errors):
    """Aggregate ATT(g,t) into a summary parameter with bands."""
    config = {
        "command": "aggregate",
        "input": os.path.basename(input_path),
        "kind": kind,
        "control": control,
        "event_start": event_start,
        "bootstrap": bootstrap_b,
        "alpha": alpha,
        "seed": seed,
    }
    try:
        data = load_panel(input_path, schema)
        shares = "observed"
        if shares_file:
            shares = {}
            with open(shares_file, newline="", encoding="utf-8") as f:
                for row in csv.DictReader(f):
                    shares[int(row["cohort"])] = float(row["probability"])
        result = fit_chained(data, ControlSpec(control))
        atts = [result.att(g, t) for j, (g, t) in enumerate(result.targets)
                if result.identified[j]]
        if kind == "selective":
            summary = theta_selective(atts, data, shares=shares)
        elif kind == "dynamic":
            summary = theta_dynamic(atts, data, shares=shares, e_start=event_start)
        else:
            summary = theta_calendar(atts, data, shares=shares)
        bands = multiplier_bootstrap(summary.influence[None, :],
                                     np.array([summary.estimate]),
                                     bootstrap_b, alpha, seed, cells=(kind,))
    except (PanelError, IdentificationError, NonIdentifiedError, ValueError) as e:
        _fail(str(e), EXIT_DATA, json_errors)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "config_fingerprint": _fingerprint(config),
        "seed": seed,
        "kind": summary.kind,
        "estimate": summary.estimate,
        "lower": float(bands.lower[0]),
        "upper": float(bands.upper[0]),
        "sigma_hat": float(bands.sigma_hat[0]),
    }
    _write_json(out_prefix + ".json", payload)
    click.echo(json.dumps(payload))
    sys.exit(EXIT_OK)


@main.command()
@click.option("--dgp", type=click.IntRange(1, 4), default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", default="chaindid_panel.csv", show_default=True)
def simulate(dgp, seed, out_path):
    """Write one simulated rotating-panel replication to CSV."""
    config = DgpConfig.numbered(dgp)
    data = simulate_dgp(config, seed)
    data.to_csv(out_path)
    click.echo(json.dumps({
        "schema_version": SCHEMA_VERSION,
        "written": out_path,
        "dgp": dgp,
        "seed": seed,
        "config_fingerprint": config.fingerprint(),
        "n": data.n,
        "T": data.T,
    }))
    sys.exit(EXIT_OK)


@main.command()
@click.option("--dgp", type=click.IntRange(1, 4), default=1, show_default=True)
@click.option("--reps", type=int, default=1000, show_default=True)
@click.option("--estimators", default="chained,cross-section", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--out", "out_prefix", default="chaindid_mc", show_default=True)
def montecarlo(dgp, reps, estimators, seed, threads, out_prefix):
    """Run a Monte Carlo study and write the report table and figure."""
    threads = threads if threads is not None else _default_threads()
    names = tuple(s for s in estimators.split(",") if s)
    config = DgpConfig.numbered(dgp)
    try:
        report = monte_carlo(config, reps, names, seed, n_threads=threads)
    except ValueError as e:
        _fail(str(e), EXIT_ARGS)
    rows = report.to_rows()
    header = ["event_time"]
    for name in names:
        header += [f"{name}_mean", f"{name}_sd", f"{name}_count"]
    csv_rows = []
    for row in rows:
        out = [row["event_time"]]
        for name in names:
            out += [_fmt(row[f"{name}_mean"]), _fmt(row[f"{name}_sd"]),
                    row[f"{name}_count"]]
        csv_rows.append(out)
    _write_csv(out_prefix + ".csv", header, csv_rows)
    _write_json(out_prefix + ".json", {
        "schema_version": SCHEMA_VERSION,
        "dgp": dgp,
        "reps": reps,
        "seed": seed,
        "estimators": list(names),
        "config_fingerprint": report.fingerprint,
        "rows": rows,
    })
    _plot_mc(rows, names, out_prefix + ".png")
    click.echo(json.dumps({"written": [out_prefix + ".csv", out_prefix + ".json"],
                           "config_fingerprint": report.fingerprint}))
    sys.exit(EXIT_OK)


def _plot_mc(rows, names, path):
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    e = [r["event_time"] for r in rows]
    for name in names:
        mu = [r[f"{name}_mean"] for r in rows]
        sd = [r[f"{name}_sd"] for r in rows]
        ax.errorbar(e, mu, yerr=sd, marker="o", capsize=3, label=name)
    ax.set_xlabel("event time")
    ax.set_ylabel("replication mean (bars: sd)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main()
