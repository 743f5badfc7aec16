"""Command-line interface: simulate, fit, cvml, compare, study.

Every command accepts ``--config FILE``: a JSON object whose keys are flag
names (dashes or underscores), or a manifest written by a previous run, in
which case its recorded ``args`` are used.  Explicit flags override the file.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import simulation as sim
from .calibration import StandardizationMap
from .copulas import Family
from .cvml import (
    CvmlReport,
    DatasetMismatchError,
    compare_models,
    cvml_estimate,
    format_ranking,
)
from .mcmc import LIKELIHOODS, ProposalConfig, read_trace, write_trace
from .model import Dataset, Model, ModelSpec, read_dataset, write_dataset

FAMILY_NAMES = tuple(f.value for f in Family)
STUDY_KINDS = ("imse", "copula-select", "var-select")


class UsageError(ValueError):
    pass


def versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "addcopula": pkg}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_args(args) -> dict:
    """Parsed options as recorded in a manifest.

    Output locations are stored relative to the manifest itself (the file
    name for ``out``, "." for ``outdir``) so identical runs written to
    different places produce identical manifests.
    """
    rec = {k: v for k, v in sorted(vars(args).items())
           if k not in ("config", "func")}
    if rec.get("out"):
        rec["out"] = Path(rec["out"]).name
    if rec.get("outdir"):
        rec["outdir"] = "."
    return rec


def _manifest(args, **extra) -> dict:
    return {"command": args.command, "args": _run_args(args),
            "versions": versions(), **extra}


def _names(text, available, what):
    if text is None or text == "":
        return list(range(len(available)))
    out = []
    for name in str(text).split(","):
        name = name.strip()
        if name not in available:
            raise UsageError(f"unknown {what} covariate {name!r}; "
                             f"available: {', '.join(available)}")
        out.append(available.index(name))
    return out


def _kmax(text, p):
    vals = [int(v) for v in str(text).split(",")]
    if len(vals) == 1:
        vals = vals * p
    if len(vals) != p or any(v < 1 for v in vals):
        raise UsageError("--kmax takes one positive integer or one per copula covariate")
    return tuple(vals)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "", [])]
    if missing:
        raise UsageError("missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _out_path(text) -> Path:
    path = Path(text)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _model_from_trace(trace, raw: Dataset) -> Model:
    data = raw
    if trace.standardization is not None and raw.standardization is None:
        smap = StandardizationMap.from_dict(trace.standardization)
        data = dataclasses.replace(raw, x=smap.apply(raw.x), standardization=smap)
    return Model(data, ModelSpec.from_dict(trace.spec))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    _require(args, "out")
    spec = sim.ScenarioSpec(args.scenario, n=args.n, seed=args.seed,
                            extra_covariates=args.extra_covariates)
    data = sim.generate(spec)
    out = _out_path(args.out)
    write_dataset(out, data, meta=_manifest(args, scenario=spec.to_dict()))
    print(f"wrote {out} ({data.n} rows)")
    return 0


def cmd_fit(args) -> int:
    _require(args, "data", "out")
    raw = read_dataset(args.data)
    copula_cols = _names(args.copula_covariates, raw.names, "copula")
    marg_cols = tuple(_names(args.marginal_covariates, raw.names, "marginal"))
    cfg = ProposalConfig(iterations=args.iters, burn_in=args.burnin,
                         thin=args.thin, likelihood=args.likelihood)
    f = sim.fit(raw, args.copula, copula_cols, marg_cols,
                k_max=_kmax(args.kmax, len(copula_cols)), cfg=cfg, seed=args.seed)
    trace, model = f.trace, f.model
    out = _out_path(args.out)

    bands_path = out.with_name(out.stem + "_bands.csv")
    smap = model.dataset.standardization
    names = [raw.names[c] for c in copula_cols]
    rows = []
    for i, value, x in sim.slice_grids(len(copula_cols), args.grid_points):
        eta = sim.posterior_eta(trace, x)
        mean, lo, hi = sim.credible_band(eta, args.copula)
        col = copula_cols[i]
        x_raw = (x[:, i] * smap.half_range[col] + smap.center[col]
                 if smap is not None else x[:, i])
        for g in range(x.shape[0]):
            rows.append({"covariate": names[i], "fixed": value,
                         "x_std": x[g, i], "x_raw": x_raw[g],
                         "theta_mean": mean[g], "theta_lower": lo[g],
                         "theta_upper": hi[g]})
    write_rows(bands_path, rows, ["covariate", "fixed", "x_std", "x_raw",
                                  "theta_mean", "theta_lower", "theta_upper"])

    summary = {name: {"mean": float(np.mean(trace.draws[:, j])),
                      "sd": float(np.std(trace.draws[:, j], ddof=1))
                      if len(trace) > 1 else 0.0}
               for j, name in enumerate(trace.layout.names)}
    write_trace(trace, out, extra=_manifest(
        args, posterior=summary, bands_file=bands_path.name,
        slice_values=list(sim.SLICE_VALUES)))
    rates = {k: round(v, 3) for k, v in trace.acceptance_rates().items()
             if v is not None}
    print(f"wrote {out} ({len(trace)} draws, {trace.seconds:.1f} s)")
    print("acceptance:", json.dumps(rates, sort_keys=True))
    return 0


def cmd_cvml(args) -> int:
    _require(args, "trace", "data")
    trace = read_trace(args.trace)
    raw = read_dataset(args.data)
    h = raw.content_hash()
    if trace.dataset_hash and trace.dataset_hash != h:
        raise DatasetMismatchError(
            f"{args.data} (hash {h[:12]}) is not the dataset the trace was "
            f"fitted to (hash {trace.dataset_hash[:12]})")
    model = _model_from_trace(trace, raw)
    report = cvml_estimate(trace, model, exclude_flagged=args.exclude_flagged,
                           label=args.label or Path(args.trace).stem)
    report.dataset_hash = h
    if report.flagged:
        print(f"warning: {len(report.flagged)} observation(s) had zero "
              "likelihood under some draw"
              + (" and were excluded" if args.exclude_flagged else ""),
              file=sys.stderr)
    if args.out:
        report.to_json(_out_path(args.out), extra={"manifest": _manifest(args)})
    print(f"CVML {report.total:.6f} ({report.label}, {report.draw_count} draws)")
    return 0


def cmd_compare(args) -> int:
    _require(args, "reports")
    reports = []
    for path in args.reports:
        r = CvmlReport.from_json(path)
        if not r.label:
            r.label = Path(path).stem
        reports.append(r)
    ranked = compare_models(reports)
    print(format_ranking(ranked))
    if args.out:
        out = _out_path(args.out)
        rows = [{"rank": i, "label": r.label, "family": r.family,
                 "copula_covariates": " ".join(
                     r.model.get("copula_covariate_names",
                                 map(str, r.model.get("copula_covariates", [])))),
                 "cvml": r.total} for i, r in enumerate(ranked, 1)]
        write_rows(out, rows, ["rank", "label", "family", "copula_covariates", "cvml"])
        write_json(out.with_suffix(".json"), _manifest(args))
    return 0


def _study_settings(args) -> sim.StudySettings:
    cfg = ProposalConfig(iterations=args.iters, burn_in=args.burnin)
    return sim.StudySettings(n=args.n, k_max=args.kmax, root_seed=args.seed,
                             cfg=cfg, jobs=args.jobs)


def cmd_study(args) -> int:
    _require(args, "outdir")
    if args.replicates < 1:
        raise UsageError("--replicates must be positive")
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    st = _study_settings(args)
    scenarios = sim.SCENARIOS if args.scenario == "both" else (args.scenario,)
    seeds = [{"replicate": r, "data_seed": sim.derive_seed(args.seed, r)}
             for r in range(args.replicates)]
    results = {}
    started = time.perf_counter()

    if args.kind == "imse":
        summary = []
        for sc in scenarios:
            rep, est, truth, _ = sim.imse_study(sc, args.replicates, st, args.scale)
            grid = sim.eval_grid(sc)
            cols = [f"x{j + 1}" for j in range(grid.shape[1])]
            rcols = [f"rep{r}" for r in range(args.replicates)]
            rows = [{**dict(zip(cols, grid[g])), "truth": truth[g],
                     **dict(zip(rcols, est[:, g]))} for g in range(grid.shape[0])]
            write_rows(outdir / f"imse_{sc}_estimates.csv", rows,
                       cols + ["truth"] + rcols)
            summary.append({"scenario": sc, **rep.to_dict()})
            print(f"{sc}: IBias2 {rep.ibias2:.4f}  IVAR {rep.ivar:.4f}  "
                  f"IMSE {rep.imse:.4f}")
        write_rows(outdir / "imse_summary.csv", summary,
                   ["scenario", "ibias2", "ivar", "imse", "grid_size",
                    "replicate_count", "scale"])
        results["imse"] = summary

    elif args.kind == "copula-select":
        rows, pct = [], {}
        for sc in scenarios:
            r_sc, pct[sc] = sim.copula_selection_study(sc, args.replicates, st)
            rows.extend(r_sc)
            print(f"{sc}: Clayton preferred over Frank in {pct[sc]['frank']:.0f}%, "
                  f"over Gumbel in {pct[sc]['gumbel']:.0f}% of replicates")
        write_rows(outdir / "copula_select.csv", rows,
                   ["scenario", "replicate", "cvml_clayton", "cvml_frank",
                    "cvml_gumbel", "correct_vs_frank", "correct_vs_gumbel"])
        results["percent_correct"] = pct

    else:
        rows = sim.variable_selection_study(args.replicates, st)
        write_rows(outdir / "var_select.csv", rows,
                   ["replicate", "cvml_m1", "cvml_m2", "cvml_m3", "d21", "d23"])
        d21 = [r["d21"] for r in rows]
        d23 = [r["d23"] for r in rows]
        wins = sum(a > 0 and b > 0 for a, b in zip(d21, d23))
        results["m2_selected"] = wins
        results["median_d21"] = float(np.median(d21))
        results["median_d23"] = float(np.median(d23))
        print(f"M2 selected in {wins}/{len(rows)} replicates; median d21 "
              f"{results['median_d21']:.3f}, median d23 {results['median_d23']:.3f}")

    write_json(outdir / "manifest.json", _manifest(
        args, seeds=seeds, seed_rule="data: derive_seed(seed, r); "
        "fit k (1-based): derive_seed(seed, r, k)",
        scenario_defaults={sc: sim.ScenarioSpec(sc).to_dict() for sc in scenarios},
        proposal=st.cfg.to_dict(), results=results))
    write_json(outdir / "timing.json",
               {"seconds": time.perf_counter() - started})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="addcopula",
        description="Bayesian conditional copula models with additive spline "
                    "calibration.")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON config file or run manifest")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("simulate", cmd_simulate, "simulate a scenario dataset")
    p.add_argument("--scenario", default="s1", choices=sim.SCENARIOS)
    p.add_argument("--n", type=int, default=450)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extra-covariates", type=int, default=0,
                   help="append this many pure-noise Uniform[0,1] covariates")
    p.add_argument("--out", help="output CSV; a JSON sidecar is written next to it")

    p = add("fit", cmd_fit, "run one MCMC chain")
    p.add_argument("--data", help="CSV with header y1,y2,x1..xp")
    p.add_argument("--copula", default="clayton", choices=FAMILY_NAMES)
    p.add_argument("--copula-covariates", default="",
                   help="comma-separated covariate names (default: all)")
    p.add_argument("--marginal-covariates", default="",
                   help="comma-separated covariate names (default: all)")
    p.add_argument("--kmax", default="4",
                   help="knot intervals, one value or one per copula covariate")
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--burnin", type=int, default=3_000)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--likelihood", default="full", choices=LIKELIHOODS)
    p.add_argument("--grid-points", type=int, default=101,
                   help="points per slice in the credible-band output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="trace CSV path")

    p = add("cvml", cmd_cvml, "cross-validated marginal likelihood of a fit")
    p.add_argument("--trace")
    p.add_argument("--data")
    p.add_argument("--label", default="")
    p.add_argument("--exclude-flagged", action="store_true",
                   help="drop observations with zero likelihood under some draw")
    p.add_argument("--out", help="report JSON path")

    p = add("compare", cmd_compare, "rank CVML reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", help="optional ranking CSV")

    p = add("study", cmd_study, "run a seeded simulation study")
    p.add_argument("--kind", default="imse", choices=STUDY_KINDS)
    p.add_argument("--scenario", default="both", choices=sim.SCENARIOS + ("both",),
                   help="ignored by var-select, which always uses s2")
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=450)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--burnin", type=int, default=3_000)
    p.add_argument("--kmax", type=int, default=4)
    p.add_argument("--scale", default="theta", choices=sim.SCALES)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--outdir")
    return parser, subs


def _load_config(path, command, sub) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if isinstance(data, dict) and isinstance(data.get("meta"), dict):
        data = data["meta"]  # dataset sidecar
    if isinstance(data, dict) and isinstance(data.get("manifest"), dict):
        data = data["manifest"]  # CVML report
    if isinstance(data, dict) and "args" in data:
        if data.get("command", command) != command:
            raise UsageError(f"{path} records a {data['command']!r} run, "
                             f"not {command!r}")
        data = dict(data["args"])
        # recorded outputs live next to the manifest
        here = Path(path).parent
        if data.get("out"):
            data["out"] = str(here / data["out"])
        if data.get("outdir"):
            data["outdir"] = str(here / data["outdir"])
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    known = {a.dest for a in sub._actions}
    cfg = {}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest == "command":
            continue
        if dest not in known or dest in ("help", "config", "func"):
            raise UsageError(f"unknown option {key!r} in {path}")
        cfg[dest] = value
    return cfg


def _check_choices(sub, args) -> None:
    # argparse only validates choices given on the command line
    for a in sub._actions:
        value = getattr(args, a.dest, None)
        if a.choices is not None and not isinstance(value, list) \
                and value not in a.choices:
            raise UsageError(f"invalid value {value!r} for --{a.dest.replace('_', '-')}")


def main(argv=None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        if args.config:
            sub = subs[args.command]
            sub.set_defaults(**_load_config(args.config, args.command, sub))
            try:
                args = parser.parse_args(argv)
            except SystemExit as exc:
                return int(exc.code or 0)
            _check_choices(sub, args)
        return args.func(args)
    except (ValueError, OSError) as exc:
        # bad options, unreadable input, dataset mismatch, invalid parameters
        print(f"addcopula {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure inside a command
        print(f"addcopula {args.command}: failed: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
