"""Command line entry point: ``aggcausal <command> [options]``.

Commands
--------
synth       generate a synthetic scenario (JSON spec, ASCII rasters, counts)
prewhiten   write residual CSVs for every covariate and for incidence
select      rank and select features (``causal`` or ``spikeslab``)
fit         fit the disaggregation model on the selected features
evaluate    forecast and score a fitted model, or score a predictions CSV
report      compare no selection, causal and spike-and-slab selection over rolling windows

Configuration is a JSON file with optional ``scenario`` and ``pipeline``
objects; command line flags override file values. Failures print a JSON
error object on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .disagg import DisaggModel, evaluate, facility_population, fit_map, predict
from .grid import Raster, write_ascii_grid
from .pcalg import select_features
from .pipeline import (PipelineConfig, causal_ranking, disagg_data, prewhitened_fields, run_report,
                       spikeslab_ranking)
from .prewhiten import prewhiten_incidence, residuals_csv
from .spikeslab import probabilities_csv, threshold_select
from .synth import ScenarioSpec, make_scenario

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_config(args) -> tuple[ScenarioSpec, PipelineConfig]:
    raw = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
    scen = dict(raw.get("scenario", {}))
    pipe = dict(raw.get("pipeline", {}))
    if getattr(args, "scenario", None):
        scen = json.loads(Path(args.scenario).read_text())["spec"]
    seed = getattr(args, "seed", None)
    if seed is not None:
        pipe["seed"] = seed
        if args.command == "synth":
            scen["seed"] = seed
    for flag, key in (("alpha", "alpha"), ("bootstrap", "bootstrap"), ("pvalue", "pvalue"), ("jobs", "jobs")):
        v = getattr(args, flag, None)
        if v is not None:
            pipe[key] = v
    return ScenarioSpec.from_dict(scen), PipelineConfig.from_dict(pipe)


def _months(spec: str | None, default):
    if spec is None:
        return np.asarray(default)
    a, _, b = spec.partition(":")
    return np.arange(int(a), int(b))


def _train_months(args, cfg: PipelineConfig, n_months: int):
    w = cfg.window
    return _months(getattr(args, "months", None), np.arange(min(w.train_months, n_months)))


def cmd_synth(args, spec, cfg, out: Path):
    sc = make_scenario(spec)
    truth = {"response_parents": sc.response_parents, "response_links": sc.extra["response_links"],
             "dag": sc.dag.to_edge_list(),
             "edges": [[a, b, c, k] for (a, b), (c, k) in sorted(sc.edge_params.items())],
             "facility_cells": [list(c) for c in sc.facility_cells]}
    _write(out / "scenario.json", _dump({"spec": json.loads(spec.to_json()), "truth": truth,
                                          "features": sc.feature_names(), "scale_tags": sc.feature_tags()}))
    shape = (spec.n_rows, spec.n_cols)
    write_ascii_grid(out / "friction.asc", sc.friction)
    write_ascii_grid(out / "population.asc", Raster(sc.population.reshape(shape), spec.cell_size))
    write_ascii_grid(out / "travel_time.asc",
                     Raster(sc.travel_time.min(axis=1).reshape(shape), spec.cell_size))
    for k, v in sc.static.items():
        write_ascii_grid(out / f"{k}.asc", Raster(v.reshape(shape), spec.cell_size))
    # dynamic layers start max_lag months before the first response month
    for k, v in sc.dynamic.items():
        for t in range(v.shape[0]):
            write_ascii_grid(out / f"{k}_t{t - sc.max_lag}.asc", Raster(v[t].reshape(shape), spec.cell_size))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["facility", "month", "count"])
    for t in range(sc.n_months):
        for j in range(sc.counts.shape[1]):
            w.writerow([j, t, int(sc.counts[t, j])])
    _write(out / "counts.csv", buf.getvalue())
    return {"scenario": str(out / "scenario.json"), "n_features": len(sc.feature_names())}


def cmd_prewhiten(args, spec, cfg, out: Path):
    sc = make_scenario(spec)
    months = _train_months(args, cfg, sc.n_months)
    fields = prewhitened_fields(sc)
    written = []
    for k, v in fields.items():
        _write(out / f"residuals_{k}.csv", residuals_csv(k, np.atleast_2d(v)))
        written.append(k)
    inc = prewhiten_incidence(sc.counts[months], sc.catchment, sc.population, sc.tsp, sc.coordinates())
    _write(out / "residuals_incidence.csv", residuals_csv("incidence", inc.residuals))
    _write(out / "attractiveness.json", _dump({"attractiveness": inc.attractiveness.tolist(),
                                               "excluded_facilities": np.flatnonzero(~inc.included).tolist()}))
    return {"variables": written + ["incidence"]}


def cmd_select(args, spec, cfg, out: Path):
    sc = make_scenario(spec)
    months = _train_months(args, cfg, sc.n_months)
    tags = sc.feature_tags()
    if args.method == "causal":
        ranking = causal_ranking(sc, months, cfg)
        selected = select_features(ranking, tags, cfg.k_static, cfg.k_dynamic)
        _write(out / "ranking_causal.csv", ranking.to_csv())
        extra = {"bootstrap_runs": ranking.B, "failed_runs": ranking.failures}
    else:
        ranking, samples = spikeslab_ranking(sc, months, cfg)
        selected = threshold_select(ranking.scores, tags, cfg.k_static, cfg.k_dynamic)
        _write(out / "ranking_spikeslab.csv", probabilities_csv(ranking.scores, ranking.scale_tags))
        extra = {"max_rhat": samples.max_rhat, "flagged": samples.flagged}
    result = {"method": args.method, "selected": selected, "seed": cfg.seed,
              "train_months": [int(months[0]), int(months[-1])], **extra}
    _write(out / f"selected_{args.method}.json", _dump(result))
    return result


def _features_arg(args, sc):
    if getattr(args, "selected", None):
        return json.loads(Path(args.selected).read_text())["selected"]
    return sc.feature_names()


def cmd_fit(args, spec, cfg, out: Path):
    sc = make_scenario(spec)
    months = _train_months(args, cfg, sc.n_months)
    features = _features_arg(args, sc)
    model = fit_map(disagg_data(sc, months, features), cfg.fit_config())
    d = model.to_dict()
    d["train_months"] = [int(months[0]), int(months[-1])]
    _write(out / "model.json", _dump(d))
    return {"model": str(out / "model.json"), "converged": model.converged, "features": features}


def _read_predictions(path):
    rows = list(csv.DictReader(Path(path).open()))
    fac = sorted({int(r["facility"]) for r in rows})
    mon = sorted({int(r["month"]) for r in rows})
    fi = {f: i for i, f in enumerate(fac)}
    mi = {m: i for i, m in enumerate(mon)}
    pred = np.full((len(mon), len(fac)), np.nan)
    obs = np.full_like(pred, np.nan)
    for r in rows:
        pred[mi[int(r["month"])], fi[int(r["facility"])]] = float(r["predicted"])
        obs[mi[int(r["month"])], fi[int(r["facility"])]] = float(r["observed"])
    return pred, obs


def cmd_evaluate(args, spec, cfg, out: Path):
    if args.predictions:
        pred, obs = _read_predictions(args.predictions)
        metrics = evaluate(pred, obs)
        _write(out / "metrics.json", _dump(metrics))
        return metrics
    if not args.model or not args.scenario:
        raise UsageError("evaluate needs --predictions, or --model with --scenario")
    sc = make_scenario(spec)
    d = json.loads(Path(args.model).read_text())
    train_start = d.pop("train_months", [0, 0])[0]
    model = DisaggModel.from_dict(d)
    months = _months(args.months, np.arange(sc.n_months))
    pop = sc.population * sc.tsp
    _, mu = predict(model, sc.design(model.feature_names, months), sc.catchment, pop, sc.coordinates(),
                    months=months - train_start)
    fpop = facility_population(sc.catchment, pop)
    keep = np.flatnonzero(fpop > 0)
    pred = mu[:, keep] / fpop[keep]
    obs = sc.counts[months][:, keep] / fpop[keep]
    metrics = evaluate(pred, obs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["facility", "month", "observed", "predicted"])
    for a, t in enumerate(months):
        for b, j in enumerate(keep):
            w.writerow([int(j), int(t), repr(float(obs[a, b])), repr(float(pred[a, b]))])
    _write(out / "predictions.csv", buf.getvalue())
    _write(out / "metrics.json", _dump(metrics))
    return metrics


def cmd_report(args, spec, cfg, out: Path):
    sc = make_scenario(spec)
    methods = tuple(args.methods.split(",")) if args.methods else ("none", "causal", "spikeslab")
    report = run_report(sc, cfg, methods)
    report["config"] = cfg.to_dict()
    report["scenario"] = json.loads(spec.to_json())
    _write(out / "report.json", _dump(report))
    return report["summary"]


COMMANDS = {"synth": cmd_synth, "prewhiten": cmd_prewhiten, "select": cmd_select, "fit": cmd_fit,
            "evaluate": cmd_evaluate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aggcausal", description="Causal feature selection for aggregated incidence data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, required=seed_required)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--out-dir", default=".", help="directory for outputs")

    def scenario_arg(sp, required=True):
        sp.add_argument("--scenario", required=required, help="scenario.json written by 'synth'")
        sp.add_argument("--months", help="month range 'start:stop' (stop exclusive)")

    def ci_args(sp):
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--bootstrap", type=int)
        sp.add_argument("--pvalue", choices=["gamma", "perm"])

    sp = sub.add_parser("synth", help="generate a synthetic scenario")
    common(sp)
    sp = sub.add_parser("prewhiten", help="write residual CSVs")
    common(sp)
    scenario_arg(sp)
    sp = sub.add_parser("select", help="rank and select features")
    sp.add_argument("method", choices=["causal", "spikeslab"])
    common(sp, seed_required=True)
    scenario_arg(sp)
    ci_args(sp)
    sp = sub.add_parser("fit", help="fit the disaggregation model")
    common(sp, seed_required=True)
    scenario_arg(sp)
    sp.add_argument("--selected", help="selected-feature JSON from 'select'")
    sp = sub.add_parser("evaluate", help="score forecasts")
    common(sp)
    scenario_arg(sp, required=False)
    sp.add_argument("--model", help="model JSON from 'fit'")
    sp.add_argument("--predictions", help="CSV facility,month,observed,predicted")
    sp = sub.add_parser("report", help="compare selection methods over rolling windows")
    common(sp)
    scenario_arg(sp)
    ci_args(sp)
    sp.add_argument("--methods", help="comma-separated subset of none,causal,spikeslab")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    command = argv[0] if argv else None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        spec, cfg = _load_config(args)
        out = Path(args.out_dir)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = COMMANDS[command](args, spec, cfg, out)
        msgs = sorted({str(w.message) for w in caught})
        sys.stdout.write(_dump({"command": command, "status": "ok", "result": result, "warnings": msgs}))
        return 0
    except Exception as exc:
        err = {"command": command, "status": "error", "error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(_dump(err))
        return 1


if __name__ == "__main__":
    sys.exit(main())
