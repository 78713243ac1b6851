"""Command-line entry point: ``vispost {simulate,train,predict,verify,report}``.

Every subcommand works inside one run directory (``--out``)::

    data/         forecasts.csv, observations.csv, stations.csv, manifest.json
    models/       {model}_{scheme}_{lead}_{scope}_{date}.json, {model}_{scheme}_manifest.json
    predictions/  {model}_{scheme}.csv, climatology.csv, raw.csv
    scores/       scores_vs_{reference}.csv, scores.json, pit_{name}.csv
    report/       skill_curves.csv, ratio_vs_raw.csv

A single JSON config holds the blocks ``simulation``, ``experiment`` and
``verification`` plus ``seed``, ``jobs`` and an optional ``data_dir`` that
points at existing CSV data instead of ``<out>/data``. Flags override the
config.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from datetime import timedelta
from pathlib import Path

import numpy as np

from .data import (
    DataFormatError,
    PredictionTable,
    SimConfig,
    join_cases,
    load_forecasts,
    load_observations,
    load_predictions,
    save_forecasts,
    save_observations,
    save_predictions,
    save_stations,
    simulate_dataset,
)
from .training import (
    ExperimentConfig,
    assemble_predictions,
    params_from_dict,
    prepare_experiment,
    run_fits,
)
from .verification import ScoreReport, aggregate_report, pit_table

log = logging.getLogger("vispost")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARTIAL = 2
EXIT_IO = 3

REFERENCES = ("climatology", "raw")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


# -- config --------------------------------------------------------------------


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    unknown = set(cfg) - {"seed", "jobs", "data_dir", "simulation", "experiment", "verification"}
    if unknown:
        raise CliError(f"unknown config keys {sorted(unknown)}")
    return cfg


def _seed(args, cfg) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise CliError("a seed is required (--seed or config 'seed')")
    if not isinstance(seed, int) or seed < 0:
        raise CliError("seed must be a non-negative integer")
    return seed


def _jobs(args, cfg) -> int:
    jobs = args.jobs if args.jobs is not None else cfg.get("jobs", os.cpu_count() or 1)
    if not isinstance(jobs, int) or jobs < 1:
        raise CliError("jobs must be a positive integer")
    return jobs


def _experiment(args, cfg, seed: int | None) -> ExperimentConfig:
    block = dict(cfg.get("experiment", {}))
    if args.model is not None:
        block["model"] = args.model
    if args.scheme is not None:
        scheme = block.get("scheme", {})
        scheme = {"kind": scheme} if isinstance(scheme, str) else dict(scheme)
        scheme["kind"] = args.scheme
        block["scheme"] = scheme
    if seed is not None:
        block["seed"] = seed
    try:
        return ExperimentConfig.from_dict(block)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid experiment config: {exc}") from None


def _canonical_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _data_dir(args, cfg) -> Path:
    return Path(cfg["data_dir"]) if cfg.get("data_dir") else Path(args.out) / "data"


def _load_cases(args, cfg):
    d = _data_dir(args, cfg)
    forecasts = load_forecasts(d / "forecasts.csv")
    observations = load_observations(d / "observations.csv")
    cases, dropped = join_cases(forecasts, observations)
    if not cases:
        raise CliError(f"no forecast case in {d} has a matching observation")
    return cases, observations


def _tag(exp: ExperimentConfig) -> str:
    return f"{exp.model}_{exp.scheme.kind}"


def _model_file(exp: ExperimentConfig, task) -> str:
    return f"{_tag(exp)}_{task.lead_h}_{task.scope}_{task.fit_date.isoformat()}.json"


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args, cfg) -> int:
    seed = _seed(args, cfg)
    try:
        sim = SimConfig.from_dict(cfg.get("simulation", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid simulation config: {exc}") from None
    forecasts, observations, stations = simulate_dataset(sim, seed)
    out = Path(args.out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    save_forecasts(out / "forecasts.csv", forecasts)
    save_observations(out / "observations.csv", observations)
    save_stations(out / "stations.csv", stations)
    files = ("forecasts.csv", "observations.csv", "stations.csv")
    _write_json(
        out / "manifest.json",
        {
            "seed": seed,
            "simulation": sim.to_dict(),
            "config_hash": _canonical_hash({"seed": seed, "simulation": sim.to_dict()}),
            "files": {f: _file_hash(out / f) for f in files},
        },
    )
    log.info("wrote %d forecasts and %d observations to %s", len(forecasts), len(observations), out)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    seed = _seed(args, cfg)
    exp = _experiment(args, cfg, seed)
    jobs = _jobs(args, cfg)
    cases, observations = _load_cases(args, cfg)
    try:
        table, _, tasks = prepare_experiment(exp, cases, observations)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    fits = run_fits(exp, table, tasks, jobs)
    out = Path(args.out) / "models"
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    for task, (params, err) in zip(tasks, fits):
        if params is None:
            log.warning("fit %s %s %s failed: %s", task.fit_date, task.lead_h, task.scope, err)
            failures.append({"file": _model_file(exp, task), "error": err})
            continue
        _write_json(out / _model_file(exp, task), params.to_dict())
    _write_json(out / f"{_tag(exp)}_manifest.json", {"experiment": exp.to_dict(), "failures": failures})
    log.info("%d of %d fits succeeded", len(tasks) - len(failures), len(tasks))
    if failures and len(failures) == len(tasks):
        return EXIT_PARTIAL
    return EXIT_OK


def _prediction_table(cases, pmf) -> PredictionTable:
    return PredictionTable(
        [c.station_id for c in cases],
        [c.forecast.init_time for c in cases],
        np.array([c.lead_time_h for c in cases], dtype=np.int64),
        np.array([c.obs_class for c in cases], dtype=np.int64),
        pmf,
    )


def _trained_experiment(args, cfg) -> ExperimentConfig:
    """Experiment config recorded by ``train`` for the selected model and scheme."""
    tag = _tag(_experiment(args, cfg, None))
    path = Path(args.out) / "models" / f"{tag}_manifest.json"
    try:
        with open(path, encoding="utf-8") as fh:
            return ExperimentConfig.from_dict(json.load(fh)["experiment"])
    except OSError as exc:
        raise CliError(f"no trained {tag} models: {exc}", EXIT_IO) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{path} is not a training manifest: {exc}") from None


def cmd_predict(args, cfg) -> int:
    exp = _trained_experiment(args, cfg)
    cases, observations = _load_cases(args, cfg)
    try:
        table, index, tasks = prepare_experiment(exp, cases, observations)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    models = Path(args.out) / "models"
    fits = []
    for task in tasks:
        path = models / _model_file(exp, task)
        if not path.exists():
            fits.append((None, f"missing parameter file {path.name}"))
            continue
        with open(path, encoding="utf-8") as fh:
            try:
                fits.append((params_from_dict(json.load(fh)), None))
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(f"{path}: {exc}") from None
    result = assemble_predictions(exp, table, index, tasks, fits)
    if not len(result):
        raise CliError("no verification case could be predicted", EXIT_PARTIAL)
    out = Path(args.out) / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    save_predictions(out / f"{_tag(exp)}.csv", _prediction_table(result.cases, result.model_pmf))
    save_predictions(out / "climatology.csv", _prediction_table(result.cases, result.climatology_pmf))
    save_predictions(out / "raw.csv", _prediction_table(result.cases, result.raw_pmf))
    log.info("wrote predictions for %d cases to %s", len(result), out)
    return EXIT_PARTIAL if result.failures else EXIT_OK


def _check_against_observations(tables: dict, observations) -> None:
    first = next(iter(tables.values()))
    for name, t in tables.items():
        if t.keys != first.keys:
            raise CliError(f"predictions {name!r} do not cover the same cases")
        if not np.array_equal(t.obs_class, first.obs_class):
            raise CliError(f"predictions {name!r} disagree on observed classes")
    obs = {(o.station_id, o.valid_time): o.visibility_class for o in observations}
    for station, init, lead, k in zip(first.station_id, first.init_time, first.lead_h.tolist(), first.obs_class.tolist()):
        found = obs.get((station, init + timedelta(hours=lead)))
        if found is None:
            raise CliError(f"no observation for {station} valid {lead} h after {init.isoformat()}")
        if found != k:
            raise CliError(f"obs_class {k} for {station} {init.isoformat()} +{lead} h disagrees with observations ({found})")


def cmd_verify(args, cfg) -> int:
    exp = _experiment(args, cfg, None)
    vcfg = dict(cfg.get("verification", {}))
    unknown = set(vcfg) - {"n_boot", "mean_block_len", "level", "pi", "pit_bins"}
    if unknown:
        raise CliError(f"unknown verification config keys {sorted(unknown)}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    pred_dir = Path(args.out) / "predictions"
    names = (_tag(exp),) + REFERENCES
    tables = {}
    for name in names:
        path = pred_dir / f"{name}.csv"
        if not path.exists():
            raise CliError(f"missing predictions file {path}", EXIT_IO)
        tables[name] = load_predictions(path)
    observations = load_observations(_data_dir(args, cfg) / "observations.csv")
    _check_against_observations(tables, observations)
    first = tables[names[0]]
    try:
        report = aggregate_report(
            {n: t.pmf for n, t in tables.items()},
            first.obs_class,
            first.lead_h,
            references=REFERENCES,
            time_order=first.valid_time_key,
            n_boot=int(vcfg.get("n_boot", 2000)),
            mean_block_len=vcfg.get("mean_block_len"),
            level=float(vcfg.get("level", 0.95)),
            pi=float(vcfg.get("pi", 0.01)),
            seed=seed,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out) / "scores"
    out.mkdir(parents=True, exist_ok=True)
    for ref in REFERENCES:
        report.to_csv(out / f"scores_vs_{ref}.csv", ref)
    report.to_json(out / "scores.json")
    n_bins = int(vcfg.get("pit_bins", 10))
    for i, (name, t) in enumerate(tables.items()):
        _, counts = pit_table(t.pmf, t.obs_class, n_bins, seed=[seed, i])
        with open(out / f"pit_{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count", "fraction"])
            for b, c in enumerate(counts.tolist()):
                w.writerow([repr(b / n_bins), repr((b + 1) / n_bins), c, repr(c / max(1, len(t)))])
    log.info("scored %d cases for %s", len(first), ", ".join(names))
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    path = Path(args.out) / "scores" / "scores.json"
    try:
        with open(path, encoding="utf-8") as fh:
            report = ScoreReport.from_dict(json.load(fh))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{path} is not a score report: {exc}") from None
    out = Path(args.out) / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "skill_curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lead_h", "model", "reference", "mean_crps", "mean_logs", "crpss", "crpss_lo", "crpss_hi", "logss", "logss_lo", "logss_hi"])
        for ref in report.references:
            for r in sorted(report.rows, key=lambda r: (r.model, r.lead_h)):
                s = r.skill[ref]
                w.writerow(
                    [r.lead_h, r.model, ref]
                    + [repr(float(v)) for v in (r.mean_crps, r.mean_logs, s.crpss, s.crpss_lo, s.crpss_hi, s.logss, s.logss_lo, s.logss_hi)]
                )
    with open(out / "ratio_vs_raw.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lead_h", "model", "crps_pct_of_raw", "logs_pct_of_raw"])
        for r in sorted(report.rows, key=lambda r: (r.model, r.lead_h)):
            try:
                raw = report.row(r.lead_h, "raw")
            except KeyError:
                raise CliError("score report has no 'raw' rows to normalize by") from None
            w.writerow([r.lead_h, r.model, repr(100.0 * r.mean_crps / raw.mean_crps), repr(100.0 * r.mean_logs / raw.mean_logs)])
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vispost", description="Visibility ensemble post-processing experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--jobs", type=int, help="parallel fit processes (default: available cores)")
        p.add_argument("--model", choices=("polr", "mlp"))
        p.add_argument("--scheme", choices=("local", "semi_local", "regional"))
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _read_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except DataFormatError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
