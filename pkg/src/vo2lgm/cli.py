"""Command-line front end: ``vo2lgm {fit,predict,cv,ppc,simulate,eval}``.

Every command writes tidy CSVs plus a ``provenance.json`` sidecar holding the
config, its hash, the seed and SHA-256 digests of the inputs. Settings come
from defaults, then flags, then an optional ``--config`` INI file (the file
wins).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .bundle import BundleError, load_fit, read_meta, save_fit
from .config import DataConfig, RunConfig, RunSettings, default_jobs, file_digest, load_ini
from .dataset import (
    DataError,
    Dataset,
    build_frame,
    exclude_patients_younger_than,
    filter_quality,
    load_dataset,
    screen,
    smooth,
)
from .evaluate import confusion, lopo_cv, ppc_split, rps, zero_one_loss
from .inference import fit as fit_model
from .inference import mixture_quantile
from .lgm import PriorSpec
from .predict import MODES, PredictionError, argmax_category, classify, predict_rows, prediction_table
from .simulate import CovariateSettings, GenerativeConfig, export, simulate

log = logging.getLogger("vo2lgm")

FLOAT_FORMAT = None  # shortest repr that round-trips


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


def _key_values(items, target_cls, what):
    out = {}
    names = {f.name: f for f in dataclasses.fields(target_cls)}
    for item in items or ():
        if "=" not in item:
            raise CliError(f"--{what} expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        if k not in names:
            raise CliError(f"unknown {what} setting {k!r}")
        default = getattr(target_cls(), k)
        if isinstance(default, tuple):
            out[k] = tuple(float(x) for x in v.split(","))
        else:
            out[k] = type(default)(v)
    return out


def build_config(args) -> RunConfig:
    screen_bounds = []
    for item in getattr(args, "screen", None) or ():
        try:
            col, rng = item.split("=", 1)
            lo, hi = (float(x) for x in rng.split(","))
        except ValueError as exc:
            raise CliError(f"--screen expects COL=LO,HI, got {item!r}") from exc
        screen_bounds.append((col, lo, hi))
    data = DataConfig(
        smoothing_window=args.smoothing_window,
        quality=tuple(args.quality.split(",")) if args.quality else DataConfig().quality,
        screen=tuple(screen_bounds),
        min_age=args.min_age,
        petco2_unit=args.petco2_unit,
        include_patient_covariates=not args.no_patient_covariates,
    )
    priors = PriorSpec(**_key_values(args.prior, PriorSpec, "prior"))
    inference = dataclasses.replace(
        RunConfig().inference, **_key_values(args.inference, type(RunConfig().inference), "inference")
    )
    run = RunSettings(
        seed=args.seed,
        n_samples=args.n_samples,
        boundaries=tuple(args.boundaries),
        alert_threshold=args.alert_threshold,
        mode=getattr(args, "mode", "new_patient"),
        t_cut=getattr(args, "t_cut", 1000.0),
        session_id=getattr(args, "session_id", None),
        n_jobs=args.n_jobs,
    )
    cfg = RunConfig(data=data, priors=priors, inference=inference, run=run)
    if args.config:
        cfg = load_ini(args.config, base=cfg)
    return cfg


def provenance(cfg: RunConfig, command, inputs=()):
    return {
        "command": command,
        "package_version": __version__,
        "config_hash": cfg.hash(),
        "seed": cfg.run.seed,
        "config": cfg.to_dict(hashed_only=True),
        "inputs": {Path(p).name: file_digest(p) for p in inputs if p is not None},
    }


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(df, path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


# ---------------------------------------------------------------- data


def prepare(ds: Dataset, data: DataConfig) -> Dataset:
    if data.screen:
        ds = screen(ds, data.screen_bounds)
    ds = filter_quality(ds, set(data.quality))
    if data.min_age is not None:
        ds = exclude_patients_younger_than(ds, data.min_age)
    if data.smoothing_window > 1:
        ds = smooth(ds, data.smoothing_window)
    if ds.is_empty:
        raise CliError("no rows left after preprocessing")
    return ds


def _load(args, cfg):
    for p in (args.breaths, args.sessions, args.patients):
        if p is not None and not Path(p).is_file():
            raise CliError(f"input file not found: {p}")
    ds = load_dataset(args.breaths, args.sessions, args.patients, petco2_unit=cfg.data.petco2_unit)
    return prepare(ds, cfg.data)


def _inputs(args):
    return [p for p in (args.breaths, args.sessions, args.patients) if p is not None]


# ---------------------------------------------------------------- commands


def cmd_fit(args):
    cfg = build_config(args)
    ds = _load(args, cfg)
    frame = build_frame(ds, include_patient_covariates=cfg.data.include_patient_covariates)
    inf = dataclasses.replace(cfg.inference, n_jobs=cfg.run.n_jobs)
    res = fit_model(frame, cfg.priors, inf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, "fit", _inputs(args))
    save_fit(res, out / "fit.zip", provenance=prov)
    table = pd.DataFrame(res.summary_table(), columns=["term", "mean", "sd", "2.5%", "97.5%"])
    _write_csv(table, out / "summary.csv")
    _write_json(out / "provenance.json", prov)
    log.info("wrote %s", out)
    return 0


def cmd_predict(args):
    cfg = build_config(args)
    res = load_fit(args.bundle)
    ds = _load(args, cfg)
    frame = build_frame(ds, centering=res.centering, include_patient_covariates=cfg.data.include_patient_covariates)
    draws = predict_rows(res, frame, mode=cfg.run.mode, n=cfg.run.n_samples, seed=cfg.run.seed)
    table = prediction_table(frame, draws, cfg.run.thresholds, cfg.run.alert_threshold)
    if ds.has_vo2:
        table["observed_vo2"] = ds.breaths["vo2"].to_numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(table, out)
    prov = provenance(cfg, "predict", _inputs(args) + [args.bundle])
    prov["bundle_config_hash"] = read_meta(args.bundle)["provenance"].get("config_hash")
    _write_json(out.with_name(out.stem + ".provenance.json"), prov)
    return 0


def cmd_cv(args):
    cfg = build_config(args)
    ds = _load(args, cfg)
    report = lopo_cv(ds, cfg.cv_config(), seed=cfg.run.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(report.fold_table(), out / "cv_folds.csv")
    if any(f.ok for f in report.folds):
        _write_csv(report.predictions, out / "cv_predictions.csv")
        _write_csv(report.confusion_table(), out / "cv_confusion.csv")
        _write_csv(report.quality_table(ds.session_quality()), out / "cv_quality.csv")
        pooled = pd.DataFrame(
            [{"n_folds": len(report.folds), "n_failed": sum(not f.ok for f in report.folds),
              "n_rows": len(report.predictions), "accuracy": 1 - report.zero_one_loss,
              "zero_one_loss": report.zero_one_loss, "rps": report.mean_rps}]
        )
        _write_csv(pooled, out / "cv_pooled.csv")
    _write_json(out / "provenance.json", provenance(cfg, "cv", _inputs(args)))
    failed = [f.patient_id for f in report.folds if not f.ok]
    if failed:
        log.warning("folds failed: %s", ", ".join(failed))
    return 0 if len(failed) < len(report.folds) else 1


def cmd_ppc(args):
    cfg = build_config(args)
    if cfg.run.session_id is None:
        raise CliError("ppc needs --session-id")
    ds = _load(args, cfg)
    train, test = ppc_split(ds, cfg.run.session_id, cfg.run.t_cut)
    frame = build_frame(train, include_patient_covariates=cfg.data.include_patient_covariates)
    res = fit_model(frame, cfg.priors, dataclasses.replace(cfg.inference, n_jobs=cfg.run.n_jobs))
    target = ds.subset((ds.breaths["session_id"] == str(cfg.run.session_id)).to_numpy())
    tf = build_frame(target, centering=res.centering, include_patient_covariates=cfg.data.include_patient_covariates)
    draws = predict_rows(res, tf, mode="in_sample", n=cfg.run.n_samples, seed=cfg.run.seed)
    lo, hi = draws.interval(0.95)
    med = np.array([
        mixture_quantile(0.5, draws.mean[r], np.sqrt(np.maximum(draws.var[r], 1e-300)),
                         np.full(draws.mean.shape[1], 1.0 / draws.mean.shape[1]), xtol=1e-9)
        for r in range(draws.n_rows)
    ])
    t = target.breaths["t"].to_numpy()
    table = pd.DataFrame(
        {
            "patient_id": target.breaths["patient_id"].to_numpy(),
            "session_id": target.breaths["session_id"].to_numpy(),
            "t": t,
            "segment": np.where(t < cfg.run.t_cut, "train", "test"),
            "observed_vo2": target.breaths["vo2"].to_numpy(),
            "pred_mean_log_vo2": draws.summary_mean(),
            "pred_sd_log_vo2": draws.summary_sd(),
            "pred_median_vo2": np.exp(med),
            "lower95_vo2": np.exp(lo),
            "upper95_vo2": np.exp(hi),
        }
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(table, out / "ppc.csv")
    _write_json(out / "provenance.json", provenance(cfg, "ppc", _inputs(args)))
    return 0


def cmd_simulate(args):
    cov = CovariateSettings(cough_rate=args.cough_rate)
    gen = GenerativeConfig(
        n_patients=args.n_patients,
        sessions_per_patient=args.sessions_per_patient,
        breaths_per_session=args.breaths_per_session,
        mean_gap=args.mean_gap,
        jitter=args.jitter,
        covariates=cov,
        seed=args.seed,
    )
    ds, truth = simulate(gen)
    out = export(ds, truth, args.out, gen)
    cfg = build_config(args)
    prov = provenance(cfg, "simulate")
    prov["generative_config"] = json.loads((out / "generative_config.json").read_text())
    _write_json(out / "provenance.json", prov)
    return 0


def cmd_eval(args):
    cfg = build_config(args)
    path = Path(args.predictions)
    if not path.is_file():
        raise CliError(f"predictions file not found: {path}")
    p = pd.read_csv(path)
    cols = ["p_rest", "p_low", "p_medium", "p_high"]
    missing = [c for c in cols + ["observed_vo2"] if c not in p.columns]
    if missing:
        raise CliError(f"{path}: missing column(s) {', '.join(missing)}")
    probs = p[cols].to_numpy(dtype=float)
    obs = cfg.run.thresholds.category_of(p["observed_vo2"].to_numpy(dtype=float))
    pred = argmax_category(probs)
    cm = confusion(pred, obs)
    metrics = pd.DataFrame(
        [{"n_rows": len(p), "accuracy": cm.accuracy, "zero_one_loss": zero_one_loss(pred, obs),
          "rps": float(np.mean(rps(probs, obs)))}]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(metrics, out / "metrics.csv")
    names = list(cfg.run.thresholds.names)
    conf = pd.DataFrame(cm.normalized, columns=names)
    conf.insert(0, "observed", names)
    conf["n"] = cm.counts.sum(axis=1)
    _write_csv(conf, out / "confusion.csv")
    _write_json(out / "provenance.json", provenance(cfg, "eval", [path]))
    return 0


# ---------------------------------------------------------------- parser


def _common(p, data=True):
    p.add_argument("--config", help="INI config file; its values override flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=default_jobs(), help="parallelism degree (default: all cores)")
    p.add_argument("--n-samples", type=int, default=1000, help="joint posterior draws")
    p.add_argument("--boundaries", type=float, nargs=3, default=[3.5, 5.0, 7.5], metavar=("B1", "B2", "B3"))
    p.add_argument("--alert-threshold", type=float, default=0.20)
    p.add_argument("--smoothing-window", type=int, default=3)
    p.add_argument("--quality", help="comma-separated session qualities to keep")
    p.add_argument("--screen", action="append", metavar="COL=LO,HI", help="drop rows outside bounds")
    p.add_argument("--min-age", type=float)
    p.add_argument("--petco2-unit", choices=("kPa", "mmHg"), default="kPa")
    p.add_argument("--no-patient-covariates", action="store_true")
    p.add_argument("--prior", action="append", metavar="KEY=VALUE", help="override a prior setting")
    p.add_argument("--inference", action="append", metavar="KEY=VALUE", help="override an inference setting")
    if data:
        p.add_argument("--breaths", required=True, help="breath-by-breath CSV")
        p.add_argument("--sessions", required=True, help="session metadata CSV")
        p.add_argument("--patients", required=True, help="patient metadata CSV")


def make_parser():
    ap = argparse.ArgumentParser(prog="vo2lgm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model and write a bundle plus summary CSV")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="per-row category probabilities from a fit bundle")
    _common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--mode", choices=MODES, default="new_patient")
    p.add_argument("--out", required=True, help="prediction CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", help="leave-one-patient-out cross-validation")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ppc", help="posterior predictive check on a split session")
    _common(p)
    p.add_argument("--session-id")
    p.add_argument("--t-cut", type=float, default=1000.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    _common(p, data=False)
    p.add_argument("--n-patients", type=int, default=8)
    p.add_argument("--sessions-per-patient", type=int, default=3)
    p.add_argument("--breaths-per-session", type=int, default=150)
    p.add_argument("--mean-gap", type=float, default=3.0)
    p.add_argument("--jitter", type=float, default=0.5)
    p.add_argument("--cough-rate", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="metrics from a stored prediction CSV with observed_vo2")
    _common(p, data=False)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DataError, PredictionError, BundleError, FileNotFoundError, ValueError) as exc:
        print(f"vo2lgm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
