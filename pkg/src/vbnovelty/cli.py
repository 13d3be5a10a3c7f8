"""Command-line entry point: simulate, fit, evaluate, compare-mcmc."""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .cavi import AllRunsDivergedError, CaviConfig, ConfigError, multi_start
from .data import (DataFormatError, ScenarioSpec, generate_scenario, load_csv, load_statlog,
                   rescale, write_csv)
from .gibbs import run_gibbs
from .metrics import all_metrics, ari, confusion_matrix
from .robust import MRCDConfig, default_hyperparams

MCMC_MAX_ROWS = 2000

# name -> (section, parser); None-valued flags fall through to the file, then to the default
SETTINGS = {
    "truncation": ("hyperparams", int, 10),
    "gamma": ("hyperparams", float, 5.0),
    "alpha": ("hyperparams", float, 0.1),
    "lambda_nov": ("hyperparams", float, 0.1),
    "dof_nov": ("hyperparams", float, None),
    "nov_scale_factor": ("hyperparams", float, None),
    "novelty_scale": ("hyperparams", str, "overall"),
    "lambda_obs": ("hyperparams", float, 200.0),
    "dof_offset": ("hyperparams", int, 200),
    "h_frac": ("hyperparams", float, 0.75),
    "rho": ("hyperparams", float, 0.1),
    "tol": ("cavi", float, 1e-9),
    "max_iter": ("cavi", int, 500),
    "n_starts": ("cavi", int, 1),
    "init_strategy": ("cavi", str, "kmeans_plus_lhs"),
    "train": ("data", str, None),
    "test": ("data", str, None),
    "format": ("data", str, "csv"),
    "label_column": ("data", str, "label"),
    "drop": ("data", str, ""),
    "rescale": ("data", float, None),
}


# settings restricted to a fixed vocabulary; the parser enforces it for flags, this for files
CHOICES = {
    "novelty_scale": ("overall", "within"),
    "init_strategy": ("kmeans_plus_lhs", "random"),
    "format": ("csv", "statlog"),
}


class CliError(Exception):
    """Problem with user input; reported without a traceback."""


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def read_config(path) -> dict:
    """Parse an INI file into {setting: value}, rejecting unknown keys."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise CliError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in SETTINGS:
                raise CliError(f"{path}: unknown key {key!r} in [{section}]")
            want, cast, _ = SETTINGS[key]
            if section != want:
                raise CliError(f"{path}: key {key!r} belongs in [{want}], found in [{section}]")
            if raw.strip().lower() in ("", "none"):
                out[key] = None
                continue
            try:
                out[key] = cast(raw)
            except ValueError:
                raise CliError(f"{path}: [{section}] {key} = {raw!r} is not a valid "
                               f"{cast.__name__}") from None
    return out


def resolve_settings(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    settings = {key: default for key, (_, _, default) in SETTINGS.items()}
    if getattr(args, "config", None):
        settings.update(read_config(args.config))
    for key in SETTINGS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    for key, allowed in CHOICES.items():
        if settings[key] not in allowed:
            raise CliError(f"{key} must be one of {', '.join(allowed)}; got {settings[key]!r}")
    return settings


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory {out} is not writable")
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload):
    # repr of a float is the shortest string that round-trips, so no digits are lost
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_dataset(settings):
    if not settings["train"] or not settings["test"]:
        raise CliError("both --train and --test are required (flags or [data] section)")
    for key in ("train", "test"):
        if not Path(settings[key]).is_file():
            raise CliError(f"{key} file not found: {settings[key]}")
    fmt = settings["format"]
    if fmt == "csv":
        data = load_csv(settings["train"], settings["test"], settings["label_column"])
    elif fmt == "statlog":
        drop = [c.strip() for c in settings["drop"].split(",") if c.strip()]
        data = load_statlog(settings["train"], settings["test"], drop)
    else:
        raise CliError(f"unknown data format {fmt!r}; use csv or statlog")
    if settings["rescale"] is not None:
        data = rescale(data, settings["rescale"])
    return data


def build_hyperparams(data, settings, seed):
    return default_hyperparams(
        data, truncation=settings["truncation"], gamma=settings["gamma"], alpha=settings["alpha"],
        lambda_nov=settings["lambda_nov"], dof_nov=settings["dof_nov"],
        nov_scale_factor=settings["nov_scale_factor"], nov_scale_source=settings["novelty_scale"],
        lambda_obs=settings["lambda_obs"], dof_offset=settings["dof_offset"],
        mrcd=MRCDConfig(h_frac=settings["h_frac"], rho=settings["rho"]), seed=seed)


def build_cavi_config(settings, seed) -> CaviConfig:
    return CaviConfig(tol=settings["tol"], max_iter=settings["max_iter"],
                      n_starts=settings["n_starts"], seed=seed,
                      init_strategy=settings["init_strategy"])


def cluster_summaries(labels, hyper, state, class_names) -> list:
    """One entry per occupied MAP cluster; tiny novelty clusters are flagged as outliers."""
    M = len(labels)
    cutoff = max(3.0, 0.001 * M)
    out = []
    for k in np.unique(labels):
        k = int(k)
        size = int(np.sum(labels == k))
        novelty = k > hyper.n_known
        niw = state.niws[k - 1]
        out.append({
            "id": k,
            "kind": "novelty" if novelty else "known",
            "name": None if novelty else class_names.get(k),
            "size": size,
            "weight": size / M,
            "mean": niw.mean,
            "covariance": niw.expected_covariance(),
            "outlier": bool(novelty and size < cutoff),
        })
    return out


def write_confusion(path, truth, pred, class_names):
    cm = confusion_matrix(truth, pred)
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(cm.to_rows(row_names=class_names))


def write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "label"])
        writer.writerows((i, int(v)) for i, v in enumerate(labels))


def _metrics(data, pred, n_known):
    if data.test_labels is None:
        return None
    return all_metrics(data.test_labels, pred, data.meta.get("novelty_ids", ()), n_known)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        spec = ScenarioSpec(args.study, args.q, args.p, args.variant, args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = _out_dir(args.out_dir)
    data = generate_scenario(spec)
    names = [f"x{i + 1}" for i in range(spec.p)]
    write_csv(out / "train.csv", data.train_x, data.train_labels, names)
    write_csv(out / "test.csv", data.test_x, data.test_labels, names)
    write_json(out / "manifest.json", {
        "version": __version__,
        "command": "simulate",
        "seed": spec.seed,
        "spec": {"study": spec.study.value, "variant": spec.variant.value, "q": spec.q, "p": spec.p},
        "rows": {"train": len(data.train_x), "test": len(data.test_x)},
        "class_names": data.meta["class_names"],
        "novelty_ids": data.meta["novelty_ids"],
        "sha256": {"train.csv": _sha256(out / "train.csv"), "test.csv": _sha256(out / "test.csv")},
    })
    print(f"wrote {len(data.train_x)} train and {len(data.test_x)} test rows to {out}")
    return 0


def cmd_fit(args) -> int:
    settings = resolve_settings(args)
    out = _out_dir(args.out_dir)
    data = load_dataset(settings)
    hyper = build_hyperparams(data, settings, args.seed)
    config = build_cavi_config(settings, args.seed)
    started = time.perf_counter()
    fit = multi_start(data, hyper, config, n_jobs=args.threads)
    seconds = time.perf_counter() - started
    class_names = data.meta.get("class_names", {})

    with open(out / "elbo_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "iteration", "elbo"])
        for run, trace in sorted((fit.start_traces or {fit.run_index: fit.elbo_trace}).items()):
            for it, value in enumerate(trace):
                writer.writerow([run, it, format(float(value), ".17g")])
    write_labels(out / "labels.csv", fit.map_labels)
    metrics = _metrics(data, fit.map_labels, hyper.n_known)
    if data.test_labels is not None:
        write_confusion(out / "confusion.csv", data.test_labels, fit.map_labels, class_names)

    write_json(out / "report.json", {
        "version": __version__,
        "command": "fit",
        "seed": args.seed,
        "config": settings,
        "data": {"n_train": len(data.train_x), "n_test": len(data.test_x), "p": data.dim,
                 "n_known": hyper.n_known, "class_names": class_names,
                 "novelty_ids": data.meta.get("novelty_ids", [])},
        "fit": {"elbo": fit.elbo, "iterations": fit.iterations, "converged": fit.converged,
                "best_run": fit.run_index, "n_starts": config.n_starts},
        "map_labels": fit.map_labels,
        "clusters": cluster_summaries(fit.map_labels, hyper, fit.state, class_names),
        "metrics": metrics,
    })
    # wall-clock lives apart from the report so that the report is reproducible
    write_json(out / "timing.json", {"fit_seconds": seconds})
    line = f"best run {fit.run_index}: ELBO {fit.elbo:.6f} after {fit.iterations} iterations"
    if metrics:
        line += f"; ARI {metrics['ari']:.3f} AMI {metrics['ami']:.3f} FMI {metrics['fmi']:.3f}"
    print(line)
    return 0


def read_label_file(path, label_column="label") -> np.ndarray:
    if not Path(path).is_file():
        raise CliError(f"label file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise CliError(f"{path}: no label rows")
    header = [h.strip() for h in rows[0]]
    col = header.index(label_column) if label_column in header else len(header) - 1
    try:
        return np.array([int(r[col]) for r in rows[1:]])
    except (ValueError, IndexError):
        raise CliError(f"{path}: labels must be integers in column {header[col]!r}") from None


def cmd_evaluate(args) -> int:
    truth = read_label_file(args.truth, args.label_column)
    pred = read_label_file(args.pred, args.label_column)
    if len(truth) != len(pred):
        raise CliError(f"length mismatch: {args.truth} has {len(truth)} labels, "
                       f"{args.pred} has {len(pred)}")
    out = _out_dir(args.out_dir)
    novelty_ids = args.novelty_ids or []
    metrics = all_metrics(truth, pred, novelty_ids, args.n_known)
    write_json(out / "metrics.json", {"version": __version__, "command": "evaluate",
                                      "seed": args.seed, "n": len(truth), "metrics": metrics})
    write_confusion(out / "confusion.csv", truth, pred, {})
    print(" ".join(f"{k.upper()} {v:.4f}" for k, v in metrics.items() if v is not None))
    return 0


def cmd_compare_mcmc(args) -> int:
    settings = resolve_settings(args)
    data = load_dataset(settings)
    if len(data.test_x) > MCMC_MAX_ROWS and not args.force:
        raise CliError(f"test set has {len(data.test_x)} rows; the Gibbs sampler is a desk-scale "
                       f"oracle limited to {MCMC_MAX_ROWS} rows (pass --force to override)")
    out = _out_dir(args.out_dir)
    hyper = build_hyperparams(data, settings, args.seed)
    config = build_cavi_config(settings, args.seed)

    started = time.perf_counter()
    fit = multi_start(data, hyper, config, n_jobs=args.threads)
    vb_seconds = time.perf_counter() - started
    truncation = args.gibbs_truncation or hyper.truncation
    chain = run_gibbs(data.test_x, hyper, iters=args.iters, burn_in=args.burn_in,
                      rng=np.random.SeedSequence([args.seed, 1]), truncation=truncation,
                      thin=args.thin, reference_labels=fit.map_labels)

    mean_gaps = {}
    for k, gibbs_mean in chain.matched_means.items():
        niw = fit.state.niws[k - 1]
        sd = np.sqrt(np.diag(niw.expected_covariance()))
        mean_gaps[k] = float(np.max(np.abs(niw.mean - gibbs_mean) / sd))
    report = {
        "version": __version__,
        "command": "compare-mcmc",
        "seed": args.seed,
        "config": dict(settings, iters=args.iters, burn_in=args.burn_in, thin=args.thin,
                       gibbs_truncation=truncation),
        "vb_labels": fit.map_labels,
        "gibbs_labels": chain.point_labels,
        "cross_ari": ari(fit.map_labels, chain.point_labels),
        "mean_gap_sd": mean_gaps,
        "vb_seconds": vb_seconds,
        "gibbs_seconds": chain.seconds,
        "metrics": {"vb": _metrics(data, fit.map_labels, hyper.n_known),
                    "gibbs": _metrics(data, chain.point_labels, hyper.n_known)},
    }
    write_json(out / "comparison.json", report)
    print(f"cross-ARI {report['cross_ari']:.4f}; VB {vb_seconds:.2f}s, Gibbs {chain.seconds:.2f}s")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                   help="worker processes for multi-start runs (default: all cores)")
    p.add_argument("--config", help="INI file with [hyperparams], [cavi], [data] sections")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--train", help="training file (labels required)")
    g.add_argument("--test", help="test file (labels optional)")
    g.add_argument("--format", choices=CHOICES["format"])
    g.add_argument("--label-column", dest="label_column")
    g.add_argument("--drop", help="statlog: comma-separated classes removed from training")
    g.add_argument("--rescale", type=float, help="divide every feature by this factor")
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--truncation", type=_positive_int, help="novelty truncation T (default 10)")
    g.add_argument("--gamma", type=float, help="stick-breaking concentration (default 5)")
    g.add_argument("--alpha", type=float, help="Dirichlet concentration (default 0.1)")
    g.add_argument("--lambda-nov", dest="lambda_nov", type=float,
                   help="novelty prior precision scale (default 0.1)")
    g.add_argument("--dof-nov", dest="dof_nov", type=float, help="novelty prior dof (default p+2)")
    g.add_argument("--nov-scale-factor", dest="nov_scale_factor", type=float,
                   help="novelty scale multiplier (default p+1)")
    g.add_argument("--novelty-scale", dest="novelty_scale", choices=CHOICES["novelty_scale"],
                   help="covariance behind the novelty scale (default overall)")
    g.add_argument("--lambda-obs", dest="lambda_obs", type=float,
                   help="known-class precision scale (default 200)")
    g.add_argument("--dof-offset", dest="dof_offset", type=int,
                   help="known-class dof = p + 1 + offset (default 200)")
    g.add_argument("--h-frac", dest="h_frac", type=float, help="MRCD subset fraction (default 0.75)")
    g.add_argument("--rho", type=float, help="MRCD regularization weight (default 0.1)")
    g = p.add_argument_group("variational fit")
    g.add_argument("--tol", type=float, help="absolute ELBO tolerance (default 1e-9)")
    g.add_argument("--max-iter", dest="max_iter", type=_positive_int,
                   help="sweeps per run (default 500)")
    g.add_argument("--n-starts", dest="n_starts", type=_positive_int,
                   help="independent starts; the highest final ELBO wins (default 1)")
    g.add_argument("--init-strategy", dest="init_strategy", choices=CHOICES["init_strategy"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbnovelty", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated scenario to train/test CSVs")
    _common(p)
    p.add_argument("--study", required=True, type=str.upper, choices=["SS1", "SS2", "SS3"])
    p.add_argument("--variant", default="default",
                   choices=["default", "simple", "complex", "low_overlap", "high_overlap"])
    p.add_argument("--q", type=float, default=1.0, help="sample size multiplier")
    p.add_argument("--p", type=int, default=2, help="dimension (extra columns are noise)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="robust elicitation plus multi-start variational fit")
    _common(p)
    _model_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="compare two label files")
    _common(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--label-column", default="label")
    p.add_argument("--n-known", type=int, help="ids above this count as novelty (enables F1)")
    p.add_argument("--novelty-ids", type=int, nargs="*", help="true novelty ids for F1")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare-mcmc", help="variational fit versus the Gibbs oracle")
    _common(p)
    _model_flags(p)
    p.add_argument("--iters", type=_positive_int, default=20000)
    p.add_argument("--burn-in", type=int, default=10000)
    p.add_argument("--thin", type=_positive_int, default=1)
    p.add_argument("--gibbs-truncation", type=_positive_int,
                   help="Gibbs novelty truncation (default: same as --truncation)")
    p.add_argument("--force", action="store_true", help=f"allow more than {MCMC_MAX_ROWS} rows")
    p.set_defaults(func=cmd_compare_mcmc)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, AllRunsDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
