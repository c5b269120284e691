"""Command line front end.

Subcommands: ``simulate`` (materialise a benchmark configuration),
``fit`` (run the estimator and optional comparators), ``bootstrap``
(add intervals to an existing fit), ``evaluate`` (transfer-quality
metrics against a validation fit), and ``bench`` (replicated study
report).  Exit codes: 0 success, 1 usage error, 2 data error, 3
numerical failure.  Every failure also emits one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import __version__
from .estimator import AtrelConfig, bootstrap_ci, effective_threads, fit_atrel
from .comparators import (
    ComparatorSpec,
    fit_dml_be,
    fit_iw_only,
    fit_parametric_dr,
    fit_source_glm,
)
from .exceptions import (
    AtrelError,
    CalibrationError,
    ConfigurationError,
    ConvergenceError,
    DomainError,
    GeneratorError,
    InferenceError,
    IngestionError,
    MetricError,
    NoRootError,
    StateError,
)
from .io import (
    ColumnSchema,
    load_dataset,
    orthogonalize,
    read_manifest,
    save_dataset,
    write_manifest,
    write_report_csv,
)
from .metrics import metric_auc, metric_cc, metric_fcr, metric_rmspe
from .model import NuisanceSpec, TransferDataset
from .numerics import IDENTITY, LOGIT
from .simbench import SimConfig, default_spec, gen_population, run_study

_USAGE_ERRORS = (ConfigurationError, DomainError, StateError)
_DATA_ERRORS = (IngestionError, MetricError, GeneratorError)
_NUMERIC_ERRORS = (ConvergenceError, CalibrationError, NoRootError, InferenceError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _emit_error(kind: str, message: str, **context) -> None:
    payload = {"error": kind, "message": message}
    if context:
        payload["context"] = {k: v for k, v in context.items() if v is not None}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _link(name: str):
    if name == "logit":
        return LOGIT
    if name == "identity":
        return IDENTITY
    raise ConfigurationError(f"unknown link {name!r}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="atrel", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="materialise a benchmark dataset")
    sim.add_argument("--config", required=True, choices=("i", "ii", "iii", "iv"))
    sim.add_argument("--n", type=int, default=500)
    sim.add_argument("--N", type=int, default=1000, dest="n_target")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--truncation", choices=("clamp", "reject"), default="clamp")
    sim.add_argument("--out", required=True)

    fit = sub.add_parser("fit", help="fit the transfer regression")
    _add_data_flags(fit)
    _add_spec_flags(fit)
    fit.add_argument("--folds", type=int, default=5)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--bootstrap", type=int, default=0)
    fit.add_argument("--level", type=float, default=0.95)
    fit.add_argument("--comparators", default="",
                     help="comma list from source,iw,parametric,dml_be")
    fit.add_argument("--threads", type=int, default=None)
    fit.add_argument("--out", required=True, help="output prefix")

    boot = sub.add_parser("bootstrap", help="add intervals to an existing fit")
    boot.add_argument("--manifest", required=True)
    boot.add_argument("--reps", type=int, default=200)
    boot.add_argument("--level", type=float, default=None)
    boot.add_argument("--threads", type=int, default=None)
    boot.add_argument("--out", default=None, help="output prefix (default: in place)")

    ev = sub.add_parser("evaluate", help="transfer-quality metrics")
    _add_data_flags(ev)
    ev.add_argument("--fit", required=True, help="fit manifest with beta_hat")
    ev.add_argument("--valid-fit", default=None, help="manifest with beta_valid")
    ev.add_argument("--beta-valid", default=None,
                    help="comma list of validation coefficients")
    ev.add_argument("--labels", default=None,
                    help="CSV with labelled target rows for AUC")
    ev.add_argument("--out", required=True)

    bench = sub.add_parser("bench", help="replicated simulation study")
    bench.add_argument("--config", required=True, choices=("i", "ii", "iii", "iv"))
    bench.add_argument("--reps", type=int, default=100)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--n", type=int, default=500)
    bench.add_argument("--N", type=int, default=1000, dest="n_target")
    bench.add_argument("--estimators", default="atrel")
    bench.add_argument("--bootstrap-reps", type=int, default=100)
    bench.add_argument("--folds", type=int, default=5)
    bench.add_argument("--backend", choices=("kernel", "sieve"), default="kernel")
    bench.add_argument("--truncation", choices=("clamp", "reject"), default="clamp")
    bench.add_argument("--oracle-rows", type=int, default=1_000_000)
    bench.add_argument("--threads", type=int, default=None)
    bench.add_argument("--out", required=True)
    bench.add_argument("--manifest", default=None)
    return parser


def _add_data_flags(cmd) -> None:
    cmd.add_argument("--data", default=None, help="single-file dataset")
    cmd.add_argument("--source", default=None, help="source CSV (two-file mode)")
    cmd.add_argument("--target", default=None, help="target CSV (two-file mode)")
    cmd.add_argument("--response", default="y")
    cmd.add_argument("--population-column", default="population")
    cmd.add_argument("--covariates", default="",
                     help="comma list; default: every non-role column")
    cmd.add_argument("--orthogonalize", default=None, metavar="A:B",
                     help="residualise covariate A on covariate B (pooled)")


def _add_spec_flags(cmd) -> None:
    cmd.add_argument("--a", required=True, help="comma list of working-model covariates")
    cmd.add_argument("--psi", default="", help="density-ratio covariates (default: all)")
    cmd.add_argument("--phi", default="", help="imputation covariates (default: all)")
    cmd.add_argument("--z", required=True, help="nonparametric covariates")
    cmd.add_argument("--link", choices=("logit", "identity"), default="logit")
    cmd.add_argument("--backend", choices=("kernel", "sieve"), default="kernel")
    cmd.add_argument("--bandwidth-scale", type=float, default=None)
    cmd.add_argument("--ridge-weight", type=float, default=None)
    cmd.add_argument("--ridge-imputation", type=float, default=None)


def _load_from_args(args) -> TransferDataset:
    schema = ColumnSchema(
        response_column=args.response,
        covariate_columns=_csv_list(args.covariates),
        population_column=args.population_column,
    )
    if args.data:
        data = load_dataset(args.data, schema=schema)
    elif args.source and args.target:
        data = load_dataset(args.source, args.target, schema=schema)
    else:
        raise ConfigurationError("provide --data or both --source and --target")
    if args.orthogonalize:
        try:
            col, against = args.orthogonalize.split(":")
        except ValueError:
            raise ConfigurationError("--orthogonalize expects A:B") from None
        data = orthogonalize(data, col.strip(), against.strip())
    return data


def _spec_from_args(args, data: TransferDataset) -> NuisanceSpec:
    psi = _csv_list(args.psi) or data.columns
    phi = _csv_list(args.phi) or data.columns
    return NuisanceSpec(
        a_columns=_csv_list(args.a),
        psi_columns=psi,
        phi_columns=phi,
        z_columns=_csv_list(args.z),
        link=_link(args.link),
        calibration_backend=args.backend,
        bandwidth_scale=args.bandwidth_scale,
        ridge_weight=args.ridge_weight,
        ridge_imputation=args.ridge_imputation,
    )


def _spec_payload(spec: NuisanceSpec) -> dict:
    return {
        "a_columns": list(spec.a_columns),
        "psi_columns": list(spec.psi_columns),
        "phi_columns": list(spec.phi_columns),
        "z_columns": list(spec.z_columns),
        "link": spec.link.kind,
        "basis_family": spec.basis_family,
        "calibration_backend": spec.calibration_backend,
        "bandwidth_scale": spec.bandwidth_scale,
        "ridge_weight": spec.ridge_weight,
        "ridge_imputation": spec.ridge_imputation,
    }


def _settings_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _float_list(values) -> list:
    return [float(v) for v in np.asarray(values).ravel()]


def _fit_manifest(args, data, spec, config, estimate, comparators) -> dict:
    spec_payload = _spec_payload(spec)
    config_payload = {
        "folds": config.folds,
        "bootstrap_reps": config.bootstrap_reps,
        "confidence_level": config.confidence_level,
        "seed": config.seed,
        "median_split_intercept": config.median_split_intercept,
    }
    results = []
    for le in estimate.loadings:
        results.append({
            "loading": _float_list(le.loading),
            "beta": _float_list(le.beta),
            "value": float(le.value),
            "residual_norm": float(le.residual_norm),
            "interval": None if le.interval is None else list(le.interval),
            "interval_flagged": bool(le.interval_flagged),
        })
    diag = estimate.diagnostics
    manifest = {
        "version": __version__,
        "command": "fit",
        "seed": config.seed,
        "data": {
            "data": args.data,
            "source": args.source,
            "target": args.target,
            "response": args.response,
            "population_column": args.population_column,
            "covariates": list(data.columns),
            "orthogonalize": args.orthogonalize,
            "n_source": data.n_source,
            "n_target": data.n_target,
        },
        "spec": spec_payload,
        "config": config_payload,
        "tunings": estimate.tunings.as_dict(),
        "settings_hash": _settings_hash({"spec": spec_payload,
                                         "config": config_payload}),
        "results": {"loadings": results},
        "comparators": comparators,
        "diagnostics": {
            "clamped_link_inversions": diag.clamped_link_inversions,
            "bandwidth_widenings": diag.bandwidth_widenings,
            "empty_group_fallbacks": diag.empty_group_fallbacks,
            "max_calibration_residual": diag.max_calibration_residual,
            "bootstrap_failures": estimate.bootstrap_failures,
            "bootstrap_reps_used": estimate.bootstrap_reps_used,
        },
    }
    return manifest


def _coefficient_rows(estimate, comparators) -> list[tuple]:
    rows = []
    for j, le in enumerate(estimate.loadings):
        name = f"beta{j}"
        rows.append(("atrel", name, "estimate", float(le.value)))
        if le.interval is not None:
            rows.append(("atrel", name, "ci_lo", float(le.interval[0])))
            rows.append(("atrel", name, "ci_hi", float(le.interval[1])))
    for comp_name, beta in comparators.items():
        for j, b in enumerate(beta):
            rows.append((comp_name, f"beta{j}", "estimate", float(b)))
    return rows


def _cmd_simulate(args) -> int:
    config = SimConfig(id=args.config, n=args.n, n_target=args.n_target,
                       seed=args.seed, truncation=args.truncation)
    data = gen_population(config)
    save_dataset(data, args.out)
    return 0


def _cmd_fit(args) -> int:
    data = _load_from_args(args)
    spec = _spec_from_args(args, data)
    config = AtrelConfig(
        folds=args.folds, seed=args.seed, bootstrap_reps=args.bootstrap,
        confidence_level=args.level, threads=args.threads,
    )
    if args.bootstrap > 0:
        estimate = bootstrap_ci(data, spec, config, keep_artifacts=False)
    else:
        estimate = fit_atrel(data, spec, config, keep_artifacts=False)
    comparators = {}
    for name in _csv_list(args.comparators):
        if name == "source":
            comparators[name] = _float_list(fit_source_glm(data, spec))
        elif name == "iw":
            comparators[name] = _float_list(fit_iw_only(data, spec))
        elif name == "parametric":
            comparators[name] = _float_list(fit_parametric_dr(data, spec))
        elif name == "dml_be":
            comparators[name] = _float_list(fit_dml_be(
                data, spec, ComparatorSpec(method="dml_be", folds=args.folds,
                                           seed=args.seed)
            ))
        else:
            raise ConfigurationError(f"unknown comparator {name!r}")
    manifest = _fit_manifest(args, data, spec, config, estimate, comparators)
    write_manifest(args.out + ".json", manifest)
    write_report_csv(_coefficient_rows(estimate, comparators),
                     args.out + "_coefficients.csv")
    return 0


def _cmd_bootstrap(args) -> int:
    manifest = read_manifest(args.manifest)
    data_info = manifest["data"]
    ns = argparse.Namespace(
        data=data_info.get("data"), source=data_info.get("source"),
        target=data_info.get("target"), response=data_info["response"],
        population_column=data_info["population_column"],
        covariates=",".join(data_info.get("covariates", [])),
        orthogonalize=data_info.get("orthogonalize"),
    )
    data = _load_from_args(ns)
    spec_info = manifest["spec"]
    spec = NuisanceSpec(
        a_columns=tuple(spec_info["a_columns"]),
        psi_columns=tuple(spec_info["psi_columns"]),
        phi_columns=tuple(spec_info["phi_columns"]),
        z_columns=tuple(spec_info["z_columns"]),
        link=_link(spec_info["link"]),
        basis_family=spec_info["basis_family"],
        calibration_backend=spec_info["calibration_backend"],
        bandwidth_scale=spec_info.get("bandwidth_scale"),
        ridge_weight=spec_info.get("ridge_weight"),
        ridge_imputation=spec_info.get("ridge_imputation"),
    )
    cfg_info = manifest["config"]
    config = AtrelConfig(
        folds=cfg_info["folds"], seed=cfg_info["seed"],
        bootstrap_reps=args.reps,
        confidence_level=args.level or cfg_info["confidence_level"],
        threads=args.threads,
        median_split_intercept=cfg_info["median_split_intercept"],
    )
    estimate = bootstrap_ci(data, spec, config, keep_artifacts=False)
    manifest_out = _fit_manifest(ns, data, spec, config, estimate,
                                 manifest.get("comparators", {}))
    manifest_out["command"] = "bootstrap"
    if args.out:
        prefix = args.out
    elif args.manifest.endswith(".json"):
        prefix = args.manifest[: -len(".json")]
    else:
        prefix = args.manifest
    write_manifest(prefix + ".json", manifest_out)
    write_report_csv(
        _coefficient_rows(estimate, manifest.get("comparators", {})),
        prefix + "_coefficients.csv",
    )
    return 0


def _cmd_evaluate(args) -> int:
    data = _load_from_args(args)
    fit_manifest = read_manifest(args.fit)
    spec_info = fit_manifest["spec"]
    link = _link(spec_info["link"])
    a_cols = tuple(spec_info["a_columns"])
    beta_hat = np.array([lo["value"] for lo in fit_manifest["results"]["loadings"]])
    if args.beta_valid:
        beta_valid = np.array([float(v) for v in _csv_list(args.beta_valid)])
    elif args.valid_fit:
        vm = read_manifest(args.valid_fit)
        beta_valid = np.array([lo["value"] for lo in vm["results"]["loadings"]])
    else:
        raise ConfigurationError("provide --beta-valid or --valid-fit")
    from .model import design_matrix

    a_tgt = design_matrix(data.target_x, data.columns, a_cols, constant=True)
    if beta_hat.size != a_tgt.shape[1] or beta_valid.size != a_tgt.shape[1]:
        raise ConfigurationError(
            "coefficient lengths must equal 1 + len(a_columns)"
        )
    rows = [
        ("atrel", "all", "rmspe", metric_rmspe(beta_hat, beta_valid, a_tgt, link)),
        ("atrel", "all", "cc", metric_cc(beta_hat, beta_valid, a_tgt, link)),
        ("atrel", "all", "fcr", metric_fcr(beta_hat, beta_valid, a_tgt, link)),
    ]
    if args.labels:
        schema = ColumnSchema(response_column=args.response,
                              covariate_columns=data.columns,
                              population_column=args.population_column)
        labelled = load_dataset(args.labels, schema=schema)
        a_lab = design_matrix(labelled.source_x, labelled.columns, a_cols,
                              constant=True)
        scores = link.evaluate(a_lab @ beta_hat)
        rows.append(("atrel", "all", "auc",
                     metric_auc(scores, labelled.source_y)))
    write_report_csv(rows, args.out)
    return 0


def _cmd_bench(args) -> int:
    config = SimConfig(
        id=args.config, n=args.n, n_target=args.n_target,
        replications=args.reps, seed=args.seed,
        estimators=_csv_list(args.estimators),
        bootstrap_reps=args.bootstrap_reps, folds=args.folds,
        truncation=args.truncation,
    )
    spec = default_spec(backend=args.backend)
    report = run_study(config, spec, threads=args.threads,
                       oracle_rows=args.oracle_rows)
    write_report_csv(report.rows(), args.out)
    if args.manifest:
        write_manifest(args.manifest, {
            "version": __version__,
            "command": "bench",
            "config": {
                "id": config.id, "n": config.n, "N": config.n_target,
                "replications": config.replications, "seed": config.seed,
                "estimators": list(config.estimators),
                "bootstrap_reps": config.bootstrap_reps,
                "folds": config.folds, "truncation": config.truncation,
            },
            "spec": _spec_payload(spec),
            "truth": _float_list(report.truth),
            "threads": effective_threads(args.threads),
        })
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "bootstrap": _cmd_bootstrap,
    "evaluate": _cmd_evaluate,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        _emit_error("usage", str(err))
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _USAGE_ERRORS as err:
        _emit_error(type(err).__name__, str(err))
        return 1
    except _DATA_ERRORS as err:
        _emit_error(type(err).__name__, str(err),
                    file=getattr(err, "path", None),
                    line=getattr(err, "line", None),
                    column=getattr(err, "column", None))
        return 2
    except _NUMERIC_ERRORS as err:
        _emit_error(type(err).__name__, str(err),
                    residual_norm=getattr(err, "residual_norm", None))
        return 3
    except AtrelError as err:
        _emit_error(type(err).__name__, str(err))
        return 2


if __name__ == "__main__":
    sys.exit(main())
