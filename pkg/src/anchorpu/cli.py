"""Command-line front end.

Four subcommands: ``fit`` (ingest, optional backward selection, maximum
likelihood fit, prevalence), ``validate`` (calibration table and accuracy,
optionally with bootstrap SEs and cross-validation), ``simulate`` (run a
replicated experiment from a design file), and ``select`` (backward
stepwise elimination trace).

Options may come from flags or from a flat key=value config file (flags
win).  Every CSV artifact starts with a comment line recording the tool
version, the seed, and a hash of the resolved configuration; JSON artifacts
carry the same string under a leading "meta" key.  Outputs are a pure
function of inputs, flags, and seed.  Exit codes: 0 success, 1 usage error,
2 data error, 3 fit did not converge (artifacts are still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import accuracy, bootstrap_se, calibration_table, cross_validate
from .estimation import FitConfig, FitResult, fit
from .ingest import PreprocessReport, ingest
from .model import DataError, Dataset, sigmoid
from .simulation import SimDesign, export_summary, run_experiment
from .stepwise import stepwise_select, wald_p_values

__all__ = ["main", "UsageError"]

ENV_OUTPUT_DIR = "ANCHORPU_OUTPUT_DIR"


class UsageError(Exception):
    """Bad flags or config; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"cannot parse boolean value {text!r}")


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _split_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in _split_list(text)]
    except ValueError as exc:
        raise UsageError(f"cannot parse number list {text!r}") from exc


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; keys use underscores."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        out[key.strip().lower().replace("-", "_")] = value.strip()
    return out


def _resolve(flags: dict, file_map: dict, spec: dict) -> dict:
    """Layered option resolution: defaults < config file < explicit flags."""
    resolved = {}
    for key, (convert, default) in spec.items():
        if flags.get(key) is not None:
            resolved[key] = flags[key]
        elif key in file_map:
            resolved[key] = convert(file_map[key])
        else:
            resolved[key] = default
    unknown = set(file_map) - set(spec)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return resolved


def _config_hash(resolved: dict) -> str:
    # The output directory is a destination, not an input: identical runs
    # into different directories must produce byte-identical artifacts.
    canon = json.dumps(
        {k: v for k, v in resolved.items() if k != "output_dir"},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _meta_line(seed, resolved: dict) -> str:
    return f"# anchorpu {__version__} seed={seed} config={_config_hash(resolved)}"


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "NA" if x != x else repr(x)
    return str(x)


def _json_value(x):
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if x != x else x
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_json_value(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_json_value(v) for v in x]
    if isinstance(x, dict):
        return {k: _json_value(v) for k, v in x.items()}
    return x


def _write_lines(path: Path, meta: str, lines: list[str]) -> None:
    path.write_text("\n".join([meta] + lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- ingest

_INGEST_SPEC = {
    "input": (str, None),
    "anchor_col": (str, None),
    "feature_cols": (_split_list, None),
    "stratum_col": (str, None),
    "log_transform": (_split_list, []),
    "standardize": (_parse_bool, False),
    "complete_case": (_parse_bool, True),
    "delimiter": (str, ","),
    "seed": (int, 0),
    "output_dir": (str, None),
    "format": (str, "csv"),
}

_FIT_SPEC = dict(
    _INGEST_SPEC,
    stepwise=(_parse_bool, False),
    p_threshold=(float, 0.1),
    max_iter=(int, 500),
)

_VALIDATE_SPEC = dict(
    _INGEST_SPEC,
    edges=(_split_floats, None),
    q_star=(float, None),
    thresholds=(_split_floats, [0.2, 0.3, 0.4, 0.5]),
    bootstrap=(int, 0),
    folds=(int, 0),
    max_iter=(int, 500),
)

_SIM_SPEC = {
    "prevalence": (float, 0.10),
    "c": (_split_floats, [0.5]),
    "stratified": (_parse_bool, False),
    "fit_strata": (_parse_bool, True),
    "fitted_model": (str, "full"),
    "n_train": (int, 10_000),
    "n_test": (int, 5_000),
    "replicates": (int, 100),
    "seed": (int, 20240801),
    "normal_scale": (str, "variance"),
    "thresholds": (_split_floats, [0.2, 0.3, 0.4, 0.5]),
    "output_dir": (str, None),
}


def _add_ingest_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file; flags override it")
    sub.add_argument("--input", help="delimited input file with a header row")
    sub.add_argument("--anchor-col", dest="anchor_col", help="anchor column name")
    sub.add_argument(
        "--feature-cols",
        dest="feature_cols",
        type=_split_list,
        help="comma-separated feature column names",
    )
    sub.add_argument("--stratum-col", dest="stratum_col")
    sub.add_argument(
        "--log-transform",
        dest="log_transform",
        type=_split_list,
        help="columns to transform as log(1+x)",
    )
    sub.add_argument(
        "--standardize",
        dest="standardize",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    sub.add_argument(
        "--complete-case",
        dest="complete_case",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="drop rows with missing values (default on)",
    )
    sub.add_argument("--delimiter", choices=[",", "tab"], default=None)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--output-dir", dest="output_dir")
    sub.add_argument("--format", choices=["csv", "json"], default=None)
    sub.add_argument("--max-iter", dest="max_iter", type=int, help="optimizer iteration cap")


def build_parser() -> _Parser:
    parser = _Parser(prog="anchorpu", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"anchorpu {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="fit the model and estimate prevalence")
    _add_ingest_flags(p_fit)
    p_fit.add_argument(
        "--stepwise",
        dest="stepwise",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="run backward elimination before the final fit",
    )
    p_fit.add_argument("--p-threshold", dest="p_threshold", type=float)

    p_val = subs.add_parser("validate", help="calibration table and accuracy measures")
    _add_ingest_flags(p_val)
    p_val.add_argument("--edges", type=_split_floats, help="calibration interval edges")
    p_val.add_argument("--q-star", dest="q_star", type=float, help="external prevalence")
    p_val.add_argument("--thresholds", type=_split_floats)
    p_val.add_argument("--bootstrap", type=int, help="bootstrap replicates (0 = off)")
    p_val.add_argument("--folds", type=int, help="cross-validation folds (0 = off)")

    p_sim = subs.add_parser("simulate", help="replicated synthetic-data experiment")
    p_sim.add_argument("--design", help="design file (flat key=value)")
    p_sim.add_argument("--prevalence", type=float)
    p_sim.add_argument("--c", type=_split_floats, help="anchor sensitivity (pair if stratified)")
    p_sim.add_argument(
        "--stratified", action=argparse.BooleanOptionalAction, default=None
    )
    p_sim.add_argument(
        "--fit-strata", dest="fit_strata", action=argparse.BooleanOptionalAction, default=None
    )
    p_sim.add_argument("--fitted-model", dest="fitted_model", choices=["full", "drop_weak", "drop_strong"])
    p_sim.add_argument("--n-train", dest="n_train", type=int)
    p_sim.add_argument("--n-test", dest="n_test", type=int)
    p_sim.add_argument("--replicates", type=int)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--normal-scale", dest="normal_scale", choices=["variance", "sd"])
    p_sim.add_argument("--thresholds", type=_split_floats)
    p_sim.add_argument("--output-dir", dest="output_dir")
    p_sim.add_argument("--jobs", type=int, default=1, help="worker processes")

    p_sel = subs.add_parser("select", help="backward stepwise elimination trace")
    _add_ingest_flags(p_sel)
    p_sel.add_argument("--p-threshold", dest="p_threshold", type=float)

    return parser


def _output_dir(resolved: dict) -> Path:
    outdir = resolved.get("output_dir") or os.environ.get(ENV_OUTPUT_DIR) or "."
    path = Path(outdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ingest_from(resolved: dict):
    for key in ("input", "anchor_col", "feature_cols"):
        if not resolved.get(key):
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
    delim = "\t" if resolved["delimiter"] == "tab" else resolved["delimiter"]
    return ingest(
        resolved["input"],
        anchor=resolved["anchor_col"],
        features=list(resolved["feature_cols"]),
        stratum=resolved.get("stratum_col"),
        log_transform=tuple(resolved["log_transform"]),
        standardize=resolved["standardize"],
        complete_case=resolved["complete_case"],
        delimiter=delim,
    )


def _fit_rows(result: FitResult, data: Dataset, report: PreprocessReport):
    """(section, term, estimate, se, note) rows shared by fit.csv and fit.json."""
    rows = []
    pvals = wald_p_values(result)
    for j, name in enumerate(data.feature_names):
        rows.append(("coefficient", name, result.params.beta[j], result.se[j], ""))
        rows.append(("p_value", name, pvals[j], None, "two-sided Wald"))
    p = result.params.n_features
    for j in range(result.params.n_sens):
        label = "c" if result.params.n_sens == 1 else f"c{j + 1}"
        note = "fixed at clamp" if j in result.fixed_sens else ""
        rows.append(("sensitivity", label, result.params.sens[j], result.se[p + j], note))
    rows.append(("prevalence", "q_ratio", result.q_ratio, result.q_ratio_se,
                 "se: delta method (h,c independent)"))
    rows.append(("prevalence", "q_avg", result.q_avg, None, ""))
    rows.append(("anchor", "h", result.h, None, "anchor-positive fraction"))
    rows.append(("fit", "loglik", result.loglik, None, ""))
    rows.append(("fit", "iterations", float(result.iterations), None, ""))
    rows.append(("fit", "converged", result.converged, None, ""))
    rows.append(("fit", "separation_warning", result.separation, None, ""))
    rows.append(("fit", "vcov_ok", result.vcov_ok, None, ""))
    rows.append(("data", "n_rows", float(data.n_rows), None,
                 f"dropped: {report.n_rows_dropped}"))
    return rows


def _write_fit_artifacts(result, data, report, outdir: Path, meta: str, selection=None):
    rows = _fit_rows(result, data, report)
    lines = ["section,term,estimate,se,note"]
    for section, term, est, se, note in rows:
        lines.append(f"{section},{term},{_fmt(est)},{_fmt(se)},{note}")
    _write_lines(outdir / "fit.csv", meta, lines)

    payload = {
        "meta": meta.lstrip("# "),
        "estimates": [
            {"section": s, "term": t, "estimate": _json_value(e),
             "se": _json_value(se), "note": n}
            for s, t, e, se, n in rows
        ],
        "preprocessing": report.as_dict(),
    }
    if selection is not None:
        payload["selection"] = {
            "features": list(selection.features),
            "removed": [
                {"removed": st.removed, "p_value": st.p_value}
                for st in selection.trace
            ],
            "warning": selection.warning,
        }
    (outdir / "fit.json").write_text(
        json.dumps(_json_value(payload), indent=1) + "\n", encoding="utf-8"
    )

    prob = sigmoid(data.design @ result.params.beta)
    lines = ["row,anchor,probability"]
    for i in range(data.n_rows):
        lines.append(f"{i},{int(data.anchor[i])},{_fmt(prob[i])}")
    _write_lines(outdir / "probabilities.csv", meta, lines)


def _cmd_fit(args) -> int:
    file_map = read_config_file(args.config) if args.config else {}
    resolved = _resolve(vars(args), file_map, _FIT_SPEC)
    meta = _meta_line(resolved["seed"], resolved)
    data, report = _ingest_from(resolved)
    outdir = _output_dir(resolved)

    config = FitConfig(max_iter=resolved["max_iter"])
    selection = None
    if resolved["stepwise"]:
        try:
            selection = stepwise_select(data, config, p_threshold=resolved["p_threshold"])
        except ValueError as exc:
            # Initial fit did not converge; fall through to the plain fit so
            # artifacts are still written, flagged, with exit code 3.
            print(f"warning: {exc}", file=sys.stderr)
    if selection is not None:
        result = selection.fit
        keep = ("intercept",) + selection.features
        cols = [data.feature_names.index(n) for n in keep]
        data = Dataset(
            design=data.design[:, cols],
            anchor=data.anchor,
            stratum=data.stratum,
            feature_names=keep,
        )
    else:
        result = fit(data, config)

    _write_fit_artifacts(result, data, report, outdir, meta, selection)
    if not result.converged:
        print("warning: fit did not converge; artifacts written with flags", file=sys.stderr)
        return 3
    return 0


def _cmd_validate(args) -> int:
    file_map = read_config_file(args.config) if args.config else {}
    resolved = _resolve(vars(args), file_map, _VALIDATE_SPEC)
    meta = _meta_line(resolved["seed"], resolved)
    data, report = _ingest_from(resolved)
    outdir = _output_dir(resolved)

    config = FitConfig(max_iter=resolved["max_iter"])
    result = fit(data, config)
    thresholds = resolved["thresholds"]

    cal = calibration_table(result, data, edges=resolved["edges"], q_star=resolved["q_star"])
    lines = ["interval,n_unlabeled,n_anchor,model_predicted,nonparametric_estimated"]
    labels = cal.interval_labels()
    for i in range(len(labels)):
        lines.append(
            f"{labels[i]},{cal.n_unlabeled[i]},{cal.n_anchor[i]},"
            f"{_fmt(cal.model_predicted_cases[i])},{_fmt(cal.nonparametric_cases[i])}"
        )
    lines.append(f"# q_star={_fmt(cal.q_star)}")
    lines.append(f"# max_count_discrepancy={_fmt(cal.max_count_discrepancy)}")
    _write_lines(outdir / "calibration.csv", meta, lines)

    if resolved["bootstrap"]:
        acc = bootstrap_se(
            data, config, thresholds,
            n_boot=resolved["bootstrap"], seed=resolved["seed"],
        )
    else:
        acc = accuracy(result, data, thresholds)
    cv = None
    if resolved["folds"]:
        cv = cross_validate(
            data, config, folds=resolved["folds"],
            thresholds=thresholds, seed=resolved["seed"],
        )

    lines = ["measure,threshold,estimate,raw,clamped,empty_set,bootstrap_se,cv_mean"]
    for m in ("ppv", "tpr", "npv", "fpr"):
        for i, v in enumerate(acc.thresholds):
            lines.append(
                ",".join(
                    [
                        m,
                        _fmt(v),
                        _fmt(getattr(acc, m)[i]),
                        _fmt(acc.raw[m][i]),
                        _fmt(bool(acc.clamp_flags[m][i])),
                        _fmt(bool(acc.empty_set_flags[m][i])),
                        _fmt(getattr(acc.se, m)[i]) if acc.se else "NA",
                        _fmt(getattr(cv, m)[i]) if cv else "NA",
                    ]
                )
            )
    lines.append(
        ",".join(
            ["auc", "NA", _fmt(acc.auc), _fmt(acc.auc), "false", "false",
             _fmt(acc.se.auc) if acc.se else "NA", _fmt(cv.auc) if cv else "NA"]
        )
    )
    if acc.se and acc.se.warning:
        lines.append(f"# warning: {acc.se.warning}")
    _write_lines(outdir / "accuracy.csv", meta, lines)

    if resolved["format"] == "json":
        payload = {
            "meta": meta.lstrip("# "),
            "calibration": {
                "intervals": labels,
                "n_unlabeled": _json_value(cal.n_unlabeled),
                "n_anchor": _json_value(cal.n_anchor),
                "model_predicted": _json_value(cal.model_predicted_cases),
                "nonparametric_estimated": _json_value(cal.nonparametric_cases),
                "q_star": _json_value(cal.q_star),
                "max_count_discrepancy": _json_value(cal.max_count_discrepancy),
            },
            "accuracy": {
                "thresholds": _json_value(acc.thresholds),
                **{m: _json_value(getattr(acc, m)) for m in ("tpr", "fpr", "ppv", "npv")},
                "auc": _json_value(acc.auc),
            },
        }
        (outdir / "validate.json").write_text(
            json.dumps(payload, indent=1) + "\n", encoding="utf-8"
        )

    if not result.converged:
        print("warning: fit did not converge; artifacts written with flags", file=sys.stderr)
        return 3
    return 0


def _cmd_simulate(args) -> int:
    file_map = read_config_file(args.design) if args.design else {}
    flags = dict(vars(args))
    flags["c"] = flags.get("c")
    resolved = _resolve(flags, file_map, _SIM_SPEC)
    meta = _meta_line(resolved["seed"], resolved)

    c_vals = resolved["c"]
    design = SimDesign(
        prevalence_target=resolved["prevalence"],
        c_true=tuple(c_vals) if len(c_vals) > 1 else c_vals[0],
        stratified=resolved["stratified"],
        fit_strata=resolved["fit_strata"],
        fitted_model=resolved["fitted_model"],
        n_train=resolved["n_train"],
        n_test=resolved["n_test"],
        replicates=resolved["replicates"],
        seed=resolved["seed"],
        normal_scale=resolved["normal_scale"],
        thresholds=tuple(resolved["thresholds"]),
    )
    outdir = _output_dir(resolved)
    summary = run_experiment(design, n_jobs=max(1, args.jobs))
    export_summary(summary, outdir, meta_line=meta)
    print(
        f"replicates: {summary.n_replicates} ({summary.n_failed} failed); "
        f"mean c = {np.round(summary.sens_mean, 4).tolist()}, "
        f"mean q_avg = {summary.q_avg_mean:.4f}"
    )
    return 0


def _cmd_select(args) -> int:
    file_map = read_config_file(args.config) if args.config else {}
    resolved = _resolve(vars(args), file_map, _FIT_SPEC)
    meta = _meta_line(resolved["seed"], resolved)
    data, report = _ingest_from(resolved)
    outdir = _output_dir(resolved)

    config = FitConfig(max_iter=resolved["max_iter"])
    try:
        selection = stepwise_select(data, config, p_threshold=resolved["p_threshold"])
    except ValueError as exc:
        result = fit(data, config)
        lines = ["step,removed,p_value,loglik_before,n_features_after", f"# warning: {exc}"]
        _write_lines(outdir / "stepwise_trace.csv", meta, lines)
        _write_fit_artifacts(result, data, report, outdir, meta)
        print(f"warning: {exc}", file=sys.stderr)
        return 3
    lines = ["step,removed,p_value,loglik_before,n_features_after"]
    for i, st in enumerate(selection.trace, 1):
        lines.append(
            f"{i},{st.removed},{_fmt(st.p_value)},{_fmt(st.loglik_before)},"
            f"{st.n_features_after}"
        )
    lines.append(f"# retained: {' '.join(selection.features)}")
    if selection.warning:
        lines.append(f"# warning: {selection.warning}")
    _write_lines(outdir / "stepwise_trace.csv", meta, lines)

    keep = ("intercept",) + selection.features
    cols = [data.feature_names.index(n) for n in keep]
    final_data = Dataset(
        design=data.design[:, cols],
        anchor=data.anchor,
        stratum=data.stratum,
        feature_names=keep,
    )
    _write_fit_artifacts(selection.fit, final_data, report, outdir, meta, selection)
    if not selection.fit.converged:
        return 3
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "select":
            return _cmd_select(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
