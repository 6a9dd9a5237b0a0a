"""Synthetic-data engine for replicated recovery experiments.

Populations are drawn from a nine-covariate logistic model with weak,
moderate, and strong predictor triples.  True labels are kept in a side
channel owned by this module, never inside the Dataset handed to the
estimator, so "true" accuracy can be computed for comparison without any
possibility of leakage.  Replicates use independent counter-based RNG
substreams keyed by (seed, replicate index); identical designs reproduce
bit-identical summaries regardless of worker count.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import DEFAULT_THRESHOLDS, accuracy, calibration_table
from .estimation import FitConfig, fit
from .model import DataError, Dataset, sigmoid

__all__ = [
    "SimDesign",
    "SimulatedCohort",
    "SimSummary",
    "generate",
    "run_experiment",
    "export_summary",
    "BETA_TRUE",
    "INTERCEPT_FOR_PREVALENCE",
]

# Weak, moderate, strong predictor coefficients (beta_1..beta_9).
BETA_TRUE = (0.2, 0.4, 0.6, -1.0, -1.4, 1.8, -2.0, 2.4, 2.8)

# Intercepts calibrated to marginal prevalences of 5/10/15/20% under the
# variance-10 reading of the continuous covariates (see normal_scale).
INTERCEPT_FOR_PREVALENCE = {0.05: -2.5, 0.10: 1.0, 0.15: 3.3, 0.20: 5.4}

_NORMAL_COLS = (0, 3, 6)
_BERNOULLI_COLS = (1, 4, 7)
_LOGISTIC_COLS = (2, 5, 8)

# Fitted-model variants: which generator covariates are dropped before
# fitting (1-based covariate numbers; design column = number, after the
# intercept at 0).
DROPPED_COLUMNS = {"full": (), "drop_weak": (1, 2, 3), "drop_strong": (7, 8, 9)}


@dataclass(frozen=True)
class SimDesign:
    """One experiment configuration.

    ``prevalence_target`` selects a calibrated intercept unless ``beta_true``
    overrides the full coefficient vector (intercept included).  ``c_true``
    is a single sensitivity, or a pair when ``stratified``; the stratum is
    then the balanced binary strong predictor (x8), so the anchor rate
    varies across a modeled covariate.  ``fit_strata=False`` fits a single
    constant sensitivity to stratified data (the stratum column is withheld
    from the estimator), reproducing the misfit of ignoring known
    sensitivity variation.
    ``normal_scale`` picks the reading of the continuous covariate spread:
    "variance" (SD sqrt(10), the calibrated default) or "sd" (SD 10).
    """

    prevalence_target: float = 0.10
    beta_true: tuple[float, ...] | None = None
    c_true: float | tuple[float, float] = 0.5
    stratified: bool = False
    fit_strata: bool = True
    fitted_model: str = "full"
    n_train: int = 10_000
    n_test: int = 5_000
    replicates: int = 100
    seed: int = 20240801
    normal_scale: str = "variance"
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if self.beta_true is None:
            if self.prevalence_target not in INTERCEPT_FOR_PREVALENCE:
                raise ValueError(
                    "prevalence_target must be one of "
                    f"{sorted(INTERCEPT_FOR_PREVALENCE)} unless beta_true is given"
                )
        elif len(self.beta_true) != 10:
            raise ValueError("beta_true must have 10 entries (intercept + 9)")
        if self.fitted_model not in DROPPED_COLUMNS:
            raise ValueError(f"fitted_model must be one of {sorted(DROPPED_COLUMNS)}")
        if self.n_train < 1 or self.n_test < 1 or self.replicates < 1:
            raise ValueError("n_train, n_test, replicates must all be >= 1")
        if self.normal_scale not in ("variance", "sd"):
            raise ValueError('normal_scale must be "variance" or "sd"')
        cs = self.sens_true()
        if not all(0.0 < c <= 1.0 for c in cs):
            raise ValueError("c_true values must lie in (0, 1]")
        if self.stratified and len(cs) != 2:
            raise ValueError("stratified designs need a (c1, c2) pair")
        if not self.stratified and len(cs) != 1:
            raise ValueError("non-stratified designs take a single c_true")

    def sens_true(self) -> tuple[float, ...]:
        c = self.c_true
        return tuple(c) if isinstance(c, (tuple, list)) else (float(c),)

    def full_beta(self) -> np.ndarray:
        if self.beta_true is not None:
            return np.asarray(self.beta_true, dtype=np.float64)
        b0 = INTERCEPT_FOR_PREVALENCE[self.prevalence_target]
        return np.asarray((b0,) + BETA_TRUE, dtype=np.float64)

    def kept_columns(self) -> np.ndarray:
        dropped = set(DROPPED_COLUMNS[self.fitted_model])
        return np.asarray([0] + [j for j in range(1, 10) if j not in dropped])


@dataclass(frozen=True)
class SimulatedCohort:
    """A Dataset plus its hidden true labels.

    The labels live here, outside the Dataset, so estimation code cannot
    see them; only simulation-side scoring reads ``y``.
    """

    data: Dataset
    y: np.ndarray


def _replicate_rng(seed: int, replicate_index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, replicate_index)))
    )


def generate(design: SimDesign, replicate_index: int):
    """Draw one (train, test) pair of cohorts for a replicate.

    Covariates: three N(5, .) columns, three Bernoulli(0.5), three standard
    logistic (logit of a uniform).  Outcomes follow the logistic model with
    the design's coefficients; the anchor fires on cases with probability
    c (per stratum when stratified) and never on controls.
    """
    rng = _replicate_rng(design.seed, replicate_index)
    n = design.n_train + design.n_test
    scale = np.sqrt(10.0) if design.normal_scale == "variance" else 10.0

    x = np.empty((n, 9))
    x[:, _NORMAL_COLS] = rng.normal(5.0, scale, size=(n, 3))
    x[:, _BERNOULLI_COLS] = (rng.random((n, 3)) < 0.5).astype(np.float64)
    u = rng.random((n, 3))
    x[:, _LOGISTIC_COLS] = np.log(u) - np.log1p(-u)

    design_mat = np.hstack([np.ones((n, 1)), x])
    beta = design.full_beta()
    y = (rng.random(n) < sigmoid(design_mat @ beta)).astype(np.int8)

    sens = design.sens_true()
    if design.stratified:
        # The sensitivity stratum is the balanced binary strong predictor
        # itself, so the anchor rate varies across a covariate the working
        # model uses; ignoring the strata then visibly distorts the fit.
        z = x[:, 7].astype(np.int64)
        c_row = np.asarray(sens)[z]
    else:
        z = None
        c_row = float(sens[0])
    s = (y == 1) & (rng.random(n) < c_row)

    names = ("intercept",) + tuple(f"x{j}" for j in range(1, 10))

    def cohort(rows: slice) -> SimulatedCohort:
        data = Dataset(
            design=design_mat[rows],
            anchor=s[rows].astype(np.int8),
            stratum=None if z is None else z[rows],
            feature_names=names,
        )
        y_part = y[rows].copy()
        y_part.setflags(write=False)
        return SimulatedCohort(data=data, y=y_part)

    return cohort(slice(0, design.n_train)), cohort(slice(design.n_train, n))


def _select_columns(cohort: SimulatedCohort, cols: np.ndarray, keep_stratum: bool):
    data = cohort.data
    return Dataset(
        design=data.design[:, cols],
        anchor=data.anchor,
        stratum=data.stratum if keep_stratum else None,
        feature_names=tuple(data.feature_names[j] for j in cols),
    )


def _true_accuracy(p: np.ndarray, s: np.ndarray, y: np.ndarray, thresholds):
    """Accuracy among unlabeled rows scored against the hidden labels."""
    mask = s == 0
    p0, y0 = p[mask], y[mask]
    cases, ctrls = p0[y0 == 1], p0[y0 == 0]
    out = {m: [] for m in ("tpr", "fpr", "ppv", "npv")}
    for v in thresholds:
        above = p0 > v
        below = p0 < v
        out["tpr"].append(np.mean(cases > v) if cases.size else np.nan)
        out["fpr"].append(np.mean(ctrls > v) if ctrls.size else np.nan)
        out["ppv"].append(np.mean(y0[above]) if above.any() else np.nan)
        out["npv"].append(np.mean(1 - y0[below]) if below.any() else np.nan)
    vs = np.unique(p0)
    tpr = np.array([(cases > v).mean() for v in vs]) if cases.size else np.zeros(1)
    fpr = np.array([(ctrls > v).mean() for v in vs]) if ctrls.size else np.zeros(1)
    xs = np.concatenate([[0.0], fpr[::-1], [1.0]])
    ys = np.concatenate([[0.0], tpr[::-1], [1.0]])
    auc = float(np.trapezoid(ys, xs))
    return {m: np.asarray(vals, dtype=np.float64) for m, vals in out.items()}, auc


def _replicate_record(design: SimDesign, index: int) -> dict:
    """Generate, fit, and score one replicate; everything needed downstream."""
    train, test = generate(design, index)
    cols = design.kept_columns()
    keep_stratum = design.stratified and design.fit_strata
    train_data = _select_columns(train, cols, keep_stratum)
    test_data = _select_columns(test, cols, keep_stratum)

    record: dict = {"replicate": index, "failed": False, "error": None}
    try:
        result = fit(train_data, FitConfig())
    except (DataError, FloatingPointError) as exc:
        record.update(failed=True, error=str(exc))
        return record

    record.update(
        converged=bool(result.converged),
        failed=not result.converged,
        feature_names=list(train_data.feature_names),
        beta_hat=result.params.beta.tolist(),
        beta_se=result.se[: result.params.n_features].tolist(),
        sens_hat=result.params.sens.tolist(),
        sens_se=result.se[result.params.n_features :].tolist(),
        h=result.h,
        q_ratio=result.q_ratio,
        q_ratio_se=result.q_ratio_se,
        q_avg=result.q_avg,
        loglik=result.loglik,
        iterations=result.iterations,
        separation=result.separation,
        vcov_ok=result.vcov_ok,
    )

    # Calibration on the training cohort, against the fitted-ratio q*.
    try:
        cal = calibration_table(result, train_data)
        record["calibration"] = {
            "edges": cal.edges.tolist(),
            "n_unlabeled": cal.n_unlabeled.tolist(),
            "model_cases": cal.model_predicted_cases.tolist(),
            "nonparametric_cases": cal.nonparametric_cases.tolist(),
        }
    except DataError as exc:
        record["calibration"] = None
        record["calibration_error"] = str(exc)

    # Accuracy on the held-out test cohort, estimated and truth-scored.
    est = accuracy(result, test_data, design.thresholds)
    p_test = sigmoid(test_data.design @ result.params.beta)
    true_vals, true_auc = _true_accuracy(
        p_test, test_data.anchor, test.y, design.thresholds
    )
    record["accuracy_estimated"] = {
        "tpr": est.tpr.tolist(),
        "fpr": est.fpr.tolist(),
        "ppv": est.ppv.tolist(),
        "npv": est.npv.tolist(),
        "auc": est.auc,
    }
    record["accuracy_true"] = {m: v.tolist() for m, v in true_vals.items()}
    record["accuracy_true"]["auc"] = true_auc
    return record


def _worker(args):
    design, index = args
    return _replicate_record(design, index)


@dataclass(frozen=True)
class SimSummary:
    """Aggregates over replicates, with the raw per-replicate records kept.

    ESE entries are sample standard deviations across successful replicates;
    confidence intervals are mean +/- 1.96 ESE.  Failed replicates (fit did
    not converge or data contract violated) are excluded from every mean and
    counted in ``n_failed``.
    """

    design: SimDesign
    n_replicates: int
    n_failed: int
    param_names: tuple[str, ...]
    param_true: np.ndarray
    param_mean: np.ndarray
    param_bias: np.ndarray
    param_se_mean: np.ndarray
    param_ese: np.ndarray
    sens_true: np.ndarray
    sens_mean: np.ndarray
    sens_ese: np.ndarray
    sens_se_mean: np.ndarray
    q_ratio_mean: float
    q_ratio_ese: float
    q_avg_mean: float
    q_avg_ese: float
    calibration_edges: np.ndarray | None
    calibration_model_mean: np.ndarray | None
    calibration_nonparametric_mean: np.ndarray | None
    thresholds: np.ndarray
    accuracy_estimated_mean: dict
    accuracy_estimated_ese: dict
    accuracy_true_mean: dict
    accuracy_true_ese: dict
    records: tuple = field(repr=False, default=())

    def ci(self, mean: float, ese: float) -> tuple[float, float]:
        return mean - 1.96 * ese, mean + 1.96 * ese

    @property
    def calibration_max_discrepancy(self) -> float:
        gap = np.abs(
            self.calibration_model_mean - self.calibration_nonparametric_mean
        )
        return float(np.nanmax(gap))


def run_experiment(design: SimDesign, n_jobs: int = 1) -> SimSummary:
    """Run every replicate of ``design`` and aggregate.

    ``n_jobs > 1`` runs replicates in worker processes; records are
    collected by replicate index, so the summary is identical whatever the
    degree of parallelism.
    """
    tasks = [(design, i) for i in range(design.replicates)]
    if n_jobs > 1 and design.replicates > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            records = list(pool.map(_worker, tasks, chunksize=1))
    else:
        records = [_replicate_record(design, i) for i in range(design.replicates)]
    records.sort(key=lambda r: r["replicate"])
    return summarize(design, records)


def summarize(design: SimDesign, records: list[dict]) -> SimSummary:
    ok = [r for r in records if not r["failed"]]
    n_failed = len(records) - len(ok)
    if not ok:
        raise DataError("every replicate failed; nothing to summarize")

    names = tuple(ok[0]["feature_names"])
    truth_map = dict(
        zip(("intercept",) + tuple(f"x{j}" for j in range(1, 10)), design.full_beta())
    )
    param_true = np.asarray([truth_map[n] for n in names])

    betas = np.asarray([r["beta_hat"] for r in ok])
    beta_ses = np.asarray([r["beta_se"] for r in ok])
    sens = np.asarray([r["sens_hat"] for r in ok])
    sens_ses = np.asarray([r["sens_se"] for r in ok])

    def ese(a):
        return a.std(axis=0, ddof=1) if a.shape[0] > 1 else np.full(a.shape[1:], np.nan)

    cal_records = [r for r in ok if r.get("calibration")]
    # NaN cells mark intervals with no unlabeled rows; an interval empty in
    # every replicate legitimately averages to NaN, so the all-NaN warning
    # is noise here.
    if cal_records:
        edges = np.asarray(cal_records[0]["calibration"]["edges"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model_mean = np.nanmean(
                [r["calibration"]["model_cases"] for r in cal_records], axis=0
            )
            nonpar_mean = np.nanmean(
                [r["calibration"]["nonparametric_cases"] for r in cal_records], axis=0
            )
    else:
        edges = model_mean = nonpar_mean = None

    measures = ("tpr", "fpr", "ppv", "npv", "auc")

    def acc_stats(key):
        mean, spread = {}, {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for m in measures:
                vals = np.asarray([r[key][m] for r in ok], dtype=np.float64)
                mean[m] = np.nanmean(vals, axis=0)
                spread[m] = (
                    np.nanstd(vals, axis=0, ddof=1)
                    if vals.shape[0] > 1
                    else np.full(np.shape(mean[m]), np.nan)
                )
        return mean, spread

    est_mean, est_ese = acc_stats("accuracy_estimated")
    true_mean, true_ese = acc_stats("accuracy_true")

    q_ratio = np.asarray([r["q_ratio"] for r in ok])
    q_avg = np.asarray([r["q_avg"] for r in ok])
    with warnings.catch_warnings():
        # SE columns are all-NaN when every replicate's vcov failed.
        warnings.simplefilter("ignore", RuntimeWarning)
        beta_se_mean = np.nanmean(beta_ses, axis=0)
        sens_se_mean = np.nanmean(sens_ses, axis=0)
    return SimSummary(
        design=design,
        n_replicates=len(records),
        n_failed=n_failed,
        param_names=names,
        param_true=param_true,
        param_mean=betas.mean(axis=0),
        param_bias=betas.mean(axis=0) - param_true,
        param_se_mean=beta_se_mean,
        param_ese=ese(betas),
        sens_true=np.asarray(design.sens_true()) if design.fit_strata or not design.stratified else np.asarray([np.nan] * sens.shape[1]),
        sens_mean=sens.mean(axis=0),
        sens_ese=ese(sens),
        sens_se_mean=sens_se_mean,
        q_ratio_mean=float(q_ratio.mean()),
        q_ratio_ese=float(ese(q_ratio[:, None])[0]) if len(ok) > 1 else float("nan"),
        q_avg_mean=float(q_avg.mean()),
        q_avg_ese=float(ese(q_avg[:, None])[0]) if len(ok) > 1 else float("nan"),
        calibration_edges=edges,
        calibration_model_mean=model_mean,
        calibration_nonparametric_mean=nonpar_mean,
        thresholds=np.asarray(design.thresholds),
        accuracy_estimated_mean=est_mean,
        accuracy_estimated_ese=est_ese,
        accuracy_true_mean=true_mean,
        accuracy_true_ese=true_ese,
        records=tuple(records),
    )


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float) and (x != x):
        return "NA"
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _sanitize(obj):
    """JSON-ready copy: NaN -> None, numpy scalars -> python scalars."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return None if x != x else x
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    return obj


def export_summary(summary: SimSummary, outdir, meta_line: str | None = None) -> list:
    """Write the summary as CSV tables plus a JSON blob of raw records.

    One file per table kind: coefficient recovery, sensitivity/prevalence,
    calibration counts, accuracy (estimated and truth-scored).  Every CSV
    starts with the supplied comment line; the JSON carries the same string
    under a leading "meta" key.  Output is a pure function of the summary,
    byte-identical across runs.
    """
    import pathlib

    outdir = pathlib.Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    meta = meta_line or "# anchorpu"
    written = []

    def save(name, lines):
        path = outdir / name
        path.write_text("\n".join([meta] + lines) + "\n", encoding="utf-8")
        written.append(path)

    s = summary
    lines = ["statistic," + ",".join(s.param_names)]
    for label, row in (
        ("true", s.param_true),
        ("mean", s.param_mean),
        ("bias", s.param_bias),
        ("se", s.param_se_mean),
        ("ese", s.param_ese),
    ):
        lines.append(label + "," + ",".join(_fmt(v) for v in row))
    save("coefficients.csv", lines)

    lines = ["quantity,true,mean,ese,ci_low,ci_high"]
    for j in range(s.sens_mean.size):
        lo, hi = s.ci(s.sens_mean[j], s.sens_ese[j])
        truth = s.sens_true[j] if j < s.sens_true.size else float("nan")
        lines.append(
            f"c{j + 1}," + ",".join(_fmt(v) for v in (truth, s.sens_mean[j], s.sens_ese[j], lo, hi))
        )
    for label, mean, spread in (
        ("q_ratio", s.q_ratio_mean, s.q_ratio_ese),
        ("q_avg", s.q_avg_mean, s.q_avg_ese),
    ):
        lo, hi = s.ci(mean, spread)
        lines.append(
            f"{label}," + ",".join(_fmt(v) for v in (float("nan"), mean, spread, lo, hi))
        )
    save("sensitivity_prevalence.csv", lines)

    if s.calibration_edges is not None:
        from .diagnostics import _edge_label

        lines = ["interval,model_predicted,nonparametric_estimated"]
        for i in range(len(s.calibration_edges) - 1):
            label = (
                f"{_edge_label(s.calibration_edges[i])}_"
                f"{_edge_label(s.calibration_edges[i + 1])}"
            )
            lines.append(
                f"{label},{_fmt(s.calibration_model_mean[i])},"
                f"{_fmt(s.calibration_nonparametric_mean[i])}"
            )
        save("calibration.csv", lines)

    lines = ["source,measure," + ",".join(_fmt(v) for v in s.thresholds)]
    for source, mean_d, ese_d in (
        ("estimated", s.accuracy_estimated_mean, s.accuracy_estimated_ese),
        ("true", s.accuracy_true_mean, s.accuracy_true_ese),
    ):
        for m in ("ppv", "tpr", "npv", "fpr"):
            lines.append(
                f"{source},{m}," + ",".join(_fmt(v) for v in mean_d[m])
            )
            lines.append(
                f"{source},{m}_ese," + ",".join(_fmt(v) for v in ese_d[m])
            )
        lines.append(f"{source},auc,{_fmt(mean_d['auc'])}")
        lines.append(f"{source},auc_ese,{_fmt(ese_d['auc'])}")
    save("accuracy.csv", lines)

    payload = {
        "meta": meta.lstrip("# "),
        "design": _sanitize(
            {
                "prevalence_target": s.design.prevalence_target,
                "beta_true": list(s.design.full_beta()),
                "c_true": list(s.design.sens_true()),
                "stratified": s.design.stratified,
                "fit_strata": s.design.fit_strata,
                "fitted_model": s.design.fitted_model,
                "n_train": s.design.n_train,
                "n_test": s.design.n_test,
                "replicates": s.design.replicates,
                "seed": s.design.seed,
                "normal_scale": s.design.normal_scale,
                "thresholds": list(s.design.thresholds),
            }
        ),
        "n_failed": s.n_failed,
        "records": _sanitize(list(s.records)),
    }
    path = outdir / "replicates.json"
    path.write_text(
        json.dumps(payload, indent=1, sort_keys=False) + "\n", encoding="utf-8"
    )
    written.append(path)
    return written
