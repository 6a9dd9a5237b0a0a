"""Internal validation without labels: calibration and accuracy estimators.

Calibration compares, inside fixed intervals of the fitted probability, a
nonparametric estimate of the number of cases among unlabeled records with
the model-implied number.  Gross disagreement flags lack of fit; no formal
test statistic is defined, so the table reports counts plus a maximum
per-interval discrepancy and leaves judgment to the caller.

Predictive accuracy (TPR/FPR/PPV/NPV at decision thresholds, and AUC) among
unlabeled records is reconstructed from the anchor indicator alone via
plug-in identities that use the anchor fraction and the mean fitted
probability.  Standard errors come from a nonparametric bootstrap with a
full refit per resample; k-fold cross-validation with anchor-stratified
folds gives out-of-sample versions of the same measures.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .estimation import FitConfig, FitResult, fit
from .model import DataError, Dataset, sigmoid

__all__ = [
    "CalibrationTable",
    "AccuracyReport",
    "AccuracySE",
    "calibration_table",
    "accuracy",
    "bootstrap_se",
    "cross_validate",
    "DEFAULT_THRESHOLDS",
]

DEFAULT_THRESHOLDS = (0.2, 0.3, 0.4, 0.5)
DEFAULT_EDGES = tuple(np.round(np.linspace(0.0, 1.0, 11), 1))

_MEASURES = ("tpr", "fpr", "ppv", "npv")


def _edge_label(x: float) -> str:
    return f"{x:.1f}" if x == round(x, 1) else f"{x:g}"


@dataclass(frozen=True)
class CalibrationTable:
    """Per-interval case counts, model-implied vs nonparametric.

    Intervals are half-open (a, b].  Entries are NaN (not zero) for
    intervals containing no unlabeled rows; ``q_star`` is the overall
    prevalence plugged into the nonparametric estimate.
    """

    edges: np.ndarray
    n_unlabeled: np.ndarray
    n_anchor: np.ndarray
    p_model: np.ndarray
    p_nonparametric: np.ndarray
    model_predicted_cases: np.ndarray
    nonparametric_cases: np.ndarray
    q_star: float

    @property
    def max_count_discrepancy(self) -> float:
        """Largest per-interval |model - nonparametric| case-count gap."""
        gap = np.abs(self.model_predicted_cases - self.nonparametric_cases)
        return float(np.nan) if np.all(np.isnan(gap)) else float(np.nanmax(gap))

    def interval_labels(self) -> list[str]:
        return [
            f"{_edge_label(self.edges[i])}_{_edge_label(self.edges[i + 1])}"
            for i in range(len(self.edges) - 1)
        ]


@dataclass(frozen=True)
class AccuracySE:
    """Bootstrap standard errors for an AccuracyReport.

    ``sens_mean``/``sens_sd`` summarize the refitted anchor sensitivities
    across resamples (one entry per stratum).
    """

    tpr: np.ndarray
    fpr: np.ndarray
    ppv: np.ndarray
    npv: np.ndarray
    auc: float
    n_replicates: int
    n_failed: int
    warning: str | None
    sens_mean: np.ndarray
    sens_sd: np.ndarray


@dataclass(frozen=True)
class AccuracyReport:
    """Plug-in accuracy measures at a threshold grid, plus AUC.

    The headline tpr/fpr/ppv/npv vectors are clamped to [0, 1] and repaired
    to be non-increasing in the threshold; ``raw`` keeps the unmodified
    plug-in values for audit, and ``clamp_flags`` marks entries whose raw
    value left [0, 1].  An NPV over an empty below-threshold set is reported
    as 1 and flagged in ``empty_set_flags``; an empty above-threshold set
    leaves PPV as NaN with the flag set.  ``degenerate`` is set when the
    estimated prevalence does not exceed the anchor fraction, which breaks
    the PPV/NPV identities.
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    ppv: np.ndarray
    npv: np.ndarray
    auc: float
    raw: dict
    clamp_flags: dict
    empty_set_flags: dict
    degenerate: bool
    h: float
    q: float
    se: AccuracySE | None = None
    n_folds: int | None = None
    fold_aucs: tuple = ()


def _interval_index(edges: np.ndarray, p: np.ndarray) -> np.ndarray:
    # (a, b] membership: a probability equal to an inner edge joins the
    # interval ending there.
    return np.searchsorted(edges, p, side="left") - 1


def _check_edges(edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise DataError("edges must be a 1-D array with at least two entries")
    if np.any(np.diff(edges) <= 0):
        raise DataError("edges must be strictly ascending")
    if edges[0] != 0.0 or edges[-1] != 1.0:
        raise DataError("edges must start at 0.0 and end at 1.0 to partition (0, 1]")
    return edges


def calibration_table(
    result: FitResult,
    data: Dataset,
    edges=None,
    q_star: float | None = None,
) -> CalibrationTable:
    """Model-implied vs nonparametric case counts in probability intervals.

    ``q_star`` defaults to the fitted ratio estimate of prevalence and may
    be overridden with an externally known value; it must exceed the anchor
    fraction of ``data``.
    """
    edges = _check_edges(DEFAULT_EDGES if edges is None else edges)
    p = sigmoid(data.design @ result.params.beta)
    s = data.anchor
    n = data.n_rows
    h = float(s.mean())
    if q_star is None:
        q_star = result.q_ratio
    if not (h < q_star < 1.0):
        raise DataError(
            f"q_star={q_star:.6g} must lie strictly between the anchor "
            f"fraction {h:.6g} and 1"
        )

    n_bins = edges.size - 1
    idx = _interval_index(edges, p)
    n_anchor = np.bincount(idx[s == 1], minlength=n_bins).astype(np.int64)
    n_unlab = np.bincount(idx[s == 0], minlength=n_bins).astype(np.int64)

    with np.errstate(divide="ignore", invalid="ignore"):
        p_nonpar = (q_star - h) * n_anchor / (h * n_unlab)

    if result.params.n_sens == 1:
        c_row = np.full(n, float(result.params.sens[0]))
    else:
        if data.stratum is None:
            raise DataError("stratified fit requires the stratum column to calibrate")
        c_row = result.params.sens[data.stratum]
    # Model-based estimate sums over all rows in the interval, anchored or not.
    num = np.bincount(idx, weights=(1.0 - c_row) * p, minlength=n_bins)
    den = np.bincount(idx, weights=1.0 - c_row * p, minlength=n_bins)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_model = num / den

    empty = n_unlab == 0
    p_nonpar = np.where(empty, np.nan, p_nonpar)
    p_model = np.where(empty, np.nan, p_model)

    return CalibrationTable(
        edges=edges,
        n_unlabeled=n_unlab,
        n_anchor=n_anchor,
        p_model=p_model,
        p_nonparametric=p_nonpar,
        model_predicted_cases=p_model * n_unlab,
        nonparametric_cases=p_nonpar * n_unlab,
        q_star=float(q_star),
    )


def _plug_in_measures(p: np.ndarray, s: np.ndarray, v: np.ndarray):
    """Raw plug-in TPR/FPR/PPV/NPV at thresholds ``v`` (strict > and <)."""
    n = p.size
    h = float(s.mean())
    q = float(p.mean())
    p1 = np.sort(p[s == 1])
    p0 = np.sort(p[s == 0])
    n1, n0 = p1.size, p0.size

    gt1 = (n1 - np.searchsorted(p1, v, side="right")) / n
    gt0 = (n0 - np.searchsorted(p0, v, side="right")) / n
    lt1 = np.searchsorted(p1, v, side="left") / n
    lt0 = np.searchsorted(p0, v, side="left") / n

    tpr = gt1 / h
    fpr = gt0 / (1.0 - q) - gt1 * (q - h) / (h * (1.0 - q))
    with np.errstate(divide="ignore", invalid="ignore"):
        ppv = gt1 * (q - h) / (h * gt0)
        npv = 1.0 - lt1 * (q - h) / (h * lt0)
    return {"tpr": tpr, "fpr": fpr, "ppv": ppv, "npv": npv}, h, q


def _monotone_repair(values: np.ndarray) -> np.ndarray:
    """Force non-increasing order across ascending thresholds (running max
    from the right); raw values are kept separately for audit."""
    return np.maximum.accumulate(values[::-1])[::-1]


def _sweep_auc(p: np.ndarray, s: np.ndarray) -> float:
    """Trapezoid AUC over the plug-in (FPR, TPR) curve swept across every
    distinct fitted probability, augmented with the (0,0) and (1,1) corners."""
    v = np.unique(p)
    raw, _, _ = _plug_in_measures(p, s, v)
    tpr = _monotone_repair(np.clip(raw["tpr"], 0.0, 1.0))
    fpr = _monotone_repair(np.clip(raw["fpr"], 0.0, 1.0))
    x = np.concatenate([[0.0], fpr[::-1], [1.0]])
    y = np.concatenate([[0.0], tpr[::-1], [1.0]])
    return float(np.trapezoid(y, x))


def accuracy(result: FitResult, data: Dataset, thresholds=None) -> AccuracyReport:
    """Plug-in accuracy of the fitted model among unlabeled rows of ``data``.

    The anchor fraction and mean fitted probability entering the identities
    are computed on ``data`` itself, so the same function scores held-out
    folds.  AUC always uses the full sweep over distinct fitted
    probabilities, independent of the reporting grid.
    """
    thresholds = np.asarray(
        DEFAULT_THRESHOLDS if thresholds is None else thresholds, dtype=np.float64
    )
    if np.any((thresholds <= 0.0) | (thresholds >= 1.0)):
        raise ValueError("thresholds must lie strictly inside (0, 1)")
    order = np.argsort(thresholds)
    if not np.array_equal(order, np.arange(thresholds.size)):
        raise ValueError("thresholds must be ascending")

    p = sigmoid(data.design @ result.params.beta)
    s = data.anchor
    raw, h, q = _plug_in_measures(p, s, thresholds)

    degenerate = q <= h
    empty = {
        "tpr": np.zeros(thresholds.size, dtype=bool),
        "fpr": np.zeros(thresholds.size, dtype=bool),
        "ppv": np.isnan(raw["ppv"]),
        "npv": np.isnan(raw["npv"]),
    }

    clamped = {}
    clamp_flags = {}
    for m in _MEASURES:
        vals = raw[m].copy()
        flags = ~np.isnan(vals) & ((vals < 0.0) | (vals > 1.0))
        vals = np.clip(vals, 0.0, 1.0)
        clamped[m] = vals
        clamp_flags[m] = flags
    # Empty below-threshold set: NPV handed the conventional value 1.
    clamped["npv"] = np.where(empty["npv"], 1.0, clamped["npv"])
    clamped["tpr"] = _monotone_repair(clamped["tpr"])
    clamped["fpr"] = _monotone_repair(clamped["fpr"])

    return AccuracyReport(
        thresholds=thresholds,
        tpr=clamped["tpr"],
        fpr=clamped["fpr"],
        ppv=clamped["ppv"],
        npv=clamped["npv"],
        auc=_sweep_auc(p, s),
        raw=raw,
        clamp_flags=clamp_flags,
        empty_set_flags=empty,
        degenerate=bool(degenerate),
        h=h,
        q=q,
    )


def _resample_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def _replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))


def bootstrap_se(
    data: Dataset,
    config: FitConfig | None = None,
    thresholds=None,
    n_boot: int = 1000,
    seed: int = 0,
) -> AccuracyReport:
    """Accuracy report with bootstrap standard errors attached.

    Each of ``n_boot`` resamples redraws N rows with replacement, refits the
    model from scratch, and recomputes every measure; the SE is the sample
    standard deviation across resamples whose refit converged.  Resamples
    that fail (non-convergence, or a resample violating the data contract,
    e.g. losing every anchor-positive) are dropped and counted, with a
    warning once more than 10% fail.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be >= 2")
    config = config or FitConfig()
    base_fit = fit(data, config)
    base = accuracy(base_fit, data, thresholds)

    values = {m: [] for m in _MEASURES}
    aucs = []
    sens = []
    n_failed = 0
    for b in range(n_boot):
        rng = _replicate_rng(seed, b)
        idx = _resample_indices(rng, data.n_rows)
        try:
            sample = data.take(idx)
            f_b = fit(sample, config)
        except DataError:
            n_failed += 1
            continue
        if not f_b.converged:
            n_failed += 1
            continue
        rep = accuracy(f_b, sample, thresholds)
        for m in _MEASURES:
            values[m].append(getattr(rep, m))
        aucs.append(rep.auc)
        sens.append(f_b.params.sens)

    n_ok = len(aucs)
    if n_ok < 2:
        raise DataError(
            f"bootstrap produced only {n_ok} usable replicates out of {n_boot}"
        )
    warning = None
    if n_failed > 0.1 * n_boot:
        warning = f"{n_failed} of {n_boot} bootstrap replicates failed"

    def sd(rows):
        arr = np.asarray(rows, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            return np.nanstd(arr, axis=0, ddof=1)

    sens_arr = np.asarray(sens)
    se = AccuracySE(
        tpr=sd(values["tpr"]),
        fpr=sd(values["fpr"]),
        ppv=sd(values["ppv"]),
        npv=sd(values["npv"]),
        auc=float(sd(aucs)),
        n_replicates=n_ok,
        n_failed=n_failed,
        warning=warning,
        sens_mean=sens_arr.mean(axis=0),
        sens_sd=sens_arr.std(axis=0, ddof=1),
    )
    return replace(base, se=se)


def _fold_assignment(data: Dataset, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Round-robin fold ids within each (anchor, stratum) cell after a shuffle,
    spreading anchor-positives (per stratum) evenly across folds."""
    assign = np.empty(data.n_rows, dtype=np.int64)
    stratum = np.zeros(data.n_rows, dtype=np.int64) if data.stratum is None else data.stratum
    for a in (0, 1):
        for z in np.unique(stratum):
            rows = np.flatnonzero((data.anchor == a) & (stratum == z))
            rng.shuffle(rows)
            assign[rows] = np.arange(rows.size) % folds
    return assign


def _assignment_valid(data: Dataset, assign: np.ndarray, folds: int) -> bool:
    for f in range(folds):
        held = assign == f
        if data.anchor[held].sum() == 0 or (data.anchor[held] == 0).sum() == 0:
            return False
        train = ~held
        if data.anchor[train].sum() == 0 or (data.anchor[train] == 0).sum() == 0:
            return False
        if data.stratum is not None:
            k = data.n_strata
            if np.any(np.bincount(data.stratum[train], minlength=k) == 0):
                return False
            pos = np.bincount(
                data.stratum[train][data.anchor[train] == 1], minlength=k
            )
            if np.any(pos == 0):
                return False
    return True


def cross_validate(
    data: Dataset,
    config: FitConfig | None = None,
    folds: int = 10,
    thresholds=None,
    seed: int = 0,
) -> AccuracyReport:
    """k-fold cross-validated accuracy, averaged over folds.

    Folds are assigned stratified on the anchor (and sensitivity stratum) so
    each fold holds its share of anchor-positives.  Each fold's model is fit
    on the remaining folds and scored on the held-out rows, with the anchor
    fraction and mean probability taken from the held-out rows.  If an
    assignment leaves some fold without an anchor-positive, it is
    re-randomized once before failing.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    config = config or FitConfig()

    assign = None
    for attempt in range(2):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((seed, attempt, folds)))
        )
        candidate = _fold_assignment(data, folds, rng)
        if _assignment_valid(data, candidate, folds):
            assign = candidate
            break
    if assign is None:
        raise DataError(
            "could not assign folds with at least one anchor-positive row each"
        )

    reports = []
    for f in range(folds):
        train = data.take(np.flatnonzero(assign != f))
        held = data.take(np.flatnonzero(assign == f), drop_stratum=True)
        fold_fit = fit(train, config)
        reports.append(accuracy(fold_fit, held, thresholds))

    def fold_mean(attr):
        with np.errstate(invalid="ignore"):
            return np.nanmean([getattr(r, attr) for r in reports], axis=0)

    first = reports[0]
    return AccuracyReport(
        thresholds=first.thresholds,
        tpr=fold_mean("tpr"),
        fpr=fold_mean("fpr"),
        ppv=fold_mean("ppv"),
        npv=fold_mean("npv"),
        auc=float(np.mean([r.auc for r in reports])),
        raw={
            m: np.nanmean([r.raw[m] for r in reports], axis=0) for m in _MEASURES
        },
        clamp_flags={
            m: np.any([r.clamp_flags[m] for r in reports], axis=0) for m in _MEASURES
        },
        empty_set_flags={
            m: np.any([r.empty_set_flags[m] for r in reports], axis=0)
            for m in _MEASURES
        },
        degenerate=any(r.degenerate for r in reports),
        h=float(np.mean([r.h for r in reports])),
        q=float(np.mean([r.q for r in reports])),
        n_folds=folds,
        fold_aucs=tuple(r.auc for r in reports),
    )
