"""Probability model and positive-only log-likelihood.

The working model is a logistic regression for an unobserved binary outcome.
Each record carries a covariate vector and a binary anchor indicator: anchor
positivity implies the outcome is present, while anchor-negative records are
an unlabeled mixture of cases and controls.  The anchor fires on a true case
with a sensitivity that is constant, either globally or within discrete
strata.  The likelihood of the observed (covariates, anchor) data is

    sum_i  S_i * log(c_i * P_i)  +  (1 - S_i) * log(1 - c_i * P_i)

where P_i is the modeled case probability of row i and c_i the sensitivity
of the row's stratum.  Everything here is a pure function of immutable
inputs; arrays are frozen at construction and per-row terms are reduced in a
fixed order, so results are reproducible and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "ModelParams",
    "predict_prob",
    "log_likelihood",
    "log_likelihood_gradient",
    "sigmoid",
]

# Predicted probabilities are clipped to the widest open float64 interval so
# that log(P) and log1p(-c*P) stay finite for any finite logit.
_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


class DataError(ValueError):
    """Input data violates a documented contract (as opposed to API misuse)."""


def sigmoid(t):
    """Numerically stable logistic function, strictly inside (0, 1).

    Uses separate formulas for positive and negative arguments so neither
    branch exponentiates a large positive number; logit magnitudes in the
    simulation tails exceed 700.
    """
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    expt = np.exp(t[~pos])
    out[~pos] = expt / (1.0 + expt)
    return np.clip(out, _P_LO, _P_HI)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable bundle of covariates, anchor indicators, and optional strata.

    Parameters
    ----------
    design : (N, p) float array
        Covariate matrix; by convention the first column is all ones so the
        intercept is an ordinary coefficient.
    anchor : (N,) array of {0, 1}
        Anchor indicator.  Both values must occur.
    stratum : (N,) int array in [0, K), optional
        Sensitivity stratum per row.  Every stratum id below the maximum must
        occur and every stratum must contain at least one anchor-positive row.
    feature_names : sequence of str, optional
        Column names for ``design``; defaults to x0..x{p-1}.
    """

    design: np.ndarray
    anchor: np.ndarray
    stratum: np.ndarray | None = None
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        design = np.asarray(self.design, dtype=np.float64)
        if design.ndim != 2:
            raise DataError("design must be a 2-D matrix")
        if not np.all(np.isfinite(design)):
            raise DataError("design contains non-finite entries")
        anchor = np.asarray(self.anchor)
        if anchor.shape != (design.shape[0],):
            raise DataError("anchor length does not match design rows")
        if not np.all((anchor == 0) | (anchor == 1)):
            raise DataError("anchor values must be exactly 0 or 1")
        anchor = anchor.astype(np.int8)
        if anchor.sum() == 0:
            raise DataError("no anchor-positive rows")
        if anchor.sum() == anchor.size:
            raise DataError("no anchor-negative rows")
        object.__setattr__(self, "design", _frozen(design))
        object.__setattr__(self, "anchor", _frozen(anchor))

        if self.stratum is not None:
            stratum = np.asarray(self.stratum)
            if stratum.shape != (design.shape[0],):
                raise DataError("stratum length does not match design rows")
            if not np.issubdtype(stratum.dtype, np.integer):
                if not np.all(stratum == stratum.astype(np.int64)):
                    raise DataError("stratum ids must be integers")
            stratum = stratum.astype(np.int64)
            if stratum.min() < 0:
                raise DataError("stratum ids must be non-negative")
            k = int(stratum.max()) + 1
            counts = np.bincount(stratum, minlength=k)
            if np.any(counts == 0):
                raise DataError("every stratum id in [0, K) must occur")
            pos_counts = np.bincount(stratum[anchor == 1], minlength=k)
            if np.any(pos_counts == 0):
                raise DataError("every stratum needs at least one anchor-positive row")
            object.__setattr__(self, "stratum", _frozen(stratum))

        names = tuple(self.feature_names)
        if not names:
            names = tuple(f"x{j}" for j in range(design.shape[1]))
        if len(names) != design.shape[1]:
            raise DataError("feature_names length does not match design columns")
        object.__setattr__(self, "feature_names", names)

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]

    @property
    def n_features(self) -> int:
        return self.design.shape[1]

    @property
    def n_strata(self) -> int:
        """Number of sensitivity strata; 1 when no stratum column is present."""
        if self.stratum is None:
            return 1
        return int(self.stratum.max()) + 1

    def take(self, indices, drop_stratum: bool = False) -> "Dataset":
        """Row-subset copy (bootstrap resamples, CV folds).  Revalidates.

        ``drop_stratum=True`` omits the stratum column, e.g. for held-out
        folds that are only scored and need not satisfy per-stratum
        invariants.
        """
        indices = np.asarray(indices)
        keep_stratum = self.stratum is not None and not drop_stratum
        return Dataset(
            design=self.design[indices],
            anchor=self.anchor[indices],
            stratum=self.stratum[indices] if keep_stratum else None,
            feature_names=self.feature_names,
        )

    def without_stratum(self) -> "Dataset":
        """Copy with the stratum column removed (forces a constant-sensitivity fit)."""
        return Dataset(
            design=self.design,
            anchor=self.anchor,
            stratum=None,
            feature_names=self.feature_names,
        )


@dataclass(frozen=True)
class ModelParams:
    """Coefficient vector plus anchor sensitivity (one value or one per stratum).

    ``sens`` has length 1 for a constant sensitivity, length K for stratified
    fits; each entry must lie in (0, 1].  The value 1 is admitted for
    boundary-case evaluation, where the likelihood reduces to the ordinary
    Bernoulli log-likelihood of the anchor labels.
    """

    beta: np.ndarray
    sens: np.ndarray

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise ValueError("beta must be a finite 1-D vector")
        sens = np.atleast_1d(np.asarray(self.sens, dtype=np.float64))
        if sens.ndim != 1 or sens.size == 0:
            raise ValueError("sens must be a non-empty 1-D vector")
        if not np.all((sens > 0.0) & (sens <= 1.0)):
            raise ValueError("every sensitivity must lie in (0, 1]")
        object.__setattr__(self, "beta", _frozen(beta))
        object.__setattr__(self, "sens", _frozen(sens))

    @property
    def n_features(self) -> int:
        return self.beta.size

    @property
    def n_sens(self) -> int:
        return self.sens.size

    def flat(self) -> np.ndarray:
        """Concatenated (beta, sens) vector, the ordering used by gradients and vcov."""
        return np.concatenate([self.beta, self.sens])


def _check_dims(params: ModelParams, data: Dataset) -> None:
    if params.n_features != data.n_features:
        raise ValueError(
            f"parameter dimension {params.n_features} does not match "
            f"design columns {data.n_features}"
        )
    if params.n_sens > 1:
        if data.stratum is None:
            raise ValueError("stratified sensitivities require a stratum column")
        if params.n_sens != data.n_strata:
            raise ValueError(
                f"{params.n_sens} sensitivities for {data.n_strata} strata"
            )


def _row_sens(params: ModelParams, data: Dataset) -> np.ndarray:
    if params.n_sens == 1:
        return np.full(data.n_rows, params.sens[0])
    return params.sens[data.stratum]


def predict_prob(params: ModelParams, x):
    """Modeled case probability sigmoid(x @ beta), strictly in (0, 1).

    Accepts a single length-p vector (returns a float) or an (N, p) matrix
    (returns a length-N array).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != params.n_features:
        raise ValueError(
            f"x has {x.shape[-1]} entries, expected {params.n_features}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("x contains non-finite entries")
    p = sigmoid(x @ params.beta)
    return float(p) if single else p


def log_likelihood(params: ModelParams, data: Dataset) -> float:
    """Positive-only log-likelihood of the observed (covariates, anchor) data."""
    _check_dims(params, data)
    p = sigmoid(data.design @ params.beta)
    c = _row_sens(params, data)
    s = data.anchor
    pos = s == 1
    # log(c*P) split into log c + log P; both factors are strictly positive.
    terms_pos = np.log(c[pos]) + np.log(p[pos])
    terms_neg = np.log1p(-c[~pos] * p[~pos])
    return float(terms_pos.sum() + terms_neg.sum())


def log_likelihood_gradient(params: ModelParams, data: Dataset) -> np.ndarray:
    """Analytic gradient of :func:`log_likelihood` in (beta, sens) order.

    Returns a vector of length p + K'.  The beta block is
    ``X^T w`` with ``w_i = S_i(1-P_i) - (1-S_i) c_i P_i (1-P_i)/(1-c_i P_i)``
    (the S_i/P_i form multiplied through, which avoids dividing by tiny P),
    and the sensitivity block is, per stratum,
    ``sum_i S_i/c_k - (1-S_i) P_i/(1-c_k P_i)``.
    """
    _check_dims(params, data)
    p = sigmoid(data.design @ params.beta)
    c = _row_sens(params, data)
    s = data.anchor.astype(np.float64)
    one_minus_cp = 1.0 - c * p

    w = s * (1.0 - p) - (1.0 - s) * c * p * (1.0 - p) / one_minus_cp
    g_beta = data.design.T @ w

    c_terms = s / c - (1.0 - s) * p / one_minus_cp
    if params.n_sens == 1:
        g_sens = np.array([c_terms.sum()])
    else:
        g_sens = np.bincount(data.stratum, weights=c_terms, minlength=params.n_sens)
    return np.concatenate([g_beta, g_sens])
