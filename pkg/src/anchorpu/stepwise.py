"""Backward stepwise feature elimination on Wald p-values.

Repeatedly refits the model and removes the single least significant
feature (largest two-sided Wald p-value) while any p-value is at or above
the threshold.  The intercept and the sensitivity parameters are never
candidates for removal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimation import FitConfig, FitResult, fit
from .model import Dataset

__all__ = ["EliminationStep", "SelectionResult", "wald_p_values", "stepwise_select"]


@dataclass(frozen=True)
class EliminationStep:
    removed: str
    p_value: float
    loglik_before: float
    n_features_after: int


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of backward elimination.

    ``features`` are the surviving non-intercept columns, ``fit`` the final
    refit, ``trace`` one entry per removal.  ``warning`` is set when an
    intermediate fit failed and the last successful state was returned.
    """

    features: tuple[str, ...]
    fit: FitResult
    trace: tuple[EliminationStep, ...]
    warning: str | None = None


def wald_p_values(result: FitResult) -> np.ndarray:
    """Two-sided Wald p-values for each coefficient, 2*Phi(-|beta/se|).

    NaN where the standard error is unavailable.
    """
    p = result.params.n_features
    beta = result.params.beta
    se = result.se[:p]
    out = np.full(p, np.nan)
    for j in range(p):
        if se[j] > 0 and np.isfinite(se[j]):
            z = abs(beta[j] / se[j])
            out[j] = math.erfc(z / math.sqrt(2.0))
    return out


def _drop_column(data: Dataset, col: int) -> Dataset:
    keep = [j for j in range(data.n_features) if j != col]
    return Dataset(
        design=data.design[:, keep],
        anchor=data.anchor,
        stratum=data.stratum,
        feature_names=tuple(data.feature_names[j] for j in keep),
    )


def stepwise_select(
    data: Dataset,
    config: FitConfig | None = None,
    p_threshold: float = 0.1,
) -> SelectionResult:
    """Backward elimination until every retained feature has p < p_threshold.

    If a refit fails to converge or its information matrix is singular
    (p-values unavailable), elimination stops and the last successful state
    is returned with a warning.
    """
    if not 0.0 < p_threshold < 1.0:
        raise ValueError("p_threshold must lie in (0, 1)")
    config = config or FitConfig()

    current = data
    result = fit(current, config)
    if not result.converged:
        raise ValueError("initial fit did not converge; nothing to select from")
    trace: list[EliminationStep] = []
    warning = None

    while current.n_features > 1:
        pvals = wald_p_values(result)
        if np.all(np.isnan(pvals[1:])):
            warning = "standard errors unavailable; elimination stopped early"
            break
        # Intercept (column 0) is exempt from elimination.
        candidate = 1 + int(np.nanargmax(pvals[1:]))
        worst_p = pvals[candidate]
        if not (worst_p >= p_threshold):
            break
        reduced = _drop_column(current, candidate)
        next_result = fit(reduced, config)
        if not next_result.converged:
            warning = (
                f"refit after removing '{current.feature_names[candidate]}' "
                "did not converge; elimination stopped early"
            )
            break
        trace.append(
            EliminationStep(
                removed=current.feature_names[candidate],
                p_value=float(worst_p),
                loglik_before=result.loglik,
                n_features_after=reduced.n_features - 1,
            )
        )
        current, result = reduced, next_result

    return SelectionResult(
        features=tuple(current.feature_names[1:]),
        fit=result,
        trace=tuple(trace),
        warning=warning,
    )
