"""Maximum-likelihood fitting, standard errors, and prevalence estimation.

The likelihood is maximized by a quasi-Newton (BFGS) iteration with Armijo
backtracking on the unconstrained parameterization (beta, logit c_k), which
keeps every sensitivity inside (0, 1) without a constrained solver.  The
variance-covariance matrix is the inverse of the negative Hessian in the
original (beta, c) parameterization, with the Hessian formed by central
finite differences of the analytic gradient.

Two prevalence estimators are produced: the ratio of the anchor fraction to
the fitted sensitivity (stratum-size-weighted when stratified), and the mean
of the fitted case probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    Dataset,
    ModelParams,
    log_likelihood,
    log_likelihood_gradient,
    sigmoid,
)

__all__ = ["FitConfig", "FitResult", "fit", "default_init", "estimate_prevalence"]

# Degenerate strata (no unlabeled rows) have a flat likelihood in c; the
# sensitivity is pinned just inside the boundary and dropped from the vcov.
_SENS_CLAMP = 1.0 - 1e-6
_LOGIT_CAP = 36.0  # |logit c| beyond this leaves sigmoid(x) at the float64 rail


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``init=None`` requests the surrogate-logistic default initializer.
    ``ridge`` is a tiny curvature regularizer used only to rescue
    non-descent quasi-Newton steps; it never enters the reported likelihood.
    """

    max_iter: int = 500
    grad_tol: float = 1e-6
    param_tol: float = 1e-9
    init: ModelParams | None = None
    ridge: float = 1e-6
    separation_bound: float = 30.0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.grad_tol <= 0 or self.param_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass(frozen=True)
class FitResult:
    """Fitted parameters with uncertainty and prevalence estimates.

    ``vcov`` and ``se`` are ordered (beta..., sens...).  When the information
    matrix is singular or not positive definite, every vcov/se entry is NaN
    and ``vcov_ok`` is False.  ``q_ratio_se`` is a delta-method standard
    error treating the anchor fraction and the fitted sensitivity as
    independent, and is labeled as such wherever it is written out.
    """

    params: ModelParams
    vcov: np.ndarray
    se: np.ndarray
    loglik: float
    h: float
    q_ratio: float
    q_avg: float
    q_ratio_se: float
    h_by_stratum: np.ndarray | None = None
    q_by_stratum: np.ndarray | None = None
    converged: bool = False
    iterations: int = 0
    grad_sup_norm: float = math.inf
    vcov_ok: bool = True
    separation: bool = False
    fixed_sens: tuple[int, ...] = ()
    messages: tuple[str, ...] = field(default=())


def _surrogate_logistic(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Ordinary logistic regression of the anchor on the covariates.

    Ridge-damped Newton with a step cap; only an initializer, so a rough
    solution under separation is acceptable.
    """
    n, p = design.shape
    beta = np.zeros(p)
    for _ in range(50):
        prob = sigmoid(design @ beta)
        grad = design.T @ (target - prob)
        if np.max(np.abs(grad)) < 1e-8 * max(1.0, n / 100.0):
            break
        w = prob * (1.0 - prob)
        hess = (design * w[:, None]).T @ design + 1e-8 * np.eye(p)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        cap = np.max(np.abs(step))
        if cap > 10.0:
            step *= 10.0 / cap
        beta = beta + step
    return beta


def default_init(data: Dataset) -> ModelParams:
    """Starting values: surrogate logistic fit for beta, clamped ratio for c.

    The surrogate treats the anchor itself as the outcome; its coefficient
    vector already points in the right direction (and coincides with the
    target when the sensitivity is 1).  Each sensitivity starts at
    ``2 * h_k / mean surrogate probability`` clamped into [0.1, 0.9].
    """
    beta = _surrogate_logistic(data.design, data.anchor.astype(np.float64))
    prob = sigmoid(data.design @ beta)
    k = data.n_strata
    sens = np.empty(k)
    for j in range(k):
        rows = slice(None) if data.stratum is None else data.stratum == j
        h_j = float(data.anchor[rows].mean())
        mean_pred = float(prob[rows].mean())
        sens[j] = min(0.9, max(0.1, 2.0 * h_j / mean_pred))
    return ModelParams(beta=beta, sens=sens)


def _logit(c):
    return np.log(c) - np.log1p(-c)


def _minimize_bfgs(fun_grad, x0, *, max_iter, grad_tol, param_tol, ridge, callback=None):
    """BFGS with Armijo backtracking; returns (x, f, g, iterations, stop reason).

    The accepted objective values are strictly non-increasing (sufficient
    decrease is enforced), gradient convergence is tested in the sup-norm,
    and a step whose sup-norm falls below ``param_tol`` stops the iteration.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun_grad(x)
    n = x.size
    inv_h = np.eye(n)
    first_update = True
    iterations = 0
    reason = "grad_tol"

    def backtrack(d, gtd):
        step = 1.0
        for _ in range(60):
            x_new = x + step * d
            f_new, g_new = fun_grad(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * step * gtd:
                return x_new, f_new, g_new
            step *= 0.5
        return None

    while True:
        if np.max(np.abs(g)) < grad_tol:
            reason = "grad_tol"
            break
        if iterations >= max_iter:
            reason = "max_iter"
            break

        d = -inv_h @ g
        gtd = float(g @ d)
        if not np.isfinite(gtd) or gtd >= 0:
            # Rescue a non-descent quasi-Newton step by blending in a tiny
            # multiple of the raw gradient; fall back to steepest descent.
            d = d - ridge * g
            gtd = float(g @ d)
            if not np.isfinite(gtd) or gtd >= 0:
                inv_h = np.eye(n)
                d = -g
                gtd = float(g @ d)

        hit = backtrack(d, gtd)
        if hit is None and not np.array_equal(d, -g):
            # A stale curvature approximation can propose unusable steps on
            # long flat ridges; restart from steepest descent before giving up.
            inv_h = np.eye(n)
            first_update = True
            d = -g
            hit = backtrack(d, float(g @ d))
        if hit is None:
            reason = "line_search"
            break
        x_new, f_new, g_new = hit

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if first_update and sy > 0:
            inv_h *= sy / float(y @ y)
            first_update = False
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            hy = inv_h @ y
            inv_h += (
                rho * rho * (sy + float(y @ hy)) * np.outer(s, s)
                - rho * (np.outer(hy, s) + np.outer(s, hy))
            )

        x, f, g = x_new, f_new, g_new
        iterations += 1
        if callback is not None:
            callback(iterations, -f)
        if np.max(np.abs(s)) < param_tol:
            reason = "param_tol"
            break

    return x, f, g, iterations, reason


def _fd_hessian(params: ModelParams, data: Dataset, free: np.ndarray) -> np.ndarray:
    """Central finite differences of the analytic gradient in (beta, c).

    Step 1e-5 * max(1, |theta_j|) per coordinate, shrunk for sensitivity
    coordinates so evaluation points stay inside (0, 1).
    """
    theta = params.flat()
    p = params.n_features
    idx = np.flatnonzero(free)
    hess = np.zeros((theta.size, theta.size))

    def grad_at(vec):
        return log_likelihood_gradient(
            ModelParams(beta=vec[:p], sens=vec[p:]), data
        )

    for j in idx:
        h_j = 1e-5 * max(1.0, abs(theta[j]))
        if j >= p:
            c = theta[j]
            h_j = min(h_j, 0.5 * c, 0.5 * (1.0 - c))
            if h_j <= 0:
                h_j = 1e-9
        plus = theta.copy()
        plus[j] += h_j
        minus = theta.copy()
        minus[j] -= h_j
        hess[:, j] = (grad_at(plus) - grad_at(minus)) / (2.0 * h_j)
    hess = 0.5 * (hess + hess.T)
    return hess


def _prevalence(params: ModelParams, data: Dataset):
    """(q_ratio, q_avg, h, h_by_stratum, q_by_stratum) for the given parameters."""
    prob = sigmoid(data.design @ params.beta)
    q_avg = float(prob.mean())
    h = float(data.anchor.mean())
    if params.n_sens == 1:
        return h / float(params.sens[0]), q_avg, h, None, None
    k = params.n_sens
    n_k = np.bincount(data.stratum, minlength=k).astype(np.float64)
    h_k = np.bincount(data.stratum, weights=data.anchor, minlength=k) / n_k
    q_k = h_k / params.sens
    q_ratio = float((n_k * q_k).sum() / data.n_rows)
    return q_ratio, q_avg, h, h_k, q_k


def estimate_prevalence(result: FitResult, data: Dataset):
    """Both prevalence estimators recomputed from a fit on (possibly new) data.

    Returns ``(q_ratio, q_avg)``: the anchor-fraction / sensitivity ratio
    (stratum-weighted when stratified) and the mean fitted case probability.
    """
    q_ratio, q_avg, _, _, _ = _prevalence(result.params, data)
    return q_ratio, q_avg


def _q_ratio_se(params, vcov, data, h, h_by_stratum) -> float:
    """Delta-method SE of q = h/c assuming h and c independent."""
    p = params.n_features
    n = data.n_rows
    if params.n_sens == 1:
        c = float(params.sens[0])
        var_c = vcov[p, p]
        var_h = h * (1.0 - h) / n
        var_q = var_h / c**2 + h**2 * var_c / c**4
        return float(math.sqrt(var_q)) if var_q == var_q else math.nan
    k = params.n_sens
    n_k = np.bincount(data.stratum, minlength=k).astype(np.float64)
    var_c = np.diag(vcov)[p : p + k]
    var_h = h_by_stratum * (1.0 - h_by_stratum) / n_k
    var_q = np.sum(
        (n_k / n) ** 2
        * (var_h / params.sens**2 + h_by_stratum**2 * var_c / params.sens**4)
    )
    return float(math.sqrt(var_q)) if var_q == var_q else math.nan


def fit(data: Dataset, config: FitConfig | None = None, callback=None) -> FitResult:
    """Maximize the positive-only likelihood on ``data``.

    One sensitivity is fit per stratum when the dataset carries a stratum
    column, otherwise a single constant sensitivity.  Identical inputs give
    bit-identical results.  Non-convergence is reported through the
    ``converged`` flag rather than an exception.

    Parameters
    ----------
    data : Dataset
    config : FitConfig, optional
    callback : callable, optional
        Invoked as ``callback(iteration, loglik)`` after each accepted step.
    """
    config = config or FitConfig()
    params0 = config.init if config.init is not None else default_init(data)
    if params0.n_features != data.n_features:
        raise ValueError("init beta dimension does not match design")
    expect_k = data.n_strata if data.stratum is not None else 1
    if params0.n_sens != expect_k:
        raise ValueError("init sensitivity count does not match strata")

    p = data.n_features
    k = params0.n_sens
    messages: list[str] = []

    fixed = np.zeros(k, dtype=bool)
    if data.stratum is not None:
        unlabeled = np.bincount(data.stratum[data.anchor == 0], minlength=k)
        fixed = unlabeled == 0
        if fixed.any():
            messages.append(
                "sensitivity fixed at upper clamp for strata with no unlabeled "
                f"rows: {np.flatnonzero(fixed).tolist()}"
            )
    free_sens = ~fixed

    sens0 = np.clip(params0.sens, 1e-6, _SENS_CLAMP)
    x0 = np.concatenate([params0.beta, _logit(sens0[free_sens])])

    def unpack(x: np.ndarray) -> ModelParams:
        sens = np.full(k, _SENS_CLAMP)
        sens[free_sens] = sigmoid(np.clip(x[p:], -_LOGIT_CAP, _LOGIT_CAP))
        return ModelParams(beta=x[:p], sens=sens)

    def neg_ll_grad(x):
        params = unpack(x)
        ll = log_likelihood(params, data)
        g = log_likelihood_gradient(params, data)
        # Chain rule onto the logit scale: dc/d(logit c) = c (1 - c).
        c_free = params.sens[free_sens]
        g_eta = g[p:][free_sens] * c_free * (1.0 - c_free)
        return -ll, -np.concatenate([g[:p], g_eta])

    x_hat, f_hat, g_hat, iterations, reason = _minimize_bfgs(
        neg_ll_grad,
        x0,
        max_iter=config.max_iter,
        grad_tol=config.grad_tol,
        param_tol=config.param_tol,
        ridge=config.ridge,
        callback=callback,
    )
    grad_sup = float(np.max(np.abs(g_hat)))
    converged = grad_sup < config.grad_tol
    if not converged:
        messages.append(f"stopped on {reason} with gradient sup-norm {grad_sup:.3g}")

    params = unpack(x_hat)
    loglik = log_likelihood(params, data)

    separation = bool(np.any(np.abs(params.beta) > config.separation_bound))
    if separation:
        messages.append(
            f"possible separation: |beta| exceeds {config.separation_bound}"
        )

    free = np.concatenate([np.ones(p, dtype=bool), free_sens])
    n_par = p + k
    vcov = np.full((n_par, n_par), np.nan)
    vcov_ok = False
    hess = _fd_hessian(params, data, free)
    idx = np.flatnonzero(free)
    info = -hess[np.ix_(idx, idx)]
    try:
        # Cholesky rejects non-positive-definite information matrices; the
        # condition bound catches numerically singular ones (collinear
        # columns) that LU inversion would "solve" with garbage.
        np.linalg.cholesky(info)
        if np.linalg.cond(info) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        block = np.linalg.inv(info)
        vcov[np.ix_(idx, idx)] = 0.5 * (block + block.T)
        vcov_ok = True
    except np.linalg.LinAlgError:
        messages.append(
            "information matrix singular or not positive definite; vcov set to NaN"
        )
    se = np.sqrt(np.where(np.isnan(vcov.diagonal()), np.nan, vcov.diagonal()))

    q_ratio, q_avg, h, h_k, q_k = _prevalence(params, data)
    q_se = _q_ratio_se(params, vcov, data, h, h_k)

    vcov.setflags(write=False)
    se.setflags(write=False)
    return FitResult(
        params=params,
        vcov=vcov,
        se=se,
        loglik=loglik,
        h=h,
        q_ratio=q_ratio,
        q_avg=q_avg,
        q_ratio_se=q_se,
        h_by_stratum=h_k,
        q_by_stratum=q_k,
        converged=converged,
        iterations=iterations,
        grad_sup_norm=grad_sup,
        vcov_ok=vcov_ok,
        separation=separation,
        fixed_sens=tuple(np.flatnonzero(fixed).tolist()),
        messages=tuple(messages),
    )
