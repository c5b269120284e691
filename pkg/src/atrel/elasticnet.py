"""Elastic-net penalised GLMs: coordinate descent with a proximal Newton
outer loop for the logistic link.

Objective (glmnet convention, intercept unpenalised, columns standardised
internally):

    (1/n) sum_i w_i dev_i(beta)  +  penalty * ( mix * ||b||_1
                                               + (1 - mix)/2 * ||b||_2^2 )

with dev the squared-error/2 (identity) or Bernoulli negative
log-likelihood (logit) and b the non-intercept coefficients.  Returned
coefficients are on the original covariate scale, intercept first.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import _rng
from .exceptions import ConfigurationError, ConvergenceError
from .numerics import LinkFunction

_IRLS_W_FLOOR = 1e-6


@njit(cache=True)
def _update_coord(x, w, r, beta, denom, j, l1, l2, free0):
    n = x.shape[0]
    bj = beta[j]
    rho = 0.0
    for i in range(n):
        rho += w[i] * x[i, j] * r[i]
    rho = rho / n + denom[j] * bj
    if free0 and j == 0:
        bn = rho / denom[j] if denom[j] > 0.0 else 0.0
    else:
        if rho > l1:
            bn = (rho - l1) / (denom[j] + l2)
        elif rho < -l1:
            bn = (rho + l1) / (denom[j] + l2)
        else:
            bn = 0.0
    if bn != bj:
        d = bn - bj
        for i in range(n):
            r[i] -= x[i, j] * d
        beta[j] = bn
        return d if d >= 0.0 else -d
    return 0.0


@njit(cache=True)
def _cd_wls(x, w, z, beta, l1, l2, free0, max_sweeps, tol):
    """Coordinate descent on a weighted least-squares elastic net.

    Minimises (1/(2n)) sum_i w_i (z_i - x_i beta)^2 plus the elastic-net
    penalty on all coordinates except coordinate 0 when ``free0``.
    Alternates full sweeps with sweeps over the active set until a full
    sweep is stable.  ``beta`` is updated in place; returns the sweep
    count or -1 when the budget is exhausted.
    """
    n, p = x.shape
    r = z.copy()
    for i in range(n):
        acc = 0.0
        for j in range(p):
            acc += x[i, j] * beta[j]
        r[i] -= acc
    denom = np.empty(p)
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += w[i] * x[i, j] * x[i, j]
        denom[j] = acc / n
    active = np.empty(p, dtype=np.int64)
    sweeps = 0.0
    while sweeps < max_sweeps:
        # full sweep over every coordinate
        max_delta = 0.0
        for j in range(p):
            d = _update_coord(x, w, r, beta, denom, j, l1, l2, free0)
            if d > max_delta:
                max_delta = d
        sweeps += 1.0
        if max_delta <= tol:
            return sweeps
        # converge on the active set before the next full sweep
        na = 0
        for j in range(p):
            if beta[j] != 0.0 or (free0 and j == 0):
                active[na] = j
                na += 1
        frac = na / p if p > 0 else 1.0
        while sweeps < max_sweeps:
            max_delta = 0.0
            for jj in range(na):
                d = _update_coord(x, w, r, beta, denom, active[jj], l1, l2, free0)
                if d > max_delta:
                    max_delta = d
            sweeps += frac
            if max_delta <= tol:
                break
    return -1.0


def _standardise(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (x - mean) / scale, mean, scale


def _solve_std(design, y, w_row, link, l1, l2, beta, max_outer, max_sweeps,
               tol, outer_tol=1e-9):
    """Solve on the standardised design; ``beta`` is updated in place."""
    if link.is_identity:
        sweeps = _cd_wls(design, np.ascontiguousarray(w_row),
                         np.ascontiguousarray(y), beta, l1, l2, True,
                         max_sweeps, tol)
        if sweeps < 0:
            raise ConvergenceError("coordinate descent exhausted its sweep budget")
        return
    old = beta.copy()
    for it in range(max_outer):
        eta = design @ beta
        mu = link.evaluate(eta)
        d = np.maximum(mu * (1.0 - mu), _IRLS_W_FLOOR)
        w_irls = d * w_row
        z = eta + (y - mu) / d
        old = beta.copy()
        sweeps = _cd_wls(design, np.ascontiguousarray(w_irls),
                         np.ascontiguousarray(z), beta, l1, l2, True,
                         max_sweeps, tol)
        if sweeps < 0:
            raise ConvergenceError("coordinate descent exhausted its sweep budget")
        if np.max(np.abs(beta - old)) <= outer_tol:
            return
    if max_outer > 3:  # short proximal loops are used for path scoring only
        raise ConvergenceError(
            "proximal Newton did not converge",
            last_iterate=beta, residual_norm=float(np.max(np.abs(beta - old))),
        )


def elastic_net_glm(
    x: np.ndarray,
    y: np.ndarray,
    link: LinkFunction,
    penalty_mix: float = 0.5,
    penalty: float = 0.0,
    weights: np.ndarray | None = None,
    beta0: np.ndarray | None = None,
    max_outer: int = 60,
    max_sweeps: int = 20000,
    tol: float = 1e-10,
    kkt_tol: float = 1e-7,
    check_kkt: bool = True,
) -> np.ndarray:
    """Fit one elastic-net GLM; returns (1 + p) coefficients, intercept first.

    The design ``x`` must not contain a constant column; it is
    standardised internally and the intercept is never penalised.
    Raises :class:`ConvergenceError` with the KKT report when the
    optimiser stalls.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if not (0.0 <= penalty_mix <= 1.0):
        raise ConfigurationError("penalty_mix must lie in [0, 1]")
    if penalty < 0.0:
        raise ConfigurationError("penalty must be nonnegative")
    w_row = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    xs, mean, scale = _standardise(x)
    design = np.ascontiguousarray(np.column_stack([np.ones(n), xs]))
    l1 = penalty * penalty_mix
    l2 = penalty * (1.0 - penalty_mix)

    if beta0 is not None:
        beta = np.asarray(beta0, dtype=float).copy()
        beta[0] = beta[0] + beta[1:] @ mean
        beta[1:] = beta[1:] * scale
    else:
        beta = np.zeros(p + 1)

    _solve_std(design, y, w_row, link, l1, l2, beta, max_outer, max_sweeps, tol)

    if check_kkt and penalty > 0.0:
        _assert_kkt(design, y, w_row, beta, link, l1, l2, kkt_tol)

    out = np.empty(p + 1)
    out[1:] = beta[1:] / scale
    out[0] = beta[0] - out[1:] @ mean
    return out


def _smooth_gradient(design, y, w_row, beta, link, l2):
    eta = design @ beta
    mu = link.evaluate(eta)
    grad = design.T @ (w_row * (mu - y)) / design.shape[0]
    grad[1:] += l2 * beta[1:]
    return grad


def _assert_kkt(design, y, w_row, beta, link, l1, l2, kkt_tol):
    grad = _smooth_gradient(design, y, w_row, beta, link, l2)
    active = beta[1:] != 0.0
    viol_active = 0.0
    if np.any(active):
        viol_active = float(np.max(np.abs(
            grad[1:][active] + l1 * np.sign(beta[1:][active])
        )))
    viol_inactive = 0.0
    if np.any(~active):
        viol_inactive = float(np.max(np.maximum(
            np.abs(grad[1:][~active]) - l1, 0.0
        )))
    viol0 = abs(grad[0])
    if max(viol_active, viol_inactive, viol0) > kkt_tol:
        raise ConvergenceError(
            "KKT conditions violated after coordinate descent",
            residual_norm=max(viol_active, viol_inactive, viol0),
            context={
                "active_violation": viol_active,
                "inactive_violation": viol_inactive,
                "intercept_violation": viol0,
            },
        )


def penalty_grid(x, y, link, penalty_mix, n_penalties=50, weights=None,
                 min_ratio=0.02):
    """Log-spaced penalty path from the smallest all-zero penalty downward."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    w_row = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    xs, _, _ = _standardise(x)
    ybar = float(np.average(y, weights=w_row))
    resid = y - ybar  # gradient at the intercept-only fit, either link
    lam_max = float(np.max(np.abs(xs.T @ (w_row * resid)))) / n
    lam_max /= max(penalty_mix, 1e-3)
    return np.geomspace(lam_max, lam_max * min_ratio, n_penalties)


def elastic_net_path(x, y, link, penalty_mix, penalties, weights=None,
                     tol=1e-7, max_sweeps=20000, max_outer=60):
    """Warm-started solutions along a decreasing penalty path.

    The design is standardised once; solutions are mapped back to the
    original scale.  ``max_outer`` caps the proximal Newton loop (short
    caps are appropriate when the path is only scored for selection).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    w_row = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    xs, mean, scale = _standardise(x)
    design = np.ascontiguousarray(np.column_stack([np.ones(n), xs]))
    order = np.argsort(penalties)[::-1]
    coefs = np.empty((len(penalties), p + 1))
    beta = np.zeros(p + 1)
    for pos in order:
        lam = float(penalties[pos])
        _solve_std(design, y, w_row, link, lam * penalty_mix,
                   lam * (1.0 - penalty_mix), beta, max_outer, max_sweeps, tol)
        coefs[pos, 1:] = beta[1:] / scale
        coefs[pos, 0] = beta[0] - coefs[pos, 1:] @ mean
    return coefs


def cv_elastic_net(x, y, link, penalty_mix=0.5, n_penalties=50, folds=5,
                   seed=0, weights=None, dfmax=None,
                   cv_tol=1e-5, cv_max_outer=2, selection="1se"):
    """K-fold deviance CV over a log-spaced penalty path.

    Path solutions are scored with short proximal loops (selection needs
    ranking, not polish); descent past ``dfmax`` active coefficients is
    cut off per training fold, bounding the cost of the overfit tail.
    ``selection`` picks either the deviance minimiser ("min") or the
    largest penalty within one standard error of it ("1se", the
    conventional parsimonious rule).  Returns ``(penalty, penalties,
    cv_deviance)`` with uncomputed tail entries scored infinite.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if selection not in ("min", "1se"):
        raise ConfigurationError("selection must be 'min' or '1se'")
    w_row = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    penalties = penalty_grid(x, y, link, penalty_mix, n_penalties, weights)
    if dfmax is None:
        dfmax = max(20, p // 2)
    rng = _rng.child_rng(seed, _rng.TUNING, 1)
    perm = rng.permutation(n)
    parts = np.array_split(perm, folds)
    fold_dev = np.full((folds, len(penalties)), np.inf)
    computed = len(penalties)
    for f, part in enumerate(parts):
        ho = np.sort(part)
        tr = np.setdiff1d(np.arange(n), ho, assume_unique=True)
        xs, mean, scale = _standardise(x[tr])
        design = np.ascontiguousarray(np.column_stack([np.ones(tr.size), xs]))
        design_ho = np.column_stack([np.ones(ho.size), (x[ho] - mean) / scale])
        beta = np.zeros(p + 1)
        for k, lam in enumerate(penalties):
            _solve_std(design, y[tr], w_row[tr], link, lam * penalty_mix,
                       lam * (1.0 - penalty_mix), beta, cv_max_outer, 20000,
                       cv_tol)
            eta = design_ho @ beta
            if link.is_identity:
                fold_dev[f, k] = float(np.sum(w_row[ho] * (y[ho] - eta) ** 2)) / ho.size
            else:
                fold_dev[f, k] = float(np.sum(
                    w_row[ho] * (np.logaddexp(0.0, eta) - y[ho] * eta)
                )) / ho.size
            if np.count_nonzero(beta[1:]) > dfmax:
                computed = min(computed, k + 1)
                break
    dev = fold_dev.mean(axis=0)
    dev[computed:] = np.inf
    best = int(np.argmin(dev[:computed]))
    if selection == "1se" and computed > 0:
        se = float(fold_dev[:, best].std(ddof=1)) / np.sqrt(folds)
        within = np.nonzero(dev[:computed] <= dev[best] + se)[0]
        best = int(within[0])  # penalties descend: first index = largest
    return float(penalties[best]), penalties, dev
