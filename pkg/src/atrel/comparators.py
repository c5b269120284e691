"""Baseline and competing estimators for the transfer regression target.

* ``source_glm`` -- plain GLM on the labelled source rows, no shift
  correction.
* ``iw_only`` -- importance-weighted estimating equation with a
  parametric logistic density-ratio model.
* ``parametric_dr`` -- augmented (doubly robust) equation with fully
  parametric nuisance models, no cross-fitting.
* ``dml_be`` -- cross-fitted double machine learning with elastic-net
  nuisances on a natural-spline + interaction expansion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _rng
from .elasticnet import cv_elastic_net, elastic_net_glm
from .estimator import kfold_partition
from .exceptions import ConfigurationError
from .model import NuisanceSpec, TransferDataset, design_matrix
from .numerics import BasisExpansion, BasisSpec, LinkFunction, newton_solve
from .nuisance import dr_equation_value, solve_preliminary_beta

_P_CLIP = 1e-6  # guards the odds conversion against saturated fits


@dataclass(frozen=True)
class ComparatorSpec:
    """Configuration of the comparison estimators."""

    method: str = "parametric_dr"
    penalty_mix: float = 0.5
    n_penalties: int = 50
    folds: int = 5
    expansion_df: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("source_glm", "iw_only", "parametric_dr", "dml_be"):
            raise ConfigurationError(f"unknown comparator {self.method!r}")


def glm_fit(a: np.ndarray, y: np.ndarray, link: LinkFunction,
            weights: np.ndarray | None = None, beta0=None,
            tol: float = 1e-10) -> np.ndarray:
    """Weighted GLM score solve: sum w A (y - g(A'beta)) / n = 0."""
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    n = a.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    def residual(beta):
        return a.T @ (w * (y - link.evaluate(a @ beta))) / n

    def jacobian(beta):
        d = w * link.derivative(a @ beta)
        return -(a.T * d) @ a / n

    x0 = np.zeros(a.shape[1]) if beta0 is None else np.asarray(beta0, float)
    return newton_solve(residual, jacobian, x0, tol=tol, context={"model": "glm"})


def fit_source_glm(data: TransferDataset, spec: NuisanceSpec) -> np.ndarray:
    """Target working model fitted on the source rows, ignoring the shift."""
    a_src = design_matrix(data.source_x, data.columns, spec.a_columns, constant=True)
    return glm_fit(a_src, data.source_y, spec.link)


def parametric_density_ratio(data: TransferDataset, spec: NuisanceSpec,
                             src_idx: np.ndarray | None = None):
    """Density ratio from a pooled logistic membership model.

    Fits P(source | x) on psi and converts through the odds:
    ``omega(x) = (n_model / N_model) * (1 - p) / p`` where the counts are
    the rows the membership model was trained on.
    """
    psi_src = design_matrix(data.source_x, data.columns, spec.psi_columns, constant=True)
    psi_tgt = design_matrix(data.target_x, data.columns, spec.psi_columns, constant=True)
    if src_idx is not None:
        psi_src = psi_src[src_idx]
    pooled = np.vstack([psi_src, psi_tgt])
    labels = np.concatenate([np.ones(psi_src.shape[0]), np.zeros(psi_tgt.shape[0])])
    from .numerics import LOGIT

    coef = glm_fit(pooled, labels, LOGIT)
    ratio_scale = psi_src.shape[0] / psi_tgt.shape[0]

    def omega(psi_rows: np.ndarray) -> np.ndarray:
        p = np.clip(LOGIT.evaluate(psi_rows @ coef), _P_CLIP, 1.0 - _P_CLIP)
        return ratio_scale * (1.0 - p) / p

    return omega, coef


def fit_iw_only(data: TransferDataset, spec: NuisanceSpec,
                weights: np.ndarray | None = None) -> np.ndarray:
    """Importance-weighting-only estimator.

    ``weights`` overrides the density-ratio values on the source rows
    (unit weights reduce this to ``fit_source_glm`` exactly); by default
    they come from the parametric membership model.
    """
    a_src = design_matrix(data.source_x, data.columns, spec.a_columns, constant=True)
    if weights is None:
        omega, _ = parametric_density_ratio(data, spec)
        psi_src = design_matrix(data.source_x, data.columns, spec.psi_columns, constant=True)
        weights = omega(psi_src)
    return glm_fit(a_src, data.source_y, spec.link, weights=weights)


def fit_parametric_dr(data: TransferDataset, spec: NuisanceSpec) -> np.ndarray:
    """Augmented estimating equation with parametric nuisances, no folds."""
    link = spec.link
    cols = data.columns
    a_src = design_matrix(data.source_x, cols, spec.a_columns, constant=True)
    a_tgt = design_matrix(data.target_x, cols, spec.a_columns, constant=True)
    phi_src = design_matrix(data.source_x, cols, spec.phi_columns, constant=True)
    phi_tgt = design_matrix(data.target_x, cols, spec.phi_columns, constant=True)
    psi_src = design_matrix(data.source_x, cols, spec.psi_columns, constant=True)

    omega_fn, _ = parametric_density_ratio(data, spec)
    omega_src = omega_fn(psi_src)
    gamma = glm_fit(phi_src, data.source_y, link)
    m_src = link.evaluate(phi_src @ gamma)
    m_tgt = link.evaluate(phi_tgt @ gamma)
    return solve_preliminary_beta(
        a_src, data.source_y, omega_src, m_src, a_tgt, m_tgt, link,
    )


# --------------------------------------------------------------------- #
# Double machine learning with basis expansions
# --------------------------------------------------------------------- #


class SplineInteractionExpansion:
    """Raw covariates, per-covariate natural splines, and their pairwise
    interaction products, with knots placed on the fitting sample."""

    def __init__(self, df: int = 4):
        self.df = df
        self._bases: list[BasisExpansion] | None = None
        self._p = None

    def fit(self, x: np.ndarray) -> "SplineInteractionExpansion":
        x = np.asarray(x, dtype=float)
        self._p = x.shape[1]
        self._bases = [
            BasisExpansion(BasisSpec("natural_cubic_spline", self.df)).fit(x[:, j])
            for j in range(self._p)
        ]
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        blocks = [x]
        spline_cols = [b.transform(x[:, j]) for j, b in enumerate(self._bases)]
        blocks.extend(spline_cols)
        for j in range(self._p):
            for k in range(j + 1, self._p):
                sj = spline_cols[j]
                sk = spline_cols[k]
                inter = sj[:, :, None] * sk[:, None, :]
                blocks.append(inter.reshape(x.shape[0], -1))
        return np.column_stack(blocks)


def fit_dml_be(data: TransferDataset, spec: NuisanceSpec,
               comp: ComparatorSpec | None = None) -> np.ndarray:
    """Cross-fitted DR estimate with elastic-net nuisances on the expansion.

    Penalties are selected once per dataset per nuisance model by K-fold
    deviance CV on a log-spaced path and reused across the cross-fitting
    folds; the mixing weight is ``comp.penalty_mix``.
    """
    comp = comp or ComparatorSpec(method="dml_be")
    link = spec.link
    cols = data.columns
    from .numerics import LOGIT

    a_src = design_matrix(data.source_x, cols, spec.a_columns, constant=True)
    a_tgt = design_matrix(data.target_x, cols, spec.a_columns, constant=True)
    n, n_tgt = data.n_source, data.n_target

    expansion = SplineInteractionExpansion(comp.expansion_df).fit(
        np.vstack([data.source_x, data.target_x])
    )
    e_src = expansion.transform(data.source_x)
    e_tgt = expansion.transform(data.target_x)

    pooled = np.vstack([e_src, e_tgt])
    s_labels = np.concatenate([np.ones(n), np.zeros(n_tgt)])
    pen_s, _, _ = cv_elastic_net(
        pooled, s_labels, LOGIT, comp.penalty_mix, comp.n_penalties,
        folds=comp.folds, seed=comp.seed,
    )
    pen_y, _, _ = cv_elastic_net(
        e_src, data.source_y, link, comp.penalty_mix, comp.n_penalties,
        folds=comp.folds, seed=comp.seed,
    )

    folds = kfold_partition(n, comp.folds, comp.seed)
    all_idx = np.arange(n)
    omega_hat = np.empty(n)
    m_hat_src = np.empty(n)
    m_hat_tgt_sum = np.zeros(n_tgt)
    for idx_in in folds:
        idx_out = np.setdiff1d(all_idx, idx_in, assume_unique=True)
        pooled_out = np.vstack([e_src[idx_out], e_tgt])
        labels_out = np.concatenate([np.ones(idx_out.size), np.zeros(n_tgt)])
        coef_s = elastic_net_glm(pooled_out, labels_out, LOGIT,
                                 comp.penalty_mix, pen_s, check_kkt=False,
                                 tol=1e-9, max_sweeps=20000)
        coef_y = elastic_net_glm(e_src[idx_out], data.source_y[idx_out], link,
                                 comp.penalty_mix, pen_y, check_kkt=False,
                                 tol=1e-9, max_sweeps=20000)
        design_in = np.column_stack([np.ones(idx_in.size), e_src[idx_in]])
        design_tgt = np.column_stack([np.ones(n_tgt), e_tgt])
        p_in = np.clip(LOGIT.evaluate(design_in @ coef_s), _P_CLIP, 1.0 - _P_CLIP)
        omega_hat[idx_in] = (idx_out.size / n_tgt) * (1.0 - p_in) / p_in
        m_hat_src[idx_in] = link.evaluate(design_in @ coef_y)
        m_hat_tgt_sum += link.evaluate(design_tgt @ coef_y)
    m_hat_tgt = m_hat_tgt_sum / comp.folds

    return solve_preliminary_beta(
        a_src, data.source_y, omega_hat, m_hat_src, a_tgt, m_hat_tgt, link,
        src_scale=1.0 / n,
    )


def comparator_dr_residual(beta, data, spec, omega_src, m_src, m_tgt):
    """Value of the augmented equation at ``beta`` for a comparator fit."""
    a_src = design_matrix(data.source_x, data.columns, spec.a_columns, constant=True)
    a_tgt = design_matrix(data.target_x, data.columns, spec.a_columns, constant=True)
    return dr_equation_value(beta, a_src, data.source_y, omega_src, m_src,
                             a_tgt, m_tgt, spec.link)
