"""Transfer-quality evaluation metrics.

All four metrics compare fitted coefficient vectors through their
predictions on the target rows: discrimination (AUC), relative mean
square prediction error against a validation fit, and agreement of the
mean-thresholded classifiers (correlation and false classification
rate).
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .exceptions import MetricError
from .numerics import LinkFunction


def metric_auc(scores, labels) -> float:
    """Area under the ROC curve, Mann-Whitney form with 0.5 tie credit."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels must have matching length")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise MetricError("labels must be binary")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: labels contain a single class")
    ranks = rankdata(scores)
    u = ranks[labels == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _predictions(beta, target_a, link: LinkFunction) -> np.ndarray:
    target_a = np.asarray(target_a, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if target_a.shape[1] != beta.size:
        raise MetricError("coefficient length does not match the design width")
    return link.evaluate(target_a @ beta)


def metric_rmspe(beta_hat, beta_valid, target_a, link: LinkFunction) -> float:
    """Relative mean square prediction error against the validation fit."""
    p_hat = _predictions(beta_hat, target_a, link)
    p_val = _predictions(beta_valid, target_a, link)
    denom = float(np.mean(p_val ** 2))
    if denom == 0.0:
        raise MetricError("RMSPE undefined: validation predictions are all zero")
    return float(np.mean((p_val - p_hat) ** 2) / denom)


def _indicator(p: np.ndarray) -> np.ndarray:
    return (p >= p.mean()).astype(float)


def metric_cc(beta_hat, beta_valid, target_a, link: LinkFunction) -> float:
    """Pearson correlation of the two mean-thresholded classifiers."""
    ind_hat = _indicator(_predictions(beta_hat, target_a, link))
    ind_val = _indicator(_predictions(beta_valid, target_a, link))
    if ind_hat.std() == 0.0 or ind_val.std() == 0.0:
        raise MetricError("classifier correlation undefined: constant indicator")
    return float(np.corrcoef(ind_hat, ind_val)[0, 1])


def metric_fcr(beta_hat, beta_valid, target_a, link: LinkFunction) -> float:
    """Fraction of target rows where the two classifiers disagree."""
    ind_hat = _indicator(_predictions(beta_hat, target_a, link))
    ind_val = _indicator(_predictions(beta_valid, target_a, link))
    return float(np.mean(ind_hat != ind_val))


def metric_suite(beta_hat, beta_valid, target_a, link: LinkFunction,
                 labels=None) -> dict:
    """All metrics at once; AUC included when validation labels are given."""
    out = {
        "rmspe": metric_rmspe(beta_hat, beta_valid, target_a, link),
        "cc": metric_cc(beta_hat, beta_valid, target_a, link),
        "fcr": metric_fcr(beta_hat, beta_valid, target_a, link),
    }
    if labels is not None:
        out["auc"] = metric_auc(_predictions(beta_hat, target_a, link), labels)
    return out
