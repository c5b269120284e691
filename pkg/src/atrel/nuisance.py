"""Semi-non-parametric nuisance models and their calibration.

The density-ratio model is ``exp(psi' alpha + h(Z))`` and the imputation
model ``g(phi' gamma + r(Z))``.  Preliminary estimates come from ridge
penalised sieve regressions; the nonparametric components are then
re-solved ("calibrated") from locally weighted moment equations so that
their first-order estimation error is orthogonal to the functional space
of Z.  Calibration weights are ``kappa_i = c' Jhat^{-1} A_i``; samples
are partitioned by the sign of kappa so every local equation is
monotone.

All fitting functions operate on prepared design matrices; the
cross-fitting orchestration lives in :mod:`atrel.estimator`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import CalibrationError, ConfigurationError, ConvergenceError
from .numerics import (
    BasisExpansion,
    ClampCounter,
    KernelSpec,
    LinkFunction,
    newton_solve,
    scalar_root,
)

_MASS_FLOOR = 1e-8
_MAX_WIDEN = 5
_R_BRACKET = 36.0
# Largest allowed pointwise disagreement between the calibrated and the
# preliminary log-weight component.  Both estimate the same limit, and
# legitimate finite-sample differences sit far below this bound; larger
# local shifts are kernel-variance noise with unbounded leverage through
# exp(), so they are clamped and counted.
_MAX_H_SHIFT = float(np.log(10.0))


@dataclass
class Diagnostics:
    """Mutable counters accumulated while fitting (never part of the model)."""

    clamped_link_inversions: int = 0
    bandwidth_widenings: int = 0
    empty_group_fallbacks: int = 0
    calibration_clamps: int = 0
    max_calibration_residual: float = 0.0
    bootstrap_failures: int = 0
    bootstrap_attempts: int = 0

    def note_residual(self, value: float) -> None:
        if value > self.max_calibration_residual:
            self.max_calibration_residual = float(value)

    def merge(self, other: "Diagnostics") -> None:
        self.clamped_link_inversions += other.clamped_link_inversions
        self.bandwidth_widenings += other.bandwidth_widenings
        self.empty_group_fallbacks += other.empty_group_fallbacks
        self.calibration_clamps += other.calibration_clamps
        self.max_calibration_residual = max(
            self.max_calibration_residual, other.max_calibration_residual
        )
        self.bootstrap_failures += other.bootstrap_failures
        self.bootstrap_attempts += other.bootstrap_attempts


# --------------------------------------------------------------------- #
# Preliminary (sieve) fits
# --------------------------------------------------------------------- #


def _penalty_mask(dim: int) -> np.ndarray:
    mask = np.ones(dim)
    mask[0] = 0.0  # the leading constant is never penalised
    return mask


def fit_density_ratio_prelim(
    psi_src: np.ndarray,
    psi_tgt: np.ndarray,
    ridge: float = 0.0,
    src_scale: float | None = None,
    tgt_scale: float | None = None,
    theta0: np.ndarray | None = None,
    tol: float = 1e-10,
):
    """Exponential-tilt coefficients of the density-ratio model.

    Solves ``src_scale * sum_src Psi exp(theta'Psi) + ridge * P theta =
    tgt_scale * sum_tgt Psi`` where P zeroes the intercept penalty.  The
    design matrices already contain the parametric columns (constant
    first) with any basis columns appended.

    Returns ``(theta, residual_sup_norm)``.
    """
    psi_src = np.asarray(psi_src, dtype=float)
    psi_tgt = np.asarray(psi_tgt, dtype=float)
    if psi_src.shape[0] == 0:
        raise ConfigurationError("density-ratio fit needs a nonempty source fold")
    if src_scale is None:
        src_scale = 1.0 / psi_src.shape[0]
    if tgt_scale is None:
        tgt_scale = 1.0 / psi_tgt.shape[0]
    target_mean = tgt_scale * psi_tgt.sum(axis=0)
    pen = ridge * _penalty_mask(psi_src.shape[1])

    def residual(theta):
        w = np.exp(psi_src @ theta)
        return src_scale * (psi_src.T @ w) + pen * theta - target_mean

    def jacobian(theta):
        w = np.exp(psi_src @ theta)
        return src_scale * (psi_src.T * w) @ psi_src + np.diag(pen)

    x0 = np.zeros(psi_src.shape[1]) if theta0 is None else np.asarray(theta0, float)
    theta, info = newton_solve(
        residual, jacobian, x0, tol=tol, full_output=True,
        context={"model": "density_ratio"},
    )
    return theta, info["norms"][-1]


def fit_imputation_prelim(
    phi_src: np.ndarray,
    y_src: np.ndarray,
    link: LinkFunction,
    ridge: float = 0.0,
    src_scale: float | None = None,
    theta0: np.ndarray | None = None,
    tol: float = 1e-10,
):
    """Ridge-penalised GLM score fit of the imputation model.

    Solves ``src_scale * sum Phi (y - g(theta'Phi)) - ridge * P theta = 0``
    with the intercept unpenalised.  The penalty enters with the sign
    that shrinks along the likelihood (the gradient condition of
    deviance + ridge), which is the stabilising direction.

    Returns ``(theta, residual_sup_norm)``.
    """
    phi_src = np.asarray(phi_src, dtype=float)
    y = np.asarray(y_src, dtype=float)
    if phi_src.shape[0] == 0:
        raise ConfigurationError("imputation fit needs a nonempty source fold")
    if src_scale is None:
        src_scale = 1.0 / phi_src.shape[0]
    pen = ridge * _penalty_mask(phi_src.shape[1])

    def residual(theta):
        mu = link.evaluate(phi_src @ theta)
        return src_scale * (phi_src.T @ (y - mu)) - pen * theta

    def jacobian(theta):
        d = link.derivative(phi_src @ theta)
        return -src_scale * (phi_src.T * d) @ phi_src - np.diag(pen)

    x0 = np.zeros(phi_src.shape[1]) if theta0 is None else np.asarray(theta0, float)
    theta, info = newton_solve(
        residual, jacobian, x0, tol=tol, full_output=True,
        context={"model": "imputation"},
    )
    return theta, info["norms"][-1]


@dataclass(frozen=True)
class PreliminaryFit:
    """Per-fold preliminary coefficients and evaluable components."""

    theta_w: np.ndarray
    theta_m: np.ndarray
    p_psi: int
    p_phi: int
    link: LinkFunction
    basis_w: BasisExpansion | None = None
    basis_m: BasisExpansion | None = None
    residual_w: float = 0.0
    residual_m: float = 0.0

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.theta_w[: self.p_psi]

    @property
    def eta_hat(self) -> np.ndarray:
        return self.theta_w[self.p_psi:]

    @property
    def gamma_hat(self) -> np.ndarray:
        return self.theta_m[: self.p_phi]

    @property
    def xi_hat(self) -> np.ndarray:
        return self.theta_m[self.p_phi:]

    def h_tilde(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        n = z.shape[0] if z.ndim > 0 else 1
        if self.basis_w is None or self.eta_hat.size == 0:
            return np.zeros(n)
        return self.basis_w.transform(z) @ self.eta_hat

    def r_tilde(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        n = z.shape[0] if z.ndim > 0 else 1
        if self.basis_m is None or self.xi_hat.size == 0:
            return np.zeros(n)
        return self.basis_m.transform(z) @ self.xi_hat

    def omega_tilde(self, psi: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.exp(psi @ self.alpha_hat + self.h_tilde(z))

    def m_tilde(self, phi: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.link.evaluate(phi @ self.gamma_hat + self.r_tilde(z))


# --------------------------------------------------------------------- #
# The augmented estimating equation in beta
# --------------------------------------------------------------------- #


def solve_preliminary_beta(
    a_src: np.ndarray,
    y_src: np.ndarray,
    omega_src: np.ndarray,
    m_src: np.ndarray,
    a_tgt: np.ndarray,
    m_tgt: np.ndarray,
    link: LinkFunction,
    src_scale: float | None = None,
    beta0: np.ndarray | None = None,
    tol: float = 1e-10,
):
    """Solve the augmented equation for beta given nuisance values.

    ``src_scale * sum_src omega A (y - m) + N^{-1} sum_tgt A (m - g(A'beta)) = 0``.
    The source term does not depend on beta, so the Newton iteration only
    touches the target block; its Jacobian is the negative information
    matrix of the target working model.
    """
    a_src = np.asarray(a_src, dtype=float)
    a_tgt = np.asarray(a_tgt, dtype=float)
    if src_scale is None:
        src_scale = 1.0 / max(a_src.shape[0], 1)
    n_tgt = a_tgt.shape[0]
    const = src_scale * (a_src.T @ (np.asarray(omega_src) * (np.asarray(y_src) - np.asarray(m_src))))
    const = const + (a_tgt.T @ np.asarray(m_tgt)) / n_tgt

    def residual(beta):
        return const - (a_tgt.T @ link.evaluate(a_tgt @ beta)) / n_tgt

    def jacobian(beta):
        d = link.derivative(a_tgt @ beta)
        return -(a_tgt.T * d) @ a_tgt / n_tgt

    x0 = np.zeros(a_tgt.shape[1]) if beta0 is None else np.asarray(beta0, dtype=float)
    # the logistic equation can have spurious saturated-plateau roots far
    # from the consistent initial point; cap the per-iteration step
    return newton_solve(residual, jacobian, x0, tol=tol, max_step=1.0,
                        context={"model": "beta"})


def dr_equation_value(
    beta, a_src, y_src, omega_src, m_src, a_tgt, m_tgt, link, src_scale=None
) -> np.ndarray:
    """Value of the augmented estimating equation at ``beta``."""
    a_src = np.asarray(a_src, dtype=float)
    a_tgt = np.asarray(a_tgt, dtype=float)
    if src_scale is None:
        src_scale = 1.0 / max(a_src.shape[0], 1)
    term_src = src_scale * (a_src.T @ (np.asarray(omega_src) * (np.asarray(y_src) - np.asarray(m_src))))
    term_tgt = (a_tgt.T @ (np.asarray(m_tgt) - link.evaluate(a_tgt @ beta))) / a_tgt.shape[0]
    return term_src + term_tgt


def compute_jhat(beta: np.ndarray, a_tgt: np.ndarray, link: LinkFunction) -> np.ndarray:
    """Target-side information matrix ``N^{-1} sum gdot(A'beta) A A'``."""
    a_tgt = np.asarray(a_tgt, dtype=float)
    if a_tgt.shape[0] == 0:
        raise ConfigurationError("compute_jhat needs a nonempty target sample")
    d = link.derivative(a_tgt @ np.asarray(beta, dtype=float))
    jhat = (a_tgt.T * d) @ a_tgt / a_tgt.shape[0]
    return 0.5 * (jhat + jhat.T)  # symmetrise away rounding noise


@dataclass(frozen=True)
class KappaWeights:
    """Influence direction of each row on the linear functional c'beta."""

    c: np.ndarray
    jhat: np.ndarray
    direction: np.ndarray
    values: np.ndarray

    @classmethod
    def build(cls, c: np.ndarray, jhat: np.ndarray, a_rows: np.ndarray) -> "KappaWeights":
        c = np.asarray(c, dtype=float)
        jhat = np.asarray(jhat, dtype=float)
        try:
            direction = np.linalg.solve(jhat, c)
        except np.linalg.LinAlgError:
            raise ConvergenceError(
                "singular information matrix when forming kappa weights",
                context={"model": "kappa"},
            ) from None
        values = np.asarray(a_rows, dtype=float) @ direction
        return cls(c=c, jhat=jhat, direction=direction, values=values)

    def evaluate(self, a_rows: np.ndarray) -> np.ndarray:
        return np.asarray(a_rows, dtype=float) @ self.direction


@dataclass(frozen=True)
class SignPartition:
    """Two-way split of samples by kappa against a stored threshold.

    Threshold 0 is the plain sign split (ties to the nonnegative group).
    When requested and all build values share one sign, the threshold is
    their median instead, splitting the single group to reduce weight
    variation.
    """

    threshold: float
    median_split: bool

    def assign(self, kappa_values: np.ndarray) -> np.ndarray:
        """True marks the upper (kappa >= threshold) group."""
        return np.asarray(kappa_values, dtype=float) >= self.threshold


def _median_cut(values: np.ndarray) -> float | None:
    """Balanced cut strictly between two distinct order statistics.

    Using a midpoint between distinct adjacent values (rather than the
    raw median, which may equal attained values when rows repeat) keeps
    the split exactly mirror-symmetric under negating every value.
    Returns None when all values coincide.
    """
    s = np.sort(values)
    n = s.size
    distinct = np.nonzero(np.diff(s) > 0)[0]  # cut between s[j] and s[j+1]
    if distinct.size == 0:
        return None
    # a cut after position j leaves j+1 below and n-j-1 above; the
    # imbalance |2j + 2 - n| is invariant under negating all values, and
    # ties between equally balanced cuts are broken by the smaller
    # threshold magnitude (also negation-invariant)
    imbalance = np.abs(2 * distinct + 2 - n)
    cands = distinct[imbalance == imbalance.min()]
    thresholds = 0.5 * (s[cands] + s[cands + 1])
    return float(thresholds[np.argmin(np.abs(thresholds))])


def sign_partition(kappa_values: np.ndarray, median_split_intercept: bool = False) -> SignPartition:
    values = np.asarray(kappa_values, dtype=float)
    if values.size == 0:
        raise ConfigurationError("sign_partition needs at least one kappa value")
    same_sign = np.all(values >= 0.0) or np.all(values < 0.0)
    if median_split_intercept and same_sign:
        cut = _median_cut(values)
        if cut is not None:
            return SignPartition(threshold=cut, median_split=True)
    return SignPartition(threshold=0.0, median_split=False)


# --------------------------------------------------------------------- #
# Kernel-localised calibration
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class KernelGroupData:
    """Immutable per-group inputs for the local calibration equations.

    Source rows (one sign group of the training fold complement) carry
    ``r_weights = kappa * omega_tilde`` for the imputation equation and
    ``h_weights = kappa * gbreve(m_tilde) * exp(psi' alpha_hat)`` for the
    weight equation; target rows carry ``kappa * gbreve(m_tilde)``.
    """

    z_src: np.ndarray
    r_weights: np.ndarray
    y_src: np.ndarray
    offsets: np.ndarray          # phi' gamma_hat on source rows
    h_weights_src: np.ndarray
    z_tgt: np.ndarray
    h_weights_tgt: np.ndarray

    @property
    def n_src(self) -> int:
        return self.z_src.shape[0]

    @property
    def n_tgt(self) -> int:
        return self.z_tgt.shape[0]


def _widened_row(kernel: KernelSpec, z0: np.ndarray, z_data: np.ndarray,
                 need_mass: float = _MASS_FLOOR):
    """Kernel row for one point, doubling the bandwidth while mass is degenerate.

    Returns ``(weights, n_widenings)``; raises CalibrationError after
    the widening budget is exhausted.
    """
    for t in range(_MAX_WIDEN + 1):
        k = kernel if t == 0 else kernel.scaled(2.0 ** t)
        w = k.weights(z0.reshape(1, -1), z_data)[0]
        if w.sum() >= need_mass:
            return w, t
    raise CalibrationError(
        "degenerate kernel neighbourhood (no local mass after widening)",
        point=tuple(np.atleast_1d(z0)),
    )


def calibrate_h_at(
    z0,
    kernel: KernelSpec,
    group: KernelGroupData,
    src_norm: float,
    tgt_norm: float,
    diagnostics: Diagnostics | None = None,
) -> float:
    """Closed-form solution of the local weight-model calibration equation.

    The unknown enters as ``exp(h(z))`` multiplying the source side, so
    ``h(z) = log[tgt_norm * sum_tgt K kappa gbreve(m) /
    (src_norm * sum_src K kappa gbreve(m) exp(psi'alpha))]``.
    """
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if group.n_src == 0 or group.n_tgt == 0:
        raise CalibrationError("empty sign group in weight calibration", point=tuple(z0))
    k_src, w1 = _widened_row(kernel, z0, group.z_src)
    k_tgt, w2 = _widened_row(kernel, z0, group.z_tgt)
    if diagnostics is not None and (w1 or w2):
        diagnostics.bandwidth_widenings += w1 + w2
    den = src_norm * float(k_src @ group.h_weights_src)
    num = tgt_norm * float(k_tgt @ group.h_weights_tgt)
    ratio = num / den if den != 0.0 else np.inf
    if not np.isfinite(ratio) or ratio <= 0.0:
        raise CalibrationError(
            "nonpositive ratio in weight calibration", point=tuple(z0),
        )
    h = float(np.log(ratio))
    if diagnostics is not None:
        diagnostics.note_residual(abs(den * np.exp(h) - num))
    return h


def calibrate_r_at(
    z0,
    kernel: KernelSpec,
    group: KernelGroupData,
    link: LinkFunction,
    tol: float = 1e-11,
    diagnostics: Diagnostics | None = None,
) -> float:
    """Solve the local imputation calibration equation at one point.

    With single-signed weights the moment is strictly monotone in r; the
    identity link admits a closed form (a weighted mean), the logistic
    link is solved by a safeguarded scalar root.
    """
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if group.n_src == 0:
        raise CalibrationError("empty sign group in imputation calibration", point=tuple(z0))

    # Degenerate neighbourhoods -- no local mass, or no local response
    # variation so that the moment cannot change sign -- are widened
    # before giving up.
    w = None
    for t in range(_MAX_WIDEN + 1):
        k = kernel if t == 0 else kernel.scaled(2.0 ** t)
        k_row = k.weights(z0.reshape(1, -1), group.z_src)[0]
        if k_row.sum() < _MASS_FLOOR:
            continue
        cand = k_row * group.r_weights
        total = cand.sum()
        sign = 1.0 if total >= 0 else -1.0
        cand = sign * cand
        if not link.is_identity:
            swy = float(cand @ group.y_src)
            if not (0.0 < swy < float(cand.sum())):
                continue
        w = cand
        if diagnostics is not None and t:
            diagnostics.bandwidth_widenings += t
        break
    if w is None:
        raise CalibrationError(
            "imputation calibration is ill-posed at this point "
            "(no local mass or one-sided responses after widening)",
            point=tuple(z0),
        )

    if link.is_identity:
        r = float(w @ (group.y_src - group.offsets) / w.sum())
        if diagnostics is not None:
            diagnostics.note_residual(0.0)
        return r

    def moment(r):
        return float(w @ (group.y_src - link.evaluate(group.offsets + r)))

    f_lo = moment(-_R_BRACKET)
    f_hi = moment(_R_BRACKET)
    if not (f_lo > 0.0 > f_hi):
        raise CalibrationError(
            "imputation calibration has no root (responses on one side of the link range)",
            point=tuple(z0),
        )
    r = scalar_root(moment, -_R_BRACKET, _R_BRACKET, tol=tol)
    if diagnostics is not None:
        diagnostics.note_residual(abs(moment(r)))
    return float(r)


def _calibrate_h_many(
    z_pts: np.ndarray,
    kernel: KernelSpec,
    group: KernelGroupData,
    src_norm: float,
    tgt_norm: float,
    diagnostics: Diagnostics | None = None,
    k_src: np.ndarray | None = None,
    k_tgt: np.ndarray | None = None,
    reference: np.ndarray | None = None,
) -> np.ndarray:
    """Vectorised closed-form h calibration over many points.

    When ``reference`` (the preliminary component at the same points) is
    supplied, solutions further than the shift bound from it are clamped
    and counted: exp() gives such points unbounded leverage and the two
    components estimate the same limit.
    """
    if z_pts.shape[0] == 0:
        return np.zeros(0)
    if group.n_src == 0 or group.n_tgt == 0:
        raise CalibrationError("empty sign group in weight calibration")
    if k_src is None:
        k_src = kernel.weights(z_pts, group.z_src)
    if k_tgt is None:
        k_tgt = kernel.weights(z_pts, group.z_tgt)
    mass_src = k_src.sum(axis=1)
    mass_tgt = k_tgt.sum(axis=1)
    den = src_norm * (k_src @ group.h_weights_src)
    num = tgt_norm * (k_tgt @ group.h_weights_tgt)
    out = np.empty(z_pts.shape[0])
    ok = (mass_src >= _MASS_FLOOR) & (mass_tgt >= _MASS_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den != 0.0, num / den, np.inf)
    good = ok & np.isfinite(ratio) & (ratio > 0.0)
    out[good] = np.log(ratio[good])
    if diagnostics is not None and np.any(good):
        diagnostics.note_residual(
            float(np.max(np.abs(den[good] * np.exp(out[good]) - num[good])))
        )
    for j in np.where(~good)[0]:
        out[j] = calibrate_h_at(z_pts[j], kernel, group, src_norm, tgt_norm, diagnostics)
    if reference is not None:
        lo = reference - _MAX_H_SHIFT
        hi = reference + _MAX_H_SHIFT
        clipped = np.clip(out, lo, hi)
        n_clamped = int(np.count_nonzero(clipped != out))
        if n_clamped and diagnostics is not None:
            diagnostics.calibration_clamps += n_clamped
        out = clipped
    return out


def _calibrate_r_many(
    z_pts: np.ndarray,
    kernel: KernelSpec,
    group: KernelGroupData,
    link: LinkFunction,
    r_init: np.ndarray | None = None,
    tol: float = 1e-11,
    max_iter: int = 80,
    diagnostics: Diagnostics | None = None,
    k_mat: np.ndarray | None = None,
) -> np.ndarray:
    """Monotone solve of the local imputation equations over many points.

    The logistic case runs a bracketed per-point Newton in compiled
    code; the identity link is a closed-form weighted mean.  Points with
    degenerate kernel mass are re-solved individually with bandwidth
    widening.
    """
    m = z_pts.shape[0]
    if m == 0:
        return np.zeros(0)
    if group.n_src == 0:
        raise CalibrationError("empty sign group in imputation calibration")
    if k_mat is None:
        k_mat = kernel.weights(z_pts, group.z_src)
    mass = k_mat.sum(axis=1)
    deficient = np.where(mass < _MASS_FLOOR)[0]
    w_mat = k_mat * group.r_weights
    row_sign = np.where(w_mat.sum(axis=1) >= 0.0, 1.0, -1.0)
    w_mat = np.ascontiguousarray(w_mat * row_sign[:, None])

    if link.is_identity:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (w_mat @ (group.y_src - group.offsets)) / w_mat.sum(axis=1)
        if diagnostics is not None:
            diagnostics.note_residual(0.0)
    else:
        if r_init is not None:
            r0 = np.clip(np.asarray(r_init, dtype=float), -_R_BRACKET + 1.0,
                         _R_BRACKET - 1.0)
        else:
            r0 = np.zeros(m)
        from ._fastsolve import newton_r_logit

        out, status, abs_f = newton_r_logit(
            w_mat,
            np.ascontiguousarray(np.exp(group.offsets)),
            np.ascontiguousarray(group.y_src),
            np.ascontiguousarray(r0), tol, max_iter, _R_BRACKET,
        )
        handled = np.zeros(m, dtype=bool)
        handled[deficient] = True
        # locally one-sided responses: retry per point with widening
        no_root = np.where((status == 1) & ~handled)[0]
        if no_root.size:
            handled[no_root] = True
            deficient = np.concatenate([deficient, no_root])
        stuck = (status == 2) & ~handled
        if np.any(stuck):
            j = int(np.argmax(stuck))
            raise ConvergenceError(
                "local imputation calibration did not converge",
                last_iterate=out[j], residual_norm=float(abs_f[j]),
                context={"model": "calibrate_r"},
            )
        if diagnostics is not None:
            ok = status == 0
            if np.any(ok):
                diagnostics.note_residual(float(abs_f[ok].max()))
    for j in deficient:
        out[j] = calibrate_r_at(z_pts[j], kernel, group, link, tol, diagnostics)
    return out


# --------------------------------------------------------------------- #
# Sieve calibration backend
# --------------------------------------------------------------------- #


def calibrate_sieve(
    b_src: np.ndarray,
    y_src: np.ndarray,
    offsets: np.ndarray,
    r_weights: np.ndarray,
    h_weights_src: np.ndarray,
    b_tgt: np.ndarray,
    h_weights_tgt: np.ndarray,
    link: LinkFunction,
    src_norm: float,
    tgt_norm: float,
    ridge_jitter: float = 0.0,
    tol: float = 1e-7,
):
    """Basis-projected calibration of both nonparametric components.

    Solves the kappa-weighted moment systems over the basis ``b(Z)``:
    the imputation system for ``xi`` and the exponential-tilt system for
    ``eta``; then ``r(z) = b(z)'xi`` and ``h(z) = b(z)'eta``.  The group
    sign is normalised away and each system is solved as the gradient of
    its convex objective; a separated system falls back to a small ridge
    jitter.  Returns ``(xi, eta, res_xi, res_eta)``.
    """
    b_src = np.asarray(b_src, dtype=float)
    b_tgt = np.asarray(b_tgt, dtype=float)
    # Solve in an orthonormalised (and rank-truncated) basis: the fitted
    # functions are representation-invariant and the moment systems are
    # badly conditioned in raw spline bases.
    u, s, vt = np.linalg.svd(b_src, full_matrices=False)
    keep = s > (1e-12 * s[0] if s.size else 0.0)
    if not np.any(keep):
        zero = np.zeros(b_src.shape[1])
        return zero, zero.copy(), 0.0, 0.0
    transform = vt[keep].T / s[keep]
    b_src = b_src @ transform
    b_tgt = b_tgt @ transform
    q = b_src.shape[1]

    grp_sign = 1.0 if float(np.sum(r_weights)) >= 0.0 else -1.0
    rw = grp_sign * np.asarray(r_weights, dtype=float)
    hw_src = grp_sign * np.asarray(h_weights_src, dtype=float)
    hw_tgt = grp_sign * np.asarray(h_weights_tgt, dtype=float)
    tgt_side = tgt_norm * (b_tgt.T @ hw_tgt)

    def res_xi(xi, jit=0.0):
        mu = link.evaluate(offsets + b_src @ xi)
        return src_norm * (b_src.T @ (rw * (y_src - mu))) - jit * xi

    def jac_xi(xi, jit=0.0):
        d = link.derivative(offsets + b_src @ xi)
        return -src_norm * (b_src.T * (rw * d)) @ b_src - jit * np.eye(q)

    def merit_xi(xi, jit=0.0):
        eta_lin = offsets + b_src @ xi
        if link.is_identity:
            dev = 0.5 * eta_lin ** 2 - y_src * eta_lin
        else:
            dev = np.logaddexp(0.0, eta_lin) - y_src * eta_lin
        return src_norm * float(rw @ dev) + 0.5 * jit * float(xi @ xi)

    def res_eta(eta, jit=0.0):
        with np.errstate(over="ignore", invalid="ignore"):
            w = hw_src * np.exp(b_src @ eta)
            return src_norm * (b_src.T @ w) - tgt_side + jit * eta

    def jac_eta(eta, jit=0.0):
        with np.errstate(over="ignore", invalid="ignore"):
            w = hw_src * np.exp(b_src @ eta)
            return src_norm * (b_src.T * w) @ b_src + jit * np.eye(q)

    def merit_eta(eta, jit=0.0):
        with np.errstate(over="ignore", invalid="ignore"):
            return (src_norm * float(hw_src @ np.exp(b_src @ eta))
                    - float(tgt_side @ eta) + 0.5 * jit * float(eta @ eta))

    def solve(res, jac, merit, label):
        jits = [ridge_jitter] if ridge_jitter else [0.0, 1e-6]
        last = None
        for jit in jits:
            try:
                return newton_solve(
                    lambda x: res(x, jit), lambda x: jac(x, jit),
                    np.zeros(q), tol=tol, max_iter=300,
                    merit=lambda x: merit(x, jit), context={"model": label},
                )
            except ConvergenceError as err:
                last = err
        raise last

    xi = solve(res_xi, jac_xi, merit_xi, "sieve_xi")
    eta = solve(res_eta, jac_eta, merit_eta, "sieve_eta")
    res_x = float(np.max(np.abs(res_xi(xi))))
    res_e = float(np.max(np.abs(res_eta(eta))))
    return transform @ xi, transform @ eta, res_x, res_e


# --------------------------------------------------------------------- #
# Calibrated nuisance container
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class GroupCalibration:
    """Calibration artefacts for one sign group."""

    kernel_data: KernelGroupData | None = None
    sieve_xi: np.ndarray | None = None
    sieve_eta: np.ndarray | None = None
    sieve_basis: BasisExpansion | None = None
    h_table: dict = field(default_factory=dict)
    r_table: dict = field(default_factory=dict)

    @property
    def usable(self) -> bool:
        if self.sieve_xi is not None:
            return True
        return (
            self.kernel_data is not None
            and self.kernel_data.n_src > 0
            and self.kernel_data.n_tgt > 0
        )


@dataclass(frozen=True)
class CalibratedNuisance:
    """Evaluable calibrated nuisance pair for one (fold, loading).

    ``omega(x) = exp(psi'alpha_hat + h(Z))`` and
    ``m(x) = g(phi'gamma_hat + r(Z))`` with h, r looked up from the
    stored tables at known points; unseen points are re-solved (kernel
    backend, reusing the stored fold equation) or evaluated through the
    basis (sieve backend).  Rows are routed to sign groups by
    ``kappa = c' Jhat^{-1} A`` against the stored partition threshold.
    """

    link: LinkFunction
    alpha_hat: np.ndarray
    gamma_hat: np.ndarray
    kappa: KappaWeights
    partition: SignPartition
    backend: str
    kernel: KernelSpec | None
    src_norm: float
    tgt_norm: float
    groups: tuple[GroupCalibration, GroupCalibration]  # (upper, lower)

    def _component_values(self, which: str, z_rows: np.ndarray, upper_mask: np.ndarray,
                          diagnostics: Diagnostics | None = None) -> np.ndarray:
        out = np.empty(z_rows.shape[0])
        for flag in (True, False):
            sel = np.where(upper_mask == flag)[0]
            if sel.size == 0:
                continue
            gidx = 0 if flag else 1
            group = self.groups[gidx]
            if not group.usable:
                group = self.groups[1 - gidx]
                if diagnostics is not None:
                    diagnostics.empty_group_fallbacks += sel.size
                if not group.usable:
                    raise CalibrationError("no usable sign group in calibrated nuisance")
            out[sel] = self._group_component(which, group, z_rows[sel], diagnostics)
        return out

    def _group_component(self, which, group: GroupCalibration, z_rows, diagnostics):
        if self.backend == "sieve":
            b = group.sieve_basis.transform(z_rows)
            coef = group.sieve_xi if which == "r" else group.sieve_eta
            return b @ coef
        table = group.r_table if which == "r" else group.h_table
        vals = np.empty(z_rows.shape[0])
        for i, z in enumerate(z_rows):
            key = tuple(z)
            if key in table:
                vals[i] = table[key]
            elif which == "r":
                vals[i] = calibrate_r_at(
                    z, self.kernel, group.kernel_data, self.link, diagnostics=diagnostics
                )
            else:
                vals[i] = calibrate_h_at(
                    z, self.kernel, group.kernel_data, self.src_norm, self.tgt_norm,
                    diagnostics=diagnostics,
                )
        return vals

    def h_values(self, a_rows, z_rows, diagnostics=None) -> np.ndarray:
        upper = self.partition.assign(self.kappa.evaluate(a_rows))
        return self._component_values("h", np.asarray(z_rows, float), upper, diagnostics)

    def r_values(self, a_rows, z_rows, diagnostics=None) -> np.ndarray:
        upper = self.partition.assign(self.kappa.evaluate(a_rows))
        return self._component_values("r", np.asarray(z_rows, float), upper, diagnostics)


def evaluate_nuisance(
    fit: CalibratedNuisance,
    a_rows: np.ndarray,
    psi_rows: np.ndarray,
    phi_rows: np.ndarray,
    z_rows: np.ndarray,
    diagnostics: Diagnostics | None = None,
):
    """Evaluate ``(omega_hat, m_hat)`` for rows given their designs."""
    z_rows = np.asarray(z_rows, dtype=float)
    if z_rows.ndim == 1:
        z_rows = z_rows.reshape(-1, 1)
    upper = fit.partition.assign(fit.kappa.evaluate(a_rows))
    h = fit._component_values("h", z_rows, upper, diagnostics)
    r = fit._component_values("r", z_rows, upper, diagnostics)
    omega = np.exp(np.asarray(psi_rows) @ fit.alpha_hat + h)
    m = fit.link.evaluate(np.asarray(phi_rows) @ fit.gamma_hat + r)
    return omega, m
