"""Cross-fitted doubly robust transfer regression with bootstrap intervals.

``fit_atrel`` runs the full pipeline for each requested loading vector:
per-fold preliminary sieve fits, a preliminary beta, kappa weights and a
sign partition at that beta, locally calibrated nonparametric nuisance
components, and finally the cross-fitted augmented estimating equation.
``bootstrap_ci`` wraps it in stratified nonparametric resampling of the
two populations with percentile intervals.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import _rng
from .exceptions import (
    AtrelError,
    CalibrationError,
    ConfigurationError,
    ConvergenceError,
    InferenceError,
    NoRootError,
)
from .model import NuisanceSpec, TransferDataset, design_matrix
from .numerics import BasisExpansion, BasisSpec, KernelSpec, LinkFunction
from .nuisance import (
    CalibratedNuisance,
    Diagnostics,
    GroupCalibration,
    KappaWeights,
    KernelGroupData,
    PreliminaryFit,
    SignPartition,
    _calibrate_h_many,
    _calibrate_r_many,
    calibrate_sieve,
    compute_jhat,
    dr_equation_value,
    fit_density_ratio_prelim,
    fit_imputation_prelim,
    sign_partition,
    solve_preliminary_beta,
)

_EXACT_POINT_LIMIT = 4000   # above this, solve on a quantile grid (1-d Z only)
_GRID_POINTS = 200
_MIN_GROUP_SUPPORT = 5      # smallest per-side sign-group size calibrated directly
_RIDGE_SCALE_GRID = tuple(np.geomspace(1e-2, 10.0, 7))
_BANDWIDTH_SCALE_GRID = (0.3, 0.5, 0.75, 1.0, 1.5, 2.5)
_TUNING_FOLDS = 5


def effective_threads(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("ATREL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as err:
            raise ConfigurationError(f"ATREL_THREADS must be an integer, got {env!r}") from err
    return max(1, os.cpu_count() or 1)


def _parallel_map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=min(threads, len(items)), backend="loky")(
        delayed(fn)(it) for it in items
    )


def kfold_partition(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Disjoint index sets covering range(n), sizes differing by at most 1."""
    if k < 2:
        raise ConfigurationError("fold count must be at least 2")
    if n < k:
        raise ConfigurationError(f"cannot split {n} rows into {k} folds")
    perm = _rng.child_rng(seed, _rng.FOLDS).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


@dataclass(frozen=True)
class AtrelConfig:
    """Run configuration for the cross-fitted estimator."""

    folds: int = 5
    loadings: tuple | None = None          # default: coordinate basis vectors
    bootstrap_reps: int = 200
    confidence_level: float = 0.95
    seed: int = 0
    backend: str | None = None             # overrides spec.calibration_backend
    median_split_intercept: bool = True
    solver_tol: float = 1e-9
    threads: int | None = None

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigurationError("folds must be >= 2")
        if not (0.0 < self.confidence_level < 1.0):
            raise ConfigurationError("confidence_level must lie in (0, 1)")
        if self.bootstrap_reps < 0:
            raise ConfigurationError("bootstrap_reps must be nonnegative")
        if self.loadings is not None:
            normed = []
            for c in self.loadings:
                arr = np.asarray(c, dtype=float)
                nrm = np.linalg.norm(arr)
                if nrm == 0 or not np.isfinite(nrm):
                    raise ConfigurationError("loadings must be nonzero finite vectors")
                normed.append(tuple(arr / nrm))
            object.__setattr__(self, "loadings", tuple(normed))

    def resolved_loadings(self, d: int) -> tuple[np.ndarray, ...]:
        if self.loadings is None:
            return tuple(np.eye(d)[j] for j in range(d))
        out = []
        for c in self.loadings:
            arr = np.asarray(c, dtype=float)
            if arr.shape != (d,):
                raise ConfigurationError(
                    f"loading of length {arr.size} does not match d={d}"
                )
            out.append(arr)
        return tuple(out)


@dataclass(frozen=True)
class Tunings:
    """Resolved hyperparameters (recorded for reproducibility)."""

    ridge_weight: float
    ridge_imputation: float
    bandwidth: tuple[float, ...]
    ridge_weight_scale: float | None = None
    ridge_imputation_scale: float | None = None
    bandwidth_scale: float | None = None

    def as_dict(self) -> dict:
        return {
            "ridge_weight": self.ridge_weight,
            "ridge_imputation": self.ridge_imputation,
            "bandwidth": list(self.bandwidth),
            "ridge_weight_scale": self.ridge_weight_scale,
            "ridge_imputation_scale": self.ridge_imputation_scale,
            "bandwidth_scale": self.bandwidth_scale,
        }


@dataclass(frozen=True)
class LoadingFoldArtifacts:
    """Cross-fitted nuisance values retained for diagnostics (one fold)."""

    fold: int
    calibrated: CalibratedNuisance
    idx_in: np.ndarray
    omega_hat_in: np.ndarray
    m_hat_in: np.ndarray
    h_hat_in: np.ndarray
    r_hat_in: np.ndarray
    h_tilde_in: np.ndarray
    r_tilde_in: np.ndarray
    omega_tilde_in: np.ndarray
    m_tilde_in: np.ndarray
    kappa_in: np.ndarray
    kappa_tgt: np.ndarray
    gbreve_m_tilde_in: np.ndarray
    gbreve_m_tilde_tgt: np.ndarray
    r_hat_tgt: np.ndarray
    r_tilde_tgt: np.ndarray
    m_hat_tgt: np.ndarray


@dataclass(frozen=True)
class LoadingEstimate:
    loading: np.ndarray
    beta: np.ndarray
    value: float                      # c' beta_hat
    residual_norm: float
    interval: tuple[float, float] | None = None
    interval_flagged: bool = False
    fold_artifacts: tuple[LoadingFoldArtifacts, ...] | None = None


@dataclass(frozen=True)
class AtrelEstimate:
    """Fit result: one entry per loading plus shared diagnostics."""

    loadings: tuple[LoadingEstimate, ...]
    tunings: Tunings
    diagnostics: Diagnostics
    fold_summaries: tuple[dict, ...]
    seed: int
    n_source: int
    n_target: int
    bootstrap_reps_used: int = 0
    bootstrap_failures: int = 0

    def loading_values(self) -> np.ndarray:
        return np.array([le.value for le in self.loadings])


# --------------------------------------------------------------------- #
# Design resolution
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class _Arrays:
    a_src: np.ndarray
    a_tgt: np.ndarray
    psi_src: np.ndarray
    psi_tgt: np.ndarray
    phi_src: np.ndarray
    phi_tgt: np.ndarray
    z_src: np.ndarray
    z_tgt: np.ndarray
    y_src: np.ndarray

    @property
    def n(self) -> int:
        return self.a_src.shape[0]

    @property
    def n_tgt(self) -> int:
        return self.a_tgt.shape[0]

    def resample(self, idx_src: np.ndarray, idx_tgt: np.ndarray) -> "_Arrays":
        return _Arrays(
            a_src=self.a_src[idx_src], a_tgt=self.a_tgt[idx_tgt],
            psi_src=self.psi_src[idx_src], psi_tgt=self.psi_tgt[idx_tgt],
            phi_src=self.phi_src[idx_src], phi_tgt=self.phi_tgt[idx_tgt],
            z_src=self.z_src[idx_src], z_tgt=self.z_tgt[idx_tgt],
            y_src=self.y_src[idx_src],
        )


def _resolve_arrays(data: TransferDataset, spec: NuisanceSpec) -> _Arrays:
    cols = data.columns
    return _Arrays(
        a_src=design_matrix(data.source_x, cols, spec.a_columns, constant=True),
        a_tgt=design_matrix(data.target_x, cols, spec.a_columns, constant=True),
        psi_src=design_matrix(data.source_x, cols, spec.psi_columns, constant=True),
        psi_tgt=design_matrix(data.target_x, cols, spec.psi_columns, constant=True),
        phi_src=design_matrix(data.source_x, cols, spec.phi_columns, constant=True),
        phi_tgt=design_matrix(data.target_x, cols, spec.phi_columns, constant=True),
        z_src=design_matrix(data.source_x, cols, spec.z_columns, constant=False),
        z_tgt=design_matrix(data.target_x, cols, spec.z_columns, constant=False),
        y_src=data.source_y.copy(),
    )


def _basis_dfs(spec: NuisanceSpec, n: int, n_tgt: int) -> tuple[int, int]:
    """Sieve sizes; an explicit 0 disables the basis (parametric-only fit)."""
    df_w = spec.weight_basis_df
    if df_w is None:
        df_w = math.ceil((n + n_tgt) ** 0.25)
    df_m = spec.imputation_basis_df
    if df_m is None:
        df_m = math.ceil(n ** 0.25)
    return int(df_w), int(df_m)


# --------------------------------------------------------------------- #
# Per-fold preliminary fitting
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class _FoldFit:
    fold: int
    idx_in: np.ndarray
    idx_out: np.ndarray
    prelim: PreliminaryFit
    omega_tilde_out: np.ndarray
    m_tilde_out: np.ndarray
    gbreve_out: np.ndarray
    exp_psi_alpha_out: np.ndarray
    m_tilde_tgt: np.ndarray
    gbreve_tgt: np.ndarray
    offsets_out: np.ndarray      # phi' gamma_hat on I_{-k}
    beta_tilde: np.ndarray
    jhat: np.ndarray
    src_norm: float


def _fit_fold(arrays: _Arrays, spec: NuisanceSpec, tunings: Tunings,
              fold: int, idx_in: np.ndarray, idx_out: np.ndarray,
              tol: float) -> _FoldFit:
    link = spec.link
    df_w, df_m = _basis_dfs(spec, arrays.n, arrays.n_tgt)
    z_out = arrays.z_src[idx_out]

    basis_w = basis_m = None
    if df_w > 0:
        basis_w = BasisExpansion(BasisSpec(spec.basis_family, df_w)).fit(
            np.vstack([z_out, arrays.z_tgt])
        )
    if df_m > 0:
        basis_m = BasisExpansion(BasisSpec(spec.basis_family, df_m)).fit(z_out)

    psi_out_full = arrays.psi_src[idx_out]
    psi_tgt_full = arrays.psi_tgt
    if basis_w is not None:
        psi_out_full = np.column_stack([psi_out_full, basis_w.transform(z_out)])
        psi_tgt_full = np.column_stack([psi_tgt_full, basis_w.transform(arrays.z_tgt)])
    theta_w, res_w = fit_density_ratio_prelim(
        psi_out_full, psi_tgt_full, ridge=tunings.ridge_weight, tol=tol,
    )

    phi_out_full = arrays.phi_src[idx_out]
    if basis_m is not None:
        phi_out_full = np.column_stack([phi_out_full, basis_m.transform(z_out)])
    theta_m, res_m = fit_imputation_prelim(
        phi_out_full, arrays.y_src[idx_out], link,
        ridge=tunings.ridge_imputation, tol=tol,
    )

    prelim = PreliminaryFit(
        theta_w=theta_w, theta_m=theta_m,
        p_psi=arrays.psi_src.shape[1], p_phi=arrays.phi_src.shape[1],
        link=link, basis_w=basis_w, basis_m=basis_m,
        residual_w=res_w, residual_m=res_m,
    )

    omega_out = prelim.omega_tilde(arrays.psi_src[idx_out], z_out)
    m_out = prelim.m_tilde(arrays.phi_src[idx_out], z_out)
    m_tgt = prelim.m_tilde(arrays.phi_tgt, arrays.z_tgt)
    src_norm = 1.0 / idx_out.size

    beta_tilde = solve_preliminary_beta(
        arrays.a_src[idx_out], arrays.y_src[idx_out], omega_out, m_out,
        arrays.a_tgt, m_tgt, link, src_scale=src_norm, tol=tol,
    )
    jhat = compute_jhat(beta_tilde, arrays.a_tgt, link)

    return _FoldFit(
        fold=fold, idx_in=idx_in, idx_out=idx_out, prelim=prelim,
        omega_tilde_out=omega_out, m_tilde_out=m_out,
        gbreve_out=link.breve(m_out) if not link.is_identity else np.ones_like(m_out),
        exp_psi_alpha_out=np.exp(arrays.psi_src[idx_out] @ prelim.alpha_hat),
        m_tilde_tgt=m_tgt,
        gbreve_tgt=link.breve(m_tgt) if not link.is_identity else np.ones_like(m_tgt),
        offsets_out=arrays.phi_src[idx_out] @ prelim.gamma_hat,
        beta_tilde=beta_tilde, jhat=jhat, src_norm=src_norm,
    )


# --------------------------------------------------------------------- #
# Per (fold, loading) calibration
# --------------------------------------------------------------------- #


def _clamp_h(values: np.ndarray, reference: np.ndarray,
             diagnostics: Diagnostics) -> np.ndarray:
    """Bounded-increment guard shared by both calibration backends."""
    from .nuisance import _MAX_H_SHIFT

    clipped = np.clip(values, reference - _MAX_H_SHIFT, reference + _MAX_H_SHIFT)
    n_clamped = int(np.count_nonzero(clipped != values))
    if n_clamped:
        diagnostics.calibration_clamps += n_clamped
    return clipped


def _solve_component(z_pts: np.ndarray, ready_solver, fresh_solver) -> np.ndarray:
    """Exact solve at every point, or a 200-point quantile grid above the
    exact-point limit (one-dimensional Z only)."""
    if z_pts.shape[0] <= _EXACT_POINT_LIMIT or z_pts.shape[1] != 1:
        return ready_solver()
    grid = np.unique(np.quantile(z_pts[:, 0], np.linspace(0.0, 1.0, _GRID_POINTS)))
    vals = fresh_solver(grid.reshape(-1, 1))
    return np.interp(z_pts[:, 0], grid, vals)


def _fold_kernel_matrices(arrays: _Arrays, fold_fit: _FoldFit, kernel: KernelSpec) -> dict:
    """Kernel weight matrices shared by every loading within one fold.

    ``r_src`` maps all evaluation points (held-out fold rows, then target
    rows) against the training-complement source rows; ``h_tgt`` maps the
    held-out fold rows against the target rows.
    """
    z_in = arrays.z_src[fold_fit.idx_in]
    z_out = arrays.z_src[fold_fit.idx_out]
    z_all = np.vstack([z_in, arrays.z_tgt])
    return {
        "z_in": z_in,
        "z_all": z_all,
        "r_src": kernel.weights(z_all, z_out),
        "h_tgt": kernel.weights(z_in, arrays.z_tgt),
    }


def _calibrate_fold_loading(
    arrays: _Arrays,
    spec: NuisanceSpec,
    tunings: Tunings,
    config: AtrelConfig,
    fold_fit: _FoldFit,
    loading: np.ndarray,
    diagnostics: Diagnostics,
    keep_tables: bool,
    kmats: dict,
):
    """Calibrated h on the held-out fold and r on fold + target rows."""
    link = spec.link
    idx_in = fold_fit.idx_in
    idx_out = fold_fit.idx_out
    backend = config.backend or spec.calibration_backend

    kappa = KappaWeights.build(loading, fold_fit.jhat,
                               np.vstack([arrays.a_src[idx_out], arrays.a_tgt]))
    k_out = kappa.values[: idx_out.size]
    k_tgt = kappa.values[idx_out.size:]
    partition = sign_partition(
        kappa.values, median_split_intercept=config.median_split_intercept
    )
    upper_out = partition.assign(k_out)
    upper_tgt = partition.assign(k_tgt)

    kernel = KernelSpec(tunings.bandwidth)
    tgt_norm = 1.0 / arrays.n_tgt

    groups = []
    for flag in (True, False):
        sel_out = upper_out == flag
        sel_tgt = upper_tgt == flag
        groups.append(KernelGroupData(
            z_src=arrays.z_src[idx_out][sel_out],
            r_weights=(k_out * fold_fit.omega_tilde_out)[sel_out],
            y_src=arrays.y_src[idx_out][sel_out],
            offsets=fold_fit.offsets_out[sel_out],
            h_weights_src=(k_out * fold_fit.gbreve_out * fold_fit.exp_psi_alpha_out)[sel_out],
            z_tgt=arrays.z_tgt[sel_tgt],
            h_weights_tgt=(k_tgt * fold_fit.gbreve_tgt)[sel_tgt],
        ))

    z_in = kmats["z_in"]
    z_all = kmats["z_all"]
    kappa_in = kappa.evaluate(arrays.a_src[idx_in])
    upper_in = partition.assign(kappa_in)

    h_in = np.empty(idx_in.size)
    r_in = np.empty(idx_in.size)
    r_tgt = np.empty(arrays.n_tgt)

    sieve_group_state: list[tuple | None] = [None, None]
    if backend == "sieve":
        df = spec.sieve_df or max(4, math.ceil(arrays.n ** (1.0 / 3.0)))
        sieve_basis = BasisExpansion(BasisSpec(spec.basis_family, int(df))).fit(
            np.vstack([arrays.z_src[idx_out], arrays.z_tgt])
        )

    # Sign groups with fewer than _MIN_GROUP_SUPPORT rows on either side
    # make the local equations ill-posed, as does a logistic group whose
    # responses are constant (the imputation moment is then one-sided at
    # every point).  Such groups are routed to the other group (the
    # empty-group fallback generalised) and counted as fallbacks.
    def support(g: int) -> int:
        return min(groups[g].n_src, groups[g].n_tgt)

    def well_posed(g: int) -> bool:
        if support(g) < _MIN_GROUP_SUPPORT:
            return False
        if link.is_identity:
            return True
        ybar = groups[g].y_src.mean()
        return 0.0 < ybar < 1.0

    preferred = [well_posed(g) for g in (0, 1)]
    if all(preferred):
        use_map = {0: 0, 1: 1}
    elif preferred[0]:
        use_map = {0: 0, 1: 0}
    elif preferred[1]:
        use_map = {0: 1, 1: 1}
    else:
        candidates = [g for g in (0, 1) if groups[g].n_src > 0 and groups[g].n_tgt > 0]
        if not candidates:
            raise CalibrationError(
                "both sign groups are degenerate", context={"fold": fold_fit.fold}
            )
        g_best = max(candidates, key=support)
        use_map = {0: g_best, 1: g_best}

    def solve_group(gd: KernelGroupData, mask_in: np.ndarray, mask_tgt: np.ndarray,
                    g: int, col_mask: np.ndarray, tgt_col_mask: np.ndarray):
        if backend == "sieve":
            if sieve_group_state[g] is None:
                b_src = sieve_basis.transform(gd.z_src)
                b_tgt_g = sieve_basis.transform(gd.z_tgt)
                xi, eta, res_xi, res_eta = calibrate_sieve(
                    b_src, gd.y_src, gd.offsets, gd.r_weights, gd.h_weights_src,
                    b_tgt_g, gd.h_weights_tgt, link,
                    src_norm=fold_fit.src_norm, tgt_norm=tgt_norm,
                )
                diagnostics.note_residual(max(res_xi, res_eta))
                sieve_group_state[g] = (xi, eta)
            xi, eta = sieve_group_state[g]
            h_vals = _clamp_h(sieve_basis.transform(z_in[mask_in]) @ eta,
                              fold_fit.prelim.h_tilde(z_in[mask_in]), diagnostics)
            r_vals_in = sieve_basis.transform(z_in[mask_in]) @ xi
            r_vals_tgt = sieve_basis.transform(arrays.z_tgt[mask_tgt]) @ xi
            return h_vals, r_vals_in, r_vals_tgt

        ev_mask = np.concatenate([mask_in, mask_tgt])
        pts = z_all[ev_mask]

        def r_ready():
            sub = kmats["r_src"][np.ix_(ev_mask, col_mask)]
            init = fold_fit.prelim.r_tilde(pts)
            return _calibrate_r_many(pts, kernel, gd, link, r_init=init,
                                     diagnostics=diagnostics, k_mat=sub)

        def r_fresh(grid_pts):
            init = fold_fit.prelim.r_tilde(grid_pts)
            return _calibrate_r_many(grid_pts, kernel, gd, link, r_init=init,
                                     diagnostics=diagnostics)

        r_vals = _solve_component(pts, r_ready, r_fresh)
        n_in_g = int(mask_in.sum())
        r_vals_in = r_vals[:n_in_g]
        r_vals_tgt = r_vals[n_in_g:]

        def h_ready():
            k_src_sub = kmats["r_src"][: z_in.shape[0]][np.ix_(mask_in, col_mask)]
            k_tgt_sub = kmats["h_tgt"][np.ix_(mask_in, tgt_col_mask)]
            return _calibrate_h_many(
                z_in[mask_in], kernel, gd, fold_fit.src_norm, tgt_norm,
                diagnostics, k_src=k_src_sub, k_tgt=k_tgt_sub,
                reference=fold_fit.prelim.h_tilde(z_in[mask_in]),
            )

        def h_fresh(grid_pts):
            return _calibrate_h_many(
                grid_pts, kernel, gd, fold_fit.src_norm, tgt_norm, diagnostics,
                reference=fold_fit.prelim.h_tilde(grid_pts),
            )

        h_vals = _solve_component(z_in[mask_in], h_ready, h_fresh)
        return h_vals, r_vals_in, r_vals_tgt

    for g in (0, 1):
        mask_in = upper_in == (g == 0)
        mask_tgt = upper_tgt == (g == 0)
        use = use_map[g]
        if use != g:
            diagnostics.empty_group_fallbacks += int(mask_in.sum() + mask_tgt.sum())
            if not (mask_in.any() or mask_tgt.any()):
                continue
        col_mask = upper_out == (use == 0)
        tgt_col_mask = upper_tgt == (use == 0)
        h_vals, r_vals_in, r_vals_tgt = solve_group(
            groups[use], mask_in, mask_tgt, use, col_mask, tgt_col_mask
        )
        h_in[mask_in] = h_vals
        r_in[mask_in] = r_vals_in
        r_tgt[mask_tgt] = r_vals_tgt

    alpha_hat = fold_fit.prelim.alpha_hat
    gamma_hat = fold_fit.prelim.gamma_hat
    omega_hat_in = np.exp(arrays.psi_src[idx_in] @ alpha_hat + h_in)
    m_hat_in = link.evaluate(arrays.phi_src[idx_in] @ gamma_hat + r_in)
    m_hat_tgt = link.evaluate(arrays.phi_tgt @ gamma_hat + r_tgt)

    calibrated = None
    if keep_tables:
        group_objs = []
        for g in (0, 1):
            use = use_map[g]
            gd = groups[use]
            mask_in = upper_in == (g == 0)
            mask_tgt = upper_tgt == (g == 0)
            h_table = {tuple(z): float(v) for z, v in zip(z_in[mask_in], h_in[mask_in])}
            r_table = {tuple(z): float(v) for z, v in zip(z_in[mask_in], r_in[mask_in])}
            r_table.update(
                {tuple(z): float(v)
                 for z, v in zip(arrays.z_tgt[mask_tgt], r_tgt[mask_tgt])}
            )
            if backend == "sieve":
                xi, eta = sieve_group_state[use]
                group_objs.append(GroupCalibration(
                    sieve_xi=xi, sieve_eta=eta, sieve_basis=sieve_basis,
                    h_table=h_table, r_table=r_table,
                ))
            else:
                group_objs.append(GroupCalibration(
                    kernel_data=gd, h_table=h_table, r_table=r_table,
                ))
        calibrated = CalibratedNuisance(
            link=link, alpha_hat=alpha_hat.copy(), gamma_hat=gamma_hat.copy(),
            kappa=kappa, partition=partition, backend=backend,
            kernel=kernel if backend == "kernel" else None,
            src_norm=fold_fit.src_norm, tgt_norm=tgt_norm,
            groups=(group_objs[0], group_objs[1]),
        )

    artifacts = None
    if keep_tables:
        artifacts = LoadingFoldArtifacts(
            fold=fold_fit.fold, calibrated=calibrated, idx_in=idx_in,
            omega_hat_in=omega_hat_in, m_hat_in=m_hat_in,
            h_hat_in=h_in, r_hat_in=r_in,
            h_tilde_in=fold_fit.prelim.h_tilde(z_in),
            r_tilde_in=fold_fit.prelim.r_tilde(z_in),
            omega_tilde_in=fold_fit.prelim.omega_tilde(arrays.psi_src[idx_in], z_in),
            m_tilde_in=fold_fit.prelim.m_tilde(arrays.phi_src[idx_in], z_in),
            kappa_in=kappa_in, kappa_tgt=k_tgt,
            gbreve_m_tilde_in=(
                link.breve(fold_fit.prelim.m_tilde(arrays.phi_src[idx_in], z_in))
                if not link.is_identity else np.ones(idx_in.size)
            ),
            gbreve_m_tilde_tgt=fold_fit.gbreve_tgt,
            r_hat_tgt=r_tgt,
            r_tilde_tgt=fold_fit.prelim.r_tilde(arrays.z_tgt),
            m_hat_tgt=m_hat_tgt,
        )
    return omega_hat_in, m_hat_in, m_hat_tgt, artifacts


# --------------------------------------------------------------------- #
# Pipeline
# --------------------------------------------------------------------- #


def _pipeline(arrays: _Arrays, spec: NuisanceSpec, config: AtrelConfig,
              tunings: Tunings, diagnostics: Diagnostics,
              keep_artifacts: bool) -> tuple[list[LoadingEstimate], list[dict]]:
    link = spec.link
    folds = kfold_partition(arrays.n, config.folds, config.seed)
    all_idx = np.arange(arrays.n)

    fold_fits = []
    for k, idx_in in enumerate(folds):
        idx_out = np.setdiff1d(all_idx, idx_in, assume_unique=True)
        fold_fits.append(
            _fit_fold(arrays, spec, tunings, k, idx_in, idx_out, config.solver_tol)
        )

    loadings = config.resolved_loadings(arrays.a_src.shape[1])
    n_load = len(loadings)
    omega_hat = np.empty((n_load, arrays.n))
    m_hat_src = np.empty((n_load, arrays.n))
    m_hat_tgt_sum = np.zeros((n_load, arrays.n_tgt))
    artifacts = [[] for _ in range(n_load)] if keep_artifacts else None

    kernel = KernelSpec(tunings.bandwidth)
    backend = config.backend or spec.calibration_backend
    for ff in fold_fits:
        kmats = (
            _fold_kernel_matrices(arrays, ff, kernel) if backend == "kernel"
            else {"z_in": arrays.z_src[ff.idx_in],
                  "z_all": np.vstack([arrays.z_src[ff.idx_in], arrays.z_tgt])}
        )
        for j, loading in enumerate(loadings):
            o_in, m_in, m_tgt, art = _calibrate_fold_loading(
                arrays, spec, tunings, config, ff, loading, diagnostics,
                keep_tables=keep_artifacts, kmats=kmats,
            )
            omega_hat[j, ff.idx_in] = o_in
            m_hat_src[j, ff.idx_in] = m_in
            m_hat_tgt_sum[j] += m_tgt
            if keep_artifacts:
                artifacts[j].append(art)

    results = []
    beta0 = np.mean([ff.beta_tilde for ff in fold_fits], axis=0)
    for j, loading in enumerate(loadings):
        m_hat_tgt = m_hat_tgt_sum[j] / config.folds
        beta = solve_preliminary_beta(
            arrays.a_src, arrays.y_src, omega_hat[j], m_hat_src[j],
            arrays.a_tgt, m_hat_tgt, link,
            src_scale=1.0 / arrays.n, beta0=beta0, tol=config.solver_tol,
        )
        resid = dr_equation_value(
            beta, arrays.a_src, arrays.y_src, omega_hat[j], m_hat_src[j],
            arrays.a_tgt, m_hat_tgt, link, src_scale=1.0 / arrays.n,
        )
        results.append(LoadingEstimate(
            loading=loading, beta=beta, value=float(loading @ beta),
            residual_norm=float(np.max(np.abs(resid))),
            fold_artifacts=tuple(artifacts[j]) if keep_artifacts else None,
        ))

    summaries = [
        {
            "fold": ff.fold,
            "n_in": int(ff.idx_in.size),
            "n_out": int(ff.idx_out.size),
            "beta_tilde": ff.beta_tilde.tolist(),
            "prelim_residual_weight": ff.prelim.residual_w,
            "prelim_residual_imputation": ff.prelim.residual_m,
        }
        for ff in fold_fits
    ]
    return results, summaries


# --------------------------------------------------------------------- #
# Tuning
# --------------------------------------------------------------------- #


def _cv_folds(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(p) for p in np.array_split(perm, k)]


def _full_data_designs(arrays: _Arrays, spec: NuisanceSpec):
    """Whole-sample sieve designs used by the tuning routines."""
    df_w, df_m = _basis_dfs(spec, arrays.n, arrays.n_tgt)
    psi_full_src = arrays.psi_src
    psi_full_tgt = arrays.psi_tgt
    phi_full_src = arrays.phi_src
    basis_w = basis_m = None
    if df_w > 0:
        basis_w = BasisExpansion(BasisSpec(spec.basis_family, df_w)).fit(
            np.vstack([arrays.z_src, arrays.z_tgt])
        )
        psi_full_src = np.column_stack([psi_full_src, basis_w.transform(arrays.z_src)])
        psi_full_tgt = np.column_stack([psi_full_tgt, basis_w.transform(arrays.z_tgt)])
    if df_m > 0:
        basis_m = BasisExpansion(BasisSpec(spec.basis_family, df_m)).fit(arrays.z_src)
        phi_full_src = np.column_stack([phi_full_src, basis_m.transform(arrays.z_src)])
    return psi_full_src, psi_full_tgt, phi_full_src, basis_w, basis_m


def _tune_ridges(arrays: _Arrays, spec: NuisanceSpec, rng) -> tuple[float, float, float, float]:
    n = arrays.n
    psi_full_src, psi_full_tgt, phi_full_src, _, _ = _full_data_designs(arrays, spec)

    folds_src = _cv_folds(n, _TUNING_FOLDS, rng)
    folds_tgt = _cv_folds(arrays.n_tgt, _TUNING_FOLDS, rng)
    rate = n ** (-2.0 / 3.0)

    best_w, best_w_score = None, np.inf
    best_m, best_m_score = None, np.inf
    for c in _RIDGE_SCALE_GRID:
        lam = c * rate
        score_w = 0.0
        score_m = 0.0
        failed = False
        for s in range(_TUNING_FOLDS):
            ho_s, ho_t = folds_src[s], folds_tgt[s]
            tr_s = np.setdiff1d(np.arange(n), ho_s, assume_unique=True)
            tr_t = np.setdiff1d(np.arange(arrays.n_tgt), ho_t, assume_unique=True)
            try:
                th_w, _ = fit_density_ratio_prelim(
                    psi_full_src[tr_s], psi_full_tgt[tr_t], ridge=lam, tol=1e-8,
                )
                th_m, _ = fit_imputation_prelim(
                    phi_full_src[tr_s], arrays.y_src[tr_s], spec.link,
                    ridge=lam, tol=1e-8,
                )
            except ConvergenceError:
                failed = True
                break
            # held-out dual objective of the exponential-tilt equation
            score_w += float(np.mean(np.exp(psi_full_src[ho_s] @ th_w))
                             - th_w @ psi_full_tgt[ho_t].mean(axis=0))
            eta = phi_full_src[ho_s] @ th_m
            if spec.link.is_identity:
                score_m += float(np.mean((arrays.y_src[ho_s] - eta) ** 2))
            else:
                # Bernoulli deviance via the numerically stable log-partition form
                score_m += float(np.mean(np.logaddexp(0.0, eta) - arrays.y_src[ho_s] * eta))
        if failed:
            continue
        if score_w < best_w_score:
            best_w, best_w_score = c, score_w
        if score_m < best_m_score:
            best_m, best_m_score = c, score_m
    if best_w is None or best_m is None:
        raise ConvergenceError("ridge tuning failed for every candidate scale")
    return best_w * rate, best_m * rate, best_w, best_m


def _tune_bandwidth(arrays: _Arrays, spec: NuisanceSpec, config: AtrelConfig,
                    ridge_w: float, ridge_m: float, rng) -> tuple[tuple, float]:
    """CV over c in h_j = c * sd(Z_j) * n^(-1/5), minimising held-out
    kernel-mass-normalised squared calibration-moment residuals."""
    link = spec.link
    n = arrays.n
    sd = arrays.z_src.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    base = sd * n ** (-0.2)

    psi_full_src, psi_full_tgt, phi_full_src, basis_w, basis_m = _full_data_designs(
        arrays, spec
    )
    theta_w, _ = fit_density_ratio_prelim(psi_full_src, psi_full_tgt, ridge=ridge_w)
    theta_m, _ = fit_imputation_prelim(phi_full_src, arrays.y_src, link, ridge=ridge_m)
    prelim = PreliminaryFit(
        theta_w=theta_w, theta_m=theta_m, p_psi=arrays.psi_src.shape[1],
        p_phi=arrays.phi_src.shape[1], link=link, basis_w=basis_w, basis_m=basis_m,
    )
    omega = prelim.omega_tilde(arrays.psi_src, arrays.z_src)
    m_src = prelim.m_tilde(arrays.phi_src, arrays.z_src)
    m_tgt = prelim.m_tilde(arrays.phi_tgt, arrays.z_tgt)
    beta_t = solve_preliminary_beta(
        arrays.a_src, arrays.y_src, omega, m_src, arrays.a_tgt, m_tgt, link,
    )
    jhat = compute_jhat(beta_t, arrays.a_tgt, link)
    loading = config.resolved_loadings(arrays.a_src.shape[1])[0]
    kappa = KappaWeights.build(loading, jhat, np.vstack([arrays.a_src, arrays.a_tgt]))
    k_src = kappa.values[:n]
    k_tgt = kappa.values[n:]
    part = sign_partition(kappa.values, config.median_split_intercept)
    up_src = part.assign(k_src)
    up_tgt = part.assign(k_tgt)

    gbreve_src = link.breve(m_src) if not link.is_identity else np.ones(n)
    gbreve_tgt = link.breve(m_tgt) if not link.is_identity else np.ones(arrays.n_tgt)
    exp_pa = np.exp(arrays.psi_src @ prelim.alpha_hat)
    offsets = arrays.phi_src @ prelim.gamma_hat

    folds = _cv_folds(n, _TUNING_FOLDS, rng)
    # Held-out moments are always localised with a fixed pilot kernel;
    # otherwise large candidate bandwidths would be scored against the
    # global moment, which the global fit zeroes by construction.
    kernel_eval = KernelSpec(tuple(base))
    best_c, best_score = None, np.inf
    for c in _BANDWIDTH_SCALE_GRID:
        kernel = KernelSpec(tuple(c * base))
        score = 0.0
        valid = True
        for s in range(_TUNING_FOLDS):
            ho = folds[s]
            tr = np.setdiff1d(np.arange(n), ho, assume_unique=True)
            for flag in (True, False):
                tr_g = tr[up_src[tr] == flag]
                ho_g = ho[up_src[ho] == flag]
                tgt_g = up_tgt == flag
                if tr_g.size < 5 or ho_g.size == 0 or tgt_g.sum() == 0:
                    continue
                gd = KernelGroupData(
                    z_src=arrays.z_src[tr_g],
                    r_weights=(k_src * omega)[tr_g],
                    y_src=arrays.y_src[tr_g],
                    offsets=offsets[tr_g],
                    h_weights_src=(k_src * gbreve_src * exp_pa)[tr_g],
                    z_tgt=arrays.z_tgt[tgt_g],
                    h_weights_tgt=(k_tgt * gbreve_tgt)[tgt_g],
                )
                z_ho = arrays.z_src[ho_g]
                try:
                    r_hat = _calibrate_r_many(
                        z_ho, kernel, gd, link, r_init=prelim.r_tilde(z_ho)
                    )
                    h_hat = _calibrate_h_many(
                        z_ho, kernel, gd, 1.0 / tr_g.size, 1.0 / arrays.n_tgt
                    )
                except (CalibrationError, ConvergenceError, NoRootError):
                    valid = False
                    break
                k_ho = kernel_eval.weights(z_ho, arrays.z_src[ho_g])
                mass = np.maximum(k_ho.sum(axis=1), 1e-300)
                w_ho = k_ho * (k_src * omega)[ho_g]
                g_pred = link.evaluate(offsets[ho_g][None, :] + r_hat[:, None])
                res_r = (w_ho @ arrays.y_src[ho_g]
                         - np.einsum("ij,ij->i", w_ho, g_pred)) / mass
                lhs = (k_ho @ ((k_src * gbreve_src * exp_pa)[ho_g])
                       * np.exp(h_hat)) / ho_g.size
                k_ho_tgt = kernel_eval.weights(z_ho, arrays.z_tgt[tgt_g])
                rhs = (k_ho_tgt @ (k_tgt * gbreve_tgt)[tgt_g]) / arrays.n_tgt
                res_h = (lhs - rhs) / (mass / ho_g.size)
                score += float(np.mean(res_r ** 2) + np.mean(res_h ** 2))
            if not valid:
                break
        if valid and score < best_score:
            best_c, best_score = c, score
    if best_c is None:
        best_c = 1.0
    return tuple(best_c * base), best_c


def resolve_tunings(arrays: _Arrays, spec: NuisanceSpec, config: AtrelConfig) -> Tunings:
    rng = _rng.child_rng(config.seed, _rng.TUNING)
    n = arrays.n
    rate = n ** (-2.0 / 3.0)
    need_ridge_cv = spec.ridge_weight is None or spec.ridge_imputation is None
    if need_ridge_cv:
        rw, rm, cw, cm = _tune_ridges(arrays, spec, rng)
    if spec.ridge_weight is not None:
        rw, cw = float(spec.ridge_weight), None
    if spec.ridge_imputation is not None:
        rm, cm = float(spec.ridge_imputation), None

    if spec.bandwidth is not None:
        bw, cb = tuple(spec.bandwidth), None
    elif spec.bandwidth_scale is not None:
        sd = arrays.z_src.std(axis=0, ddof=1)
        sd = np.where(sd > 0, sd, 1.0)
        bw = tuple(float(spec.bandwidth_scale) * sd * n ** (-0.2))
        cb = float(spec.bandwidth_scale)
    else:
        bw, cb = _tune_bandwidth(arrays, spec, config, rw, rm, rng)
    return Tunings(
        ridge_weight=rw, ridge_imputation=rm, bandwidth=bw,
        ridge_weight_scale=cw, ridge_imputation_scale=cm, bandwidth_scale=cb,
    )


# --------------------------------------------------------------------- #
# Public entry points
# --------------------------------------------------------------------- #


def fit_atrel(data: TransferDataset, spec: NuisanceSpec, config: AtrelConfig,
              tunings: Tunings | None = None,
              keep_artifacts: bool = True) -> AtrelEstimate:
    """Cross-fitted doubly robust fit for every configured loading."""
    arrays = _resolve_arrays(data, spec)
    if tunings is None:
        tunings = resolve_tunings(arrays, spec, config)
    diagnostics = Diagnostics()
    results, summaries = _pipeline(
        arrays, spec, config, tunings, diagnostics, keep_artifacts
    )
    return AtrelEstimate(
        loadings=tuple(results), tunings=tunings, diagnostics=diagnostics,
        fold_summaries=tuple(summaries), seed=config.seed,
        n_source=arrays.n, n_target=arrays.n_tgt,
    )


def _bootstrap_once(arrays: _Arrays, spec: NuisanceSpec, config: AtrelConfig,
                    tunings: Tunings, b: int):
    rng = _rng.child_rng(config.seed, _rng.BOOTSTRAP, b)
    idx_src = rng.integers(0, arrays.n, arrays.n)
    idx_tgt = rng.integers(0, arrays.n_tgt, arrays.n_tgt)
    res = arrays.resample(idx_src, idx_tgt)
    diag = Diagnostics()
    try:
        results, _ = _pipeline(res, spec, config, tunings, diag, keep_artifacts=False)
    except (ConvergenceError, CalibrationError, NoRootError):
        return None
    return np.array([r.value for r in results])


def bootstrap_ci(data: TransferDataset, spec: NuisanceSpec, config: AtrelConfig,
                 keep_artifacts: bool = True) -> AtrelEstimate:
    """Fit plus stratified nonparametric bootstrap percentile intervals.

    Source rows are resampled with replacement (size n) independently of
    target rows (size N); the full pipeline is re-run per resample with
    the tuning parameters frozen at their original-data values.  Failed
    resamples are dropped and counted; more than 10% failures raises
    :class:`InferenceError`.
    """
    estimate = fit_atrel(data, spec, config, keep_artifacts=keep_artifacts)
    b_reps = config.bootstrap_reps
    if b_reps == 0:
        return estimate
    arrays = _resolve_arrays(data, spec)
    threads = effective_threads(config.threads)
    draw = _parallel_map(
        lambda b: _bootstrap_once(arrays, spec, config, estimate.tunings, b),
        range(b_reps), threads,
    )
    values = [v for v in draw if v is not None]
    failures = b_reps - len(values)
    if failures > 0.10 * b_reps:
        raise InferenceError(
            f"{failures} of {b_reps} bootstrap resamples failed to converge"
        )
    stack = np.array(values)  # (B_ok, n_loadings)
    alpha = 1.0 - config.confidence_level
    lo = np.quantile(stack, alpha / 2.0, axis=0)
    hi = np.quantile(stack, 1.0 - alpha / 2.0, axis=0)
    new_loadings = []
    for j, le in enumerate(estimate.loadings):
        interval = (float(lo[j]), float(hi[j]))
        flagged = not (interval[0] <= le.value <= interval[1])
        new_loadings.append(replace(le, interval=interval, interval_flagged=flagged))
    diag = estimate.diagnostics
    diag.bootstrap_failures += failures
    diag.bootstrap_attempts += b_reps
    return replace(
        estimate, loadings=tuple(new_loadings),
        bootstrap_reps_used=len(values), bootstrap_failures=failures,
    )


def dr_residual_diagnostic(estimate: AtrelEstimate, data: TransferDataset,
                           spec: NuisanceSpec, loading_index: int = 0) -> dict:
    """Equation residual plus empirical first-order bias terms.

    The bias terms plug the calibration increments (h_hat - h_tilde and
    r_hat - r_tilde on the cross-fitted rows) into the two bias sums,
    once weighted with the calibrated components and once with the
    preliminary ones.  Calibration succeeded when the calibrated variant
    is no larger in magnitude.
    """
    le = estimate.loadings[loading_index]
    if le.fold_artifacts is None:
        raise ConfigurationError("estimate was fitted without artifacts")
    arrays = _resolve_arrays(data, spec)
    n = arrays.n
    root_n = math.sqrt(n)
    d1_cal = d1_pre = 0.0
    d2_cal = d2_pre = 0.0
    tgt_cal = tgt_pre = 0.0
    for art in le.fold_artifacts:
        dh = art.h_hat_in - art.h_tilde_in
        dr = art.r_hat_in - art.r_tilde_in
        y_in = arrays.y_src[art.idx_in]
        d1_cal += float(np.sum(art.omega_hat_in * art.kappa_in * (y_in - art.m_hat_in) * dh))
        d1_pre += float(np.sum(art.omega_tilde_in * art.kappa_in * (y_in - art.m_tilde_in) * dh))
        gb_hat = (
            spec.link.breve(art.m_hat_in) if not spec.link.is_identity
            else np.ones_like(art.m_hat_in)
        )
        d2_cal += float(np.sum(art.omega_hat_in * art.kappa_in * gb_hat * dr))
        d2_pre += float(np.sum(art.omega_tilde_in * art.kappa_in * art.gbreve_m_tilde_in * dr))
        dr_t = art.r_hat_tgt - art.r_tilde_tgt
        gb_hat_t = (
            spec.link.breve(art.m_hat_tgt) if not spec.link.is_identity
            else np.ones_like(art.m_hat_tgt)
        )
        tgt_cal += float(np.sum(art.kappa_tgt * gb_hat_t * dr_t))
        tgt_pre += float(np.sum(art.kappa_tgt * art.gbreve_m_tilde_tgt * dr_t))
    k_folds = len(le.fold_artifacts)
    delta1_cal = d1_cal / root_n
    delta1_pre = d1_pre / root_n
    delta2_cal = d2_cal / root_n - root_n / arrays.n_tgt * (tgt_cal / k_folds)
    delta2_pre = d2_pre / root_n - root_n / arrays.n_tgt * (tgt_pre / k_folds)
    return {
        "residual_norm": le.residual_norm,
        "delta1_calibrated": delta1_cal,
        "delta2_calibrated": delta2_cal,
        "delta1_preliminary": delta1_pre,
        "delta2_preliminary": delta2_pre,
    }
