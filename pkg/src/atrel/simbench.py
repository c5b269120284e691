"""Simulation benchmark: the four data generating configurations and a
replicated study runner producing RMSE / bias / coverage tables.

Covariates start from a correlated 7-dimensional Gaussian, clamped to
(-1.5, 1.5) and standardised empirically, with a fixed nonlinear
transform W.  Source membership follows a logistic model in (W, X, Z)
whose coefficients define the four configurations; configurations (i)
and (ii) additionally shift how two covariates are observed on the
target population.  Responses are Bernoulli with a logistic mean in the
observed covariates, W, and a smooth term in Z = X1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .estimator import (
    AtrelConfig,
    Tunings,
    bootstrap_ci,
    effective_threads,
    fit_atrel,
    _parallel_map,
)
from .comparators import (
    ComparatorSpec,
    fit_dml_be,
    fit_iw_only,
    fit_parametric_dr,
    fit_source_glm,
)
from .exceptions import AtrelError, ConfigurationError, GeneratorError, InferenceError
from .model import NuisanceSpec, TransferDataset
from .numerics import LOGIT

_COLUMNS = tuple(f"x{j}" for j in range(1, 8))
_DRAW_BUDGET_FACTOR = 100


def sigma_v() -> np.ndarray:
    """Correlation matrix of the latent Gaussian (7 x 7)."""
    s = np.eye(7)
    for i, j in ((1, 2), (1, 3), (3, 4), (3, 5)):
        s[i - 1, j - 1] = s[j - 1, i - 1] = 0.3
    for i, j in ((1, 6), (1, 7), (5, 6), (5, 7)):
        s[i - 1, j - 1] = s[j - 1, i - 1] = 0.15
    return s


def _w_transform(xt: np.ndarray) -> np.ndarray:
    """Fixed nonlinear feature map W(x_tilde), 8 columns incl. constant."""
    return np.column_stack([
        np.ones(xt.shape[0]),
        np.exp(0.5 * xt[:, 0]),
        xt[:, 1] / (1.0 + np.exp(xt[:, 2])),
        (xt[:, 0] * xt[:, 2] / 5.0 + 0.6) ** 3,
        xt[:, 3], xt[:, 4], xt[:, 5], xt[:, 6],
    ])


def _hx_config_i(z: np.ndarray) -> np.ndarray:
    inner = np.abs(z) < 1.5
    return np.where(inner, 0.6 * z ** 2, 0.6 * (np.abs(z) - 1.5) + 1.35)


def _hx_config_iii(z: np.ndarray) -> np.ndarray:
    inner = np.abs(z) < 1.5
    return np.where(inner, 0.5 * np.abs(z) ** 3,
                    0.5 * 1.5 ** 3 + (np.abs(z) - 1.5))


def _hx_zero(z: np.ndarray) -> np.ndarray:
    return np.zeros_like(z)


def _rx_sin(scale: float):
    def rx(z: np.ndarray) -> np.ndarray:
        return scale * np.sin(0.75 * np.pi * z)
    return rx


@dataclass(frozen=True)
class GeneratorParams:
    """Coefficients of one data generating configuration."""

    a_w: np.ndarray
    a_x: np.ndarray
    h_x: object
    b_w: np.ndarray
    b_x: np.ndarray
    r_x: object
    observation_shift: bool


_GENERATORS = {
    "i": GeneratorParams(
        a_w=np.array([-1.0, 0.0, -0.4, -0.4, -0.15, -0.15, 0.0, 0.0]),
        a_x=np.zeros(8), h_x=_hx_config_i,
        b_w=np.zeros(8),
        b_x=np.array([0.0, 0.5, 0.5, 0.5, 0.3, 0.3, 0.15, 0.15]),
        r_x=_rx_sin(-0.4), observation_shift=True,
    ),
    "ii": GeneratorParams(
        a_w=np.array([-1.0, 0.0, -0.4, -0.4, -0.15, -0.15, 0.0, 0.0]),
        a_x=np.zeros(8), h_x=_hx_config_i,
        b_w=np.zeros(8),
        b_x=np.array([0.0, 0.5, 0.5, 0.5, 0.3, 0.3, 0.15, 0.15]),
        r_x=_rx_sin(0.0), observation_shift=True,
    ),
    "iii": GeneratorParams(
        a_w=np.zeros(8),
        a_x=np.array([0.0, -0.2, -0.4, -0.4, -0.2, -0.2, 0.0, 0.0]),
        h_x=_hx_config_iii,
        b_w=np.array([-0.5, 0.5, 0.8, 0.3, -0.3, -0.2, 0.15, 0.15]),
        b_x=np.zeros(8), r_x=_rx_sin(-0.6), observation_shift=False,
    ),
    "iv": GeneratorParams(
        a_w=np.zeros(8),
        a_x=np.array([0.0, -0.4, -0.4, -0.4, -0.15, -0.15, 0.0, 0.0]),
        h_x=_hx_zero,
        b_w=np.array([-0.8, 0.5, 0.5, 0.5, 0.3, 0.3, 0.15, 0.15]),
        b_x=np.zeros(8), r_x=_rx_sin(-0.4), observation_shift=False,
    ),
}

_ESTIMATORS = ("atrel", "parametric", "dml_be", "iw", "source")


@dataclass(frozen=True)
class SimConfig:
    """Study configuration: which generator, sizes, replication count."""

    id: str = "i"
    n: int = 500
    n_target: int = 1000
    replications: int = 100
    seed: int = 0
    estimators: tuple[str, ...] = ("atrel",)
    bootstrap_reps: int = 100
    folds: int = 5
    truncation: str = "clamp"
    max_failure_rate: float = 0.05

    def __post_init__(self):
        if self.id not in _GENERATORS:
            raise ConfigurationError(f"unknown configuration {self.id!r}")
        if self.truncation not in ("clamp", "reject"):
            raise ConfigurationError("truncation must be 'clamp' or 'reject'")
        bad = [e for e in self.estimators if e not in _ESTIMATORS]
        if bad:
            raise ConfigurationError(f"unknown estimators {bad}")
        object.__setattr__(self, "estimators", tuple(self.estimators))


def gen_covariates(count: int, rng: np.random.Generator,
                   truncation: str = "clamp"):
    """Latent standardised covariates X_tilde and the feature map W.

    Returns ``(x_tilde, w)``.  Clamping winsorises each latent Gaussian
    coordinate at +-1.5; rejection redraws whole vectors until all
    coordinates fall inside.  Standardisation uses the empirical
    mean/sd of the generated batch.
    """
    chol = np.linalg.cholesky(sigma_v())
    if truncation == "clamp":
        v = rng.standard_normal((count, 7)) @ chol.T
        v = np.clip(v, -1.5, 1.5)
    else:
        rows = []
        have = 0
        while have < count:
            draw = rng.standard_normal((max(count, 1024), 7)) @ chol.T
            keep = draw[np.all(np.abs(draw) < 1.5, axis=1)]
            rows.append(keep)
            have += keep.shape[0]
        v = np.vstack(rows)[:count]
    sd = v.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xt = (v - v.mean(axis=0)) / sd
    return xt, _w_transform(xt)


def gen_population(config: SimConfig, seed: int | None = None) -> TransferDataset:
    """Exactly n source and N target rows from the configured mechanism."""
    params = _GENERATORS[config.id]
    rng = _rng.child_rng(config.seed if seed is None else seed, _rng.GENERATOR)
    n, n_tgt = config.n, config.n_target
    budget = _DRAW_BUDGET_FACTOR * (n + n_tgt)
    drawn = 0
    src_rows, src_y = [], []
    tgt_rows = []
    need_src, need_tgt = n, n_tgt
    while need_src > 0 or need_tgt > 0:
        chunk = min(max(4 * (n + n_tgt), 2048), budget - drawn)
        if chunk <= 0:
            raise GeneratorError(
                f"draw budget exhausted with {need_src} source and "
                f"{need_tgt} target rows missing"
            )
        xt, w = gen_covariates(chunk, rng, config.truncation)
        drawn += chunk
        z = xt[:, 0]
        x_design = np.column_stack([np.ones(chunk), xt])
        p_src = LOGIT.evaluate(w @ params.a_w + x_design @ params.a_x + params.h_x(z))
        s = rng.random(chunk) < p_src
        x_obs = xt.copy()
        if params.observation_shift:
            shift = 0.2 * np.sin(0.75 * np.pi * z) * (~s)
            x_obs[:, 1] = (xt[:, 1] + shift) / 0.8
            x_obs[:, 2] = (xt[:, 2] + shift) / 0.8
        xo_design = np.column_stack([np.ones(chunk), x_obs])
        p_y = LOGIT.evaluate(w @ params.b_w + xo_design @ params.b_x + params.r_x(z))
        y = (rng.random(chunk) < p_y).astype(float)
        take_s = np.where(s)[0][:need_src]
        take_t = np.where(~s)[0][:need_tgt]
        if take_s.size:
            src_rows.append(x_obs[take_s])
            src_y.append(y[take_s])
            need_src -= take_s.size
        if take_t.size:
            tgt_rows.append(x_obs[take_t])
            need_tgt -= take_t.size
    return TransferDataset(
        source_x=np.vstack(src_rows)[:n],
        source_y=np.concatenate(src_y)[:n],
        target_x=np.vstack(tgt_rows)[:n_tgt],
        columns=_COLUMNS,
    )


def default_spec(backend: str = "kernel") -> NuisanceSpec:
    """The study nuisance specification: psi = phi = X, Z = X1, A = (1, X1..X3)."""
    return NuisanceSpec(
        a_columns=_COLUMNS[:3],
        psi_columns=_COLUMNS,
        phi_columns=_COLUMNS,
        z_columns=("x1",),
        link=LOGIT,
        calibration_backend=backend,
    )


def true_beta(config: SimConfig, seed: int = 0, rows: int = 1_000_000,
              chunk: int = 200_000) -> np.ndarray:
    """Working-model projection solved on a large target-population draw.

    Draws target rows from the configured mechanism (with their labels,
    which the estimators never see) and fits the target GLM of Y on A.
    """
    params = _GENERATORS[config.id]
    rng = _rng.child_rng(seed, _rng.ORACLE)
    a_blocks, y_blocks = [], []
    have = 0
    while have < rows:
        m = min(chunk, 4 * (rows - have) + 4096)
        xt, w = gen_covariates(m, rng, config.truncation)
        z = xt[:, 0]
        x_design = np.column_stack([np.ones(m), xt])
        p_src = LOGIT.evaluate(w @ params.a_w + x_design @ params.a_x + params.h_x(z))
        s = rng.random(m) < p_src
        tgt = ~s
        x_obs = xt.copy()
        if params.observation_shift:
            shift = 0.2 * np.sin(0.75 * np.pi * z) * tgt
            x_obs[:, 1] = (xt[:, 1] + shift) / 0.8
            x_obs[:, 2] = (xt[:, 2] + shift) / 0.8
        xo_design = np.column_stack([np.ones(m), x_obs])
        p_y = LOGIT.evaluate(w @ params.b_w + xo_design @ params.b_x + params.r_x(z))
        y = (rng.random(m) < p_y).astype(float)
        keep = np.where(tgt)[0][: rows - have]
        a_blocks.append(np.column_stack([np.ones(keep.size), x_obs[keep][:, :3]]))
        y_blocks.append(y[keep])
        have += keep.size
    from .comparators import glm_fit

    return glm_fit(np.vstack(a_blocks), np.concatenate(y_blocks), LOGIT)


# --------------------------------------------------------------------- #
# Study runner
# --------------------------------------------------------------------- #


def _fit_estimator(name: str, data: TransferDataset, spec: NuisanceSpec,
                   config: SimConfig, rep_seed: int):
    if name == "atrel":
        cfg = AtrelConfig(folds=config.folds, seed=rep_seed,
                          bootstrap_reps=config.bootstrap_reps, threads=1)
        if config.bootstrap_reps > 0:
            est = bootstrap_ci(data, spec, cfg, keep_artifacts=False)
        else:
            est = fit_atrel(data, spec, cfg, keep_artifacts=False)
        values = est.loading_values()
        intervals = [le.interval for le in est.loadings]
        return values, intervals
    if name == "parametric":
        fitter = lambda d: fit_parametric_dr(d, spec)
    elif name == "dml_be":
        fitter = lambda d: fit_dml_be(
            d, spec, ComparatorSpec(method="dml_be", folds=config.folds,
                                    seed=rep_seed)
        )
    elif name == "iw":
        fitter = lambda d: fit_iw_only(d, spec)
    elif name == "source":
        fitter = lambda d: fit_source_glm(d, spec)
    else:
        raise ConfigurationError(f"unknown estimator {name!r}")
    beta = fitter(data)
    intervals = None
    if config.bootstrap_reps > 0:
        draws = np.empty((config.bootstrap_reps, beta.size))
        kept = 0
        for b in range(config.bootstrap_reps):
            rng = _rng.child_rng(rep_seed, _rng.BOOTSTRAP, b)
            idx_s = rng.integers(0, data.n_source, data.n_source)
            idx_t = rng.integers(0, data.n_target, data.n_target)
            resampled = TransferDataset(
                data.source_x[idx_s], data.source_y[idx_s],
                data.target_x[idx_t], data.columns,
            )
            try:
                draws[kept] = fitter(resampled)
                kept += 1
            except AtrelError:
                continue
        if kept < 0.9 * config.bootstrap_reps:
            raise InferenceError("too many failed bootstrap resamples")
        lo = np.quantile(draws[:kept], 0.025, axis=0)
        hi = np.quantile(draws[:kept], 0.975, axis=0)
        intervals = [(float(lo[j]), float(hi[j])) for j in range(beta.size)]
    return beta, intervals


@dataclass(frozen=True)
class SimStudyReport:
    """Per-estimator, per-parameter RMSE / bias / coverage summary."""

    config: SimConfig
    truth: np.ndarray
    parameters: tuple[str, ...]
    rmse: dict
    bias: dict
    coverage: dict
    failures: dict
    replications_used: dict

    def aggregate(self, estimator: str) -> dict:
        r = self.rmse[estimator]
        b = self.bias[estimator]
        cp = self.coverage[estimator]
        agg = {
            "average_rmse": float(np.mean(r)),
            "average_abs_bias": float(np.mean(np.abs(b))),
        }
        cps = [c for c in cp if not math.isnan(c)]
        agg["max_cp_deviance"] = (
            float(np.max(np.abs(np.array(cps) - 0.95))) if cps else float("nan")
        )
        return agg

    def rows(self) -> list[tuple]:
        """Long-format rows (estimator, parameter, metric, value)."""
        out = []
        for est in self.rmse:
            for j, par in enumerate(self.parameters):
                out.append((est, par, "rmse", self.rmse[est][j]))
                out.append((est, par, "bias", self.bias[est][j]))
                out.append((est, par, "cp", self.coverage[est][j]))
            agg = self.aggregate(est)
            out.append((est, "all", "average_rmse", agg["average_rmse"]))
            out.append((est, "all", "average_abs_bias", agg["average_abs_bias"]))
            out.append((est, "all", "max_cp_deviance", agg["max_cp_deviance"]))
            out.append((est, "all", "failures", float(self.failures[est])))
        return out


def _run_replication(args):
    config, spec, rep = args
    rep_seed_seq = _rng.child_rng(config.seed, _rng.STUDY, rep)
    rep_seed = int(rep_seed_seq.integers(0, 2 ** 63 - 1))
    data = gen_population(config, seed=rep_seed)
    out = {}
    for name in config.estimators:
        try:
            out[name] = _fit_estimator(name, data, spec, config, rep_seed)
        except AtrelError as err:
            out[name] = ("failed", repr(err))
    return out


def run_study(config: SimConfig, spec: NuisanceSpec | None = None,
              truth: np.ndarray | None = None, threads: int | None = None,
              oracle_seed: int = 1, oracle_rows: int = 1_000_000) -> SimStudyReport:
    """Replicated study: fresh data per replication, each estimator fitted,
    RMSE / bias / CP aggregated against the truth-oracle projection."""
    if config.replications < 2:
        raise ConfigurationError("replications must be at least 2")
    spec = spec or default_spec()
    if truth is None:
        truth = true_beta(config, seed=oracle_seed, rows=oracle_rows)
    d = truth.size
    params = tuple(f"beta{j}" for j in range(d))
    n_threads = effective_threads(threads)
    results = _parallel_map(
        _run_replication,
        [(config, spec, rep) for rep in range(config.replications)],
        n_threads,
    )
    rmse, bias, coverage, failures, used = {}, {}, {}, {}, {}
    for name in config.estimators:
        values, covers, n_fail = [], [], 0
        for rep_out in results:
            res = rep_out[name]
            if isinstance(res[0], str):
                n_fail += 1
                continue
            beta, intervals = res
            values.append(np.asarray(beta)[:d])
            if intervals is not None:
                covers.append([
                    1.0 if (iv is not None and iv[0] <= truth[j] <= iv[1]) else 0.0
                    for j, iv in enumerate(intervals[:d])
                ])
        if n_fail > config.max_failure_rate * config.replications:
            raise InferenceError(
                f"estimator {name!r} failed {n_fail} of "
                f"{config.replications} replications"
            )
        vals = np.array(values)
        err = vals - truth[None, :]
        rmse[name] = list(np.sqrt(np.mean(err ** 2, axis=0)))
        bias[name] = list(np.mean(err, axis=0))
        coverage[name] = (
            list(np.mean(np.array(covers), axis=0)) if covers
            else [float("nan")] * d
        )
        failures[name] = n_fail
        used[name] = len(values)
    return SimStudyReport(
        config=config, truth=truth, parameters=params, rmse=rmse, bias=bias,
        coverage=coverage, failures=failures, replications_used=used,
    )
