"""Core data containers: the two-population dataset and the model spec."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigurationError
from .numerics import LOGIT, BasisSpec, LinkFunction


@dataclass(frozen=True)
class TransferDataset:
    """Labelled source rows plus unlabelled target rows.

    ``source_x`` / ``target_x`` hold the covariates (one named column per
    entry of ``columns``); ``source_y`` holds the response observed on
    the source population only.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        sx = np.asarray(self.source_x, dtype=float)
        sy = np.asarray(self.source_y, dtype=float)
        tx = np.asarray(self.target_x, dtype=float)
        if sx.ndim != 2 or tx.ndim != 2:
            raise ConfigurationError("covariate arrays must be 2-dimensional")
        if sx.shape[1] != tx.shape[1] or sx.shape[1] != len(self.columns):
            raise ConfigurationError("column names and covariate widths disagree")
        if sy.shape != (sx.shape[0],):
            raise ConfigurationError("source response length differs from source rows")
        object.__setattr__(self, "source_x", sx)
        object.__setattr__(self, "source_y", sy)
        object.__setattr__(self, "target_x", tx)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n_source(self) -> int:
        return self.source_x.shape[0]

    @property
    def n_target(self) -> int:
        return self.target_x.shape[0]

    def column_indices(self, names) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.columns)}
        try:
            return np.array([lookup[n] for n in names], dtype=int)
        except KeyError as err:
            raise ConfigurationError(f"unknown column {err.args[0]!r}") from None


def design_matrix(x: np.ndarray, columns: tuple[str, ...], selected, constant: bool):
    """Resolve a column selection (supports ``a*b`` product terms) to a matrix."""
    lookup = {c: i for i, c in enumerate(columns)}
    cols = []
    for name in selected:
        if "*" in name:
            parts = [p.strip() for p in name.split("*")]
            col = np.ones(x.shape[0])
            for p in parts:
                if p not in lookup:
                    raise ConfigurationError(f"unknown column {p!r} in product term {name!r}")
                col = col * x[:, lookup[p]]
            cols.append(col)
        else:
            if name not in lookup:
                raise ConfigurationError(f"unknown column {name!r}")
            cols.append(x[:, lookup[name]])
    body = np.column_stack(cols) if cols else np.empty((x.shape[0], 0))
    if constant:
        return np.column_stack([np.ones(x.shape[0]), body])
    return body


@dataclass(frozen=True)
class NuisanceSpec:
    """Model specification: column roles, link, bases, tuning knobs.

    ``a_columns`` define the target working model (an intercept is
    implicit).  ``psi_columns`` / ``phi_columns`` are the parametric
    parts of the density-ratio and imputation models (a leading constant
    is prepended to both, matching the convention that their first
    element is 1).  ``z_columns`` carry the nonparametric component.

    Tuning fields left as ``None`` are resolved by cross-validation:
    ridge strengths over ``c * n^(-2/3)`` with c on a geometric grid, and
    per-coordinate bandwidths ``c * sd(Z_j) * n^(-1/5)`` minimising the
    held-out squared calibration-moment residual.
    """

    a_columns: tuple[str, ...]
    psi_columns: tuple[str, ...]
    phi_columns: tuple[str, ...]
    z_columns: tuple[str, ...]
    link: LinkFunction = LOGIT
    basis_family: str = "natural_cubic_spline"
    weight_basis_df: int | None = None       # default ceil((N + n)^(1/4))
    imputation_basis_df: int | None = None   # default ceil(n^(1/4))
    ridge_weight: float | None = None        # lambda_1
    ridge_imputation: float | None = None    # lambda_2
    bandwidth: tuple[float, ...] | None = None
    bandwidth_scale: float | None = None
    calibration_backend: str = "kernel"
    sieve_df: int | None = None              # calibration basis size, sieve backend

    def __post_init__(self):
        for f_name in ("a_columns", "psi_columns", "phi_columns", "z_columns"):
            object.__setattr__(self, f_name, tuple(getattr(self, f_name)))
        if not self.a_columns:
            raise ConfigurationError("a_columns must select at least one covariate")
        if not self.z_columns:
            raise ConfigurationError("z_columns must select at least one covariate")
        if self.calibration_backend not in ("kernel", "sieve"):
            raise ConfigurationError(
                f"unknown calibration backend {self.calibration_backend!r}"
            )
        for name in ("ridge_weight", "ridge_imputation"):
            v = getattr(self, name)
            if v is not None and (not np.isfinite(v) or v < 0.0):
                raise ConfigurationError(f"{name} must be a nonnegative real")
        if self.bandwidth is not None:
            bw = tuple(float(b) for b in self.bandwidth)
            if len(bw) != len(self.z_columns) or any(b <= 0 for b in bw):
                raise ConfigurationError("bandwidth needs one positive entry per Z column")
            object.__setattr__(self, "bandwidth", bw)
        BasisSpec(self.basis_family, 4)  # validates the family name

    def with_updates(self, **kw) -> "NuisanceSpec":
        return replace(self, **kw)


# The user-facing alias: one object carries the full model description.
ModelSpec = NuisanceSpec
