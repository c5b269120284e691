"""Numerical kernel shared by the whole package.

Link functions (identity / logistic), Gaussian product kernels, basis
expansions (natural cubic splines, probabilists' Hermite tensors), a
damped Newton solver for estimating-equation systems, and a bracketed
scalar root finder.  Everything here is a pure function of its inputs
once constructed; fitted basis objects are immutable after ``fit``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit

from .exceptions import (
    ConfigurationError,
    ConvergenceError,
    DomainError,
    NoRootError,
    StateError,
)

_LOGIT_CLAMP = 1e-12
_GAUSS_NORM = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class ClampCounter:
    """Counts silently clamped logit-inverse evaluations (diagnostic)."""

    count: int = 0

    def add(self, k: int) -> None:
        self.count += int(k)


def _as_float_array(x):
    arr = np.asarray(x, dtype=float)
    return arr, arr.ndim == 0


def _maybe_scalar(arr, scalar):
    return float(arr) if scalar else arr


@dataclass(frozen=True)
class LinkFunction:
    """Strictly increasing mean link: identity or logistic.

    ``breve(a)`` is the derivative of the link evaluated at the point
    whose link value is ``a``, i.e. ``deriv(inverse(a))``.  For the
    logistic link this is ``a * (1 - a)`` exactly; for the identity it
    is 1 everywhere.
    """

    kind: str = "logit"

    def __post_init__(self):
        if self.kind not in ("identity", "logit"):
            raise ConfigurationError(f"unknown link kind {self.kind!r}")

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def evaluate(self, x):
        arr, scalar = _as_float_array(x)
        if self.is_identity:
            return _maybe_scalar(arr + 0.0, scalar)
        # expit is the numerically stable branch-free logistic
        return _maybe_scalar(expit(arr), scalar)

    def derivative(self, x):
        arr, scalar = _as_float_array(x)
        if self.is_identity:
            return _maybe_scalar(np.ones_like(arr), scalar)
        g = self.evaluate(arr)
        return _maybe_scalar(g * (1.0 - g), scalar)

    def inverse(self, a, clamp_counter: ClampCounter | None = None):
        arr, scalar = _as_float_array(a)
        if self.is_identity:
            return _maybe_scalar(arr + 0.0, scalar)
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise DomainError("logit inverse requires arguments in (0, 1)")
        clipped = np.clip(arr, _LOGIT_CLAMP, 1.0 - _LOGIT_CLAMP)
        if clamp_counter is not None:
            clamp_counter.add(np.count_nonzero(clipped != arr))
        out = np.log(clipped) - np.log1p(-clipped)
        return _maybe_scalar(out, scalar)

    def breve(self, a):
        arr, scalar = _as_float_array(a)
        if self.is_identity:
            return _maybe_scalar(np.ones_like(arr), scalar)
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise DomainError("breve for the logit link requires arguments in (0, 1)")
        return _maybe_scalar(arr * (1.0 - arr), scalar)


IDENTITY = LinkFunction("identity")
LOGIT = LinkFunction("logit")


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian product kernel with one positive bandwidth per coordinate.

    The weight between points is ``prod_j K((z_j - z0_j) / h_j)`` with K
    the standard normal density; no 1/h normalisation is applied (it
    cancels in every estimating equation where the kernel appears).
    """

    bandwidth: tuple[float, ...]
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise ConfigurationError(f"unknown kernel family {self.family!r}")
        bw = tuple(float(b) for b in np.atleast_1d(np.asarray(self.bandwidth, dtype=float)))
        if len(bw) == 0 or any(not np.isfinite(b) or b <= 0.0 for b in bw):
            raise ConfigurationError("kernel bandwidths must be positive and finite")
        object.__setattr__(self, "bandwidth", bw)

    @property
    def dim(self) -> int:
        return len(self.bandwidth)

    def scaled(self, factor: float) -> "KernelSpec":
        return KernelSpec(tuple(b * factor for b in self.bandwidth), self.family)

    def weight(self, z, z0) -> float:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        z0 = np.atleast_1d(np.asarray(z0, dtype=float))
        if z.shape != z0.shape or z.shape[-1] != self.dim:
            raise ConfigurationError("kernel arguments must match the bandwidth dimension")
        u = (z - z0) / np.asarray(self.bandwidth)
        return float(_GAUSS_NORM ** self.dim * np.exp(-0.5 * np.dot(u, u)))

    def weights(self, z_eval: np.ndarray, z_data: np.ndarray) -> np.ndarray:
        """Weight matrix of shape (n_eval, n_data)."""
        ze = np.atleast_2d(np.asarray(z_eval, dtype=float))
        zd = np.atleast_2d(np.asarray(z_data, dtype=float))
        h = np.asarray(self.bandwidth)
        if self.dim == 1:
            u = (ze[:, 0, None] - zd[None, :, 0]) / h[0]
            sq = u * u
        else:
            u = (ze[:, None, :] - zd[None, :, :]) / h
            sq = np.einsum("ijk,ijk->ij", u, u)
        return _GAUSS_NORM ** self.dim * np.exp(-0.5 * sq)


@dataclass(frozen=True)
class BasisSpec:
    """Configuration of a constant-free basis expansion.

    ``degrees_of_freedom`` is the exact number of emitted columns; the
    constant function is never among them (the parametric designs carry
    the intercept).
    """

    family: str = "natural_cubic_spline"
    degrees_of_freedom: int = 4

    def __post_init__(self):
        if self.family not in ("natural_cubic_spline", "hermite_tensor"):
            raise ConfigurationError(f"unknown basis family {self.family!r}")
        if int(self.degrees_of_freedom) < 1:
            raise ConfigurationError("degrees_of_freedom must be a positive integer")
        object.__setattr__(self, "degrees_of_freedom", int(self.degrees_of_freedom))


def _hermite_columns(z: np.ndarray, order: int) -> np.ndarray:
    """Probabilists' Hermite polynomials He_1..He_order of a 1-d array."""
    cols = np.empty((z.shape[0], order))
    prev2 = np.ones_like(z)   # He_0
    prev1 = z.copy()          # He_1
    cols[:, 0] = prev1
    for k in range(1, order):
        cur = z * prev1 - k * prev2
        cols[:, k] = cur
        prev2, prev1 = prev1, cur
    return cols


def _graded_multi_indices(dim: int, order: int, count: int) -> list[tuple[int, ...]]:
    """First `count` non-zero tensor exponents sorted by (total degree, lex)."""
    idx = [t for t in np.ndindex(*([order + 1] * dim)) if sum(t) > 0]
    idx.sort(key=lambda t: (sum(t), t))
    return idx[:count]


class BasisExpansion:
    """Fit-then-transform wrapper around a :class:`BasisSpec`.

    Natural cubic splines place ``df + 1`` knots at training quantiles
    (boundary knots at the extremes) and emit ``df`` columns: the natural
    interpolation basis with the redundant first function dropped.  Each
    column has zero second derivative at the boundary knots and continues
    linearly outside them.  Splines are one-dimensional; use the Hermite
    tensor family for multi-dimensional inputs.
    """

    def __init__(self, spec: BasisSpec):
        self.spec = spec
        self._fitted = False
        self._dim = None
        self._knots = None
        self._spline = None       # vectorised CubicSpline through indicator columns
        self._edge_vals = None
        self._edge_slopes = None
        self._hermite_order = None
        self._hermite_index = None

    @property
    def knots(self):
        return None if self._knots is None else self._knots.copy()

    def fit(self, z_train: np.ndarray) -> "BasisExpansion":
        z = np.asarray(z_train, dtype=float)
        z = z.reshape(-1, 1) if z.ndim == 1 else z
        self._dim = z.shape[1]
        df = self.spec.degrees_of_freedom
        if self.spec.family == "natural_cubic_spline":
            if self._dim != 1:
                raise ConfigurationError(
                    "natural cubic splines are one-dimensional; use hermite_tensor for multi-d Z"
                )
            zc = z[:, 0]
            probs = np.linspace(0.0, 1.0, df + 1)
            knots = np.unique(np.quantile(zc, probs))
            if knots.size != df + 1:
                raise ConfigurationError(
                    "training Z has too few distinct quantiles for the requested spline df"
                )
            # columns: natural interpolation splines through indicator data,
            # dropping the first (the set sums to the constant function)
            targets = np.eye(df + 1)[:, 1:]
            cs = CubicSpline(knots, targets, bc_type="natural")
            dcs = cs.derivative()
            self._knots = knots
            self._spline = cs
            self._edge_vals = (targets[0], targets[-1])
            self._edge_slopes = (dcs(knots[0]), dcs(knots[-1]))
        else:
            order = df  # per-coordinate cap; graded truncation keeps df columns
            self._hermite_order = order
            self._hermite_index = _graded_multi_indices(self._dim, order, df)
            if len(self._hermite_index) < df:
                raise ConfigurationError(
                    "hermite_tensor cannot emit the requested degrees_of_freedom"
                )
        self._fitted = True
        return self

    def transform(self, z: np.ndarray) -> np.ndarray:
        if not self._fitted:
            raise StateError("basis evaluated before knot fitting")
        if np.ndim(z) == 1:
            zz = np.asarray(z, dtype=float).reshape(-1, 1)
        else:
            zz = np.asarray(z, dtype=float)
        if zz.shape[1] != self._dim:
            raise ConfigurationError("basis input dimension differs from the training data")
        if self.spec.family == "natural_cubic_spline":
            x = zz[:, 0]
            lo, hi = self._knots[0], self._knots[-1]
            inner = self._spline(np.clip(x, lo, hi))
            below = x < lo
            above = x > hi
            if np.any(below):
                inner[below] = self._edge_vals[0] + np.outer(x[below] - lo, self._edge_slopes[0])
            if np.any(above):
                inner[above] = self._edge_vals[1] + np.outer(x[above] - hi, self._edge_slopes[1])
            return inner
        per_coord = [_hermite_columns(zz[:, j], self._hermite_order) for j in range(self._dim)]
        out = np.empty((zz.shape[0], len(self._hermite_index)))
        for col, alpha in enumerate(self._hermite_index):
            acc = np.ones(zz.shape[0])
            for j, k in enumerate(alpha):
                if k > 0:
                    acc = acc * per_coord[j][:, k - 1]
            out[:, col] = acc
        return out


def basis_eval(expansion: BasisExpansion, z) -> np.ndarray:
    """Basis vector b(z) for a single point."""
    return expansion.transform(np.atleast_1d(np.asarray(z, dtype=float)).reshape(1, -1))[0]


def newton_solve(
    residual,
    jacobian,
    x0,
    tol: float = 1e-10,
    max_iter: int = 60,
    max_halvings: int = 30,
    full_output: bool = False,
    context: dict | None = None,
    merit=None,
    max_step: float | None = None,
):
    """Damped Newton on a square estimating-equation system.

    Accepts a step only when it strictly decreases the residual sup-norm
    (or, when ``merit`` is given, that convex objective whose gradient
    the residual is), halving up to ``max_halvings`` times.
    ``max_step`` caps the sup-norm of each accepted increment, keeping
    the iteration near a consistent starting point when the system has
    spurious far-away roots.  Returns ``x`` with
    ``max|residual(x)| <= tol``; raises :class:`ConvergenceError`
    (carrying the last iterate and its residual norm) on a stalled line
    search or iteration exhaustion.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    r = np.atleast_1d(residual(x))
    norm = float(np.max(np.abs(r))) if np.all(np.isfinite(r)) else np.inf
    score = float(merit(x)) if merit is not None else norm
    norms = [norm]
    for _ in range(max_iter):
        if norm <= tol:
            return (x, {"norms": norms, "iterations": len(norms) - 1}) if full_output else x
        J = np.atleast_2d(jacobian(x))
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            # minimal-norm direction; a truly rootless system then stalls
            # in the line search and reports a convergence failure
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        if not np.all(np.isfinite(step)):
            raise ConvergenceError(
                "non-finite Newton step", last_iterate=x, residual_norm=norm, context=context,
            )
        t = 1.0
        if max_step is not None:
            biggest = float(np.max(np.abs(step)))
            if biggest > max_step:
                t = max_step / biggest
        accepted = False
        for _ in range(max_halvings + 1):
            x_new = x + t * step
            r_new = np.atleast_1d(residual(x_new))
            if np.all(np.isfinite(r_new)):
                norm_new = float(np.max(np.abs(r_new)))
                if merit is not None:
                    score_new = float(merit(x_new))
                    better = np.isfinite(score_new) and (
                        score_new < score or norm_new <= tol
                    )
                else:
                    score_new = norm_new
                    better = norm_new < score
                if better:
                    x, r, norm, score = x_new, r_new, norm_new, score_new
                    norms.append(norm)
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            raise ConvergenceError(
                "Newton line search stalled",
                last_iterate=x, residual_norm=norm, context=context,
            )
    if norm <= tol:
        return (x, {"norms": norms, "iterations": len(norms) - 1}) if full_output else x
    raise ConvergenceError(
        f"Newton failed to reach tol={tol:g} in {max_iter} iterations",
        last_iterate=x, residual_norm=norm, context=context,
    )


def scalar_root(
    f,
    lo: float,
    hi: float,
    tol: float = 1e-12,
    max_expand: int = 60,
    max_iter: int = 200,
):
    """Bracketed bisection/secant hybrid achieving ``|f(root)| <= tol``.

    If ``f(lo) * f(hi) > 0`` the bracket is expanded geometrically up to
    ``max_expand`` doublings before giving up with :class:`NoRootError`.
    """
    lo = float(lo)
    hi = float(hi)
    if not (hi > lo):
        raise ConfigurationError("scalar_root requires lo < hi")
    flo = float(f(lo))
    fhi = float(f(hi))
    if abs(flo) <= tol:
        return lo
    if abs(fhi) <= tol:
        return hi
    expansions = 0
    while flo * fhi > 0.0:
        if expansions >= max_expand:
            raise NoRootError(
                f"no sign change on [{lo:g}, {hi:g}] after {expansions} expansions"
            )
        span = hi - lo
        lo -= span
        hi += span
        flo = float(f(lo))
        fhi = float(f(hi))
        if abs(flo) <= tol:
            return lo
        if abs(fhi) <= tol:
            return hi
        expansions += 1
    width_two_ago = hi - lo
    for it in range(max_iter):
        # secant proposal with a forced bisection whenever the bracket is
        # not shrinking geometrically (guards against one-sided stalls)
        denom = fhi - flo
        force_bisect = (hi - lo) > 0.5 * width_two_ago
        if it >= 2 and force_bisect:
            x = 0.5 * (lo + hi)
        elif denom != 0.0:
            x = hi - fhi * (hi - lo) / denom
            if not (lo < x < hi):
                x = 0.5 * (lo + hi)
        else:
            x = 0.5 * (lo + hi)
        width_two_ago = hi - lo if it % 2 == 0 else width_two_ago
        fx = float(f(x))
        if abs(fx) <= tol:
            return x
        if flo * fx < 0.0:
            hi, fhi = x, fx
        else:
            lo, flo = x, fx
        if hi - lo <= 4.0 * np.finfo(float).eps * max(1.0, abs(lo), abs(hi)):
            if abs(fx) <= tol:
                return x
            raise NoRootError(
                f"bracket collapsed at x={x:g} with |f|={abs(fx):g} > tol"
            )
    raise NoRootError(f"scalar_root exceeded {max_iter} iterations")
