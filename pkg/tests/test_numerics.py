"""Links, kernels, bases, and the two solvers."""

import numpy as np
import pytest

from atrel.exceptions import (
    ConfigurationError,
    ConvergenceError,
    DomainError,
    NoRootError,
    StateError,
)
from atrel.numerics import (
    IDENTITY,
    LOGIT,
    BasisExpansion,
    BasisSpec,
    ClampCounter,
    KernelSpec,
    LinkFunction,
    newton_solve,
    scalar_root,
)


class TestLinks:
    def test_logit_center(self):
        assert LOGIT.evaluate(0.0) == 0.5

    def test_logit_breve_at_half(self):
        # gdot(x) = g(1-g) and ginv(0.5) = 0, so breve(0.5) = 1/4
        assert LOGIT.breve(0.5) == pytest.approx(0.25, abs=1e-15)

    def test_identity_breve_is_one(self):
        assert IDENTITY.breve(-2.7) == 1.0
        assert np.all(IDENTITY.breve(np.linspace(-5, 5, 11)) == 1.0)

    def test_breve_equals_deriv_of_inverse(self):
        a = np.linspace(0.01, 0.99, 23)
        direct = LOGIT.derivative(LOGIT.inverse(a))
        assert np.max(np.abs(LOGIT.breve(a) - direct)) < 1e-12

    def test_roundtrip_identity_link(self):
        x = np.linspace(-1e6, 1e6, 41)
        assert np.all(IDENTITY.inverse(IDENTITY.evaluate(x)) == x)

    def test_roundtrip_logit_within_float_information(self):
        # Probabilities near 1 carry log-odds only to ulp(1)/exp(-|x|);
        # the clamp at 1e-12 additionally caps |log-odds| at ~27.63.
        x = np.linspace(-27, 27, 541)
        err = np.abs(LOGIT.inverse(LOGIT.evaluate(x)) - x)
        bound = np.maximum(1e-10, 8 * np.finfo(float).eps * np.exp(np.abs(x)))
        assert np.all(err <= bound)

    def test_clamp_counter_and_cap(self):
        counter = ClampCounter()
        got = LOGIT.inverse(LOGIT.evaluate(30.0), clamp_counter=counter)
        assert counter.count == 1
        assert got == pytest.approx(np.log(1 - 1e-12) - np.log(1e-12))

    def test_logit_inverse_domain(self):
        with pytest.raises(DomainError):
            LOGIT.inverse(1.0)
        with pytest.raises(DomainError):
            LOGIT.inverse(np.array([0.2, -0.1]))

    def test_derivative_positive(self):
        x = np.linspace(-30, 30, 101)
        assert np.all(LOGIT.derivative(x) > 0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            LinkFunction("probit")


class TestKernel:
    def test_standard_normal_at_zero(self):
        k = KernelSpec((1.0,))
        assert k.weight([0.0], [0.0]) == pytest.approx(0.3989422804014327, abs=1e-12)

    def test_gap_one(self):
        k = KernelSpec((1.0,))
        assert k.weight([1.0], [0.0]) == pytest.approx(0.24197072451914337, abs=1e-12)

    def test_scale_equivariance(self):
        assert KernelSpec((2.0,)).weight([2.0], [0.0]) == pytest.approx(
            KernelSpec((1.0,)).weight([1.0], [0.0]), abs=1e-16
        )

    def test_symmetry_and_decay(self):
        k = KernelSpec((0.7, 1.3))
        rng = np.random.default_rng(0)
        for _ in range(20):
            z, z0 = rng.normal(size=2 * k.dim).reshape(2, -1)
            assert k.weight(z, z0) == pytest.approx(k.weight(z0, z), abs=0)
        gaps = np.linspace(0, 4, 25)
        vals = [KernelSpec((1.0,)).weight([g], [0.0]) for g in gaps]
        assert np.all(np.diff(vals) < 0)

    def test_product_form_matches_matrix(self):
        k = KernelSpec((0.5, 2.0))
        rng = np.random.default_rng(1)
        ze = rng.normal(size=(6, 2))
        zd = rng.normal(size=(9, 2))
        mat = k.weights(ze, zd)
        for i in range(6):
            for j in range(9):
                assert mat[i, j] == pytest.approx(k.weight(ze[i], zd[j]), rel=1e-12)

    def test_nonpositive_bandwidth(self):
        with pytest.raises(ConfigurationError):
            KernelSpec((0.0,))
        with pytest.raises(ConfigurationError):
            KernelSpec((1.0, -2.0))


def _truncated_power_natural_basis(knots, z):
    """Independent oracle: truncated-power natural cubic spline basis.

    With knots xi_1..xi_K the natural spline space is spanned by
    {1, z, N_1..N_{K-2}} where N_j = d_j - d_{K-1} and
    d_j(z) = [(z - xi_j)_+^3 - (z - xi_K)_+^3] / (xi_K - xi_j).
    Boundary linearity is explicit: all cubic terms cancel beyond xi_K.
    """
    knots = np.asarray(knots)
    K = knots.size
    cols = [z]
    def d(j):
        return (np.maximum(z - knots[j], 0.0) ** 3
                - np.maximum(z - knots[K - 1], 0.0) ** 3) / (knots[K - 1] - knots[j])
    for j in range(K - 2):
        cols.append(d(j) - d(K - 2))
    return np.column_stack(cols)


class TestNaturalSpline:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.z = rng.normal(size=400)
        self.basis = BasisExpansion(BasisSpec("natural_cubic_spline", 4)).fit(self.z)

    def test_column_count_and_no_constant(self):
        mat = self.basis.transform(self.z)
        assert mat.shape == (400, 4)
        assert np.std(mat, axis=0).min() > 1e-6

    def test_spans_truncated_power_oracle(self):
        # same spline space: each construction reproduces the other by
        # least squares (with intercept) to float precision, evaluated at
        # the knots and on a surrounding grid
        knots = self.basis.knots
        grid = np.unique(np.concatenate([knots, np.linspace(self.z.min() - 1,
                                                            self.z.max() + 1, 113)]))
        mine = self.basis.transform(grid)
        oracle = _truncated_power_natural_basis(knots, grid)
        for target, source in ((mine, oracle), (oracle, mine)):
            design = np.column_stack([np.ones(grid.size), source])
            coef, *_ = np.linalg.lstsq(design, target, rcond=None)
            recon = design @ coef
            assert np.max(np.abs(recon - target)) < 1e-8

    def test_linear_tails(self):
        hi = self.z.max()
        pts = self.basis.transform(np.array([hi + 0.5, hi + 1.0, hi + 1.5]))
        assert np.max(np.abs(pts[2] - 2 * pts[1] + pts[0])) < 1e-10
        lo = self.z.min()
        pts = self.basis.transform(np.array([lo - 1.5, lo - 1.0, lo - 0.5]))
        assert np.max(np.abs(pts[2] - 2 * pts[1] + pts[0])) < 1e-10

    def test_zero_second_derivative_at_boundaries(self):
        for knot in (self.basis.knots[0], self.basis.knots[-1]):
            eps = 1e-5
            sign = 1.0 if knot == self.basis.knots[0] else -1.0
            pts = self.basis.transform(knot + sign * np.array([0.0, eps, 2 * eps]))
            second = (pts[2] - 2 * pts[1] + pts[0]) / eps ** 2
            assert np.max(np.abs(second)) < 1e-3

    def test_deterministic(self):
        a = self.basis.transform(self.z[:50])
        b = self.basis.transform(self.z[:50])
        assert np.array_equal(a, b)

    def test_transform_before_fit(self):
        with pytest.raises(StateError):
            BasisExpansion(BasisSpec("natural_cubic_spline", 4)).transform(self.z)


class TestHermite:
    def test_order_two_values(self):
        basis = BasisExpansion(BasisSpec("hermite_tensor", 2)).fit(np.zeros((3, 1)))
        assert np.allclose(basis.transform(np.array([[0.0]]))[0], [0.0, -1.0])
        assert np.allclose(basis.transform(np.array([[2.0]]))[0], [2.0, 3.0])

    def test_recurrence_against_direct_polynomials(self):
        basis = BasisExpansion(BasisSpec("hermite_tensor", 5)).fit(np.zeros((3, 1)))
        z = np.linspace(-3, 3, 41)
        got = basis.transform(z.reshape(-1, 1))
        expect = np.column_stack([
            z, z ** 2 - 1, z ** 3 - 3 * z, z ** 4 - 6 * z ** 2 + 3,
            z ** 5 - 10 * z ** 3 + 15 * z,
        ])
        assert np.max(np.abs(got - expect)) < 1e-9

    def test_tensor_exact_column_count(self):
        basis = BasisExpansion(BasisSpec("hermite_tensor", 5)).fit(np.zeros((4, 2)))
        assert basis.transform(np.ones((6, 2))).shape == (6, 5)


class TestNewton:
    def test_linear(self):
        root = newton_solve(lambda x: x - 3.0, lambda x: np.eye(1), np.zeros(1))
        assert root[0] == pytest.approx(3.0, abs=1e-10)

    def test_decoupled_two_dim(self):
        root = newton_solve(
            lambda x: np.array([x[0] ** 2 - 4.0, x[1] - 1.0]),
            lambda x: np.array([[2.0 * x[0], 0.0], [0.0, 1.0]]),
            np.array([1.0, 0.0]),
        )
        assert np.allclose(root, [2.0, 1.0], atol=1e-9)

    def test_logistic_score_matches_grid_refinement_oracle(self):
        rng = np.random.default_rng(11)
        x = np.column_stack([np.ones(10), rng.normal(size=10)])
        y = (rng.random(10) < LOGIT.evaluate(0.4 + 0.8 * x[:, 1])).astype(float)

        def score(beta):
            return x.T @ (y - LOGIT.evaluate(x @ beta)) / 10.0

        def jac(beta):
            d = LOGIT.derivative(x @ beta)
            return -(x.T * d) @ x / 10.0

        root = newton_solve(score, jac, np.zeros(2), tol=1e-12)

        # nested grid refinement minimising the score norm over a box
        lo = np.array([-4.0, -4.0])
        hi = np.array([4.0, 4.0])
        for _ in range(12):
            g0 = np.linspace(lo[0], hi[0], 21)
            g1 = np.linspace(lo[1], hi[1], 21)
            norms = np.empty((21, 21))
            for i, b0 in enumerate(g0):
                for j, b1 in enumerate(g1):
                    norms[i, j] = np.max(np.abs(score(np.array([b0, b1]))))
            i, j = np.unravel_index(np.argmin(norms), norms.shape)
            span0 = (hi[0] - lo[0]) / 10
            span1 = (hi[1] - lo[1]) / 10
            lo = np.array([g0[i] - span0 / 2, g1[j] - span1 / 2])
            hi = np.array([g0[i] + span0 / 2, g1[j] + span1 / 2])
        oracle = (lo + hi) / 2
        assert np.max(np.abs(root - oracle)) < 1e-6

    def test_monotone_accepted_norms(self):
        def residual(x):
            return np.array([np.arctan(x[0]) - 0.7, x[1] ** 3 - 2.0])

        def jac(x):
            return np.array([[1.0 / (1.0 + x[0] ** 2), 0.0],
                             [0.0, 3.0 * x[1] ** 2 + 1e-9]])

        _, info = newton_solve(residual, jac, np.array([5.0, 2.0]),
                               full_output=True)
        norms = info["norms"]
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_failure_carries_iterate(self):
        with pytest.raises(ConvergenceError) as err:
            newton_solve(lambda x: np.array([x[0] ** 2 + 1.0]),
                         lambda x: np.array([[2.0 * x[0]]]),
                         np.array([1.0]), max_iter=8)
        assert err.value.residual_norm is not None
        assert err.value.last_iterate is not None


class TestScalarRoot:
    def test_linear(self):
        assert scalar_root(lambda x: x - 1.0, 0.0, 2.0) == pytest.approx(1.0, abs=1e-12)

    def test_logit_half(self):
        got = scalar_root(lambda x: LOGIT.evaluate(x) - 0.5, -4.0, 4.0)
        assert got == pytest.approx(0.0, abs=1e-10)

    def test_weighted_moment_matches_newton_oracle(self):
        rng = np.random.default_rng(3)
        w = rng.random(5) + 0.1
        y = rng.random(5)
        c = rng.normal(size=5)

        def f(x):
            return float(w @ (y - LOGIT.evaluate(c + x)))

        root = scalar_root(f, -10.0, 10.0, tol=1e-14)
        x = 0.0
        for _ in range(200):
            g = LOGIT.evaluate(c + x)
            fx = float(w @ (y - g))
            fpx = -float(w @ (g * (1 - g)))
            x_new = x - fx / fpx
            if abs(x_new - x) < 1e-15:
                x = x_new
                break
            x = x_new
        assert root == pytest.approx(x, abs=1e-10)

    def test_bracket_expansion(self):
        got = scalar_root(lambda x: x - 50.0, 0.0, 1.0)
        assert got == pytest.approx(50.0, abs=1e-9)

    def test_no_root_error(self):
        with pytest.raises(NoRootError):
            scalar_root(lambda x: x ** 2 + 1.0, -1.0, 1.0, max_expand=5)
