"""Tour of the numerical building blocks.

Run:  python3 demos/01_links_kernels_splines.py
"""

import numpy as np

from atrel import (
    IDENTITY,
    LOGIT,
    BasisExpansion,
    BasisSpec,
    KernelSpec,
    newton_solve,
    scalar_root,
)

# ----- link functions ---------------------------------------------------
print("logistic link at 0:", LOGIT.evaluate(0.0))
print("breve(0.5) = gdot(ginv(0.5)):", LOGIT.breve(0.5))
print("identity breve is flat:", IDENTITY.breve(np.array([-3.0, 0.0, 3.0])))

x = np.linspace(-8, 8, 9)
roundtrip = LOGIT.inverse(LOGIT.evaluate(x))
print("logit roundtrip error:", np.max(np.abs(roundtrip - x)))

# ----- Gaussian product kernels -----------------------------------------
kernel = KernelSpec(bandwidth=(0.5,))
print("\nkernel weight at zero gap:", kernel.weight([1.0], [1.0]))
print("weight decays with distance:",
      [round(kernel.weight([g], [0.0]), 4) for g in (0.0, 0.5, 1.0, 2.0)])

# scale equivariance: K_h(z) = K(z / h)
print("h=2 at gap 2 equals h=1 at gap 1:",
      KernelSpec((2.0,)).weight([2.0], [0.0]) == KernelSpec((1.0,)).weight([1.0], [0.0]))

# ----- basis expansions --------------------------------------------------
rng = np.random.default_rng(0)
z = rng.normal(size=500)

spline = BasisExpansion(BasisSpec("natural_cubic_spline", 5)).fit(z)
mat = spline.transform(z)
print("\nnatural spline columns:", mat.shape[1], "(constant-free)")
beyond = spline.transform(np.array([z.max() + 0.5, z.max() + 1.0, z.max() + 1.5]))
print("linear tails (2nd difference beyond the boundary):",
      np.abs(beyond[2] - 2 * beyond[1] + beyond[0]).max())

hermite = BasisExpansion(BasisSpec("hermite_tensor", 3)).fit(z)
print("probabilists' Hermite at z=2:", hermite.transform(np.array([[2.0]]))[0])

# ----- solvers ------------------------------------------------------------
root = newton_solve(
    lambda b: np.array([b[0] ** 2 - 4.0, b[1] - 1.0]),
    lambda b: np.array([[2.0 * b[0], 0.0], [0.0, 1.0]]),
    np.array([1.0, 0.0]),
)
print("\nNewton on a decoupled system:", root)
print("bracketed root of g(x) - 0.5:",
      scalar_root(lambda v: LOGIT.evaluate(v) - 0.5, -4.0, 4.0))
