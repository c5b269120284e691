"""Compare the doubly robust fit against the baseline estimators.

Four alternatives on one draw: the source-only GLM, importance weighting
with a parametric density ratio, the fully parametric doubly robust
equation, and cross-fitted double machine learning on a spline-
interaction expansion.

Run:  python3 demos/03_comparators.py
"""

import numpy as np

from atrel import AtrelConfig, fit_atrel
from atrel.comparators import (
    ComparatorSpec,
    fit_dml_be,
    fit_iw_only,
    fit_parametric_dr,
    fit_source_glm,
)
from atrel.simbench import SimConfig, default_spec, gen_population, true_beta

config = SimConfig(id="i", n=500, n_target=1000, seed=3)
data = gen_population(config)
spec = default_spec()

print("truth oracle (large target draw)...")
truth = true_beta(config, seed=1, rows=300_000)
print("beta0:", np.round(truth, 3))


def show(name, beta):
    err = np.asarray(beta) - truth
    print("%-12s %s   max|err| %.3f"
          % (name, np.round(np.asarray(beta), 3), np.abs(err).max()))


show("source", fit_source_glm(data, spec))
show("iw", fit_iw_only(data, spec))
show("parametric", fit_parametric_dr(data, spec))
show("dml_be", fit_dml_be(data, spec, ComparatorSpec(method="dml_be", seed=3)))
est = fit_atrel(data, spec, AtrelConfig(folds=5, seed=3, bootstrap_reps=0))
show("atrel", est.loading_values())
