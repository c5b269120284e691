"""Transfer-quality metrics against a validation fit.

When a validation coefficient vector is available (here: a GLM on a
large labelled draw from the target population), the quality of a
transferred model is summarised by the relative mean square prediction
error, the agreement of the mean-thresholded classifiers, and the AUC
on labelled rows.

Run:  python3 demos/05_transfer_metrics.py
"""

import numpy as np

from atrel import AtrelConfig, fit_atrel
from atrel.comparators import fit_source_glm
from atrel.metrics import metric_auc, metric_cc, metric_fcr, metric_rmspe
from atrel.model import design_matrix
from atrel.simbench import SimConfig, default_spec, gen_population, true_beta

config = SimConfig(id="i", n=500, n_target=1000, seed=21)
data = gen_population(config)
spec = default_spec()

beta_valid = true_beta(config, seed=99, rows=300_000)  # validation fit
a_tgt = design_matrix(data.target_x, data.columns, spec.a_columns, constant=True)

beta_source = fit_source_glm(data, spec)
est = fit_atrel(data, spec, AtrelConfig(folds=5, seed=21, bootstrap_reps=0))
beta_atrel = est.loading_values()

print("validation fit:", np.round(beta_valid, 3))
print()
print("%-10s %10s %8s %8s" % ("model", "rmspe", "cc", "fcr"))
for name, beta in (("source", beta_source), ("atrel", beta_atrel)):
    print("%-10s %10.4f %8.3f %8.3f" % (
        name,
        metric_rmspe(beta, beta_valid, a_tgt, spec.link),
        metric_cc(beta, beta_valid, a_tgt, spec.link),
        metric_fcr(beta, beta_valid, a_tgt, spec.link),
    ))

# AUC needs labels: score a fresh labelled draw from the target population
labelled = gen_population(SimConfig(id="i", n=1000, n_target=1000, seed=77))
a_lab = design_matrix(labelled.source_x, labelled.columns, spec.a_columns,
                      constant=True)
scores = spec.link.evaluate(a_lab @ beta_atrel)
print("\nAUC of the transferred model on labelled rows:",
      round(metric_auc(scores, labelled.source_y), 3))
