"""Look at the learned prior: its leading directions, loss along them and the scale sweep.

    python3 demos/prior_geometry.py [seed]
"""
import sys

import numpy as np

from learnedprior.config import ExperimentConfig
from learnedprior.experiments import fit, prepare, score, spec_for
from learnedprior.geometry import perturbation_scan, random_directions, top_singular_directions
from learnedprior.pipeline import fit_head

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
run = prepare(ExperimentConfig(), seed)
prior = run.learned

top = top_singular_directions(prior, 3)
print("singular values of the deviation matrix:", np.round(top.singular_values, 4))

# test loss along filter-normalized directions, head frozen at a probe fit
base = fit_head(run.model, prior.mean, run.train, seed)
grid = np.linspace(-0.3, 0.3, 7)
testset = (run.test.features, run.test.labels)
s_top = perturbation_scan(run.model, base, top, grid, testset)
s_rnd = perturbation_scan(run.model, base, random_directions(prior.dim, 10, seed), grid, testset)
print("\n  t      top-3 loss  random loss")
for j, t in enumerate(grid):
    print(f"{t:+.2f}   {s_top.losses[:, j].mean():10.4f}  {s_rnd.losses[:, j].mean():10.4f}")

# rescaling the prior: too small over-constrains, too large forgets the source
print("\nlambda   test error (BNN, learned prior)")
for lam in [1, 10, 100, 1e3, 1e4, 1e5]:
    err = score(run, fit(run, spec_for(run, "bnn_learned", lam=lam))).error
    print(f"{lam:8g} {err:.4f}")
