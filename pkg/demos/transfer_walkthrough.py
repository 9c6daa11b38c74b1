"""Walk through one seed of the transfer pipeline and compare downstream methods.

    python3 demos/transfer_walkthrough.py [seed]
"""
import sys
import time

import numpy as np

from learnedprior.config import ExperimentConfig
from learnedprior.experiments import linear_probe_accuracy, prepare, select

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ExperimentConfig()

t0 = time.time()
run = prepare(cfg, seed)  # data, pre-training on the source task, SWAG fit
print(f"source n={len(run.source)}, target train n={len(run.train)}, shift={cfg.synthetic.shift}")
print(f"prior over {run.learned.dim} feature-extractor weights, rank {run.learned.rank}")
print(f"  diag variance range {run.learned.diag_var.min():.2e} .. {run.learned.diag_var.max():.2e}")
print(f"frozen-feature linear probe accuracy {linear_probe_accuracy(run):.3f}")
print(f"setup {time.time() - t0:.1f}s\n")

print(f"{'method':14s} {'chosen':>10s} {'val err':>8s} {'test err':>9s} {'nll':>7s} {'ece':>7s}")
for method in ["bnn_learned", "bnn_iso_mean", "bnn_iso_zero", "map_learned", "map_transfer"]:
    s = select(run, method)  # grid search on the validation split
    print(f"{method:14s} {s.key}={s.value:<8.3g} {s.val.error:8.4f} {s.test.error:9.4f} "
          f"{s.test.nll:7.4f} {s.test.ece:7.4f}")

# reliability of the learned-prior BMA
s = select(run, "bnn_learned")
print("\nreliability (bins with data):")
for b in s.test.reliability_bins:
    if b.count:
        print(f"  conf {b.confidence:.2f}  acc {b.accuracy:.2f}  n={b.count}")
