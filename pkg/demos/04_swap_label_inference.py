"""
Guessing labels from gradient magnitudes
========================================

Without label knowledge the attacker must find target-label rows itself.
For a candidate row it records the norm of the gradient the server sends
back, later uploads the embedding of a known class-0 auxiliary sample in
that row's place and compares the two norms. A row counts as class 0 when
its first gradient was below the batch mean and the swap did not blow the
gradient up tenfold.

On this benchmark one block out of four moves the server's loss too little
for the tenfold cut to separate anything, and the guess stays near chance.
"""

import numpy as np

from vfl_lab import load_config, new_session
from vfl_lab.attacks import NON_TARGET, TARGET, UNKNOWN, infer_labels_swap
from vfl_lab.experiment import build_dataset

data = build_dataset(load_config())
session = new_session(data.spec.widths(), 16, 5, seed=0)
inferred = infer_labels_swap(session, data.train, data.aux, attacker=1, target_label=0, budget=0.5, epochs=5)

truth = data.train.labels == 0
for name, code in (("target", TARGET), ("non-target", NON_TARGET), ("unknown", UNKNOWN)):
    rows = inferred.flags == code
    print(f"{name:10s} {rows.sum():5d} rows, {np.mean(truth[rows]) if rows.any() else float('nan'):.3f} truly class 0")
print(f"accuracy over decided rows: {inferred.accuracy(data.train.labels, 0):.3f}")
print(f"share of class 0 overall:    {truth.mean():.3f}")
