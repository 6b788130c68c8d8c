"""
A VILLAIN backdoor and the masked-autoencoder defense
=====================================================

Participant 1 is malicious. From epoch 6 on it adds a +-3 sigma pattern to
its embedding for half of the target-label (class 0) training rows. At test
time it adds the pattern to every row, hoping the server predicts class 0.

The server fits an autoencoder on the embeddings of the last training epoch,
scores how well each block can be rebuilt from each other block, and removes
blocks that a majority of the others "disagree" with.
"""

import numpy as np

from vfl_lab import load_config, run_pipeline
from vfl_lab.vflip import anomaly_scores, identify

cfg = load_config(overrides=["attack.kind=villain", "defense.mode=vflip"])
report, art = run_pipeline(cfg, seed=0)

print(f"no defense : ACC {report.acc_undefended:.4f}  ASR {report.asr_undefended:.4f}")
print(f"VFLIP      : ACC {report.acc:.4f}  ASR {report.asr:.4f}")
print("attacker flagged on", f"{report.flag_rate_trig[1]:.3f}", "of triggered rows")
print("clean-row flag rate per participant:", np.round(report.flag_rate_clean, 4))

# Look inside one triggered row: s[j, i] is the error of block i rebuilt from block j.
scores = anomaly_scores(art.mae, art.trig_emb[0])
result = identify(scores, art.thresholds)
np.set_printoptions(precision=2, suppress=True)
print("thresholds t_i:", art.thresholds.thresholds)
print("score table (rows j = source, columns i = target):")
print(scores)
print("votes:", result.votes, " flagged:", result.flagged)
