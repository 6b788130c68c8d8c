"""
Split learning across four participants
=======================================

Four parties each hold 10 of the 40 feature columns of the same samples.
Each runs a small bottom network that turns its columns into a 16-dim
embedding; the server concatenates the four embeddings and owns the top
network and the labels.
"""

import numpy as np

from vfl_lab.data import generate_synthetic, minmax_normalize, partition_vertical
from vfl_lab.nn_core import SgdConfig
from vfl_lab.protocol import infer, new_session, train_vfl

# A 5-class problem: every class has a prototype spanning all 40 columns,
# so every participant's block carries (weak) information about the label.
ds = minmax_normalize(generate_synthetic(5, 40, 8000, 2000, 500, separation=0.45, seed=0))
data = partition_vertical(ds, 4, (0.8, 0.16, 0.04), seed=0)
print("block widths:", data.spec.widths())
print("train / test / aux rows:", data.train.n_samples, data.test.n_samples, data.aux.n_samples)

# Bottom models 10 -> 32 -> 32 -> 32 -> 16, top model 64 -> 64 -> 32 -> 5 over the concatenation.
session = new_session(data.spec.widths(), 16, 5, sgd=SgdConfig(0.1, 128), seed=0)
stats, store = train_vfl(session, data.train, 30)
for s in stats[::5] + [stats[-1]]:
    print(f"epoch {s.epoch:2d}  loss {s.loss:.4f}  train acc {s.accuracy:.4f}")

pred = infer(session, data.test.blocks)
print(f"test accuracy {np.mean(pred == data.test.labels):.4f}")

# The server kept what it saw in the last epoch: one 64-dim row per training sample.
print("stored embeddings:", store.embeddings.shape)
