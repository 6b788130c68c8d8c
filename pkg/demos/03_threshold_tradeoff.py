"""
Choosing rho
============

t_i = mu_i + rho * sigma_i. A small rho catches more triggered blocks and
also flags more clean ones. Only the thresholds depend on rho, so one trained
session and autoencoder serve the whole curve.
"""

import warnings

import numpy as np

from vfl_lab import load_config, run_pipeline
from vfl_lab.vflip import anomaly_scores, identify

cfg = load_config(overrides=["attack.kind=villain"])
report, art = run_pipeline(cfg, seed=1)
attacker = art.attack.plan.attacker_indices[0]

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    clean = anomaly_scores(art.mae, art.clean_emb)
    trig = anomaly_scores(art.mae, art.trig_emb)

print(" rho   clean flag rate (mean over participants)   attacker flagged on triggered rows")
for rho in (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0):
    table = art.thresholds.with_rho(rho)
    c = identify(clean, table).flagged.mean()
    a = identify(trig, table).flagged[:, attacker].mean()
    print(f"{rho:4.1f}   {c:8.4f}{'':34s}{a:8.4f}")
