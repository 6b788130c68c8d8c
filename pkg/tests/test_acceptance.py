"""Acceptance gate on the synthetic benchmark.

Each test checks one numbered criterion at its stated tolerance and records a
PASS/FAIL line that is echoed in the terminal summary. Criteria that the
benchmark does not reach are marked as strict expected failures and are
analysed in the decisions ledger; they still run and report their numbers.
"""

import time
import warnings

import numpy as np
import pytest

from benchmark import SEEDS, benchmark_config, reports, run, verdict
from vfl_lab.attacks import villain_build_trigger
from vfl_lab.config import config_digest
from vfl_lab.experiment import eval_asr, run_pipeline
from vfl_lab.nn_core import grad_check_suite
from vfl_lab.vflip import anomaly_scores, block_mask, complement_mask, identify, thresholds_from_scores

pytestmark = pytest.mark.slow

VILLAIN = ("attack.kind=villain",)
BADVFL = ("attack.kind=badvfl",)
CLEAN = ("attack.kind=none", "defense.mode=none")


def mean(values):
    return float(np.mean(values))


def test_criterion_1_gradient_oracle():
    start = time.perf_counter()
    worst = grad_check_suite(n_networks=20, seed=0)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 10
    assert verdict(1, ok, f"max relative error {worst:.2e} (< 1e-4), {elapsed:.2f} s (< 10 s)")


def test_criterion_2_clean_baseline():
    start = time.perf_counter()
    report, _ = run(*CLEAN, seed=0)
    elapsed = time.perf_counter() - start
    others = [run(*CLEAN, seed=s)[0].acc for s in SEEDS[1:]]
    ok = report.acc >= 0.85 and elapsed < 120
    detail = (f"seed-0 test ACC {report.acc:.4f} (>= 0.85), {elapsed:.1f} s (< 120 s); "
              f"seeds 1,2 for reference {others[0]:.4f}, {others[1]:.4f}")
    assert verdict(2, ok, detail)


def test_criterion_3_attack_potency():
    villain = mean([r.asr_undefended for r in reports(*VILLAIN)])
    badvfl = mean([r.asr_undefended for r in reports(*BADVFL)])
    ok = villain >= 0.90 and badvfl >= 0.80
    assert verdict(3, ok, f"no-defense ASR VILLAIN {villain:.4f} (>= 0.90), BadVFL {badvfl:.4f} (>= 0.80)")


def test_criterion_4_vflip_efficacy():
    start = time.perf_counter()
    run_pipeline(benchmark_config(*VILLAIN), 99)  # one uncached train+defend+eval pair for timing
    elapsed = time.perf_counter() - start
    parts, ok = [], elapsed < 300
    for name, overrides in (("VILLAIN", VILLAIN), ("BadVFL", BADVFL)):
        rs = reports(*overrides)
        asr = mean([r.asr for r in rs])
        drop = 100 * mean([r.acc_undefended - r.acc for r in rs])
        ok = ok and asr <= 0.25 and drop <= 5.0
        parts.append(f"{name} ASR {asr:.4f} (<= 0.25) ACC drop {drop:.2f} pts (<= 5)")
    assert verdict(4, ok, "; ".join(parts) + f"; pair runtime {elapsed:.1f} s (< 300 s)")


@pytest.mark.xfail(strict=True, reason="attacker identified on 88.3% of triggered rows, below 90%; see ledger")
def test_criterion_5_score_separation():
    rs = reports(*VILLAIN)
    attacker = run(*VILLAIN, seed=0)[1].attack.plan.attacker_indices[0]
    flagged = mean([r.flag_rate_trig[attacker] for r in rs])
    benign = [i for i in range(4) if i != attacker]
    worst_clean = max(mean([r.flag_rate_clean[i] for r in rs]) for i in benign)
    badvfl = mean([r.flag_rate_trig[attacker] for r in reports(*BADVFL)])
    ok = flagged >= 0.90 and worst_clean <= 0.05
    detail = (f"VILLAIN attacker flagged on {flagged:.4f} of triggered rows (>= 0.90), worst benign "
              f"clean flag rate {worst_clean:.4f} (<= 0.05); BadVFL attacker flagged {badvfl:.4f} for reference")
    assert verdict(5, ok, detail)


def test_criterion_6_rho_tradeoff():
    rhos = (1.0, 1.5, 2.0, 2.5, 3.0)
    rates = np.zeros((len(SEEDS), len(rhos), 4))
    exact = True
    for k, seed in enumerate(SEEDS):
        _, art = run(*VILLAIN, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scores = anomaly_scores(art.mae, art.clean_emb)
        prev = None
        for m, rho in enumerate(rhos):
            table = art.thresholds.with_rho(rho)
            rates[k, m] = identify(scores, table).flagged.mean(axis=0)
            exact = exact and (prev is None or bool(np.all(table.thresholds >= prev)))
            prev = table.thresholds
    curve = rates.mean(axis=0)  # (rho, participant)
    rises = np.diff(curve, axis=0)
    ok = exact and bool(np.all(rises <= 0.01))
    detail = (f"max rise of mean clean flag rate between consecutive rho {rises.max():+.4f} (<= +0.01), "
              f"thresholds monotone {exact}; mean rate by rho {np.round(curve.mean(axis=1), 4).tolist()}")
    assert verdict(6, ok, detail)


def test_criterion_7_multi_attacker():
    start = time.perf_counter()
    rs = reports(*VILLAIN, "vfl.n_participants=8", "attack.n_attackers=3")
    elapsed = time.perf_counter() - start
    asr0 = mean([r.asr_undefended for r in rs])
    asr = mean([r.asr for r in rs])
    ok = asr0 >= 0.90 and asr <= 0.35 and elapsed < 600
    detail = f"N=8, 3 attackers: no-defense ASR {asr0:.4f} (>= 0.90), VFLIP ASR {asr:.4f} (<= 0.35), {elapsed:.0f} s"
    assert verdict(7, ok, detail)


def test_criterion_8_adaptive_attack():
    by_eta = {}
    for eta in (0.0, 0.25, 0.5):
        rs = reports(*VILLAIN, f"attack.adaptive_eta={eta}")
        by_eta[eta] = (mean([r.asr_undefended for r in rs]), mean([r.asr for r in rs]))
    fall = by_eta[0.0][0] - by_eta[0.5][0]
    rise = max(by_eta[e][1] for e in by_eta) - by_eta[0.0][1]
    ok = fall >= 0.10 and rise <= 0.15
    detail = (f"no-defense ASR eta 0 -> 0.5 falls {100 * fall:.1f} pts (>= 10); VFLIP ASR rises at most "
              f"{100 * rise:+.1f} pts (<= 15); (no-def, VFLIP) by eta "
              + ", ".join(f"{e}: ({a:.3f}, {b:.3f})" for e, (a, b) in by_eta.items()))
    assert verdict(8, ok, detail)


def test_criterion_9_trigger_magnitude():
    asr = {g: mean([r.asr for r in reports(*VILLAIN, f"attack.gamma={g}")]) for g in (0.5, 1.0, 2.0, 3.0)}
    ok = all(v <= 0.35 for v in asr.values())
    detail = "VFLIP ASR by gamma " + ", ".join(f"{g}: {v:.4f}" for g, v in asr.items()) + " (each <= 0.35)"
    assert verdict(9, ok, detail)


def test_criterion_10_exact_invariants():
    start = time.perf_counter()
    checks = {}
    n, d = 4, 3
    checks["mask algebra"] = all(
        np.array_equal(block_mask(i, n, d) + complement_mask(i, n, d), np.ones(n * d))
        and not np.any(block_mask(i, n, d) * complement_mask(i, n, d))
        for i in range(n)
    )
    votes_table = {(3, 0, 1, 0): [True, False, False, False], (2, 2, 2, 2): [False] * 4, (3, 3, 3, 3): [True] * 4}
    ok_votes = True
    for votes, expected in votes_table.items():
        s = np.full((n, n), np.nan)
        for i, v in enumerate(votes):
            for k, j in enumerate(j for j in range(n) if j != i):
                s[j, i] = 2.0 if k < v else 0.0
        ok_votes = ok_votes and identify(s, np.ones(n)).flagged.tolist() == expected
    checks["strict-majority voting"] = ok_votes
    pooled = np.full((1, n, n), np.nan)
    pooled[0, 1:, 0] = [1.0, 2.0, 3.0]
    pooled[0, :, 1:] = 0.0
    t = thresholds_from_scores(pooled, 2.0)
    checks["threshold 3.63299"] = abs(t.thresholds[0] - 3.63299) < 5e-6 and abs(t.sigma[0] - np.sqrt(2 / 3)) < 1e-12
    z = np.random.default_rng(0).standard_normal((1000, 4))
    z = (z - z.mean(axis=0)) / z.std(axis=0) * 0.5
    checks["VILLAIN pattern"] = np.allclose(villain_build_trigger(z, 1.0, 3.0).pattern, [1.5, 1.5, -1.5, -1.5])
    tiny = benchmark_config(
        "data.k_train=300", "data.k_test=100", "data.k_aux=40", "vfl.epochs=2", "vfl.bottom_hidden=8",
        "vfl.top_hidden=8", "vfl.embedding_dim=4", "attack.e_bkd=1", "defense.mae_epochs=1",
        "defense.mae_hidden=8", "defense.mae_latent=4",
    )
    a, art = run_pipeline(tiny, 3)
    b, _ = run_pipeline(tiny, 3)
    fields = ("acc", "asr", "acc_undefended", "asr_undefended", "ident_precision", "ident_recall")
    checks["determinism"] = (
        all(repr(getattr(a, f)) == repr(getattr(b, f)) for f in fields)
        and np.array_equal(a.flag_rate_clean, b.flag_rate_clean)
        and a.config_digest == b.config_digest == config_digest(tiny)
    )
    test = art.data.test
    n_target = int(np.sum(test.labels == 0))
    # ASR denominator excludes target rows: a constant-target top model scores exactly 1.0
    art.session.top_model.layers[-1].weight[:] = 0.0
    art.session.top_model.layers[-1].bias[:] = np.eye(5)[0]
    checks["ASR excludes target rows"] = n_target > 0 and eval_asr(art.session, test, art.attack) == 1.0
    elapsed = time.perf_counter() - start
    failed = [name for name, passed in checks.items() if not passed]
    ok = not failed and elapsed < 5
    detail = f"{len(checks) - len(failed)}/{len(checks)} invariant groups hold, {elapsed:.2f} s (< 5 s)"
    if failed:
        detail += f"; failing: {', '.join(failed)}"
    assert verdict(10, ok, detail)
