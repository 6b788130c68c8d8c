import math

import numpy as np
import pytest

import vfl_lab.experiment as ex
from vfl_lab.attacks import VILLAIN, AttackPlan, BackdoorAttack, TriggerSpec
from vfl_lab.config import config_digest, load_config
from vfl_lab.data import Split
from vfl_lab.errors import ConfigurationError, DataError
from vfl_lab.experiment import (
    BdtDefense,
    SweepGrid,
    bdt_noise,
    dump_scores,
    eval_acc,
    eval_asr,
    read_results,
    read_score_dump,
    results_header,
    run_pipeline,
    sweep,
)
from vfl_lab.nn_core import Layer, Mlp, SgdConfig
from vfl_lab.protocol import VflSession, top_logits
from vfl_lab.vflip import fit_thresholds, train_mae

C = 5


def linear(weight, bias=None):
    weight = np.asarray(weight, dtype=np.float64)
    return Mlp([Layer(weight, np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, float))])


def oracle_session(top_bias=None, top_scale=1.0):
    """Participant 0 passes its 5 features through; the top model reads them as logits."""
    bottoms = [linear(np.eye(C)), linear(np.zeros((3, C)))]
    top_w = np.zeros((2 * C, C))
    top_w[:C] = top_scale * np.eye(C)
    return VflSession(bottoms, linear(top_w, top_bias), SgdConfig(0.1), np.ones(2))


def one_hot_split(labels):
    labels = np.asarray(labels)
    return Split((np.eye(C)[labels], np.zeros((labels.size, 3))), labels, np.arange(labels.size))


BALANCED = one_hot_split(np.tile(np.arange(C), 40))


def test_perfect_classifier_accuracy():
    assert eval_acc(oracle_session(), BALANCED) == 1.0


def test_constant_class_accuracy_is_chance():
    session = oracle_session(top_bias=np.eye(C)[0], top_scale=0.0)
    assert eval_acc(session, BALANCED) == pytest.approx(0.2)


def test_identity_defense_same_accuracy():
    session = oracle_session()
    assert eval_acc(session, BALANCED, defense=lambda h: h) == eval_acc(session, BALANCED)


def test_accuracy_empty_split():
    with pytest.raises(DataError):
        eval_acc(oracle_session(), one_hot_split(np.zeros(0, int)))


def target_attack():
    """Attacker on participant 1 whose trigger adds nothing."""
    attack = BackdoorAttack(AttackPlan(VILLAIN, (1,), target_label=2), true_train_labels=np.zeros(1, int))
    attack.triggers[1] = TriggerSpec(np.arange(C), np.zeros(C), 0.0, 0.0)
    return attack


def test_asr_target_logit_defense():
    def always_target(h):
        out = np.zeros_like(h)
        out[:, 2] = 10.0
        return out

    attack = target_attack()
    assert eval_asr(oracle_session(), BALANCED, attack, always_target) == 1.0


def test_asr_excludes_target_rows():
    # a perfect clean classifier with an empty trigger: no non-target row lands on the target
    attack = target_attack()
    assert eval_asr(oracle_session(), BALANCED, attack) == 0.0
    # with a constant-target model every counted row hits, and target rows are not in the denominator
    session = oracle_session(top_bias=np.eye(C)[2], top_scale=0.0)
    assert eval_asr(session, BALANCED, attack) == 1.0


def test_asr_no_non_target_rows():
    attack = target_attack()
    with pytest.raises(DataError):
        eval_asr(oracle_session(), one_hot_split(np.full(4, 2)), attack)


def test_bdt_zero_noise_identity(rng):
    h = rng.standard_normal((4, 6))
    np.testing.assert_array_equal(bdt_noise(h, 0.0, rng), h)


def test_bdt_noise_changes_every_value(rng):
    h = rng.standard_normal((4, 6))
    assert np.all(bdt_noise(h, 0.1, rng) != h)
    with pytest.raises(ConfigurationError):
        bdt_noise(h, -1.0, rng)


def test_bdt_defense_seeded(rng):
    h = rng.standard_normal((4, 6))
    np.testing.assert_array_equal(BdtDefense(0.3, 1)(h), BdtDefense(0.3, 1)(h))


# -- score dump ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_mae():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((200, 2))
    h = np.concatenate([base * (i + 1) + 0.1 * rng.standard_normal((200, 2)) for i in range(4)], axis=1)
    mae, _ = train_mae(h, 4, epochs=3, hidden=(8,), latent=4)
    return mae, fit_thresholds(mae, h, 2.0), h


def test_score_dump_shape_join_and_round_trip(tmp_path, tiny_mae):
    mae, t, h = tiny_mae
    clean, trig = h[:5], h[5:8] + 3.0
    path = tmp_path / "scores.csv"
    table = dump_scores(mae, t, clean, trig, path, np.arange(5) % 3, np.ones(3, int), digest="abc")
    assert table.size == (5 + 3) * 4 * 3
    np.testing.assert_array_equal(table["threshold_i"], t.thresholds[table["target_i"]])
    assert np.all(table["source_j"] != table["target_i"])
    assert table["triggered_flag"].sum() == 3 * 4 * 3
    back = read_score_dump(path)
    assert back.dtype == table.dtype
    for name in table.dtype.names:
        np.testing.assert_array_equal(back[name], table[name])
    assert path.read_text().startswith("# config_digest=abc\n")


def test_score_dump_unwritable(tmp_path, tiny_mae):
    mae, t, h = tiny_mae
    with pytest.raises(OSError):
        dump_scores(mae, t, h[:2], h[:0], tmp_path / "missing" / "s.csv", np.zeros(2, int), np.zeros(0, int))


# -- runs and sweeps ----------------------------------------------------------------------

TINY = (
    "data.k_train=300", "data.k_test=100", "data.k_aux=40", "vfl.epochs=3", "vfl.bottom_hidden=8",
    "vfl.top_hidden=8", "vfl.embedding_dim=4", "vfl.batch_size=32", "attack.e_bkd=1",
    "defense.mae_epochs=2", "defense.mae_hidden=16", "defense.mae_latent=4",
)


def tiny_config(*extra):
    return load_config(overrides=TINY + extra)


def report_values(r):
    return (r.acc, r.asr, r.acc_undefended, r.asr_undefended, r.ident_precision, r.ident_recall,
            r.flag_rate_clean.tolist(), r.flag_rate_trig.tolist(), r.config_digest)


def test_pipeline_bit_exact_per_digest_and_seed():
    cfg = tiny_config()
    a, _ = run_pipeline(cfg, 4)
    b, _ = run_pipeline(tiny_config(), 4)
    assert repr(report_values(a)) == repr(report_values(b))
    assert a.config_digest == config_digest(cfg)


def test_pipeline_without_attack_or_defense():
    r, art = run_pipeline(tiny_config("attack.kind=none", "defense.mode=none"), 0)
    assert art.attack is None and art.mae is None
    assert math.isnan(r.asr) and r.acc == r.acc_undefended
    assert np.all(np.isnan(r.flag_rate_clean))


def test_pipeline_reports_identification():
    r, art = run_pipeline(tiny_config(), 0)
    assert r.flag_rate_clean.shape == (4,) and r.flag_rate_trig.shape == (4,)
    assert 0.0 <= r.acc <= 1.0 and 0.0 <= r.asr <= 1.0
    emb = art.clean_emb
    assert emb.shape == (art.data.test.n_samples, 16)
    np.testing.assert_array_equal(top_logits(art.session, emb).shape, (emb.shape[0], 5))


def test_empty_grid_header_only(tmp_path):
    out = tmp_path / "r.csv"
    rows = sweep(tiny_config(), SweepGrid("gamma", ()), out)
    assert rows == []
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config_digest=")
    assert lines[1].split(",") == results_header(4)
    assert len(lines) == 2


def test_results_header_columns():
    head = results_header(2)
    assert head[:5] == ["axis", "value", "seed", "acc", "asr"]
    assert head[5:9] == ["flag_rate_clean_0", "flag_rate_clean_1", "flag_rate_trig_0", "flag_rate_trig_1"]
    assert head[9:13] == ["ident_precision", "ident_recall", "runtime_s", "config_digest"]


@pytest.mark.parametrize("axis,values", [("gamma", (0.0,)), ("poisoning_budget", (0.0,)), ("eta", (1.5,)),
                                         ("rho", (-1.0,)), ("lr", (1.0,))])
def test_grid_validation(axis, values):
    with pytest.raises(ConfigurationError):
        SweepGrid(axis, values)


def test_sweep_records_failure_and_continues(tmp_path, monkeypatch):
    real = ex.run_pipeline

    def flaky(cfg, seed):
        if cfg.attack.gamma == 2.0:
            raise DataError("synthetic failure")
        return real(cfg, seed)

    monkeypatch.setattr(ex, "run_pipeline", flaky)
    out = tmp_path / "r.csv"
    sweep(tiny_config(), SweepGrid("gamma", (1.0, 2.0), seeds=(0,)), out)
    rows = read_results(out)
    assert [r["value"] for r in rows] == ["1.0", "2.0"]
    assert rows[0]["error"] == "" and rows[0]["acc"] != ""
    assert rows[1]["acc"] == "" and "synthetic failure" in rows[1]["error"]


def test_rho_sweep_matches_independent_runs():
    base = tiny_config()
    rows = sweep(base, SweepGrid("rho", (1.0, 3.0), seeds=(1,)))
    for row, rho in zip(rows, (1.0, 3.0)):
        alone, _ = run_pipeline(ex.config_at(base, "rho", rho), 1)
        assert row["asr"] == repr(alone.asr) and row["acc"] == repr(alone.acc)
        assert row["config_digest"] == alone.config_digest


def test_sweep_rows_in_grid_order():
    rows = sweep(tiny_config(), SweepGrid("eta", (0.0, 0.5), seeds=(0, 1)))
    assert [(r["value"], r["seed"]) for r in rows] == [("0.0", "0"), ("0.0", "1"), ("0.5", "0"), ("0.5", "1")]


@pytest.mark.slow
def test_bdt_fails_to_stop_villain():
    """Largest noise keeping ACC within 5 points of clean leaves the backdoor intact."""
    from benchmark import run

    _, art = run(seed=0)
    clean_acc = float(np.mean(top_logits(art.session, art.clean_emb).argmax(1) == art.data.test.labels))
    kept = None
    for noise in (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0):
        d = BdtDefense(noise, 0)
        acc = float(np.mean(top_logits(art.session, art.clean_emb, d).argmax(1) == art.data.test.labels))
        if clean_acc - acc <= 0.05:
            kept = (noise, float(np.mean(top_logits(art.session, art.trig_emb, d).argmax(1) == 0)))
    assert kept is not None
    print(f"BDT noise {kept[0]}: ASR {kept[1]:.4f}")
    assert kept[1] >= 0.80


@pytest.mark.slow
def test_well_separated_synthetic_clean_accuracy():
    """Separation 2.0, raw features, no attack: the VFL model clears 85% test accuracy."""
    cfg = load_config(overrides=["data.separation=2.0", "data.normalize=false", "attack.kind=none",
                                 "defense.mode=none"])
    report, _ = run_pipeline(cfg, 0)
    print(f"separation 2.0 clean ACC {report.acc:.4f}")
    assert report.acc >= 0.85
