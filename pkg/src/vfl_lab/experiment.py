"""Evaluation harness: metrics, one full train/attack/defend/eval run,
score dumps and parameter sweeps that write CSV tables."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Sequence

import numpy as np

from vfl_lab.attacks import BackdoorAttack
from vfl_lab.config import ExperimentConfig, config_digest
from vfl_lab.data import PartitionedDataset, Split, generate_synthetic, load_csv, minmax_normalize, partition_vertical
from vfl_lab.errors import ConfigurationError, DataError, VflLabError
from vfl_lab.nn_core import SgdConfig
from vfl_lab.protocol import (
    Defense,
    EmbeddingStore,
    EpochStats,
    VflSession,
    collect_embeddings,
    new_session,
    top_logits,
    train_vfl,
)
from vfl_lab.vflip import Mae, ThresholdTable, VflipDefense, anomaly_scores, fit_thresholds, identify, train_mae

logger = logging.getLogger(__name__)

SWEEP_AXES = {
    "poisoning_budget": ("attack", "poisoning_budget"),
    "gamma": ("attack", "gamma"),
    "rho": ("defense", "rho"),
    "eta": ("attack", "adaptive_eta"),
}
_AXIS_RANGES = {
    "poisoning_budget": (0.0, 1.0, False),  # (low, high, low inclusive)
    "gamma": (0.1, 4.5, True),
    "rho": (0.0, math.inf, True),
    "eta": (0.0, 1.0, True),
}


# -- metrics ------------------------------------------------------------------------

def eval_acc(session: VflSession, test: Split, defense: Defense | None = None) -> float:
    """Clean accuracy: no triggering, optional defense in front of the top model."""
    if test.n_samples == 0:
        raise DataError("cannot evaluate accuracy on an empty split")
    emb = collect_embeddings(session, test.blocks).joined
    pred = np.argmax(top_logits(session, emb, defense), axis=1)
    return float(np.mean(pred == test.labels))


def non_target_rows(test: Split, target_label: int) -> Split:
    rows = np.flatnonzero(test.labels != target_label)
    if rows.size == 0:
        raise DataError("no test rows outside the target label; ASR is undefined")
    return test.take(rows)


def eval_asr(
    session: VflSession,
    test: Split,
    attack: BackdoorAttack,
    defense: Defense | None = None,
) -> float:
    """Fraction of triggered non-target test rows predicted as the target label."""
    target = attack.plan.target_label
    rows = non_target_rows(test, target)
    emb = collect_embeddings(session, rows.blocks, attack).joined
    pred = np.argmax(top_logits(session, emb, defense), axis=1)
    return float(np.mean(pred == target))


def bdt_noise(h: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-noise baseline defense: adds i.i.d. N(0, noise_std^2) to every coordinate."""
    if noise_std < 0:
        raise ConfigurationError("noise_std must be >= 0")
    h = np.asarray(h, dtype=np.float64)
    if noise_std == 0:
        return h.copy()
    return h + rng.normal(0.0, noise_std, size=h.shape)


class BdtDefense:
    def __init__(self, noise_std: float, seed: int):
        self.noise_std = noise_std
        self.rng = np.random.default_rng([seed, 0xB07])

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return bdt_noise(h, self.noise_std, self.rng)


# -- one run ------------------------------------------------------------------------

@dataclass
class EvalReport:
    acc: float
    asr: float  # nan without an attack
    flag_rate_clean: np.ndarray  # per participant; nan unless the defense identifies
    flag_rate_trig: np.ndarray
    ident_precision: float
    ident_recall: float
    seed: int
    config_digest: str
    acc_undefended: float
    asr_undefended: float
    runtime_s: float = 0.0


@dataclass
class RunArtifacts:
    """Everything a run produced, for inspection, dumps and checkpoints."""

    data: PartitionedDataset
    session: VflSession
    attack: BackdoorAttack | None
    stats: list[EpochStats]
    store: EmbeddingStore
    mae: Mae | None = None
    thresholds: ThresholdTable | None = None
    clean_emb: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    trig_emb: np.ndarray | None = field(default=None, repr=False)
    trig_labels: np.ndarray | None = None


def build_dataset(cfg: ExperimentConfig) -> PartitionedDataset:
    d = cfg.data
    if d.source == "csv":
        ds = load_csv(d.csv_path, d.label_column, d.n_classes)
        fractions = d.split_fractions
    else:
        ds = generate_synthetic(
            d.n_classes, d.dim, d.k_train, d.k_test, d.k_aux, d.separation, d.noise_std, d.data_seed
        )
        if d.normalize:
            ds = minmax_normalize(ds)
        total = d.k_train + d.k_test + d.k_aux
        fractions = (d.k_train / total, d.k_test / total, d.k_aux / total)
    return partition_vertical(ds, cfg.vfl.n_participants, fractions, d.data_seed)


def train_stage(cfg: ExperimentConfig, seed: int, data: PartitionedDataset | None = None) -> RunArtifacts:
    """Data, VFL training under the configured attack, and the H_train store."""
    data = data if data is not None else build_dataset(cfg)
    v = cfg.vfl
    session = new_session(
        data.spec.widths(), v.embedding_dim, data.n_classes, v.bottom_hidden, v.top_hidden,
        SgdConfig(v.lr, v.batch_size), seed=seed,
    )
    plan = cfg.attack_plan()
    attack = None
    if plan is not None:
        plan.validate(data.n_participants, v.epochs, data.n_classes)
        attack = BackdoorAttack(plan, aux=data.aux, true_train_labels=data.train.labels, seed=seed)
    stats, store = train_vfl(session, data.train, v.epochs, attack)
    return RunArtifacts(data, session, attack, stats, store)


def fit_defense_stage(cfg: ExperimentConfig, art: RunArtifacts, seed: int) -> None:
    f = cfg.defense
    art.mae, _ = train_mae(
        art.store.embeddings, cfg.vfl.n_participants, f.mae_epochs, f.lr_n1, f.lr_11, f.dropout_prob,
        f.mae_batch_size, seed, f.mae_hidden, f.mae_latent,
    )
    art.thresholds = fit_thresholds(art.mae, art.store.embeddings, f.rho)


def _embed_test(art: RunArtifacts) -> None:
    test = art.data.test
    art.clean_emb = collect_embeddings(art.session, test.blocks).joined
    if art.attack is not None:
        rows = non_target_rows(test, art.attack.plan.target_label)
        art.trig_emb = collect_embeddings(art.session, rows.blocks, art.attack).joined
        art.trig_labels = rows.labels


def make_defense(cfg: ExperimentConfig, art: RunArtifacts, seed: int) -> Defense | None:
    mode = cfg.defense.mode
    if mode == "vflip":
        return VflipDefense(art.mae, art.thresholds, cfg.defense.purify_mode)
    if mode == "bdt":
        return BdtDefense(cfg.defense.bdt_noise_std, seed)
    return None


def _precision_recall(clean_flags: np.ndarray, trig_flags: np.ndarray, attackers: Sequence[int]) -> tuple[float, float]:
    """Identification quality over every (row, participant) cell of clean and triggered rows."""
    truth_trig = np.zeros_like(trig_flags, dtype=bool)
    truth_trig[:, list(attackers)] = True
    tp = int(np.sum(trig_flags & truth_trig))
    fp = int(np.sum(clean_flags)) + int(np.sum(trig_flags & ~truth_trig))
    fn = int(np.sum(~trig_flags & truth_trig))
    precision = tp / (tp + fp) if tp + fp else math.nan
    recall = tp / (tp + fn) if tp + fn else math.nan
    return precision, recall


def evaluate(cfg: ExperimentConfig, art: RunArtifacts, seed: int, digest: str) -> EvalReport:
    """Metrics on the test split with and without the configured defense."""
    if art.clean_emb is None:
        _embed_test(art)
    session, test = art.session, art.data.test
    n = cfg.vfl.n_participants
    target = art.attack.plan.target_label if art.attack is not None else None

    def acc_of(defense: Defense | None) -> float:
        return float(np.mean(np.argmax(top_logits(session, art.clean_emb, defense), axis=1) == test.labels))

    def asr_of(defense: Defense | None) -> float:
        if art.trig_emb is None:
            return math.nan
        return float(np.mean(np.argmax(top_logits(session, art.trig_emb, defense), axis=1) == target))

    acc0, asr0 = acc_of(None), asr_of(None)
    defense = make_defense(cfg, art, seed)
    nan_rates = np.full(n, math.nan)
    clean_rate, trig_rate, precision, recall = nan_rates, nan_rates.copy(), math.nan, math.nan
    if defense is None:
        acc, asr = acc0, asr0
    else:
        acc = acc_of(defense)
        asr = asr_of(defense)
        if isinstance(defense, VflipDefense):
            clean_flags = identify(anomaly_scores(art.mae, art.clean_emb), art.thresholds).flagged
            clean_rate = clean_flags.mean(axis=0)
            if art.trig_emb is not None:
                trig_flags = identify(anomaly_scores(art.mae, art.trig_emb), art.thresholds).flagged
                trig_rate = trig_flags.mean(axis=0)
                precision, recall = _precision_recall(clean_flags, trig_flags, art.attack.plan.attacker_indices)
    return EvalReport(acc, asr, clean_rate, trig_rate, precision, recall, seed, digest, acc0, asr0)


def run_pipeline(cfg: ExperimentConfig, seed: int) -> tuple[EvalReport, RunArtifacts]:
    """Full train, attack, defend and evaluate for one seed."""
    start = time.perf_counter()
    art = train_stage(cfg, seed)
    if cfg.defense.mode == "vflip":
        fit_defense_stage(cfg, art, seed)
    report = evaluate(cfg, art, seed, config_digest(cfg))
    report.runtime_s = time.perf_counter() - start
    return report, art


# -- score dump ---------------------------------------------------------------------

SCORE_COLUMNS = ("row_id", "source_j", "target_i", "score", "threshold_i", "true_label", "triggered_flag")


def score_table(
    mae: Mae,
    thresholds: ThresholdTable,
    clean_rows: np.ndarray,
    triggered_rows: np.ndarray,
    clean_labels: np.ndarray,
    triggered_labels: np.ndarray,
) -> np.ndarray:
    """One record per (row, j, i) with j != i; clean rows first, then triggered rows."""
    rows = np.concatenate([np.atleast_2d(clean_rows), np.atleast_2d(triggered_rows)]) if len(triggered_rows) else np.atleast_2d(clean_rows)
    labels = np.concatenate([clean_labels, triggered_labels]).astype(np.int64)
    triggered = np.r_[np.zeros(len(clean_labels), np.int64), np.ones(len(triggered_labels), np.int64)]
    if rows.shape[0] != labels.size:
        raise DataError("row and label counts disagree")
    n = mae.n_participants
    s = anomaly_scores(mae, rows) if rows.shape[0] else np.zeros((0, n, n))
    r, j, i = np.meshgrid(np.arange(rows.shape[0]), np.arange(n), np.arange(n), indexing="ij")
    off = j != i
    r, j, i = r[off], j[off], i[off]
    dtype = [("row_id", "i8"), ("source_j", "i8"), ("target_i", "i8"), ("score", "f8"),
             ("threshold_i", "f8"), ("true_label", "i8"), ("triggered_flag", "i8")]
    table = np.empty(r.size, dtype=dtype)
    table["row_id"], table["source_j"], table["target_i"] = r, j, i
    table["score"] = s[r, j, i]
    table["threshold_i"] = thresholds.thresholds[i]
    table["true_label"] = labels[r]
    table["triggered_flag"] = triggered[r]
    return table


def write_score_dump(table: np.ndarray, path: str | PathLike, digest: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if digest is not None:
            fh.write(f"# config_digest={digest}\n")
        writer = csv.writer(fh)
        writer.writerow(SCORE_COLUMNS)
        for rec in table:
            writer.writerow([
                int(rec["row_id"]), int(rec["source_j"]), int(rec["target_i"]),
                repr(float(rec["score"])), repr(float(rec["threshold_i"])),
                int(rec["true_label"]), int(rec["triggered_flag"]),
            ])


def dump_scores(
    mae: Mae,
    thresholds: ThresholdTable,
    clean_rows: np.ndarray,
    triggered_rows: np.ndarray,
    path: str | PathLike,
    clean_labels: np.ndarray,
    triggered_labels: np.ndarray,
    digest: str | None = None,
) -> np.ndarray:
    table = score_table(mae, thresholds, clean_rows, triggered_rows, clean_labels, triggered_labels)
    write_score_dump(table, path, digest)
    return table


def read_score_dump(path: str | PathLike) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(lines)
    header = tuple(next(reader))
    if header != SCORE_COLUMNS:
        raise DataError(f"{path}: unexpected header {header}")
    records = [tuple(int(v) if k not in (3, 4) else float(v) for k, v in enumerate(row)) for row in reader]
    dtype = [("row_id", "i8"), ("source_j", "i8"), ("target_i", "i8"), ("score", "f8"),
             ("threshold_i", "f8"), ("true_label", "i8"), ("triggered_flag", "i8")]
    return np.array(records, dtype=dtype)


# -- sweeps ------------------------------------------------------------------------------

@dataclass
class SweepGrid:
    axis: str
    values: tuple[float, ...]
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigurationError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {self.axis!r}")
        self.values = tuple(float(v) for v in self.values)
        self.seeds = tuple(int(s) for s in self.seeds)
        low, high, low_inclusive = _AXIS_RANGES[self.axis]
        for v in self.values:
            ok = (v >= low if low_inclusive else v > low) and v <= high
            if not ok:
                raise ConfigurationError(f"{self.axis}={v} outside its valid range")
        if not self.seeds:
            raise ConfigurationError("sweep needs at least one seed")


def results_header(n_participants: int) -> list[str]:
    return (
        ["axis", "value", "seed", "acc", "asr"]
        + [f"flag_rate_clean_{i}" for i in range(n_participants)]
        + [f"flag_rate_trig_{i}" for i in range(n_participants)]
        + ["ident_precision", "ident_recall", "runtime_s", "config_digest"]
        + ["acc_undefended", "asr_undefended", "error"]
    )


def report_row(axis: str, value: float, report: EvalReport) -> list:
    return (
        [axis, repr(value), report.seed, repr(report.acc), repr(report.asr)]
        + [repr(float(x)) for x in report.flag_rate_clean]
        + [repr(float(x)) for x in report.flag_rate_trig]
        + [repr(report.ident_precision), repr(report.ident_recall), f"{report.runtime_s:.3f}", report.config_digest]
        + [repr(report.acc_undefended), repr(report.asr_undefended), ""]
    )


def config_at(base: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    section, key = SWEEP_AXES[axis]
    return base.replace(section, **{key: value})


def _sweep_task(args: tuple[ExperimentConfig, str, tuple[float, ...], int]) -> list[tuple[float, EvalReport | str]]:
    """Runs for one seed over all values; rho re-uses a single trained session and MAE."""
    base, axis, values, seed = args
    out: list[tuple[float, EvalReport | str]] = []
    if axis == "rho" and base.defense.mode == "vflip":
        try:
            start = time.perf_counter()
            first = config_at(base, axis, values[0]) if values else base
            art = train_stage(first, seed)
            fit_defense_stage(first, art, seed)
            shared = time.perf_counter() - start
        except VflLabError as exc:
            return [(v, f"{type(exc).__name__}: {exc}") for v in values]
        fitted = art.thresholds
        for v in values:
            try:
                t0 = time.perf_counter()
                cfg = config_at(base, axis, v)
                art.thresholds = fitted.with_rho(v)
                report = evaluate(cfg, art, seed, config_digest(cfg))
                report.runtime_s = shared + time.perf_counter() - t0
                out.append((v, report))
            except VflLabError as exc:
                out.append((v, f"{type(exc).__name__}: {exc}"))
        return out
    for v in values:
        try:
            out.append((v, run_pipeline(config_at(base, axis, v), seed)[0]))
        except VflLabError as exc:
            out.append((v, f"{type(exc).__name__}: {exc}"))
    return out


def sweep(
    base_config: ExperimentConfig,
    grid: SweepGrid,
    out_path: str | PathLike | None = None,
    workers: int = 1,
    progress: Callable[[str], None] | None = None,
) -> list[dict]:
    """Run every (value, seed) of ``grid``; write one CSV row per run in grid order.

    A run that raises is recorded with its error message and the sweep moves on.
    Returns the rows as dicts of the same strings the CSV holds.
    """
    tasks = [(base_config, grid.axis, grid.values, s) for s in grid.seeds]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_sweep_task, tasks))
    else:
        per_seed = []
        for task in tasks:
            per_seed.append(_sweep_task(task))
            if progress is not None:
                progress(f"seed {task[3]} done")

    n = base_config.vfl.n_participants
    header = results_header(n)
    rows = []
    for k, value in enumerate(grid.values):
        for s_idx, seed in enumerate(grid.seeds):
            v, result = per_seed[s_idx][k]
            if isinstance(result, EvalReport):
                rows.append(report_row(grid.axis, v, result))
            else:
                blank = [""] * (len(header) - 4)
                rows.append([grid.axis, repr(v), seed] + blank + [result])
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config_digest={config_digest(base_config)}\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    return [dict(zip(header, (str(c) for c in row))) for row in rows]


def read_results(path: str | PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def artifact_digest(path: str | PathLike) -> str | None:
    """The ``config_digest`` recorded in an artifact's first lines, if any."""
    try:
        with open(path, encoding="utf-8") as fh:
            for _, line in zip(range(8), fh):
                key, sep, value = line.lstrip("# ").partition("=")
                if sep and key.strip() == "config_digest":
                    return value.strip()
    except (OSError, UnicodeDecodeError):
        return None
    return None
