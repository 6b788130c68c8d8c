"""Inference-time backdoor defense with a masked autoencoder.

The server trains an autoencoder on the concatenated embeddings it received
in the last training epoch. It learns to rebuild one participant's block
from the others ("N-1 to 1") and from a single other block ("1 to 1"). At
inference each block ``i`` is reconstructed from every other block ``j``;
the reconstruction error ``s[j, i]`` votes against ``i`` when it exceeds the
per-participant threshold ``mu_i + rho * sigma_i`` fitted on the training
embeddings. Blocks with a strict majority of votes are zeroed and the whole
row is replaced by the autoencoder's reconstruction before the top model
sees it.

Everything below works in standardized space; a masked block is set to 0
there, which is the training mean in raw space.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np

from vfl_lab.errors import ConfigurationError, DataError, ShapeError
from vfl_lab.nn_core import (
    Mlp,
    SgdConfig,
    apply_sgd,
    masked_mse,
    mlp_backward,
    mlp_forward,
    mlp_init,
    read_mlp,
    dumps_mlp,
)

logger = logging.getLogger(__name__)

RECONSTRUCT_ALL = "reconstruct_all"
REPLACE_FLAGGED_ONLY = "replace_flagged_only"
PURIFY_MODES = (RECONSTRUCT_ALL, REPLACE_FLAGGED_ONLY)

STD_FLOOR = 1e-8


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, h: np.ndarray) -> np.ndarray:
        return (h - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


def fit_standardizer(h_train: np.ndarray) -> Standardizer:
    h = np.asarray(h_train, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 2:
        raise DataError("standardizer needs at least 2 rows")
    return Standardizer(h.mean(axis=0), np.maximum(h.std(axis=0), STD_FLOOR))


# -- masks ----------------------------------------------------------------------

def block_mask(participants: int | Sequence[int], n_participants: int, block_dim: int) -> np.ndarray:
    """0/1 vector over the concatenated embedding with ones on the given blocks."""
    if isinstance(participants, (int, np.integer)):
        participants = [int(participants)]
    m = np.zeros((n_participants, block_dim))
    m[list(participants)] = 1.0
    return m.reshape(-1)


def complement_mask(i: int, n_participants: int, block_dim: int) -> np.ndarray:
    return 1.0 - block_mask(i, n_participants, block_dim)


# -- model ------------------------------------------------------------------------

@dataclass
class Mae:
    encoder: Mlp
    decoder: Mlp
    standardizer: Standardizer
    n_participants: int
    dropout_prob: float = 0.1

    def __post_init__(self):
        if self.encoder.input_dim != self.decoder.output_dim:
            raise ConfigurationError("encoder input and decoder output dims differ")
        if self.encoder.output_dim != self.decoder.input_dim:
            raise ConfigurationError("encoder output and decoder input dims differ")
        if self.width % self.n_participants:
            raise ConfigurationError(f"width {self.width} not divisible by {self.n_participants} participants")

    @property
    def width(self) -> int:
        return self.encoder.input_dim

    @property
    def block_dim(self) -> int:
        return self.width // self.n_participants

    def block(self, i: int) -> slice:
        return slice(i * self.block_dim, (i + 1) * self.block_dim)

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        """Forward pass in standardized space; no drop-out."""
        return mlp_forward(self.decoder, mlp_forward(self.encoder, z)[1])[1]


def mae_init(width: int, n_participants: int, standardizer: Standardizer,
             hidden: Sequence[int] = (128, 64), latent: int = 32,
             dropout_prob: float = 0.1, seed: int = 0) -> Mae:
    enc_dims = [width, *hidden, latent]
    dec_dims = enc_dims[::-1]
    ss = np.random.SeedSequence([seed, 0x3AE])
    s_enc, s_dec = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    return Mae(mlp_init(enc_dims, "relu", s_enc), mlp_init(dec_dims, "relu", s_dec),
               standardizer, n_participants, dropout_prob)


def _mae_sgd_step(mae: Mae, inputs: np.ndarray, target: np.ndarray, mask: np.ndarray, lr: float) -> float:
    enc_cache, latent = mlp_forward(mae.encoder, inputs)
    dec_cache, out = mlp_forward(mae.decoder, latent)
    loss, grad = masked_mse(out, target, mask)
    dec_grads, dlatent = mlp_backward(mae.decoder, dec_cache, grad)
    enc_grads, _ = mlp_backward(mae.encoder, enc_cache, dlatent)
    apply_sgd(mae.decoder, dec_grads, lr)
    apply_sgd(mae.encoder, enc_grads, lr)
    return loss


@dataclass
class MaeTrainingLog:
    epoch_loss: list[float] = field(default_factory=list)  # mean of both strategies per epoch
    n1_loss: list[float] = field(default_factory=list)
    one_loss: list[float] = field(default_factory=list)


def train_mae(
    h_train: np.ndarray,
    n_participants: int,
    epochs: int = 20,
    lr_n1: float = 0.01,
    lr_11: float = 0.1,
    dropout_prob: float = 0.1,
    batch_size: int = 128,
    seed: int = 0,
    hidden: Sequence[int] = (128, 64),
    latent: int = 32,
    strategies: Sequence[str] = ("n1", "11"),
) -> tuple[Mae, MaeTrainingLog]:
    """Fit the autoencoder, alternating one "N-1 to 1" and one "1 to 1" step per minibatch.

    The restored block ``i`` (and the source block ``j`` for "1 to 1") is drawn
    uniformly per minibatch. Drop-out zeroes input elements independently.
    """
    if n_participants < 2:
        raise ConfigurationError("masking strategies need at least 2 participants")
    if epochs < 1 or batch_size < 1:
        raise ConfigurationError("epochs and batch_size must be >= 1")
    if not 0.0 <= dropout_prob < 1.0:
        raise ConfigurationError("dropout_prob must be in [0, 1)")
    unknown = set(strategies) - {"n1", "11"}
    if unknown or not strategies:
        raise ConfigurationError(f"unknown strategies {sorted(unknown)}")
    h = np.asarray(h_train, dtype=np.float64)
    std = fit_standardizer(h)
    z = std.transform(h)
    width = z.shape[1]
    mae = mae_init(width, n_participants, std, hidden, latent, dropout_prob, seed)
    d = mae.block_dim
    rng = np.random.default_rng([seed, 0x7A1])
    log = MaeTrainingLog()
    k = z.shape[0]
    for _ in range(epochs):
        order = rng.permutation(k)
        sums = {"n1": 0.0, "11": 0.0}
        counts = {"n1": 0, "11": 0}
        for start in range(0, k, batch_size):
            batch = z[order[start:start + batch_size]]
            if "n1" in strategies:
                i = int(rng.integers(n_participants))
                x = batch * complement_mask(i, n_participants, d)
                x *= rng.random(x.shape) >= dropout_prob
                sums["n1"] += _mae_sgd_step(mae, x, batch, block_mask(i, n_participants, d), lr_n1)
                counts["n1"] += 1
            if "11" in strategies:
                i, j = (int(v) for v in rng.choice(n_participants, size=2, replace=False))
                x = batch * block_mask(j, n_participants, d)
                x *= rng.random(x.shape) >= dropout_prob
                sums["11"] += _mae_sgd_step(mae, x, batch, block_mask(i, n_participants, d), lr_11)
                counts["11"] += 1
        n1 = sums["n1"] / counts["n1"] if counts["n1"] else float("nan")
        one = sums["11"] / counts["11"] if counts["11"] else float("nan")
        log.n1_loss.append(n1)
        log.one_loss.append(one)
        log.epoch_loss.append(float(np.nanmean([n1, one])))
    return mae, log


# -- identification ------------------------------------------------------------------

def _as_rows(h: np.ndarray, width: int) -> tuple[np.ndarray, bool]:
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if h.ndim != 2 or h.shape[1] != width:
        raise ShapeError(f"expected rows of width {width}, got shape {h.shape}")
    return h, single


def anomaly_scores_standardized(mae: Mae, z: np.ndarray) -> np.ndarray:
    n, d = mae.n_participants, mae.block_dim
    scores = np.full((z.shape[0], n, n), np.nan)
    for j in range(n):
        recon = mae.reconstruct(z * block_mask(j, n, d))
        err = (recon - z).reshape(z.shape[0], n, d)
        norms = np.linalg.norm(err, axis=2)
        for i in range(n):
            if i != j:
                scores[:, j, i] = norms[:, i]
    return scores


def anomaly_scores(mae: Mae, h: np.ndarray) -> np.ndarray:
    """Scores ``s[row, j, i]``: error of block ``i`` rebuilt from block ``j`` alone.

    Accepts one raw-space row (returns N x N) or a matrix of rows (returns
    rows x N x N). The diagonal is NaN.
    """
    rows, single = _as_rows(h, mae.width)
    scores = anomaly_scores_standardized(mae, mae.standardizer.transform(rows))
    return scores[0] if single else scores


@dataclass
class ThresholdTable:
    mu: np.ndarray
    sigma: np.ndarray
    rho: float

    @property
    def thresholds(self) -> np.ndarray:
        return self.mu + self.rho * self.sigma

    def with_rho(self, rho: float) -> "ThresholdTable":
        return ThresholdTable(self.mu, self.sigma, float(rho))


def thresholds_from_scores(scores: np.ndarray, rho: float) -> ThresholdTable:
    if scores.shape[0] == 0:
        raise DataError("no rows to fit thresholds on")
    n = scores.shape[1]
    mu, sigma = np.empty(n), np.empty(n)
    for i in range(n):
        pooled = np.delete(scores[:, :, i], i, axis=1).reshape(-1)
        mu[i] = pooled.mean()
        sigma[i] = pooled.std()
    return ThresholdTable(mu, sigma, float(rho))


def fit_thresholds(mae: Mae, h_train: np.ndarray, rho: float = 2.0) -> ThresholdTable:
    """Per-participant mean/std of all training scores targeting that participant."""
    h = np.asarray(h_train, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise DataError("empty embedding store")
    return thresholds_from_scores(anomaly_scores(mae, h), rho)


@dataclass
class IdentificationResult:
    votes: np.ndarray  # (rows, N)
    flagged: np.ndarray  # (rows, N) bool
    scores: np.ndarray  # (rows, N, N)


def identify(scores: np.ndarray, thresholds: ThresholdTable | np.ndarray, n_participants: int | None = None) -> IdentificationResult:
    """Vote ``s[j, i] > t_i`` for every j != i; flag ``votes > N / 2`` (both strict)."""
    s = np.asarray(scores, dtype=np.float64)
    single = s.ndim == 2
    if single:
        s = s[None]
    n = s.shape[1]
    if n_participants is not None and n_participants != n:
        raise ShapeError(f"score table is {n}x{n}, expected {n_participants}")
    t = thresholds.thresholds if isinstance(thresholds, ThresholdTable) else np.asarray(thresholds)
    if n == 2:
        warnings.warn("with 2 participants a strict majority is impossible; nothing will be flagged", stacklevel=2)
    off = ~np.eye(n, dtype=bool)
    votes = np.sum((s > t[None, None, :]) & off[None], axis=1)
    flagged = votes > n / 2
    if single:
        return IdentificationResult(votes[0], flagged[0], s[0])
    return IdentificationResult(votes, flagged, s)


# -- purification --------------------------------------------------------------------

def _resolve_all_flagged(flags: np.ndarray, votes: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    flags = flags.copy()
    full = np.flatnonzero(flags.all(axis=1))
    for r in full:
        keep = int(np.argmin(votes[r])) if votes is not None else 0
        flags[r, keep] = False
    if full.size:
        logger.warning("%d rows had every block flagged; kept the least-voted block", full.size)
    return flags, full


def purify(
    mae: Mae,
    h: np.ndarray,
    flags: np.ndarray,
    votes: np.ndarray | None = None,
    mode: str = RECONSTRUCT_ALL,
) -> tuple[np.ndarray, np.ndarray]:
    """Zero flagged blocks, reconstruct, map back to raw space.

    Returns the purified rows and the row ids that hit the all-flagged
    fallback.
    """
    if mode not in PURIFY_MODES:
        raise ConfigurationError(f"unknown purify mode {mode!r}")
    rows, single = _as_rows(h, mae.width)
    flags = np.atleast_2d(np.asarray(flags, dtype=bool))
    if votes is not None:
        votes = np.atleast_2d(votes)
    if flags.shape != (rows.shape[0], mae.n_participants):
        raise ShapeError(f"flags shape {flags.shape} does not match {rows.shape[0]} rows")
    flags, fallback = _resolve_all_flagged(flags, votes)
    z = mae.standardizer.transform(rows)
    keep = np.repeat(~flags, mae.block_dim, axis=1)
    masked = z * keep
    recon = mae.reconstruct(masked)
    out = recon if mode == RECONSTRUCT_ALL else np.where(keep, z, recon)
    out = mae.standardizer.inverse(out)
    return (out[0] if single else out), fallback


def defend(mae: Mae, thresholds: ThresholdTable, h: np.ndarray, mode: str = RECONSTRUCT_ALL) -> np.ndarray:
    """Identification followed by purification for one row or a matrix of rows."""
    result = identify(anomaly_scores(mae, h), thresholds)
    return purify(mae, h, result.flagged, result.votes, mode)[0]


class VflipDefense:
    """Callable defense for :func:`vfl_lab.protocol.infer`; keeps the last identification."""

    def __init__(self, mae: Mae, thresholds: ThresholdTable, mode: str = RECONSTRUCT_ALL):
        if mode not in PURIFY_MODES:
            raise ConfigurationError(f"unknown purify mode {mode!r}")
        self.mae = mae
        self.thresholds = thresholds
        self.mode = mode
        self.last: IdentificationResult | None = None
        self.fallback_rows = np.zeros(0, dtype=np.int64)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.last = identify(anomaly_scores(self.mae, h), self.thresholds)
        out, self.fallback_rows = purify(self.mae, h, self.last.flagged, self.last.votes, self.mode)
        return out


# -- checkpoint ----------------------------------------------------------------------------

def _vec(values: np.ndarray) -> str:
    return ",".join(format(float(v), ".17g") for v in values)


def save_mae(mae: Mae, path: str | PathLike, thresholds: ThresholdTable | None = None,
             digest: str | None = None) -> None:
    lines = ["mae v1"]
    if digest is not None:
        lines.append(f"config_digest={digest}")
    lines += [
        f"n_participants={mae.n_participants}",
        f"dropout_prob={mae.dropout_prob!r}",
        f"standardizer.mean={_vec(mae.standardizer.mean)}",
        f"standardizer.std={_vec(mae.standardizer.std)}",
    ]
    if thresholds is not None:
        lines += [
            f"thresholds.rho={thresholds.rho!r}",
            f"thresholds.mu={_vec(thresholds.mu)}",
            f"thresholds.sigma={_vec(thresholds.sigma)}",
            f"thresholds.t={_vec(thresholds.thresholds)}",
        ]
    lines.append("[encoder]")
    text = "\n".join(lines) + "\n" + dumps_mlp(mae.encoder) + "[decoder]\n" + dumps_mlp(mae.decoder)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_mae(path: str | PathLike) -> tuple[Mae, ThresholdTable | None]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "mae v1":
        raise DataError(f"{path}: not an autoencoder checkpoint")
    kv: dict[str, str] = {}
    pos = 1
    while lines[pos].strip() != "[encoder]":
        key, _, value = lines[pos].partition("=")
        kv[key.strip()] = value.strip()
        pos += 1
    it = iter(lines[pos + 1:])
    encoder = read_mlp(it)
    if next(it).strip() != "[decoder]":
        raise DataError(f"{path}: missing [decoder] section")
    decoder = read_mlp(it)

    def vec(key: str) -> np.ndarray:
        return np.array([float(v) for v in kv[key].split(",")])

    std = Standardizer(vec("standardizer.mean"), vec("standardizer.std"))
    mae = Mae(encoder, decoder, std, int(kv["n_participants"]), float(kv["dropout_prob"]))
    thresholds = None
    if "thresholds.rho" in kv:
        thresholds = ThresholdTable(vec("thresholds.mu"), vec("thresholds.sigma"), float(kv["thresholds.rho"]))
    return mae, thresholds
