"""Split-network vertical federated learning.

Each participant owns a bottom model over its feature block; the server owns
the top model and the labels. Per minibatch the server picks row indices,
participants upload embeddings, the server concatenates them, takes a
cross-entropy step on the top model and returns each participant the gradient
of the loss with respect to its embedding block, which the participant
backpropagates through its own bottom model.

Malicious behaviour is injected through a :class:`ParticipantHook`; an
inference-time defense is any callable mapping the concatenated embedding
matrix to a matrix of the same shape.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Sequence

import numpy as np

from vfl_lab.data import Split
from vfl_lab.errors import ConfigurationError, DataError, ShapeError
from vfl_lab.nn_core import (
    Mlp,
    SgdConfig,
    load_mlp,
    mlp_backward,
    mlp_backward_sgd,
    mlp_forward,
    mlp_init,
    apply_sgd,
    save_mlp,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

Defense = Callable[[np.ndarray], np.ndarray]


@dataclass
class StepContext:
    epoch: int  # 1-based during training, 0 at inference
    total_epochs: int
    training: bool
    idx: np.ndarray  # row positions within the current split


class ParticipantHook:
    """No-op hook. Subclasses override what a malicious participant controls.

    Hooks only ever see the blocks of the participant they are called for.
    """

    def begin_epoch(self, session: "VflSession", split: Split, epoch: int, total_epochs: int) -> None:
        pass

    def local_features(self, participant: int, x: np.ndarray, ctx: StepContext) -> np.ndarray:
        return x

    def embedding(self, participant: int, h: np.ndarray, ctx: StepContext) -> np.ndarray:
        return h

    def gradient(self, participant: int, grad: np.ndarray, ctx: StepContext) -> np.ndarray:
        """Observe the returned gradient; the result is what gets backpropagated locally."""
        return grad

    def end_epoch(self, session: "VflSession", epoch: int) -> None:
        pass


@dataclass
class VflSession:
    bottom_models: list[Mlp]
    top_model: Mlp
    sgd: SgdConfig
    lr_scale: np.ndarray
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng([self.seed, 0xBA7C])
        self.lr_scale = np.asarray(self.lr_scale, dtype=np.float64)
        dims = {m.output_dim for m in self.bottom_models}
        if len(dims) != 1:
            raise ConfigurationError(f"bottom models disagree on embedding dim: {sorted(dims)}")
        if self.top_model.input_dim != self.n_participants * self.embedding_dim:
            raise ConfigurationError("top model input dim must equal N * d")
        if self.lr_scale.shape != (self.n_participants,) or np.any(self.lr_scale <= 0):
            raise ConfigurationError("lr_scale needs one positive entry per participant")

    @property
    def n_participants(self) -> int:
        return len(self.bottom_models)

    @property
    def embedding_dim(self) -> int:
        return self.bottom_models[0].output_dim

    @property
    def n_classes(self) -> int:
        return self.top_model.output_dim


def new_session(
    input_widths: Sequence[int],
    embedding_dim: int,
    n_classes: int,
    bottom_hidden: Sequence[int] = (32, 32, 32),
    top_hidden: Sequence[int] = (64, 32),
    sgd: SgdConfig | None = None,
    seed: int = 0,
) -> VflSession:
    """Fresh session: per-participant bottom MLPs plus a top MLP over the concatenation."""
    n = len(input_widths)
    if n < 2:
        raise ConfigurationError("VFL needs at least 2 participants")
    ss = np.random.SeedSequence([seed, 0x1417])
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n + 1)]
    bottoms = [
        mlp_init([w, *bottom_hidden, embedding_dim], "relu", seeds[i]) for i, w in enumerate(input_widths)
    ]
    top = mlp_init([n * embedding_dim, *top_hidden, n_classes], "relu", seeds[n])
    return VflSession(bottoms, top, sgd or SgdConfig(0.1, 128), np.ones(n), seed=seed)


@dataclass
class EmbeddingBatch:
    blocks: list[np.ndarray]
    idx: np.ndarray

    @property
    def joined(self) -> np.ndarray:
        return np.concatenate(self.blocks, axis=1)

    @property
    def n_rows(self) -> int:
        return self.blocks[0].shape[0]


@dataclass
class EmbeddingStore:
    """Concatenated embeddings uploaded during the final training epoch.

    Row ``k`` belongs to training sample ``k`` (rows are placed by index, not by
    arrival order). ``labels`` are kept server-side for evaluation only.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    filled: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def split_blocks(matrix: np.ndarray, n_participants: int) -> list[np.ndarray]:
    if matrix.shape[1] % n_participants:
        raise ShapeError(f"{matrix.shape[1]} columns do not split into {n_participants} blocks")
    return np.split(matrix, n_participants, axis=1)


def server_step(
    top_model: Mlp, joined: np.ndarray, labels: np.ndarray, sgd: SgdConfig, n_participants: int
) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Server side of one training step: loss, top-model update, per-block gradients."""
    cache, logits = mlp_forward(top_model, joined)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads, dh = mlp_backward(top_model, cache, dlogits)
    apply_sgd(top_model, grads, sgd.learning_rate)
    return loss, logits, split_blocks(dh, n_participants)


def _check_block(out: np.ndarray, like: np.ndarray, what: str) -> np.ndarray:
    out = np.asarray(out, dtype=np.float64)
    if out.shape != like.shape:
        raise ShapeError(f"{what} returned shape {out.shape}, expected {like.shape}")
    return out


def _embed(
    session: VflSession,
    blocks: Sequence[np.ndarray],
    hook: ParticipantHook | None,
    ctx: StepContext,
) -> tuple[list, list[np.ndarray]]:
    caches, hs = [], []
    for i, model in enumerate(session.bottom_models):
        x = blocks[i][ctx.idx]
        if hook is not None:
            x = _check_block(hook.local_features(i, x, ctx), x, "local_features hook")
        cache, h = mlp_forward(model, x)
        if hook is not None:
            h = _check_block(hook.embedding(i, h, ctx), h, "embedding hook")
        caches.append(cache)
        hs.append(h)
    return caches, hs


def train_vfl(
    session: VflSession,
    train: Split,
    epochs: int,
    hook: ParticipantHook | None = None,
) -> tuple[list[EpochStats], EmbeddingStore]:
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if len(train.blocks) != session.n_participants:
        raise ShapeError(f"{len(train.blocks)} feature blocks for {session.n_participants} participants")
    k = train.n_samples
    n = session.n_participants
    d = session.embedding_dim
    bs = session.sgd.batch_size
    store = EmbeddingStore(np.zeros((k, n * d)), train.labels.copy(), np.zeros(k, dtype=bool))
    stats = []
    for epoch in range(1, epochs + 1):
        if hook is not None:
            hook.begin_epoch(session, train, epoch, epochs)
        order = session.rng.permutation(k)
        total_loss, correct = 0.0, 0
        for start in range(0, k, bs):
            idx = order[start : start + bs]
            ctx = StepContext(epoch, epochs, True, idx)
            caches, hs = _embed(session, train.blocks, hook, ctx)
            joined = np.concatenate(hs, axis=1)
            if epoch == epochs:
                store.embeddings[idx] = joined
                store.filled[idx] = True
            loss, logits, grads = server_step(session.top_model, joined, train.labels[idx], session.sgd, n)
            total_loss += loss * idx.size
            correct += int(np.sum(np.argmax(logits, axis=1) == train.labels[idx]))
            for i, model in enumerate(session.bottom_models):
                g = grads[i]
                if hook is not None:
                    g = _check_block(hook.gradient(i, g, ctx), g, "gradient hook")
                lr = session.sgd.learning_rate * session.lr_scale[i]
                mlp_backward_sgd(model, caches[i], g, SgdConfig(lr, bs))
        if hook is not None:
            hook.end_epoch(session, epoch)
        stats.append(EpochStats(epoch, total_loss / k, correct / k))
        logger.debug("epoch %d loss %.4f acc %.4f", epoch, total_loss / k, correct / k)
    return stats, store


def collect_embeddings(
    session: VflSession,
    blocks: Sequence[np.ndarray],
    hook: ParticipantHook | None = None,
    attacker_hooks_active: bool = True,
) -> EmbeddingBatch:
    """Forward-only embeddings of a whole split, optionally with inference-time triggering."""
    if len(blocks) != session.n_participants:
        raise ShapeError(f"{len(blocks)} feature blocks for {session.n_participants} participants")
    idx = np.arange(blocks[0].shape[0])
    ctx = StepContext(0, 0, False, idx)
    _, hs = _embed(session, blocks, hook if attacker_hooks_active else None, ctx)
    return EmbeddingBatch(hs, idx)


def top_logits(session: VflSession, joined: np.ndarray, defense: Defense | None = None) -> np.ndarray:
    if defense is not None:
        joined = _check_block(defense(joined), joined, "defense")
    return mlp_forward(session.top_model, joined)[1]


def infer(
    session: VflSession,
    blocks: Sequence[np.ndarray],
    defense: Defense | None = None,
    hook: ParticipantHook | None = None,
) -> np.ndarray:
    """Predicted class per row: embed, optionally defend, argmax of the top model."""
    emb = collect_embeddings(session, blocks, hook)
    return np.argmax(top_logits(session, emb.joined, defense), axis=1)


# -- checkpoint ---------------------------------------------------------------

def save_session(session: VflSession, directory: str | PathLike, digest: str | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    for i, model in enumerate(session.bottom_models):
        save_mlp(model, os.path.join(directory, f"bottom_{i}.mlp"))
    save_mlp(session.top_model, os.path.join(directory, "top.mlp"))
    manifest = {
        "n_participants": session.n_participants,
        "embedding_dim": session.embedding_dim,
        "learning_rate": format(session.sgd.learning_rate, ".17g"),
        "batch_size": session.sgd.batch_size,
        "lr_scales": ",".join(format(s, ".17g") for s in session.lr_scale),
        "seed": session.seed,
    }
    if digest is not None:
        manifest["config_digest"] = digest
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        for key, value in manifest.items():
            fh.write(f"{key}={value}\n")


def read_key_values(path: str | PathLike) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"{path}: expected key=value, got {line!r}")
            out[key.strip()] = value.strip()
    return out


def load_session(directory: str | PathLike) -> VflSession:
    meta = read_key_values(os.path.join(directory, "manifest.txt"))
    n = int(meta["n_participants"])
    bottoms = [load_mlp(os.path.join(directory, f"bottom_{i}.mlp")) for i in range(n)]
    top = load_mlp(os.path.join(directory, "top.mlp"))
    sgd = SgdConfig(float(meta["learning_rate"]), int(meta["batch_size"]))
    scales = np.array([float(v) for v in meta["lr_scales"].split(",")])
    session = VflSession(bottoms, top, sgd, scales, seed=int(meta["seed"]))
    if session.embedding_dim != int(meta["embedding_dim"]):
        raise DataError("manifest embedding_dim does not match stored models")
    return session
