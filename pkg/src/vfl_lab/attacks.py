"""Malicious-participant strategies.

* swap-based label inference from returned gradient magnitudes,
* BadVFL: swap target-label local rows for non-target rows, then stamp a
  static feature trigger,
* VILLAIN: additive +-sigma embedding trigger on the highest-variance
  dimensions with random deletion/scaling augmentation,
* the adaptive variant that also triggers non-target rows in the last epoch.

All of them run as a :class:`~vfl_lab.protocol.ParticipantHook`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np

from vfl_lab.data import Split
from vfl_lab.errors import ConfigurationError, DataError
from vfl_lab.nn_core import mlp_predict
from vfl_lab.protocol import ParticipantHook, StepContext, VflSession, read_key_values, train_vfl

logger = logging.getLogger(__name__)

VILLAIN = "villain"
BADVFL = "badvfl"
ATTACK_KINDS = (VILLAIN, BADVFL)

UNKNOWN, NON_TARGET, TARGET = -1, 0, 1


@dataclass
class AttackPlan:
    kind: str
    attacker_indices: tuple[int, ...]
    target_label: int = 0
    poisoning_budget: float = 0.5
    e_bkd: int = 5
    label_knowledge: bool = True
    lr_amplify: float = 2.0
    adaptive_eta: float = 0.0
    # VILLAIN
    gamma: float = 3.0
    m_fraction: float = 0.75
    aug_drop_prob: float = 0.1
    aug_scale_range: tuple[float, float] = (0.6, 1.2)
    trigger_refresh: bool = True  # re-fit sigma to current clean embeddings each injection epoch
    # BadVFL
    window: int = 8
    trigger_value: float = 1.0

    def __post_init__(self):
        self.attacker_indices = tuple(sorted(int(i) for i in self.attacker_indices))
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if not self.attacker_indices or len(set(self.attacker_indices)) != len(self.attacker_indices):
            raise ConfigurationError("attacker_indices must be a non-empty set")
        if not 0.0 < self.poisoning_budget <= 1.0:
            raise ConfigurationError("poisoning_budget must be in (0, 1]")
        if not 0.0 <= self.adaptive_eta <= 1.0:
            raise ConfigurationError("adaptive_eta must be in [0, 1]")
        if self.lr_amplify <= 0 or self.gamma < 0 or self.e_bkd < 0:
            raise ConfigurationError("lr_amplify must be > 0, gamma and e_bkd >= 0")
        if not 0.0 <= self.aug_drop_prob <= 1.0:
            raise ConfigurationError("aug_drop_prob must be in [0, 1]")
        lo, hi = self.aug_scale_range
        if lo > hi:
            raise ConfigurationError("aug_scale_range must be [low, high] with low <= high")

    def validate(self, n_participants: int, total_epochs: int, n_classes: int) -> None:
        if 2 * len(self.attacker_indices) >= n_participants:
            raise ConfigurationError(
                f"{len(self.attacker_indices)} attackers among {n_participants} participants; must be under half"
            )
        if min(self.attacker_indices) < 0 or max(self.attacker_indices) >= n_participants:
            raise ConfigurationError("attacker index out of range")
        if self.e_bkd >= total_epochs:
            raise ConfigurationError(f"e_bkd={self.e_bkd} leaves no injection epochs out of {total_epochs}")
        if not 0 <= self.target_label < n_classes:
            raise ConfigurationError("target_label out of range")


def middle_attackers(n_participants: int, n_attackers: int) -> tuple[int, ...]:
    """Consecutive participants centred in the feature order."""
    start = (n_participants - n_attackers) // 2
    return tuple(range(start, start + n_attackers))


# -- label inference ----------------------------------------------------------

def swap_decision(g_prev: float, batch_mean: float, g_swap: float) -> bool:
    """True when the row looks like a target-label sample."""
    return g_prev < batch_mean and g_swap < 10.0 * g_prev


class SwapLabelInference:
    """Gradient-magnitude label inference via embedding swaps.

    When a candidate row first appears its gradient norm ``g_prev`` is compared
    with the batch mean; rows at or above the mean are settled as non-target.
    The next time the row is requested the attacker uploads the embedding of a
    known target-label auxiliary sample instead and settles the row from the
    ratio of the new gradient norm to ``g_prev``.
    """

    def __init__(self, n_samples: int, budget: float, batch_size: int, rng: np.random.Generator):
        self.flags = np.full(n_samples, UNKNOWN, dtype=np.int8)
        self.g_prev = np.full(n_samples, np.nan)
        self.n_candidates = int(round(3 * budget * batch_size))
        self.rng = rng
        self._swapped = np.zeros(0, dtype=np.int64)  # batch positions swapped in this step
        self._fresh = np.zeros(0, dtype=np.int64)  # batch positions newly selected in this step

    def upload(self, h: np.ndarray, idx: np.ndarray, aux_target: np.ndarray) -> np.ndarray:
        pending = ~np.isnan(self.g_prev[idx]) & (self.flags[idx] == UNKNOWN)
        self._swapped = np.flatnonzero(pending)
        open_pos = np.flatnonzero(~pending & (self.flags[idx] == UNKNOWN))
        take = min(self.n_candidates, open_pos.size)
        self._fresh = self.rng.choice(open_pos, size=take, replace=False) if take else open_pos[:0]
        if self._swapped.size:
            h = h.copy()
            picks = self.rng.integers(0, aux_target.shape[0], size=self._swapped.size)
            h[self._swapped] = aux_target[picks]
        return h

    def observe(self, grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Record gradient norms; returns ``grad`` with swapped rows zeroed."""
        norms = np.linalg.norm(grad, axis=1)
        genuine = np.ones(idx.size, dtype=bool)
        genuine[self._swapped] = False
        batch_mean = float(norms[genuine].mean()) if genuine.any() else float(norms.mean())
        for pos in self._swapped:
            row = idx[pos]
            self.flags[row] = TARGET if swap_decision(self.g_prev[row], np.inf, norms[pos]) else NON_TARGET
        for pos in self._fresh:
            row = idx[pos]
            if norms[pos] < batch_mean:
                self.g_prev[row] = norms[pos]
            else:
                self.flags[row] = NON_TARGET
        if self._swapped.size:
            grad = grad.copy()
            grad[self._swapped] = 0.0
        return grad


@dataclass
class InferredLabels:
    flags: np.ndarray  # int8 per training row: TARGET / NON_TARGET / UNKNOWN

    def target_rows(self) -> np.ndarray:
        return np.flatnonzero(self.flags == TARGET)

    def non_target_rows(self) -> np.ndarray:
        return np.flatnonzero(self.flags == NON_TARGET)

    def accuracy(self, labels: np.ndarray, target_label: int) -> float:
        decided = self.flags != UNKNOWN
        if not decided.any():
            return float("nan")
        truth = (labels == target_label).astype(np.int8)
        return float(np.mean(self.flags[decided] == truth[decided]))

    @classmethod
    def from_labels(cls, labels: np.ndarray, target_label: int) -> "InferredLabels":
        return cls(np.where(labels == target_label, TARGET, NON_TARGET).astype(np.int8))


# -- triggers -------------------------------------------------------------------

@dataclass
class TriggerSpec:
    dims: np.ndarray
    pattern: np.ndarray
    gamma: float
    sigma_bar: float
    aug_drop_prob: float = 0.1
    aug_scale_range: tuple[float, float] = (0.6, 1.2)


@dataclass
class FeatureTriggerSpec:
    start: int
    stop: int
    value: float = 1.0


def sign_pattern(m: int) -> np.ndarray:
    """[+1, +1, -1, -1, +1, +1, ...] truncated to length m."""
    return np.where((np.arange(m) // 2) % 2 == 0, 1.0, -1.0)


def villain_build_trigger(
    clean_embeddings: np.ndarray,
    m_fraction: float = 0.75,
    gamma: float = 3.0,
    aug_drop_prob: float = 0.1,
    aug_scale_range: tuple[float, float] = (0.6, 1.2),
) -> TriggerSpec:
    h = np.asarray(clean_embeddings, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 2:
        raise DataError("need at least 2 embedding rows to estimate per-dimension spread")
    d = h.shape[1]
    if d < 2:
        raise ConfigurationError("embedding dim must be >= 2")
    m = min(d, max(1, int(round(m_fraction * d))))
    std = h.std(axis=0)
    dims = np.sort(np.argsort(-std, kind="stable")[:m])
    sigma_bar = float(std[dims].mean())
    return TriggerSpec(dims, gamma * sigma_bar * sign_pattern(m), gamma, sigma_bar, aug_drop_prob, aug_scale_range)


def villain_inject(
    block: np.ndarray,
    rows: np.ndarray,
    trig: TriggerSpec,
    rng: np.random.Generator | None = None,
    augment: bool = True,
) -> np.ndarray:
    """Add the trigger to ``rows`` of an embedding block (returns a copy)."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.array(block, dtype=np.float64, copy=True)
    if rows.size == 0:
        return out
    if rows.min() < 0 or rows.max() >= out.shape[0]:
        raise IndexError(f"rows out of range for block with {out.shape[0]} rows")
    delta = np.broadcast_to(trig.pattern, (rows.size, trig.pattern.size)).copy()
    if augment:
        if rng is None:
            raise ConfigurationError("augmentation needs an rng")
        lo, hi = trig.aug_scale_range
        delta *= rng.uniform(lo, hi, size=(rows.size, 1))
        delta *= rng.random(delta.shape) >= trig.aug_drop_prob
    out[np.ix_(rows, trig.dims)] += delta
    return out


def badvfl_poison(
    local_batch: np.ndarray,
    rows: np.ndarray,
    donors: np.ndarray,
    trig: FeatureTriggerSpec,
) -> np.ndarray:
    """Replace ``rows`` with ``donors`` (non-target feature rows) and stamp the trigger.

    ``donors`` has one row per entry of ``rows``; pass ``None`` to stamp the
    trigger without replacement.
    """
    out = np.array(local_batch, dtype=np.float64, copy=True)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return out
    if donors is not None:
        out[rows] = donors
    out[rows, trig.start : trig.stop] = trig.value
    return out


def adaptive_schedule(
    epoch: int, total_epochs: int, eta: float, label_flags: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Believed non-target rows triggered in the final epoch, each with probability eta."""
    if epoch != total_epochs or eta <= 0.0:
        return np.zeros(0, dtype=np.int64)
    rows = np.flatnonzero(np.asarray(label_flags) == NON_TARGET)
    return rows[rng.random(rows.size) < eta]


# -- the hook -----------------------------------------------------------------------

@dataclass
class AttackLog:
    poisoned_rows: set = field(default_factory=set)
    adaptive_rows: set = field(default_factory=set)
    believed_targets: set = field(default_factory=set)
    swap_rows: set = field(default_factory=set)


class BackdoorAttack(ParticipantHook):
    """Coordinated attackers executing one :class:`AttackPlan`.

    During training the attackers amplify their learning rate up to ``e_bkd``
    (running swap label inference meanwhile when they lack label knowledge),
    then trigger a fixed budgeted subset of believed target-label rows. At
    inference every row is triggered with the full, unaugmented trigger.
    """

    def __init__(
        self,
        plan: AttackPlan,
        aux: Split | None = None,
        true_train_labels: np.ndarray | None = None,
        seed: int = 0,
    ):
        self.plan = plan
        self.aux = aux
        self.true_train_labels = true_train_labels
        self.rng = np.random.default_rng([seed, 0xA77])
        self.inference: SwapLabelInference | None = None
        self.inferred: InferredLabels | None = None
        self.poison_set = np.zeros(0, dtype=np.int64)
        self._poison_mask = np.zeros(0, dtype=bool)
        self._adaptive_mask = np.zeros(0, dtype=bool)
        self.triggers: dict[int, TriggerSpec] = {}
        self.feature_triggers: dict[int, FeatureTriggerSpec] = {}
        self._donor_blocks: dict[int, np.ndarray] = {}
        self._donor_rows = np.zeros(0, dtype=np.int64)
        self._aux_target_h: dict[int, np.ndarray] = {}
        self.log = AttackLog()
        if not plan.label_knowledge:
            if aux is None or not np.any(aux.labels == plan.target_label):
                raise ConfigurationError("label inference needs auxiliary samples of the target label")
        elif true_train_labels is None:
            raise ConfigurationError("label-knowledge attack needs the attacker-side training labels")

    # training ------------------------------------------------------------------

    def begin_epoch(self, session: VflSession, split: Split, epoch: int, total_epochs: int) -> None:
        p = self.plan
        injecting = epoch > p.e_bkd
        for a in p.attacker_indices:
            session.lr_scale[a] = 1.0 if injecting else p.lr_amplify
        k = split.n_samples
        if not injecting and not p.label_knowledge:
            if self.inference is None:
                self.inference = SwapLabelInference(k, p.poisoning_budget, session.sgd.batch_size, self.rng)
            lead = p.attacker_indices[0]
            aux_x = self.aux.blocks[lead][self.aux.labels == p.target_label]
            self._aux_target_h[lead] = mlp_predict(session.bottom_models[lead], aux_x)
        if injecting and self.inferred is None:
            self._start_injection(session, split)
        if injecting and p.kind == VILLAIN and p.trigger_refresh:
            for a in p.attacker_indices:
                clean = mlp_predict(session.bottom_models[a], split.blocks[a])
                self.triggers[a] = villain_build_trigger(
                    clean, p.m_fraction, p.gamma, p.aug_drop_prob, p.aug_scale_range
                )
        if injecting:
            rows = adaptive_schedule(epoch, total_epochs, p.adaptive_eta, self.inferred.flags, self.rng)
            self._adaptive_mask = np.zeros(k, dtype=bool)
            self._adaptive_mask[rows] = True
            self.log.adaptive_rows.update(rows.tolist())

    def _start_injection(self, session: VflSession, split: Split) -> None:
        p = self.plan
        if p.label_knowledge:
            self.inferred = InferredLabels.from_labels(self.true_train_labels, p.target_label)
        else:
            self.inferred = InferredLabels(self.inference.flags.copy())
        targets = self.inferred.target_rows()
        n_poison = int(round(p.poisoning_budget * targets.size))
        self.poison_set = np.sort(self.rng.choice(targets, size=n_poison, replace=False)) if n_poison else targets[:0]
        self._poison_mask = np.zeros(split.n_samples, dtype=bool)
        self._poison_mask[self.poison_set] = True
        self.log.believed_targets = set(targets.tolist())
        self._donor_rows = self.inferred.non_target_rows()
        if p.kind == BADVFL and self._donor_rows.size == 0:
            logger.warning("no inferred non-target rows; BadVFL will stamp without replacement")
        for a in p.attacker_indices:
            if p.kind == VILLAIN:
                clean = mlp_predict(session.bottom_models[a], split.blocks[a])
                self.triggers[a] = villain_build_trigger(
                    clean, p.m_fraction, p.gamma, p.aug_drop_prob, p.aug_scale_range
                )
            else:
                width = split.blocks[a].shape[1]
                self.feature_triggers[a] = FeatureTriggerSpec(0, min(p.window, width), p.trigger_value)
                self._donor_blocks[a] = split.blocks[a]
        logger.info("injection starts: %d believed targets, %d poisoned", targets.size, n_poison)

    def _rows_to_trigger(self, ctx: StepContext) -> tuple[np.ndarray, np.ndarray]:
        """Batch positions of (budgeted target rows, adaptive rows)."""
        if not ctx.training:
            return np.arange(ctx.idx.size), np.zeros(0, dtype=np.int64)
        if ctx.epoch <= self.plan.e_bkd:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        poison = np.flatnonzero(self._poison_mask[ctx.idx])
        adaptive = np.flatnonzero(self._adaptive_mask[ctx.idx] & ~self._poison_mask[ctx.idx])
        self.log.poisoned_rows.update(ctx.idx[poison].tolist())
        return poison, adaptive

    def local_features(self, participant: int, x: np.ndarray, ctx: StepContext) -> np.ndarray:
        if self.plan.kind != BADVFL or participant not in self.plan.attacker_indices:
            return x
        if ctx.training and ctx.epoch <= self.plan.e_bkd:
            return x
        poison, adaptive = self._rows_to_trigger(ctx)
        trig = self.feature_triggers[participant]
        if not ctx.training:
            return badvfl_poison(x, poison, None, trig)
        donors = None
        if poison.size and self._donor_rows.size:
            picks = self._donor_rows[self.rng.integers(0, self._donor_rows.size, size=poison.size)]
            donors = self._donor_blocks[participant][picks]
        x = badvfl_poison(x, poison, donors, trig)
        return badvfl_poison(x, adaptive, None, trig)

    def embedding(self, participant: int, h: np.ndarray, ctx: StepContext) -> np.ndarray:
        p = self.plan
        if participant not in p.attacker_indices:
            return h
        if ctx.training and self.inference is not None and ctx.epoch <= p.e_bkd:
            if participant == p.attacker_indices[0]:
                h = self.inference.upload(h, ctx.idx, self._aux_target_h[participant])
                self.log.swap_rows.update(ctx.idx[self.inference._swapped].tolist())
            return h
        if p.kind != VILLAIN or (ctx.training and ctx.epoch <= p.e_bkd):
            return h
        poison, adaptive = self._rows_to_trigger(ctx)
        rows = np.concatenate([poison, adaptive])
        return villain_inject(h, rows, self.triggers[participant], self.rng, augment=ctx.training)

    def gradient(self, participant: int, grad: np.ndarray, ctx: StepContext) -> np.ndarray:
        p = self.plan
        if (
            ctx.training
            and self.inference is not None
            and ctx.epoch <= p.e_bkd
            and participant == p.attacker_indices[0]
        ):
            return self.inference.observe(grad, ctx.idx)
        return grad

    def triggered_rows(self) -> set:
        return self.log.poisoned_rows | self.log.adaptive_rows


def infer_labels_swap(
    session: VflSession,
    train: Split,
    aux: Split,
    attacker: int,
    target_label: int,
    budget: float,
    epochs: int,
    lr_amplify: float = 2.0,
    seed: int = 0,
) -> InferredLabels:
    """Train ``session`` for ``epochs`` while ``attacker`` runs swap label inference."""
    plan = AttackPlan(
        VILLAIN, (attacker,), target_label, budget, e_bkd=epochs, label_knowledge=False, lr_amplify=lr_amplify
    )
    hook = BackdoorAttack(plan, aux=aux, seed=seed)
    train_vfl(session, train, epochs, hook)
    return InferredLabels(hook.inference.flags.copy())


# -- trigger serialization ------------------------------------------------------------

def save_triggers(attack: BackdoorAttack, path: str | PathLike, digest: str | None = None) -> None:
    lines = []
    if digest is not None:
        lines.append(f"config_digest={digest}")
    lines.append(f"kind={attack.plan.kind}")
    for a, t in sorted(attack.triggers.items()):
        lines.append(f"villain.{a}.dims=" + ",".join(str(int(v)) for v in t.dims))
        lines.append(f"villain.{a}.pattern=" + ",".join(format(v, ".17g") for v in t.pattern))
        lines.append(f"villain.{a}.gamma={t.gamma!r}")
        lines.append(f"villain.{a}.sigma_bar={t.sigma_bar!r}")
    for a, t in sorted(attack.feature_triggers.items()):
        lines.append(f"badvfl.{a}.window={t.start},{t.stop}")
        lines.append(f"badvfl.{a}.value={t.value!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_triggers(path: str | PathLike) -> tuple[dict[int, TriggerSpec], dict[int, FeatureTriggerSpec]]:
    kv = read_key_values(path)
    villain: dict[int, TriggerSpec] = {}
    badvfl: dict[int, FeatureTriggerSpec] = {}
    for key in kv:
        parts = key.split(".")
        if len(parts) != 3:
            continue
        a = int(parts[1])
        if parts[0] == "villain" and parts[2] == "dims":
            pre = f"villain.{a}."
            villain[a] = TriggerSpec(
                np.array([int(v) for v in kv[pre + "dims"].split(",")]),
                np.array([float(v) for v in kv[pre + "pattern"].split(",")]),
                float(kv[pre + "gamma"]),
                float(kv[pre + "sigma_bar"]),
            )
        elif parts[0] == "badvfl" and parts[2] == "window":
            start, stop = (int(v) for v in kv[key].split(","))
            badvfl[a] = FeatureTriggerSpec(start, stop, float(kv[f"badvfl.{a}.value"]))
    return villain, badvfl


def trigger_all(block: np.ndarray, trig: TriggerSpec | FeatureTriggerSpec) -> np.ndarray:
    rows = np.arange(block.shape[0])
    if isinstance(trig, TriggerSpec):
        return villain_inject(block, rows, trig, augment=False)
    return badvfl_poison(block, rows, None, trig)


def attacker_set(spec: str | Sequence[int], n_participants: int, n_attackers: int) -> tuple[int, ...]:
    if spec in ("", "auto", None):
        return middle_attackers(n_participants, n_attackers)
    if isinstance(spec, str):
        return tuple(int(v) for v in spec.split(","))
    return tuple(int(v) for v in spec)
