"""Experiment configuration: an INI file with five sections.

``[data]``, ``[vfl]``, ``[attack]``, ``[defense]`` and ``[eval]`` map onto the
dataclasses below. Every key is optional (defaults describe the synthetic
benchmark); unknown sections or keys are rejected. The config digest is a
SHA-256 over the canonical JSON of everything that affects results, so the
pair (digest, seed) identifies a run.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from os import PathLike
from typing import Any, Iterable

from vfl_lab.attacks import ATTACK_KINDS, AttackPlan, attacker_set
from vfl_lab.errors import ConfigurationError
from vfl_lab.vflip import PURIFY_MODES

DEFENSE_MODES = ("none", "vflip", "bdt")
OUT_ENV = "VFL_LAB_OUT"


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "csv"
    csv_path: str = ""
    label_column: str = "label"
    n_classes: int = 5
    dim: int = 40
    k_train: int = 8000
    k_test: int = 2000
    k_aux: int = 500
    separation: float = 0.45
    noise_std: float = 1.0
    normalize: bool = True
    split_fractions: tuple[float, ...] = (0.8, 0.16, 0.04)  # csv only
    data_seed: int = 0


@dataclass
class VflConfig:
    n_participants: int = 4
    embedding_dim: int = 16
    bottom_hidden: tuple[int, ...] = (32, 32, 32)
    top_hidden: tuple[int, ...] = (64, 32)
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 128


@dataclass
class AttackConfig:
    kind: str = "villain"  # villain | badvfl | none
    attackers: str = "auto"  # "auto" = middle participants, else comma-separated ids
    n_attackers: int = 1
    target_label: int = 0
    poisoning_budget: float = 0.5
    e_bkd: int = 5
    label_knowledge: bool = True
    lr_amplify: float = 2.0
    adaptive_eta: float = 0.0
    gamma: float = 3.0
    m_fraction: float = 0.75
    aug_drop_prob: float = 0.1
    aug_scale_low: float = 0.6
    aug_scale_high: float = 1.2
    trigger_refresh: bool = True
    window: int = 8
    trigger_value: float = 1.0


@dataclass
class DefenseConfig:
    mode: str = "vflip"  # vflip | bdt | none
    mae_epochs: int = 20
    lr_n1: float = 0.1
    lr_11: float = 0.1
    dropout_prob: float = 0.1
    mae_batch_size: int = 128
    mae_hidden: tuple[int, ...] = (128, 64)
    mae_latent: int = 64
    rho: float = 2.0
    purify_mode: str = "reconstruct_all"
    bdt_noise_std: float = 0.1


@dataclass
class EvalConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = ""  # empty: $VFL_LAB_OUT, then ./vfl_lab_out
    workers: int = 1


SECTIONS = {
    "data": DataConfig,
    "vfl": VflConfig,
    "attack": AttackConfig,
    "defense": DefenseConfig,
    "eval": EvalConfig,
}

# eval keys that select or place runs but never change a run's metrics
_NOT_DIGESTED = {"eval": {"seeds", "out_dir", "workers"}}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vfl: VflConfig = field(default_factory=VflConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def replace(self, section: str, **changes: Any) -> "ExperimentConfig":
        """Copy with some keys of one section changed (values are re-validated)."""
        cfg = dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})
        validate(cfg)
        return cfg

    def attack_plan(self) -> AttackPlan | None:
        a = self.attack
        if a.kind == "none":
            return None
        return AttackPlan(
            kind=a.kind,
            attacker_indices=attacker_set(a.attackers, self.vfl.n_participants, a.n_attackers),
            target_label=a.target_label,
            poisoning_budget=a.poisoning_budget,
            e_bkd=a.e_bkd,
            label_knowledge=a.label_knowledge,
            lr_amplify=a.lr_amplify,
            adaptive_eta=a.adaptive_eta,
            gamma=a.gamma,
            m_fraction=a.m_fraction,
            aug_drop_prob=a.aug_drop_prob,
            aug_scale_range=(a.aug_scale_low, a.aug_scale_high),
            trigger_refresh=a.trigger_refresh,
            window=a.window,
            trigger_value=a.trigger_value,
        )

    def out_dir(self) -> str:
        return self.eval.out_dir or os.environ.get(OUT_ENV) or "vfl_lab_out"


def _convert(kind: Any, raw: str, where: str) -> Any:
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == tuple[int, ...]:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == tuple[float, ...]:
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {raw!r}") from None


def _field_types(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def set_value(cfg: ExperimentConfig, dotted: str, raw: str) -> None:
    """Apply ``section.key=raw`` in place (no validation)."""
    section, _, key = dotted.partition(".")
    if section not in SECTIONS:
        raise ConfigurationError(f"unknown config section {section!r}")
    types = _field_types(SECTIONS[section])
    if key not in types:
        raise ConfigurationError(f"unknown config key {section}.{key}")
    setattr(getattr(cfg, section), key, _convert(types[key], raw, f"{section}.{key}"))


def load_config(path: str | PathLike | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read an INI file (or start from defaults) and apply ``section.key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                set_value(cfg, f"{section}.{key}", value)
    for item in overrides:
        dotted, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override {item!r} is not section.key=value")
        set_value(cfg, dotted.strip(), value)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    d, v, a, f, e = cfg.data, cfg.vfl, cfg.attack, cfg.defense, cfg.eval
    if d.source not in ("synthetic", "csv"):
        raise ConfigurationError(f"data.source must be synthetic or csv, got {d.source!r}")
    if d.source == "csv" and not d.csv_path:
        raise ConfigurationError("data.csv_path is required when data.source = csv")
    if v.n_participants < 2 or v.embedding_dim < 1 or v.epochs < 1 or v.batch_size < 1 or v.lr <= 0:
        raise ConfigurationError("vfl: need n_participants >= 2, embedding_dim/epochs/batch_size >= 1, lr > 0")
    if a.kind not in (*ATTACK_KINDS, "none"):
        raise ConfigurationError(f"attack.kind must be one of {(*ATTACK_KINDS, 'none')}, got {a.kind!r}")
    if f.mode not in DEFENSE_MODES:
        raise ConfigurationError(f"defense.mode must be one of {DEFENSE_MODES}, got {f.mode!r}")
    if f.purify_mode not in PURIFY_MODES:
        raise ConfigurationError(f"defense.purify_mode must be one of {PURIFY_MODES}")
    if f.rho < 0 or f.bdt_noise_std < 0 or f.mae_epochs < 1 or f.lr_n1 <= 0 or f.lr_11 <= 0:
        raise ConfigurationError("defense: need rho, bdt_noise_std >= 0, mae_epochs >= 1, positive MAE lrs")
    if not 0.0 <= f.dropout_prob < 1.0:
        raise ConfigurationError("defense.dropout_prob must be in [0, 1)")
    if not e.seeds:
        raise ConfigurationError("eval.seeds must list at least one seed")
    if e.workers < 1:
        raise ConfigurationError("eval.workers must be >= 1")
    plan = cfg.attack_plan()
    if plan is not None:
        plan.validate(v.n_participants, v.epochs, d.n_classes)


def canonical(cfg: ExperimentConfig) -> dict[str, dict[str, Any]]:
    out = {}
    for name in SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        for key in _NOT_DIGESTED.get(name, ()):
            section.pop(key)
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
    return out


def config_digest(cfg: ExperimentConfig) -> str:
    text = json.dumps(canonical(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dumps_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(repr(x) for x in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
